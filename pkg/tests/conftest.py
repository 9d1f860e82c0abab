import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from seqflow.config import RunConfig
from seqflow.data import generate_samples, split_heldout
from seqflow.model import GlobalLocalFlow, ModelConfig
from seqflow.trainer import TrainState, checkpoint_bytes, load_checkpoint, train

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.ini"

# small enough that every CLI command finishes in about a second
TINY_INI = """\
[model]
n_frames = 3
grid = 2
channels = 2
deep_width = 16
deep_layers = 1
heads = 2
shallow_blocks = 1
shallow_width = 8
shallow_layers = 1
denoiser_width = 8
denoiser_layers = 2

[train]
batch_size = 4
lr = 2e-3
total_steps = 10
eval_every = 5
eval_samples = 8

[data]
n_frames = 3
grid = 2
channels = 2
count = 40

[stream]
frames = 7
window = 2
"""

# acceptance lines, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def tiny_config(**kw) -> ModelConfig:
    """2x2 frames, 2 channels, 3 frames: 24 dimensions in total."""
    base = dict(
        n_frames=3, grid=2, channels=2, n_classes=2, cond_dim=4, deep_width=8, deep_layers=1, heads=2,
        shallow_blocks=2, shallow_width=8, shallow_layers=1, denoiser_width=8, denoiser_layers=2, denoiser_heads=2,
    )
    base.update(kw)
    return ModelConfig(**base)


def randomize(module, seed: int = 0, scale: float = 0.3):
    """Perturb every parameter so zero-initialized heads become non-trivial."""
    rng = np.random.default_rng(seed)
    for _, p in module.named_parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    return module


def random_flow(seed: int = 0, scale: float = 0.3, **kw) -> GlobalLocalFlow:
    return randomize(GlobalLocalFlow(tiny_config(seed=seed, **kw)), seed + 100, scale)


@dataclass
class Trained:
    config: RunConfig
    state: TrainState
    rows: list
    evals: list
    seconds: float
    frames: np.ndarray
    labels: np.ndarray
    held_x: np.ndarray
    held_y: np.ndarray
    blob: bytes

    def fresh_state(self) -> TrainState:
        """Independent copy of the trained state."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "ck.sflw"
            path.write_bytes(self.blob)
            return load_checkpoint(path)


@pytest.fixture(scope="session")
def trained() -> Trained:
    """The desk run: 1000 samples, 500 steps at batch 16."""
    cfg = RunConfig.load(DESK_CONFIG)
    frames, labels = generate_samples(cfg.data)
    tr, ho = split_heldout(frames.shape[0], cfg.data.seed)
    state = TrainState.fresh(cfg.model, cfg.train)
    held = (frames[ho][: cfg.train.eval_samples], labels[ho][: cfg.train.eval_samples])
    t0 = time.perf_counter()
    rows, evals = train(state, frames[tr], labels[tr], heldout=held)
    seconds = time.perf_counter() - t0
    return Trained(cfg, state, rows, evals, seconds, frames, labels, frames[ho].astype(np.float64),
                   labels[ho].astype(np.int64), checkpoint_bytes(state))


@pytest.fixture
def tiny_ini(tmp_path) -> Path:
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


@pytest.fixture
def report():
    def record(criterion: int, ok: bool, detail: str) -> None:
        line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[criterion] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
