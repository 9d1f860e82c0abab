"""Joint likelihood + flow-score-matching training.

One step: add Gaussian noise to the batch, take the per-dimension NLL of the
flow and backpropagate it. The same backward pass leaves ``grad log p`` on the
noisy input, which becomes the (detached) regression target of the denoiser.
The denoiser loss is backpropagated separately, so it cannot reach the flow.
Both parameter sets are updated by one AdamW step unless the global gradient
norm exceeds the skip threshold (after a warm-up) or a loss is non-finite.

Randomness is derived from ``(seed, step)``, so a run resumed from a
checkpoint replays exactly the batches, noise and dropout of the original.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .denoiser import DenoiserNet, score_from_nll_grad
from .model import NULL_LABEL, GlobalLocalFlow, ModelConfig
from .numerics import NonFiniteError, Tensor, backward

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SFLW"
CHECKPOINT_VERSION = 1
_DTYPES = {"f4": "<f4", "f8": "<f8"}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 5e-5
    min_lr: float = 1e-6
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 1e-4
    sigma: float = 0.1
    lambda_den: float = 1.0
    grad_skip_threshold: float = 1.0
    grad_skip_warmup: int = 100
    first_frame_dropout_prob: float = 0.0
    cond_dropout_prob: float = 0.1
    total_steps: int = 500
    eval_every: int = 50
    eval_samples: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "min_lr", "eps", "sigma", "grad_skip_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("weight_decay", "lambda_den", "grad_skip_warmup", "first_frame_dropout_prob", "cond_dropout_prob"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Cosine decay from ``lr`` at step 0 to ``min_lr`` at step ``total_steps - 1``."""
    if cfg.schedule == "constant" or cfg.total_steps == 1:
        return cfg.lr
    progress = min(max(step, 0), cfg.total_steps - 1) / (cfg.total_steps - 1)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamW:
    """Adam moments with decoupled weight decay.

    ``t`` counts applied updates (bias correction); ``calls`` counts training
    steps including skipped ones and drives the schedule.
    """

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    calls: int = 0
    skipped: int = 0
    nonfinite: int = 0

    def update(self, params: dict[str, Tensor], cfg: TrainConfig, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - cfg.beta1**self.t
        c2 = 1.0 - cfg.beta2**self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            data = p.data * (1.0 - lr * cfg.weight_decay)
            p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def adam_update(params: dict[str, Tensor], opt_state: AdamW, cfg: TrainConfig, lr: float | None = None) -> None:
    """One AdamW step on ``params`` using their ``.grad``."""
    opt_state.update(params, cfg, learning_rate(cfg, opt_state.calls) if lr is None else lr)


def trainable(flow: GlobalLocalFlow, denoiser: DenoiserNet | None) -> dict[str, Tensor]:
    params = {f"flow.{k}": p for k, p in flow.named_parameters()}
    if denoiser is not None:
        params.update({f"den.{k}": p for k, p in denoiser.named_parameters()})
    return params


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


def first_frame_dropout(batch, prob: float, rng: np.random.Generator):
    """Drop frame 0 of each sample with probability ``prob``.

    ``batch`` is ``(x, labels)`` with ``x`` shaped (B, N, S, D). The result keeps
    that layout when all samples end up the same length and otherwise holds a
    list of per-sample (N_i, S, D) arrays.
    """
    x, labels = batch
    x = np.asarray(x)
    if x.shape[1] < 2:
        log.warning("first-frame dropout skipped: sequences have a single frame")
        return x, labels
    drop = rng.random(x.shape[0]) < prob
    if not drop.any():
        return x, labels
    if drop.all():
        return x[:, 1:], labels
    return [x[i, 1:] if d else x[i] for i, d in enumerate(drop)], labels


def drop_condition(labels: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Replace labels by the null label with probability ``prob`` (guidance training)."""
    labels = np.asarray(labels, dtype=np.int64).copy()
    labels[rng.random(labels.shape[0]) < prob] = NULL_LABEL
    return labels


def _groups(x, labels) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a (possibly ragged) batch into equal-length groups, longest first."""
    labels = np.asarray(labels, dtype=np.int64)
    if isinstance(x, np.ndarray):
        return [(x, labels)]
    lengths = sorted({item.shape[0] for item in x}, reverse=True)
    out = []
    for n in lengths:
        idx = [i for i, item in enumerate(x) if item.shape[0] == n]
        out.append((np.stack([x[i] for i in idx]), labels[idx]))
    return out


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------


GradHook = Callable[[dict[str, Tensor]], None]


def train_step(
    batch,
    flow: GlobalLocalFlow,
    denoiser: DenoiserNet | None,
    cfg: TrainConfig,
    opt_state: AdamW,
    rng: np.random.Generator,
    grad_hook: GradHook | None = None,
) -> tuple[dict[str, float], bool]:
    """Noise-augmented NLL + FSM step. Returns ``({nll, fsm, grad_norm, lr}, skipped)``.

    ``grad_hook`` may modify the gradients before the skip decision (used to
    inject spikes in tests).
    """
    x, labels = batch
    groups = _groups(x, labels)
    n_total = sum(g[0].shape[0] for g in groups)
    entries = sum(g[0].size for g in groups)
    params = trainable(flow, denoiser)
    for p in params.values():
        p.grad = None
    lr = learning_rate(cfg, opt_state.calls)
    step = opt_state.calls
    opt_state.calls += 1

    nll_total = fsm_total = 0.0
    try:
        for xg, lg in groups:
            x_noisy = Tensor(xg + cfg.sigma * rng.standard_normal(xg.shape), requires_grad=True)
            dims = xg[0].size
            scale = 1.0 / (n_total * dims)
            total, _ = flow.log_likelihood(x_noisy, lg)
            nll = total.sum() * -scale
            backward(nll)
            nll_total += nll.item()
            if denoiser is None:
                continue
            target = score_from_nll_grad(x_noisy.grad, cfg.sigma, scale)
            pred = denoiser(Tensor(x_noisy.data), lg)
            fsm = (pred - target).square().sum() * (1.0 / entries)
            backward(fsm * cfg.lambda_den)
            fsm_total += fsm.item()
    except NonFiniteError as err:
        log.warning("step %d: %s; update skipped", step, err)
        nll_total = float("nan")
    losses = {"nll": nll_total, "fsm": fsm_total, "lr": lr}
    if not (math.isfinite(nll_total) and math.isfinite(fsm_total)):
        opt_state.nonfinite += 1
        opt_state.skipped += 1
        losses["grad_norm"] = float("nan")
        return losses, True

    if grad_hook is not None:
        grad_hook(params)
    norm = global_grad_norm(params)
    losses["grad_norm"] = norm
    if not math.isfinite(norm):
        opt_state.nonfinite += 1
        opt_state.skipped += 1
        return losses, True
    if step >= cfg.grad_skip_warmup and norm > cfg.grad_skip_threshold:
        opt_state.skipped += 1
        return losses, True
    opt_state.update(params, cfg, lr)
    return losses, False


# ---------------------------------------------------------------------------
# training state, evaluation and loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    model_config: ModelConfig
    train_config: TrainConfig
    flow: GlobalLocalFlow
    denoiser: DenoiserNet
    opt: AdamW = field(default_factory=AdamW)

    @classmethod
    def fresh(cls, model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
        return cls(model_config, train_config, GlobalLocalFlow(model_config), DenoiserNet(model_config))

    @property
    def step(self) -> int:
        return self.opt.calls


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, step])


def batch_indices(n_samples: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Sample indices for ``step``: consecutive slices of per-epoch permutations."""
    pos = step * batch_size + np.arange(batch_size)
    epochs, offsets = np.divmod(pos, n_samples)
    out = np.empty(batch_size, dtype=np.int64)
    for e in np.unique(epochs):
        perm = np.random.default_rng([seed, 2, int(e)]).permutation(n_samples)
        sel = epochs == e
        out[sel] = perm[offsets[sel]]
    return out


def make_batch(data: np.ndarray, labels: np.ndarray, cfg: TrainConfig, step: int, rng: np.random.Generator):
    idx = batch_indices(data.shape[0], cfg.batch_size, cfg.seed, step)
    x, y = data[idx].astype(np.float64), labels[idx]
    y = drop_condition(y, cfg.cond_dropout_prob, rng)
    return first_frame_dropout((x, y), cfg.first_frame_dropout_prob, rng)


def evaluate(
    flow: GlobalLocalFlow,
    denoiser: DenoiserNet | None,
    data: np.ndarray,
    labels: np.ndarray,
    sigma: float,
    seed: int = 0,
    chunk: int = 25,
) -> dict[str, float]:
    """Held-out per-dimension NLL and FSM loss on data noised with a fixed seed."""
    rng = np.random.default_rng([seed, 3])
    data = np.asarray(data, dtype=np.float64)
    noisy = data + sigma * rng.standard_normal(data.shape)
    nll = fsm = 0.0
    for start in range(0, data.shape[0], chunk):
        xb, yb = noisy[start : start + chunk], labels[start : start + chunk]
        x = Tensor(xb, requires_grad=True)
        with flow.frozen():
            total, _ = flow.log_likelihood(x, yb)
            backward(total.sum())
        nll -= float(total.data.sum())
        if denoiser is not None:
            target = sigma * x.grad
            fsm += float(np.sum((denoiser.score(xb, yb) - target) ** 2))
    return {"nll": nll / data.size, "fsm": fsm / data.size}


LogRow = dict[str, float]


def train(
    state: TrainState,
    data: np.ndarray,
    labels: np.ndarray,
    steps: int | None = None,
    heldout: tuple[np.ndarray, np.ndarray] | None = None,
    on_step: Callable[[int, LogRow], None] | None = None,
    eval_steps: Sequence[int] | None = None,
) -> tuple[list[LogRow], list[LogRow]]:
    """Run ``steps`` training steps (default: until ``total_steps``).

    Returns the per-step log and the evaluation log. Evaluations happen after
    the steps listed in ``eval_steps`` (default: step 10, every ``eval_every``
    steps, and the last step), counted as the number of completed steps.
    """
    cfg = state.train_config
    end = cfg.total_steps if steps is None else state.step + steps
    if eval_steps is None:
        eval_steps = {10, end} | set(range(cfg.eval_every, end + 1, cfg.eval_every))
    eval_steps = set(eval_steps)
    rows: list[LogRow] = []
    evals: list[LogRow] = []
    while state.step < end:
        step = state.step
        rng = step_rng(cfg.seed, step)
        batch = make_batch(data, labels, cfg, step, rng)
        losses, skipped = train_step(batch, state.flow, state.denoiser, cfg, state.opt, rng)
        row = {"step": step, "nll": losses["nll"], "fsm": losses["fsm"], "lr": losses["lr"], "skipped": int(skipped), "grad_norm": losses["grad_norm"]}
        rows.append(row)
        if on_step is not None:
            on_step(step, row)
        if heldout is not None and state.step in eval_steps:
            ev = evaluate(state.flow, state.denoiser, heldout[0], heldout[1], cfg.sigma, cfg.seed)
            evals.append({"step": state.step, **ev})
            log.info("step %d: heldout nll %.4f fsm %.5f", state.step, ev["nll"], ev["fsm"])
    return rows, evals


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint file."""


def _arrays(state: TrainState) -> dict[str, np.ndarray]:
    out = {}
    for name, p in trainable(state.flow, state.denoiser).items():
        out[f"param/{name}"] = p.data
    for name in sorted(state.opt.m):
        out[f"adam_m/{name}"] = state.opt.m[name]
        out[f"adam_v/{name}"] = state.opt.v[name]
    return out


def save_checkpoint(state: TrainState, path: str | Path, precision: str = "f8") -> None:
    Path(path).write_bytes(checkpoint_bytes(state, precision))


def checkpoint_bytes(state: TrainState, precision: str = "f8") -> bytes:
    """Serialize ``state``: magic, u32 version, u32 header length, JSON header, raw arrays.

    ``precision="f8"`` (default) makes resumed training bit-identical;
    ``"f4"`` halves the size at the cost of rounding the weights.
    """
    if precision not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}")
    arrays = _arrays(state)
    opt = state.opt
    header = {
        "model": state.model_config.to_dict(),
        "train": state.train_config.to_dict(),
        "optimizer": {"t": opt.t, "calls": opt.calls, "skipped": opt.skipped, "nonfinite": opt.nonfinite},
        # all randomness is a function of (seed, step)
        "rng": {"seed": state.train_config.seed, "step": opt.calls},
        "dtype": precision,
        "arrays": [[name, list(a.shape)] for name, a in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    dtype = _DTYPES[precision]
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    parts.extend(np.ascontiguousarray(a, dtype=dtype).tobytes() for a in arrays.values())
    return b"".join(parts)


def _dataclass_from(cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise CheckpointError(f"unknown {cls.__name__} fields in checkpoint: {sorted(unknown)}")
    return cls(**values)


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> TrainState:
    """Read a checkpoint; ``expect`` rejects files whose geometry differs."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if 12 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen])
    except ValueError as err:
        raise CheckpointError(f"{path}: corrupt header") from err
    model_config = _dataclass_from(ModelConfig, header["model"])
    if expect is not None:
        geo = ("n_frames", "grid", "channels", "shallow_blocks", "deep_width", "deep_layers", "shallow_width",
               "shallow_layers", "denoiser_width", "denoiser_layers", "heads", "denoiser_heads", "cond_dim", "n_classes")
        diff = [k for k in geo if getattr(expect, k) != getattr(model_config, k)]
        if diff:
            raise CheckpointError(f"{path}: geometry mismatch in {diff}")
    dtype = np.dtype(_DTYPES.get(header.get("dtype"), "<f8"))
    offset = 12 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        end = offset + count * dtype.itemsize
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at array {name!r}")
        arrays[name] = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).astype(np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")

    state = TrainState.fresh(model_config, _dataclass_from(TrainConfig, header["train"]))
    params = trainable(state.flow, state.denoiser)
    stored = {k[len("param/") :] for k in arrays if k.startswith("param/")}
    if stored != set(params):
        raise CheckpointError(f"{path}: parameter names do not match the model")
    for name, p in params.items():
        value = arrays[f"param/{name}"]
        if value.shape != p.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        p.data = value.copy()
    o = header["optimizer"]
    state.opt = AdamW(
        {k[len("adam_m/") :]: a.copy() for k, a in arrays.items() if k.startswith("adam_m/")},
        {k[len("adam_v/") :]: a.copy() for k, a in arrays.items() if k.startswith("adam_v/")},
        o["t"], o["calls"], o["skipped"], o["nonfinite"],
    )
    return state
