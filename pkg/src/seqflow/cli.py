"""Command-line entry point: ``seqflow <command> [flags]``.

Every command writes its artifacts plus ``manifest.json`` (config snapshot,
seeds, content hashes of the checkpoint and of every output) into ``--out``.
Wall-clock columns (``ms`` in bench and latency logs) are excluded from the
output hashes, so the manifest is identical across reruns with the same seed.
Outputs are written to temporary names and renamed at the end, so a failing
command leaves no partial files behind.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, RunConfig
from .data import DatasetFormatError, dataset_bytes, generate_samples, read_dataset, split_heldout
from .denoiser import fsm_target, tweedie_correct
from .jacobi import bench_sweep, jacobi_decode, rows_to_csv, total_passes, sequential_passes
from .model import encode as model_encode
from .model import log_likelihood
from .sampler import GuidanceSpec, draw_latents, sample_sequential
from .streaming import stream_generate
from .trainer import CheckpointError, TrainState, checkpoint_bytes, load_checkpoint, train

log = logging.getLogger("seqflow")

LOSS_COLUMNS = ("step", "nll", "fsm", "lr", "skipped")
VALUE_RANGE = 6.0  # data live in [-3, 3]


class CLIError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


class Outputs:
    """Collects artifacts and commits them atomically with a manifest."""

    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.files: dict[str, bytes] = {}
        self.volatile: dict[str, tuple[str, ...]] = {}

    def add(self, name: str, data: bytes | str, volatile_columns: Sequence[str] = ()) -> None:
        """Stage ``name``; ``volatile_columns`` (CSV wall-clock columns) are left out of its hash."""
        self.files[name] = data.encode() if isinstance(data, str) else data
        if volatile_columns:
            self.volatile[name] = tuple(volatile_columns)

    def digest(self, name: str) -> str:
        data = self.files[name]
        if name in self.volatile:
            data = drop_columns(data.decode(), self.volatile[name]).encode()
        return sha256(data)

    def commit(self, manifest: dict) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        manifest = dict(manifest)
        manifest["outputs"] = {name: self.digest(name) for name in sorted(self.files)}
        if self.volatile:
            manifest["unhashed_columns"] = {k: list(v) for k, v in sorted(self.volatile.items())}
        self.add("manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        staged = []
        for name, data in self.files.items():
            path = self.dir / name
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".part")
            tmp.write_bytes(data)
            staged.append((tmp, path))
        for tmp, path in staged:
            os.replace(tmp, path)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path: Path) -> str:
    return sha256(Path(path).read_bytes())


def git_blob_sha1(data: bytes) -> str:
    """Object id git would assign to ``data`` as a blob."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def drop_columns(text: str, columns: Sequence[str]) -> str:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return text
    keep = [i for i, name in enumerate(rows[0]) if name not in columns]
    return csv_text([rows[0][i] for i in keep], [[r[i] for i in keep] for r in rows[1:]])


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def pgm(frame: np.ndarray, grid: int, scale: int = 8) -> bytes:
    """Channels side by side as an 8-bit greyscale image (lossy preview)."""
    s, d = frame.shape
    tiles = [frame[:, c].reshape(grid, grid) for c in range(d)]
    img = np.concatenate(tiles, axis=1)
    img = np.kron(img, np.ones((scale, scale)))
    pix = np.clip((img + 3.0) / VALUE_RANGE * 255.0, 0, 255).round().astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode() + pix.tobytes()


def psnr(mse: float) -> float:
    """PSNR with the [-3, 3] value range mapped to [0, 1]."""
    mse01 = mse / VALUE_RANGE**2
    return float("inf") if mse01 == 0 else float(10.0 * np.log10(1.0 / mse01))


# ---------------------------------------------------------------------------
# shared loading
# ---------------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None and args.command == "train":
        cfg = cfg.with_seed(args.seed)
    return cfg


def _checkpoint(args, cfg: RunConfig, required: bool = True) -> tuple[TrainState | None, dict | None]:
    if args.checkpoint is None:
        if required:
            raise CLIError(f"{args.command} needs --checkpoint")
        return None, None
    path = Path(args.checkpoint)
    if not path.is_file():
        raise CLIError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    return load_checkpoint(path, expect=cfg.model), {"git_blob": git_blob_sha1(raw), "sha256": sha256(raw)}


def _dataset(args, cfg: RunConfig):
    if getattr(args, "data", None):
        ds = read_dataset(args.data)
        return ds.frames, ds.labels, ds.seed, file_sha256(Path(args.data))
    frames, labels = generate_samples(cfg.data)
    return frames, labels, cfg.data.seed, None


def _check_geometry(frames: np.ndarray, cfg: RunConfig) -> None:
    m = cfg.model
    if frames.shape[1:] != (m.n_frames, m.frame_size, m.channels):
        raise CLIError(f"data shape {frames.shape[1:]} does not match the model geometry")


def _manifest(args, cfg: RunConfig, seeds: dict, checkpoint: dict | None, extra: dict | None = None) -> dict:
    out = {
        "command": args.command,
        "config": cfg.to_dict(),
        "seeds": seeds,
        "checkpoint": checkpoint,
    }
    if extra:
        out.update(extra)
    return out


def _seed(args, default: int) -> int:
    return default if args.seed is None else args.seed


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig, out: Outputs) -> dict:
    spec = cfg.data if args.seed is None else cfg.data.__class__(**{**cfg.data.to_dict(), "seed": args.seed})
    frames, labels = generate_samples(spec)
    out.add("data.sfdv", dataset_bytes(frames, labels, spec.seed))
    return _manifest(args, cfg, {"data": spec.seed}, None)


def cmd_train(args, cfg: RunConfig, out: Outputs) -> dict:
    frames, labels, data_seed, data_sha = _dataset(args, cfg)
    _check_geometry(frames, cfg)
    state, ck_hash = _checkpoint(args, cfg, required=False)
    if state is None:
        state = TrainState.fresh(cfg.model, cfg.train)
    elif args.seed is not None and state.train_config.seed != args.seed:
        raise CLIError("--seed differs from the seed stored in the checkpoint being resumed")
    train_idx, held_idx = split_heldout(frames.shape[0], data_seed)
    heldout = (frames[held_idx][: state.train_config.eval_samples], labels[held_idx][: state.train_config.eval_samples])
    steps = args.steps if args.steps is not None else max(0, state.train_config.total_steps - state.step)
    rows, evals = train(state, frames[train_idx], labels[train_idx], steps=steps, heldout=heldout)
    out.add("checkpoint.sflw", checkpoint_bytes(state))
    out.add("loss.csv", csv_text(LOSS_COLUMNS, [[_fmt(r[c]) for c in LOSS_COLUMNS] for r in rows]))
    out.add("eval.csv", csv_text(("step", "nll", "fsm"), [[e["step"], _fmt(e["nll"]), _fmt(e["fsm"])] for e in evals]))
    return _manifest(
        args, RunConfig(state.model_config, state.train_config, cfg.noise, cfg.jacobi, cfg.data, cfg.sample, cfg.stream),
        {"train": state.train_config.seed, "model": state.model_config.seed, "data": data_seed},
        ck_hash,
        {"data_sha256": data_sha, "resumed_from_step": state.step - len(rows), "final_step": state.step,
         "skipped": state.opt.skipped, "nonfinite": state.opt.nonfinite},
    )


def _guidance(cfg: RunConfig) -> GuidanceSpec | None:
    s = cfg.sample
    return GuidanceSpec(s.guidance_weight, shallow=s.guidance_shallow) if s.use_guidance else None


def cmd_sample(args, cfg: RunConfig, out: Outputs) -> dict:
    state, ck_hash = _checkpoint(args, cfg)
    s = cfg.sample
    count = args.count if args.count is not None else s.count
    label = args.label if args.label is not None else s.label
    seed = _seed(args, 0)
    rng = np.random.default_rng(seed)
    labels = np.full(count, label, dtype=np.int64)
    flow, den = state.flow, state.denoiser if s.corrector else None
    sigma_test = cfg.noise.test
    if s.jacobi:
        m = state.model_config
        z = draw_latents(rng, count, m.n_frames, m.frame_size, m.channels, s.temperature)
        x, trace = jacobi_decode(flow, z, labels, cfg.jacobi, _guidance(cfg))
        if den is not None:
            x = tweedie_correct(x, den, sigma_test, labels)
        passes = trace.passes
    else:
        res = sample_sequential(flow, labels, rng, guidance=_guidance(cfg), denoiser=den, sigma_test=sigma_test,
                                temperature=s.temperature)
        x, passes = res.x, res.passes
    out.add("samples.sfdv", dataset_bytes(x.astype(np.float32), labels.astype(np.uint8), seed))
    if args.pgm:
        for i in range(count):
            for t in range(x.shape[1]):
                out.add(f"pgm/sample{i:03d}_frame{t:02d}.pgm", pgm(x[i, t], state.model_config.grid))
    return _manifest(args, cfg, {"sample": seed}, ck_hash, {"deep_passes": passes, "label": label, "count": count})


def cmd_stream(args, cfg: RunConfig, out: Outputs) -> dict:
    state, ck_hash = _checkpoint(args, cfg)
    st = cfg.stream
    frames = args.frames if args.frames is not None else st.frames
    window = args.window if args.window is not None else st.window
    label = args.label if args.label is not None else cfg.sample.label
    seed = _seed(args, 0)
    rng = np.random.default_rng(seed)
    chunks: list[bytes] = []
    latency: list[tuple[int, float]] = []
    t_prev = [time.perf_counter()]

    def sink(t: int, frame: np.ndarray) -> None:
        chunks.append(np.ascontiguousarray(frame[0], dtype="<f4").tobytes())
        now = time.perf_counter()
        latency.append((t, 1e3 * (now - t_prev[0])))
        t_prev[0] = now

    den = state.denoiser if cfg.sample.corrector else None
    result = stream_generate(
        state.flow, frames, window, np.array([label]), rng, sink, denoiser=den, sigma_test=cfg.noise.test,
        delta=st.delta, guidance=_guidance(cfg), temperature=cfg.sample.temperature, reencode=st.reencode,
        pipelined=st.pipelined,
    )
    out.add("stream.f32", b"".join(chunks))
    # wall-clock measurements: informative only, not reproducible
    out.add("latency.csv", csv_text(("frame", "ms"), [(t, f"{ms:.3f}") for t, ms in latency]), volatile_columns=("ms",))
    m = state.model_config
    return _manifest(
        args, cfg, {"stream": seed}, ck_hash,
        {"frames": frames, "window": window, "frame_shape": [m.frame_size, m.channels], "rebuilds": result.rebuilds,
         "peak_cache_positions": result.peak_positions},
    )


def cmd_loglik(args, cfg: RunConfig, out: Outputs) -> dict:
    state, ck_hash = _checkpoint(args, cfg)
    frames, labels, data_seed, data_sha = _dataset(args, cfg)
    _check_geometry(frames, cfg)
    seed = _seed(args, 0)
    x = frames.astype(np.float64)
    if args.shuffle_frames:
        rng = np.random.default_rng(seed)
        x = np.stack([xi[rng.permutation(xi.shape[0])] for xi in x])
    if args.limit is not None:
        x, labels = x[: args.limit], labels[: args.limit]
    rows = []
    for start in range(0, x.shape[0], 50):
        total, per_frame = log_likelihood(state.flow, x[start : start + 50], labels[start : start + 50])
        for i in range(total.shape[0]):
            rows.append([start + i, int(labels[start + i]), _fmt(total[i])] + [_fmt(v) for v in per_frame[i]])
    header = ["index", "label", "total"] + [f"frame_{n}" for n in range(x.shape[1])]
    out.add("loglik.csv", csv_text(header, rows))
    mean = float(np.mean([float(r[2]) for r in rows]))
    return _manifest(args, cfg, {"shuffle": seed, "data": data_seed}, ck_hash,
                     {"data_sha256": data_sha, "mean_loglik": mean, "shuffled": bool(args.shuffle_frames)})


def cmd_bench(args, cfg: RunConfig, out: Outputs) -> dict:
    """Sweep on latents of held-out clips, which carry the temporal coherence warm starts rely on."""
    state, ck_hash = _checkpoint(args, cfg)
    frames, labels, data_seed, data_sha = _dataset(args, cfg)
    _check_geometry(frames, cfg)
    _, held = split_heldout(frames.shape[0], data_seed)
    held = held[: args.count if args.count is not None else 20]
    lab = labels[held].astype(np.int64)
    _, z, _, _ = model_encode(state.flow, frames[held].astype(np.float64), lab)
    rows = bench_sweep(state.flow, z, lab, tau=cfg.jacobi.tau)
    out.add("bench.csv", rows_to_csv(rows), volatile_columns=("ms",))
    totals = {f"{k[0]}/{k[1]}": v for k, v in total_passes(rows).items()}
    return _manifest(args, cfg, {"data": data_seed}, ck_hash,
                     {"data_sha256": data_sha, "samples": len(held), "mean_passes": totals,
                      "sequential_passes": sequential_passes(state.flow)})


def ablation_table(state: TrainState, clean: np.ndarray, labels: np.ndarray, sigma: float, sigma_test: float, seed: int):
    """Rows (method, mse, psnr) for no denoising, the raw flow score and the learned denoiser."""
    rng = np.random.default_rng([seed, 5])
    clean = clean.astype(np.float64)
    noisy = clean + sigma * rng.standard_normal(clean.shape)
    raw = np.concatenate([noisy[i : i + 25] + sigma * fsm_target(noisy[i : i + 25], state.flow, labels[i : i + 25], sigma)
                          for i in range(0, clean.shape[0], 25)])
    learned = tweedie_correct(noisy, state.denoiser, sigma_test, labels)
    rows = []
    for name, est in (("no-denoise", noisy), ("raw-score", raw), ("learned-fsm", learned)):
        mse = float(np.mean((est - clean) ** 2))
        rows.append((name, mse, psnr(mse)))
    return rows


def cmd_ablate(args, cfg: RunConfig, out: Outputs) -> dict:
    state, ck_hash = _checkpoint(args, cfg)
    frames, labels, data_seed, data_sha = _dataset(args, cfg)
    _check_geometry(frames, cfg)
    _, held = split_heldout(frames.shape[0], data_seed)
    count = args.count if args.count is not None else 100
    held = held[:count]
    seed = _seed(args, 0)
    rows = ablation_table(state, frames[held], labels[held].astype(np.int64), cfg.noise.sigma, cfg.noise.test, seed)
    out.add("ablate.csv", csv_text(("method", "mse", "psnr"), [(n, _fmt(m), _fmt(p)) for n, m, p in rows]))
    return _manifest(args, cfg, {"noise": seed, "data": data_seed}, ck_hash, {"data_sha256": data_sha, "samples": len(held)})


def cmd_encode(args, cfg: RunConfig, out: Outputs) -> dict:
    state, ck_hash = _checkpoint(args, cfg)
    frames, labels, data_seed, data_sha = _dataset(args, cfg)
    _check_geometry(frames, cfg)
    idx = np.asarray(args.index if args.index else [0], dtype=np.int64)
    if np.any((idx < 0) | (idx >= frames.shape[0])):
        raise CLIError(f"--index out of range [0, {frames.shape[0]})")
    u, z, ld_s, ld_d = model_encode(state.flow, frames[idx].astype(np.float64), labels[idx].astype(np.int64))
    for name, arr in (("u", u), ("z", z), ("logdet_shallow", ld_s), ("logdet_deep", ld_d), ("labels", labels[idx])):
        buf = io.BytesIO()
        np.save(buf, arr, allow_pickle=False)
        out.add(f"{name}.npy", buf.getvalue())
    return _manifest(args, cfg, {"data": data_seed}, ck_hash, {"data_sha256": data_sha, "indices": idx.tolist()})


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "stream": cmd_stream,
    "loglik": cmd_loglik,
    "bench-jacobi": cmd_bench,
    "denoise-ablate": cmd_ablate,
    "encode": cmd_encode,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqflow", description="Autoregressive flows for frame sequences.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="INI run configuration")
        p.add_argument("--checkpoint", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p)
    p = sub.add_parser("train", help="train or resume; writes checkpoint and loss log")
    common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--steps", type=int, help="number of steps to run (default: up to total_steps)")
    p = sub.add_parser("sample", help="generate sequences")
    common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--label", type=int)
    p.add_argument("--pgm", action="store_true", help="also write PGM previews")
    p = sub.add_parser("stream", help="stream a long sequence")
    common(p)
    p.add_argument("--frames", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--label", type=int)
    p = sub.add_parser("loglik", help="per-sample and per-frame log-likelihoods")
    common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--shuffle-frames", action="store_true", help="permute frames within each sample first")
    p.add_argument("--limit", type=int)
    p = sub.add_parser("bench-jacobi", help="Jacobi block-size sweep")
    common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--count", type=int)
    p = sub.add_parser("denoise-ablate", help="compare denoisers on held-out noisy data")
    common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--count", type=int)
    p = sub.add_parser("encode", help="latents of dataset samples")
    common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--index", type=int, action="append")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        out = Outputs(args.out)
        manifest = COMMANDS[args.command](args, cfg, out)
        out.commit(manifest)
    except (CLIError, ConfigError, CheckpointError, DatasetFormatError, ValueError, OSError) as err:
        print(f"seqflow {args.command}: error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
