"""Block-wise Jacobi inversion of autoregressive affine blocks.

Inverting ``z_i = (u_i - mu_i(u_<i)) / sigma_i(u_<i)`` sequentially costs one
conditioner pass per position. Jacobi iteration instead guesses a whole block
of positions, evaluates the conditioner on the guess in one pass and updates
all positions at once::

    u_i <- sigma_i(u_<i) * z_i + mu_i(u_<i)

Because the dependence is strictly triangular, sweep ``k`` makes the first
``k`` positions of the block exact, so a block of length ``m`` is solved after
at most ``m`` sweeps; in practice it converges far sooner. Blocks are solved in
order and each converged block becomes cached context for the next.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from .model import GlobalLocalFlow, check_tokens
from .sampler import GuidanceSpec, Source, _labels, block_source, deep_source, shallow_inverse

WarmStart = Literal["zeros", "prev_frame"]
ColdInit = Literal["zeros", "latent", "uniform"]
Residual = Literal["max_abs", "scaled"]


class JacobiDivergence(RuntimeError):
    """Raised when the residual stops decreasing; carries the partial trace."""

    def __init__(self, message: str, trace: JacobiTrace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class JacobiPlan:
    """Block partition and stopping rule.

    The first block covers ``min(first_block, frame_size)`` positions when
    ``clip_to_frame`` is set; later blocks have ``later_block`` positions
    (default ``4 * first``). ``max_iters=None`` means the block length, which
    always suffices for an exact solution.

    ``residual`` picks the stopping statistic: ``"max_abs"`` is the largest
    absolute change of any position, ``"scaled"`` the squared change relative
    to the squared norm of the new iterate (worst sample of the batch). The
    scaled form averages over the block and can stop while a few positions
    are still far from the fixed point, so it is not the default.
    """

    first_block: int = 64
    later_block: int | None = None
    tau: float = 1e-3
    max_iters: int | None = None
    warm_start: WarmStart = "prev_frame"
    cold_init: ColdInit = "zeros"
    epsilon: float = 1e-8
    patience: int = 10
    clip_to_frame: bool = True
    shallow: bool = False  # also Jacobi-invert the shallow blocks
    seed: int = 0  # for cold_init="uniform"
    residual: Residual = "max_abs"

    def __post_init__(self):
        if self.first_block < 1 or (self.later_block is not None and self.later_block < 1):
            raise ValueError("block sizes must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.warm_start not in ("zeros", "prev_frame"):
            raise ValueError(f"unknown warm start {self.warm_start!r}")
        if self.cold_init not in ("zeros", "latent", "uniform"):
            raise ValueError(f"unknown cold init {self.cold_init!r}")
        if self.residual not in ("max_abs", "scaled"):
            raise ValueError(f"unknown residual {self.residual!r}")
        if self.epsilon <= 0 or self.patience < 1:
            raise ValueError("epsilon must be positive and patience >= 1")

    @classmethod
    def uniform(cls, block: int, **kwargs) -> JacobiPlan:
        """Every block of the same size (no first-frame special case)."""
        return cls(first_block=block, later_block=block, clip_to_frame=False, **kwargs)

    def blocks(self, length: int, frame_size: int) -> list[tuple[int, int]]:
        first = min(self.first_block, frame_size) if self.clip_to_frame else self.first_block
        first = min(first, length)
        later = self.later_block if self.later_block is not None else 4 * first
        spans = [(0, first)]
        a = first
        while a < length:
            spans.append((a, min(a + later, length)))
            a += later
        return spans


@dataclass
class BlockTrace:
    start: int
    stop: int
    frame_index: int
    iters: int
    passes: int
    residuals: list[float]
    ms: float
    iterates: list[np.ndarray] | None = None


@dataclass
class JacobiTrace:
    blocks: list[BlockTrace] = field(default_factory=list)
    wall_ms: float = 0.0

    @property
    def passes(self) -> int:
        return sum(b.passes for b in self.blocks)

    @property
    def iterations(self) -> list[int]:
        return [b.iters for b in self.blocks]

    @property
    def residuals(self) -> list[list[float]]:
        return [b.residuals for b in self.blocks]


def scale_normalized_residual(u_new: np.ndarray, u_old: np.ndarray, epsilon: float = 1e-8) -> float:
    """``||u_new - u_old||^2 / (||u_new||^2 + epsilon)``."""
    u_new = np.asarray(u_new, dtype=np.float64)
    u_old = np.asarray(u_old, dtype=np.float64)
    if u_new.shape != u_old.shape:
        raise ValueError(f"shape mismatch {u_new.shape} vs {u_old.shape}")
    diff = u_new - u_old
    return float(np.sum(diff * diff) / (np.sum(u_new * u_new) + epsilon))


def batch_residual(u_new: np.ndarray, u_old: np.ndarray, epsilon: float = 1e-8) -> float:
    """Largest per-sample residual; a batch converges when every stream has."""
    diff = u_new - u_old
    axes = tuple(range(1, u_new.ndim))
    per = np.sum(diff * diff, axis=axes) / (np.sum(u_new * u_new, axis=axes) + epsilon)
    return float(per.max())


def max_abs_residual(u_new: np.ndarray, u_old: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(u_new) - np.asarray(u_old))))


def stop_statistic(plan: JacobiPlan, u_new: np.ndarray, u_old: np.ndarray) -> float:
    if plan.residual == "max_abs":
        return max_abs_residual(u_new, u_old)
    return batch_residual(u_new, u_old, plan.epsilon)


def video_aware_init(span: tuple[int, int], committed_u: np.ndarray, frame_size: int) -> np.ndarray:
    """Initial guess for ``span`` from the last complete frame of ``committed_u``.

    ``committed_u`` is (B, a, D) with ``a = span[0]``. Position ``i`` copies
    ``committed_u[a - F + (i - a) % F]``: one frame back, repeating that frame
    when the block is longer than a frame. Blocks starting inside frame 0 get zeros.
    """
    a, b = span
    batch, n_committed, channels = committed_u.shape
    if n_committed != a:
        raise ValueError(f"expected {a} committed positions, got {n_committed}")
    if a < frame_size:
        return np.zeros((batch, b - a, channels))
    src = a - frame_size + (np.arange(b - a) % frame_size)
    return committed_u[:, src].copy()


def _cold_init(plan: JacobiPlan, z_block: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if plan.cold_init == "latent":
        return z_block.copy()
    if plan.cold_init == "uniform":
        return rng.uniform(-1.0, 1.0, z_block.shape)
    return np.zeros_like(z_block)


def jacobi_sequence(
    source: Source,
    z_seq: np.ndarray,
    plan: JacobiPlan,
    frame_size: int,
    record_iterates: bool = False,
    trace: JacobiTrace | None = None,
) -> tuple[np.ndarray, JacobiTrace]:
    """Jacobi-invert a (B, L, D) latent sequence continuing ``source``'s context.

    Position 0 of ``z_seq`` follows everything ``source`` already holds. Each
    finished block is pushed into ``source``.
    """
    trace = JacobiTrace() if trace is None else trace
    rng = np.random.default_rng(plan.seed)
    batch, length, channels = z_seq.shape
    u = np.zeros_like(z_seq)
    t_all = time.perf_counter()
    for a, b in plan.blocks(length, frame_size):
        t0 = time.perf_counter()
        z_block = z_seq[:, a:b]
        if plan.warm_start == "prev_frame" and a >= frame_size:
            it = video_aware_init((a, b), u[:, :a], frame_size)
        else:
            it = _cold_init(plan, z_block, rng)
        budget = plan.max_iters if plan.max_iters is not None else b - a
        residuals: list[float] = []
        iterates = [] if record_iterates else None
        passes0 = source.passes
        stalled = 0
        block = BlockTrace(a, b, a // frame_size, 0, 0, residuals, 0.0, iterates)
        for k in range(1, budget + 1):
            mu, log_sigma = source.run(it[:, :-1])
            new = np.exp(log_sigma) * z_block + mu
            r = stop_statistic(plan, new, it)
            stalled = stalled + 1 if residuals and r >= residuals[-1] else 0
            residuals.append(r)
            it = new
            if iterates is not None:
                iterates.append(new.copy())
            block.iters = k
            if r < plan.tau:
                break
            if stalled >= plan.patience:
                block.passes = source.passes - passes0
                trace.blocks.append(block)
                raise JacobiDivergence(
                    f"residual did not decrease for {plan.patience} iterations in block [{a}, {b})", trace
                )
        block.passes = source.passes - passes0
        block.ms = 1e3 * (time.perf_counter() - t0)
        trace.blocks.append(block)
        u[:, a:b] = it
        source.push(it)
    trace.wall_ms += 1e3 * (time.perf_counter() - t_all)
    return u, trace


def jacobi_invert(
    flow: GlobalLocalFlow,
    z: np.ndarray,
    labels,
    plan: JacobiPlan | None = None,
    guidance: GuidanceSpec | None = None,
    record_iterates: bool = False,
) -> tuple[np.ndarray, JacobiTrace]:
    """Invert the deep block on (B, N, S, D) latents. Returns ``u`` and the trace."""
    plan = JacobiPlan() if plan is None else plan
    c = flow.config
    z = check_tokens(z, c.channels, c.frame_size)
    b, n, s, d = z.shape
    source = deep_source(flow, _labels(labels, b), guidance)
    u, trace = jacobi_sequence(source, z.reshape(b, n * s, d), plan, s, record_iterates)
    return u.reshape(b, n, s, d), trace


def _shallow_jacobi(flow: GlobalLocalFlow, u: np.ndarray, labels, plan: JacobiPlan, guidance, trace: JacobiTrace):
    g = guidance if guidance is not None and guidance.shallow else None
    x = u
    n = u.shape[1]
    s = flow.config.frame_size
    for block in reversed(flow.shallow):
        source = block_source(flow, block, labels, g, n)
        seq, _ = jacobi_sequence(source, block.to_seq(x), plan, s, trace=trace)
        x = block.from_seq(seq, n)
    return x


def jacobi_decode(
    flow: GlobalLocalFlow,
    z: np.ndarray,
    labels,
    plan: JacobiPlan | None = None,
    guidance: GuidanceSpec | None = None,
) -> tuple[np.ndarray, JacobiTrace]:
    """Full latent -> data inverse with Jacobi on the deep block.

    The shallow blocks use the sequential inverse unless ``plan.shallow``.
    The returned trace covers the deep block only unless ``plan.shallow``.
    """
    plan = JacobiPlan() if plan is None else plan
    labels = _labels(labels, np.shape(z)[0])
    u, trace = jacobi_invert(flow, z, labels, plan, guidance)
    if plan.shallow:
        shallow_plan = JacobiPlan.uniform(flow.config.frame_size, tau=plan.tau, warm_start="zeros", epsilon=plan.epsilon)
        return _shallow_jacobi(flow, u, labels, shallow_plan, guidance, trace), trace
    return shallow_inverse(flow, u, labels, guidance), trace


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

BENCH_COLUMNS = ("block_size", "warm_start", "frame_index", "iters", "passes", "ms")


def bench_sweep(
    flow: GlobalLocalFlow,
    z: np.ndarray,
    labels,
    block_sizes: Sequence[int | str] = (1, 4, 16, 64, "full"),
    warm_starts: Iterable[WarmStart] = ("zeros", "prev_frame"),
    tau: float = 1e-3,
) -> list[dict]:
    """Deep-block Jacobi over uniform block sizes.

    Each sample is decoded on its own, as a batch would wait for its slowest
    member. One row per (block size, warm start, block) with iterations,
    passes and milliseconds averaged over samples. ``"full"`` is a single
    block over the whole sequence.
    """
    c = flow.config
    z = check_tokens(z, c.channels, c.frame_size)
    labels = _labels(labels, z.shape[0])
    length = c.n_frames * c.frame_size
    rows = []
    for size in block_sizes:
        bs = length if size == "full" else int(size)
        for warm in warm_starts:
            plan = JacobiPlan.uniform(bs, tau=tau, warm_start=warm)
            traces = [jacobi_invert(flow, z[i : i + 1], labels[i : i + 1], plan)[1] for i in range(z.shape[0])]
            for j, blk in enumerate(traces[0].blocks):
                per = [t.blocks[j] for t in traces]
                rows.append(
                    {
                        "block_size": size if size == "full" else bs,
                        "warm_start": warm,
                        "frame_index": blk.frame_index,
                        "iters": float(np.mean([b.iters for b in per])),
                        "passes": float(np.mean([b.passes for b in per])),
                        "ms": round(float(np.mean([b.ms for b in per])), 3),
                    }
                )
    return rows


def total_passes(rows: Sequence[dict]) -> dict[tuple, float]:
    """Mean passes per sequence for each (block_size, warm_start)."""
    out: dict[tuple, float] = {}
    for r in rows:
        key = (r["block_size"], r["warm_start"])
        out[key] = out.get(key, 0) + r["passes"]
    return out


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def sequential_passes(flow: GlobalLocalFlow, n_frames: int | None = None) -> int:
    """Conditioner passes of the sequential deep inverse: one per position."""
    n = flow.config.n_frames if n_frames is None else n_frames
    return n * flow.config.frame_size
