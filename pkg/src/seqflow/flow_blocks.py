"""Masked affine autoregressive flow blocks.

A block maps ``x -> z`` with ``z_i = (x_i - mu_i) / sigma_i`` where ``(mu_i, sigma_i)``
come from a causal transformer that only sees positions strictly before ``i`` in
the block's order. The strict ordering is realized by shifting the input right
by one and prepending a learned start token, so the network itself uses an
ordinary inclusive causal mask.

Deep blocks order the whole video (frame-major, raster within frame). Shallow
blocks see one frame at a time and may reverse the within-frame order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np

from .numerics import (
    KVCache,
    LayerNorm,
    Linear,
    Module,
    Tensor,
    TransformerLayer,
    attention_stack,
    causal_allowed,
    concat,
    exp,
    flip,
    no_grad,
    param,
)

LOG_SIGMA_BOUND = 5.0


@dataclass(frozen=True)
class MaskSpec:
    """Which earlier positions a block may condition on."""

    scope: Literal["sequence", "frame"]
    direction: Literal["forward", "reverse"] = "forward"
    self_exclusive: bool = True

    def __post_init__(self):
        if self.scope not in ("sequence", "frame"):
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.direction not in ("forward", "reverse"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.scope == "sequence" and self.direction != "forward":
            raise ValueError("sequence-wide blocks must run forward to stay causal across frames")
        if not self.self_exclusive:
            raise ValueError("affine autoregressive blocks require a self-exclusive mask")

    def order(self, n_frames: int, frame_size: int) -> np.ndarray:
        """Raster indices (frame * S + s) in the order the block processes them."""
        within = np.arange(frame_size)
        if self.direction == "reverse":
            within = within[::-1]
        return (np.arange(n_frames)[:, None] * frame_size + within[None, :]).reshape(-1)

    def matrix(self, n_frames: int, frame_size: int) -> np.ndarray:
        """``allowed[i, j]``: may the parameters of raster position i read raster position j."""
        total = n_frames * frame_size
        rank = np.empty(total, dtype=int)
        rank[self.order(n_frames, frame_size)] = np.arange(total)
        allowed = rank[None, :] < rank[:, None]
        if self.scope == "frame":
            frame = np.arange(total) // frame_size
            allowed &= frame[:, None] == frame[None, :]
        return allowed


class AffineParams(NamedTuple):
    mu: np.ndarray | Tensor
    log_sigma: np.ndarray | Tensor

    @property
    def sigma(self):
        ls = self.log_sigma
        return exp(ls) if isinstance(ls, Tensor) else np.exp(ls)


class ARConditioner(Module):
    """Causal transformer predicting ``(mu, log_sigma)`` per position."""

    def __init__(
        self,
        channels: int,
        width: int,
        n_layers: int,
        heads: int,
        max_len: int,
        cond_dim: int,
        rng: np.random.Generator,
    ):
        self.channels = channels
        self.max_len = max_len
        self.start_token = param(rng.normal(0.0, 1.0, channels))
        self.proj_in = Linear(channels, width, rng)
        self.pos_embed = param(rng.normal(0.0, 0.02, (max_len, width)))
        self.cond_proj = Linear(cond_dim, width, rng, bias=False)
        self.layers = [TransformerLayer(width, heads, rng) for _ in range(n_layers)]
        self.norm = LayerNorm(width)
        # zero head: the block starts as the identity map
        self.head = Linear(width, 2 * channels, rng, zero=True)

    def __call__(
        self,
        inputs: Tensor,
        cond: Tensor,
        start: int = 0,
        cache: KVCache | None = None,
        commit: int = 0,
    ) -> AffineParams:
        n = inputs.shape[1]
        if start + n > self.max_len:
            raise IndexError(f"positions {start}..{start + n - 1} exceed the conditioner length {self.max_len}")
        h = self.proj_in(inputs) + self.pos_embed[start : start + n]
        h = h + self.cond_proj(cond).reshape(cond.shape[0], 1, -1)
        past = 0 if cache is None else cache.length
        h = attention_stack(self.layers, h, causal_allowed(n, past), cache, commit)
        out = self.head(self.norm(h))
        mu = out[:, :, : self.channels]
        log_sigma = out[:, :, self.channels :].clip(-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND)
        return AffineParams(mu, log_sigma)


class StepCache:
    """Incremental decoding state of one block for one condition.

    ``tail`` holds finalized values whose keys/values are not yet in the cache;
    they are committed by the next conditioner pass, so a fresh cache starts
    with the start token in the tail. ``pending`` is the parameter pair for the
    next value after everything committed. ``passes`` counts conditioner calls.
    """

    def __init__(self, net: ARConditioner, cond: np.ndarray):
        self.net = net
        self.cond = np.asarray(cond, dtype=np.float64)
        self.kv = KVCache.empty(len(net.layers))
        batch = self.cond.shape[0]
        self.tail = np.broadcast_to(net.start_token.data, (batch, 1, net.channels)).copy()
        self.inputs = self.tail[:, :0].copy()
        self.pending: AffineParams | None = None
        self.passes = 0
        self.peak_positions = 0

    @property
    def batch(self) -> int:
        return self.cond.shape[0]

    @property
    def n_values(self) -> int:
        """Number of sequence values fixed so far (committed or waiting in the tail)."""
        return self.kv.length + self.tail.shape[1] - 1

    def _pass(self, chunk: np.ndarray, commit: int) -> AffineParams:
        with no_grad():
            params = self.net(Tensor(chunk), Tensor(self.cond), start=self.kv.length, cache=self.kv, commit=commit)
        self.passes += 1
        if commit:
            self.inputs = np.concatenate([self.inputs, chunk[:, :commit]], axis=1)
        self.peak_positions = max(self.peak_positions, self.kv.length - commit + chunk.shape[1])
        return AffineParams(params.mu.data, params.log_sigma.data)

    def run(self, probe: np.ndarray | None = None) -> AffineParams:
        """Parameters for the next ``k + 1`` values given guesses for the next ``k``.

        Commits the tail as a side effect. Row 0 of the result depends only on
        fixed values; row ``r`` additionally reads ``probe[:, :r]``.
        """
        if probe is None:
            probe = np.zeros((self.batch, 0, self.net.channels))
        if probe.shape[0] != self.batch or probe.shape[2] != self.net.channels:
            raise ValueError(f"probe shape {probe.shape} incompatible with cache batch {self.batch}")
        m = self.tail.shape[1]
        if m == 0 and probe.shape[1] == 0:
            if self.pending is None:
                raise RuntimeError("cache has no pending parameters")
            return self.pending
        chunk = np.concatenate([self.tail, probe], axis=1) if m else probe
        out = self._pass(chunk, commit=m)
        if m:
            self.pending = AffineParams(out.mu[:, m - 1 : m], out.log_sigma[:, m - 1 : m])
            self.tail = self.tail[:, :0]
            return AffineParams(out.mu[:, m - 1 :], out.log_sigma[:, m - 1 :])
        return AffineParams(
            np.concatenate([self.pending.mu, out.mu], axis=1),
            np.concatenate([self.pending.log_sigma, out.log_sigma], axis=1),
        )

    def push(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 2:
            values = values[:, None, :]
        if values.shape[0] != self.batch or values.shape[2] != self.net.channels:
            raise ValueError(f"values shape {values.shape} incompatible with cache")
        if self.n_values + values.shape[1] > self.net.max_len:
            raise IndexError("cache would exceed the conditioner's maximum length")
        self.tail = np.concatenate([self.tail, values], axis=1)

    def flush(self) -> None:
        """Commit the tail with one forward pass (no-op when empty)."""
        if self.tail.shape[1]:
            self.run()

    def truncate(self, n_values: int) -> None:
        """Forget everything after the first ``n_values`` values."""
        if not 0 <= n_values <= self.n_values:
            raise ValueError(f"cannot truncate {self.n_values} values to {n_values}")
        keep = n_values + 1  # inputs including the start token
        if keep > self.kv.length:
            self.tail = self.tail[:, : keep - self.kv.length]
            return
        last = self.inputs[:, keep - 1 : keep]
        self.kv.truncate(keep - 1)
        self.inputs = self.inputs[:, : keep - 1]
        self.tail = last.copy()
        self.pending = None

    def copy(self) -> StepCache:
        other = StepCache.__new__(StepCache)
        other.net = self.net
        other.cond = self.cond
        other.kv = self.kv.copy()
        other.tail = self.tail.copy()
        other.inputs = self.inputs.copy()
        other.pending = self.pending
        other.passes = self.passes
        other.peak_positions = self.peak_positions
        return other


class FlowBlock(Module):
    """One affine autoregressive flow block over (batch, frames, positions, channels) arrays."""

    def __init__(
        self,
        mask: MaskSpec,
        channels: int,
        frame_size: int,
        max_frames: int,
        width: int,
        n_layers: int,
        heads: int,
        cond_dim: int,
        rng: np.random.Generator,
    ):
        self.mask = mask
        self.frame_size = frame_size
        max_len = max_frames * frame_size if mask.scope == "sequence" else frame_size
        self.net = ARConditioner(channels, width, n_layers, heads, max_len, cond_dim, rng)

    # -- layout ----------------------------------------------------------
    def to_seq(self, x):
        """(B, N, S, C) -> (B', L, C) in processing order."""
        b, n, s, c = x.shape
        if self.mask.scope == "sequence":
            return x.reshape(b, n * s, c)
        seq = x.reshape(b * n, s, c)
        if self.mask.direction == "reverse":
            seq = flip(seq, 1) if isinstance(seq, Tensor) else seq[:, ::-1]
        return seq

    def from_seq(self, seq, n_frames: int):
        if self.mask.scope == "sequence":
            b, length, c = seq.shape
            return seq.reshape(b, n_frames, length // n_frames, c)
        if self.mask.direction == "reverse":
            seq = flip(seq, 1) if isinstance(seq, Tensor) else seq[:, ::-1]
        bn, s, c = seq.shape
        return seq.reshape(bn // n_frames, n_frames, s, c)

    def seq_cond(self, cond, n_frames: int):
        """Condition rows matching :meth:`to_seq`'s batch layout."""
        if self.mask.scope == "sequence":
            return cond
        idx = np.repeat(np.arange(cond.shape[0]), n_frames)
        return cond[idx]

    # -- forward ---------------------------------------------------------
    def params(self, seq: Tensor, cond: Tensor) -> AffineParams:
        start = self.net.start_token.reshape(1, 1, -1) + Tensor(np.zeros((seq.shape[0], 1, seq.shape[2])))
        inputs = concat([start, seq[:, :-1]], axis=1)
        return self.net(inputs, cond)

    def forward(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        """Teacher-forced pass. Returns ``z`` (B, N, S, C) and per-frame log-det (B, N)."""
        n_frames = x.shape[1]
        seq = self.to_seq(x)
        mu, log_sigma = self.params(seq, self.seq_cond(cond, n_frames))
        z_seq = (seq - mu) * exp(-log_sigma)
        z = self.from_seq(z_seq, n_frames)
        logdet = self.from_seq(-log_sigma, n_frames).sum(axis=(2, 3))
        return z, logdet

    __call__ = forward

    # -- decoding --------------------------------------------------------
    def start(self, cond: np.ndarray, n_frames: int = 1) -> StepCache:
        cond = np.asarray(cond, dtype=np.float64)
        if self.mask.scope == "frame":
            cond = np.repeat(cond, n_frames, axis=0)
        return StepCache(self.net, cond)


def invert_sequence(source, z_seq: np.ndarray) -> np.ndarray:
    """Sequential inverse ``u_i = sigma_i z_i + mu_i`` one position at a time.

    ``source`` is any object with ``run``/``push`` (a :class:`StepCache` or a
    guided pair); it must already hold whatever context precedes ``z_seq``.
    """
    out = np.empty_like(z_seq)
    for i in range(z_seq.shape[1]):
        mu, log_sigma = source.run()
        u = np.exp(log_sigma[:, 0]) * z_seq[:, i] + mu[:, 0]
        out[:, i] = u
        source.push(u)
    return out


def block_forward(block: FlowBlock, x, cond) -> tuple[Tensor, Tensor]:
    """Teacher-forced block pass returning ``z`` and the total log-det per sample."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    cond = cond if isinstance(cond, Tensor) else Tensor(cond)
    z, per_frame = block.forward(x, cond)
    return z, per_frame.sum(axis=1)


def block_inverse_sequential(
    block: FlowBlock, z: np.ndarray, cond: np.ndarray, cache: StepCache | None = None
) -> np.ndarray:
    """Invert ``block`` on (B, N, S, C) latents, continuing ``cache`` when given."""
    z = np.asarray(z, dtype=np.float64)
    n_frames = z.shape[1]
    if cache is None:
        cache = block.start(cond, n_frames)
    return block.from_seq(invert_sequence(cache, block.to_seq(z)), n_frames)


def make_shallow_stack(
    n_blocks: int,
    channels: int,
    frame_size: int,
    width: int,
    n_layers: int,
    heads: int,
    cond_dim: int,
    rng: np.random.Generator,
) -> list[FlowBlock]:
    """Within-frame blocks alternating forward/reverse raster order."""
    if n_blocks < 1:
        raise ValueError("shallow stack needs at least one block")
    return [
        FlowBlock(
            MaskSpec("frame", "forward" if i % 2 == 0 else "reverse"),
            channels,
            frame_size,
            1,
            width,
            n_layers,
            heads,
            cond_dim,
            rng,
        )
        for i in range(n_blocks)
    ]
