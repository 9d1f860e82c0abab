"""Global-local autoregressive flow: per-frame shallow blocks, then one deep block.

Sequences are arrays shaped (batch, frames, positions, channels). ``encode`` maps
data ``x`` through the shallow stack to ``u`` and through the deep block to ``z``;
the likelihood is the standard-normal log-density of ``z`` plus both log-dets.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .flow_blocks import FlowBlock, MaskSpec, block_inverse_sequential, make_shallow_stack
from .numerics import Module, Tensor, no_grad, param

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
NULL_LABEL = -1


@dataclass(frozen=True)
class Geometry:
    n_frames: int = 8
    frame_size: int = 16
    channels: int = 4

    def __post_init__(self):
        if min(self.n_frames, self.frame_size, self.channels) < 1:
            raise ValueError(f"invalid geometry {self}")

    @property
    def tokens(self) -> int:
        return self.n_frames * self.frame_size

    @property
    def dims(self) -> int:
        return self.tokens * self.channels


@dataclass(frozen=True)
class ModelConfig:
    n_frames: int = 8
    grid: int = 4
    channels: int = 4
    n_classes: int = 3
    cond_dim: int = 16
    deep_width: int = 64
    deep_layers: int = 4
    heads: int = 4
    shallow_blocks: int = 3
    shallow_width: int = 32
    shallow_layers: int = 2
    denoiser_width: int = 32
    denoiser_layers: int = 8
    denoiser_heads: int = 2
    seed: int = 0

    @property
    def frame_size(self) -> int:
        return self.grid * self.grid

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.n_frames, self.frame_size, self.channels)

    def to_dict(self) -> dict:
        return asdict(self)


def check_tokens(x: np.ndarray, channels: int, frame_size: int | None = None) -> np.ndarray:
    """Validate a (batch, frames, positions, channels) token array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected (batch, frames, positions, channels), got shape {x.shape}")
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ValueError(f"empty sequence shape {x.shape}")
    if x.shape[3] != channels or (frame_size is not None and x.shape[2] != frame_size):
        raise ValueError(f"token shape {x.shape} does not match model channels/frame size")
    if not np.isfinite(x).all():
        raise ValueError("token values must be finite")
    return x


class ConditionEmbedding(Module):
    """Learned table of class embeddings; the last row is the null (unconditional) token."""

    def __init__(self, n_classes: int, dim: int, rng: np.random.Generator):
        self.n_classes = n_classes
        self.table = param(rng.normal(0.0, 1.0, (n_classes + 1, dim)))

    def rows(self, labels) -> np.ndarray:
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if np.any((labels < NULL_LABEL) | (labels >= self.n_classes)):
            raise ValueError(f"labels must be in [-1, {self.n_classes - 1}]")
        return np.where(labels == NULL_LABEL, self.n_classes, labels)

    def __call__(self, labels) -> Tensor:
        return self.table[self.rows(labels)]


class Encoded(NamedTuple):
    u: Tensor
    z: Tensor
    logdet_shallow: Tensor  # (B, N)
    logdet_deep: Tensor  # (B, N)


class GlobalLocalFlow(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        self.cond_embed = ConditionEmbedding(c.n_classes, c.cond_dim, rng)
        self.shallow = make_shallow_stack(
            c.shallow_blocks, c.channels, c.frame_size, c.shallow_width, c.shallow_layers, c.heads, c.cond_dim, rng
        )
        self.deep = FlowBlock(
            MaskSpec("sequence"), c.channels, c.frame_size, c.n_frames, c.deep_width, c.deep_layers, c.heads, c.cond_dim, rng
        )

    @property
    def geometry(self) -> Geometry:
        return self.config.geometry

    def cond(self, labels, batch: int | None = None) -> Tensor:
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if batch is not None and labels.size == 1 and batch > 1:
            labels = np.repeat(labels, batch)
        return self.cond_embed(labels)

    def _input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            check_tokens(x.data, self.config.channels, self.config.frame_size)
            return x
        return Tensor(check_tokens(x, self.config.channels, self.config.frame_size))

    # -- data -> latent --------------------------------------------------
    def shallow_forward(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        logdet = None
        for block in self.shallow:
            x, ld = block(x, cond)
            logdet = ld if logdet is None else logdet + ld
        return x, logdet

    def encode(self, x, labels) -> Encoded:
        x = self._input(x)
        cond = self.cond(labels, x.shape[0])
        u, ld_s = self.shallow_forward(x, cond)
        z, ld_d = self.deep(u, cond)
        return Encoded(u, z, ld_s, ld_d)

    def log_likelihood(self, x, labels) -> tuple[Tensor, Tensor]:
        """Exact log p(x): total per sample (B,) and per-frame terms (B, N)."""
        enc = self.encode(x, labels)
        prior = (enc.z.square() * -0.5 - HALF_LOG_2PI).sum(axis=(2, 3))
        per_frame = prior + enc.logdet_deep + enc.logdet_shallow
        return per_frame.sum(axis=1), per_frame

    # -- latent -> data --------------------------------------------------
    def shallow_inverse(self, u: np.ndarray, cond_vec: np.ndarray) -> np.ndarray:
        """Invert the shallow stack; frames are independent, positions sequential."""
        x = u
        for block in reversed(self.shallow):
            x = block_inverse_sequential(block, x, cond_vec)
        return x

    def decode(self, z, labels) -> np.ndarray:
        z = check_tokens(z, self.config.channels, self.config.frame_size)
        with no_grad():
            cond_vec = self.cond(labels, z.shape[0]).data
        u = block_inverse_sequential(self.deep, z, cond_vec)
        return self.shallow_inverse(u, cond_vec)


def encode(model: GlobalLocalFlow, x, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Numpy convenience: (u, z, total shallow log-det, total deep log-det)."""
    with no_grad():
        enc = model.encode(x, labels)
    return enc.u.data, enc.z.data, enc.logdet_shallow.data.sum(axis=1), enc.logdet_deep.data.sum(axis=1)


def log_likelihood(model: GlobalLocalFlow, x, labels) -> tuple[np.ndarray, np.ndarray]:
    with no_grad():
        total, per_frame = model.log_likelihood(x, labels)
    return total.data, per_frame.data


def decode(model: GlobalLocalFlow, z, labels) -> np.ndarray:
    return model.decode(z, labels)
