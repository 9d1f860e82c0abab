"""Small transformer building blocks on top of :mod:`seqflow.numerics.tensor`.

Layers work in two modes. ``__call__`` evaluates a full sequence (training,
teacher forcing). With a :class:`KVCache` the same weights evaluate a chunk of
new positions on top of the cached keys/values of earlier positions, which is
what sequential and Jacobi decoding use.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor import DTYPE, Tensor, concat, gelu, layer_norm, masked_softmax


class Module:
    """Parameter container discovered from instance attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    @contextmanager
    def frozen(self):
        """Treat parameters as constants; only explicit inputs collect gradients."""
        params = self.parameters()
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p in params:
                p.requires_grad = True


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=DTYPE), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        scale = 0.0 if zero else 1.0 / np.sqrt(n_in)
        self.weight = param(rng.normal(0.0, 1.0, (n_in, n_out)) * scale)
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, width: int):
        self.weight = param(np.ones(width))
        self.bias = param(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias)


@dataclass
class KVCache:
    """Per-layer keys/values of committed positions, shaped (batch, heads, length, head_dim)."""

    keys: list[np.ndarray | None] = field(default_factory=list)
    values: list[np.ndarray | None] = field(default_factory=list)
    length: int = 0

    @classmethod
    def empty(cls, n_layers: int) -> KVCache:
        return cls([None] * n_layers, [None] * n_layers, 0)

    def truncate(self, length: int) -> None:
        if not 0 <= length <= self.length:
            raise ValueError(f"cannot truncate cache of length {self.length} to {length}")
        for i, (k, v) in enumerate(zip(self.keys, self.values)):
            if k is not None:
                self.keys[i] = k[:, :, :length]
                self.values[i] = v[:, :, :length]
        self.length = length

    def copy(self) -> KVCache:
        return KVCache(
            [None if k is None else k.copy() for k in self.keys],
            [None if v is None else v.copy() for v in self.values],
            self.length,
        )

    def nbytes(self) -> int:
        return sum(k.nbytes + v.nbytes for k, v in zip(self.keys, self.values) if k is not None)


class SelfAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        if width % heads:
            raise ValueError("width must be divisible by heads")
        self.heads = heads
        self.qkv = Linear(width, 3 * width, rng)
        self.proj = Linear(width, width, rng)

    def __call__(
        self,
        h: Tensor,
        allowed: np.ndarray,
        cache: KVCache | None = None,
        layer: int = 0,
        commit: int = 0,
    ) -> Tensor:
        b, n, width = h.shape
        dh = width // self.heads
        qkv = self.qkv(h).reshape(b, n, 3, self.heads, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if cache is not None:
            past_k, past_v = cache.keys[layer], cache.values[layer]
            if commit:
                new_k, new_v = k.data[:, :, :commit], v.data[:, :, :commit]
                cache.keys[layer] = new_k.copy() if past_k is None else np.concatenate([past_k, new_k], axis=2)
                cache.values[layer] = new_v.copy() if past_v is None else np.concatenate([past_v, new_v], axis=2)
            if past_k is not None:
                k = concat([Tensor(past_k), k], axis=2)
                v = concat([Tensor(past_v), v], axis=2)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        attn = masked_softmax(scores, allowed)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, width)
        return self.proj(out)


class TransformerLayer(Module):
    """Pre-norm residual block: attention then a GELU feed-forward."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator, expansion: int = 2):
        self.norm1 = LayerNorm(width)
        self.attn = SelfAttention(width, heads, rng)
        self.norm2 = LayerNorm(width)
        self.fc1 = Linear(width, expansion * width, rng)
        self.fc2 = Linear(expansion * width, width, rng)

    def __call__(self, h: Tensor, allowed: np.ndarray, cache: KVCache | None = None, layer: int = 0, commit: int = 0):
        h = h + self.attn(self.norm1(h), allowed, cache, layer, commit)
        return h + self.fc2(gelu(self.fc1(self.norm2(h))))


def causal_allowed(n_query: int, n_past: int = 0) -> np.ndarray:
    """Boolean (n_query, n_past + n_query) mask: query j sees all past and new keys <= j."""
    new = np.tril(np.ones((n_query, n_query), dtype=bool))
    return np.concatenate([np.ones((n_query, n_past), dtype=bool), new], axis=1)


def attention_stack(
    layers: list[TransformerLayer],
    h: Tensor,
    allowed: np.ndarray,
    cache: KVCache | None = None,
    commit: int = 0,
) -> Tensor:
    """Run ``layers`` over ``h``; with a cache, ``allowed`` spans cached + new keys."""
    if cache is not None:
        if len(cache.keys) != len(layers):
            raise ValueError("cache layer count does not match the network")
        if allowed.shape != (h.shape[1], cache.length + h.shape[1]):
            raise ValueError(
                f"mask shape {allowed.shape} inconsistent with cache length {cache.length} and {h.shape[1]} new positions"
            )
    for i, layer in enumerate(layers):
        h = layer(h, allowed, cache, i, commit)
    if cache is not None:
        cache.length += commit
    return h
