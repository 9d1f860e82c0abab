"""Learned one-step denoiser trained against the flow's own score.

The flow is trained on noise-augmented data ``x~ = x + sigma * eps``. Its input
gradient gives the score of that smoothed density, and a single Tweedie step
``x^ = x~ + sigma^2 * grad log p(x~)`` removes most of the noise. Computing the
gradient through the whole flow is expensive and non-causal, so a small
transformer ``s_phi`` regresses ``sigma * grad log p`` and is used as the
streaming corrector. Its output for frame n reads frames <= n + 1 only: every
token is fed its own value and the value at the same position one frame ahead,
and attention is block-causal over frames. Look-ahead inside attention would
compound with depth, so it is confined to the input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import ConditionEmbedding, GlobalLocalFlow, ModelConfig, check_tokens
from .numerics import LayerNorm, Linear, Module, Tensor, TransformerLayer, attention_stack, backward, concat, no_grad, param

Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NoiseSpec:
    """Training noise scale and the corrector's step size (defaults to ``sigma``)."""

    sigma: float = 0.1
    sigma_test: float | None = None

    def __post_init__(self):
        if not self.sigma > 0 or (self.sigma_test is not None and not self.sigma_test > 0):
            raise ValueError("noise scales must be positive")

    @property
    def test(self) -> float:
        return self.sigma if self.sigma_test is None else self.sigma_test


def lookahead_allowed(n_frames: int, frame_size: int, lookahead: int = 0) -> np.ndarray:
    """``allowed[i, j]`` is True when frame(j) <= frame(i) + lookahead."""
    frame = np.arange(n_frames * frame_size) // frame_size
    return frame[None, :] <= frame[:, None] + lookahead


class DenoiserNet(Module):
    """Predicts ``sigma * grad log p(x~)`` per token from a noisy sequence."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        c = config
        rng = np.random.default_rng([c.seed, 1]) if rng is None else rng
        self.config = config
        self.frame_size = c.frame_size
        self.max_frames = c.n_frames
        # its own embedding table: FSM gradients must never reach flow parameters
        self.cond_embed = ConditionEmbedding(c.n_classes, c.cond_dim, rng)
        # own value, next-frame value, next-frame-present flag
        self.proj_in = Linear(2 * c.channels + 1, c.denoiser_width, rng)
        self.pos_embed = param(rng.normal(0.0, 0.02, (c.n_frames * c.frame_size, c.denoiser_width)))
        self.cond_proj = Linear(c.cond_dim, c.denoiser_width, rng, bias=False)
        self.layers = [TransformerLayer(c.denoiser_width, c.denoiser_heads, rng) for _ in range(c.denoiser_layers)]
        self.norm = LayerNorm(c.denoiser_width)
        self.head = Linear(c.denoiser_width, c.channels, rng, zero=True)

    def __call__(self, x_noisy, labels) -> Tensor:
        x = x_noisy if isinstance(x_noisy, Tensor) else Tensor(check_tokens(x_noisy, self.config.channels, self.frame_size))
        b, n, s, c = x.shape
        if n > self.max_frames:
            raise ValueError(f"denoiser window holds at most {self.max_frames} frames, got {n}")
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if labels.size == 1 and b > 1:
            labels = np.repeat(labels, b)
        cond = self.cond_embed(labels)
        ahead = concat([x[:, 1:], Tensor(np.zeros((b, 1, s, c)))], axis=1)
        present = np.ones((b, n, s, 1))
        present[:, -1] = 0.0
        inp = concat([x, ahead, Tensor(present)], axis=3)
        h = self.proj_in(inp.reshape(b, n * s, 2 * c + 1)) + self.pos_embed[: n * s]
        h = h + self.cond_proj(cond).reshape(b, 1, -1)
        h = attention_stack(self.layers, h, lookahead_allowed(n, s))
        return self.head(self.norm(h)).reshape(b, n, s, c)

    def score(self, x_noisy: np.ndarray, labels) -> np.ndarray:
        with no_grad():
            return self(x_noisy, labels).data


def _check_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return sigma


def flow_score(flow: GlobalLocalFlow, x_noisy, labels) -> np.ndarray:
    """``grad_x log p(x)`` per sample, by one backward pass with parameters frozen."""
    x = Tensor(check_tokens(x_noisy, flow.config.channels, flow.config.frame_size), requires_grad=True)
    with flow.frozen():
        total, _ = flow.log_likelihood(x, labels)
        backward(total.sum())
    if x.grad is None:
        raise RuntimeError("input gradient unavailable")
    return x.grad


def score_from_nll_grad(input_grad: np.ndarray, sigma: float, nll_scale: float) -> np.ndarray:
    """Turn the input gradient of ``nll = -nll_scale * sum(log p)`` into ``sigma * grad log p``.

    This is the gradient-reuse path of training: the NLL backward pass already
    filled ``x~.grad``, so the score costs nothing extra. The result is a plain
    array and carries no graph.
    """
    if input_grad is None:
        raise RuntimeError("input gradient unavailable: the noisy input was not tracked")
    return (-_check_sigma(sigma) / nll_scale) * input_grad


def fsm_target(x_noisy, flow: GlobalLocalFlow, labels, sigma: float) -> np.ndarray:
    """``sigma * grad log p(x~)``, detached."""
    return _check_sigma(sigma) * flow_score(flow, x_noisy, labels)


def fsm_loss(prediction, target) -> Tensor:
    """Mean squared error over all entries."""
    prediction = prediction if isinstance(prediction, Tensor) else Tensor(prediction)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {prediction.shape} vs target {target.shape}")
    return (prediction - target).square().mean()


def tweedie_correct(x_noisy, scorer: DenoiserNet | Scorer, sigma_test: float, labels=None) -> np.ndarray:
    """``x^ = x~ + sigma_test * s(x~)``; ``scorer`` is a network or any ``f(x, labels)``."""
    x = np.asarray(x_noisy, dtype=np.float64)
    fn = scorer.score if isinstance(scorer, DenoiserNet) else scorer
    return x + _check_sigma(sigma_test) * fn(x, labels)


def score_denoise_raw(x_noisy, flow: GlobalLocalFlow, labels, sigma: float) -> np.ndarray:
    """Tweedie step through the full flow gradient (non-causal baseline)."""
    x = np.asarray(x_noisy, dtype=np.float64)
    return x + _check_sigma(sigma) * fsm_target(x, flow, labels, sigma)
