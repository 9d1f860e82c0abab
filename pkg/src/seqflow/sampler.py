"""Sequential generation: latent -> deep inverse -> shallow inverse -> corrector.

Latents are drawn one frame at a time from the generator (``(B, S, D)`` per
frame), so streaming generation with the same generator sees the same noise.
Guidance evaluates the conditioner twice (with the class label and with the
null label) and extrapolates the affine parameters before they are used.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .denoiser import DenoiserNet, tweedie_correct
from .flow_blocks import AffineParams, FlowBlock, StepCache, invert_sequence
from .model import NULL_LABEL, GlobalLocalFlow, check_tokens
from .numerics import no_grad


def guided_log_params(mu_c, log_sigma_c, mu_u, log_sigma_u, w: float) -> AffineParams:
    """Guidance in (mu, log sigma) coordinates."""
    return AffineParams(mu_u + w * (mu_c - mu_u), log_sigma_u + w * (log_sigma_c - log_sigma_u))


def guided_params(mu_c, sigma_c, mu_u, sigma_u, w: float) -> tuple[np.ndarray, np.ndarray]:
    """Extrapolate from unconditional towards conditional parameters by ``w``.

    ``mu = mu_u + w (mu_c - mu_u)`` and ``log sigma = log sigma_u + w (log sigma_c - log sigma_u)``,
    so ``w = 1`` gives the conditional pair and ``w = 0`` the unconditional one.
    """
    sigma_c = np.asarray(sigma_c, dtype=np.float64)
    sigma_u = np.asarray(sigma_u, dtype=np.float64)
    if np.any(sigma_c <= 0) or np.any(sigma_u <= 0):
        raise ValueError("sigma inputs must be positive")
    if w < 0:
        raise ValueError("guidance weight must be non-negative")
    if w == 1:
        return np.asarray(mu_c, dtype=np.float64), sigma_c
    if w == 0:
        return np.asarray(mu_u, dtype=np.float64), sigma_u
    mu, log_sigma = guided_log_params(np.asarray(mu_c), np.log(sigma_c), np.asarray(mu_u), np.log(sigma_u), w)
    return mu, np.exp(log_sigma)


@dataclass(frozen=True)
class GuidanceSpec:
    weight: float = 1.0
    uncond_label: int = NULL_LABEL
    shallow: bool = False  # also guide the shallow blocks

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("guidance weight must be non-negative")


class GuidedCache:
    """Two caches (conditional, unconditional) advanced in lockstep."""

    def __init__(self, cond: StepCache, uncond: StepCache, weight: float):
        self.cond, self.uncond, self.weight = cond, uncond, weight

    @property
    def batch(self) -> int:
        return self.cond.batch

    @property
    def n_values(self) -> int:
        return self.cond.n_values

    @property
    def passes(self) -> int:
        return self.cond.passes

    @property
    def peak_positions(self) -> int:
        return self.cond.peak_positions

    @property
    def kv(self):
        return self.cond.kv

    def run(self, probe: np.ndarray | None = None) -> AffineParams:
        c = self.cond.run(probe)
        u = self.uncond.run(probe)
        if self.weight == 1:
            return c
        return guided_log_params(c.mu, c.log_sigma, u.mu, u.log_sigma, self.weight)

    def push(self, values: np.ndarray) -> None:
        self.cond.push(values)
        self.uncond.push(values)

    def flush(self) -> None:
        self.cond.flush()
        self.uncond.flush()

    def truncate(self, n_values: int) -> None:
        self.cond.truncate(n_values)
        self.uncond.truncate(n_values)

    def copy(self) -> GuidedCache:
        return GuidedCache(self.cond.copy(), self.uncond.copy(), self.weight)


Source = StepCache | GuidedCache


def _labels(labels, batch: int | None = None) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if batch is not None and labels.size == 1 and batch > 1:
        labels = np.repeat(labels, batch)
    return labels


def cond_vectors(flow: GlobalLocalFlow, labels) -> np.ndarray:
    with no_grad():
        return flow.cond(_labels(labels)).data


def block_source(
    flow: GlobalLocalFlow, block: FlowBlock, labels, guidance: GuidanceSpec | None, n_frames: int = 1
) -> Source:
    """Fresh decoding cache for ``block``, guided when ``guidance`` is given."""
    labels = _labels(labels)
    cache = block.start(cond_vectors(flow, labels), n_frames)
    if guidance is None:
        return cache
    uncond = block.start(cond_vectors(flow, np.full_like(labels, guidance.uncond_label)), n_frames)
    return GuidedCache(cache, uncond, guidance.weight)


def deep_source(flow: GlobalLocalFlow, labels, guidance: GuidanceSpec | None = None) -> Source:
    return block_source(flow, flow.deep, labels, guidance)


def shallow_inverse(flow: GlobalLocalFlow, u: np.ndarray, labels, guidance: GuidanceSpec | None = None) -> np.ndarray:
    """Invert the shallow stack on (B, N, S, D); every frame independently."""
    g = guidance if guidance is not None and guidance.shallow else None
    x = np.asarray(u, dtype=np.float64)
    n_frames = x.shape[1]
    for block in reversed(flow.shallow):
        source = block_source(flow, block, labels, g, n_frames)
        x = block.from_seq(invert_sequence(source, block.to_seq(x)), n_frames)
    return x


def shallow_encode(flow: GlobalLocalFlow, x: np.ndarray, labels) -> np.ndarray:
    """Shallow stack forward (data -> u)."""
    with no_grad():
        u, _ = flow.shallow_forward(flow._input(x), flow.cond(_labels(labels, x.shape[0])))
    return u.data


def _encode_prefix(flow: GlobalLocalFlow, x_prefix, labels, guidance: GuidanceSpec | None) -> tuple[Source, np.ndarray]:
    x_prefix = check_tokens(x_prefix, flow.config.channels, flow.config.frame_size)
    b, n0, s, d = x_prefix.shape
    if n0 > flow.config.n_frames:
        raise ValueError(f"prefix of {n0} frames exceeds the model horizon {flow.config.n_frames}")
    labels = _labels(labels, b)
    u = shallow_encode(flow, x_prefix, labels)
    cache = deep_source(flow, labels, guidance)
    cache.push(u.reshape(b, n0 * s, d))
    if n0 < flow.config.n_frames:  # a full horizon has nothing left to condition
        cache.flush()
    return cache, u


def prefix_encode(flow: GlobalLocalFlow, x_prefix, labels, guidance: GuidanceSpec | None = None) -> Source:
    """Encode observed frames and commit them as context for continued generation."""
    return _encode_prefix(flow, x_prefix, labels, guidance)[0]


class Sample(NamedTuple):
    x: np.ndarray  # output frames (corrected when a denoiser is given)
    u: np.ndarray  # deep-block outputs
    z: np.ndarray  # latents used
    passes: int  # deep conditioner passes


def draw_latents(rng: np.random.Generator, batch: int, n_frames: int, frame_size: int, channels: int, temperature: float = 1.0):
    """Latents frame by frame, in the same order streaming generation draws them."""
    frames = [rng.standard_normal((batch, frame_size, channels)) for _ in range(n_frames)]
    z = np.stack(frames, axis=1) if frames else np.zeros((batch, 0, frame_size, channels))
    return z * temperature if temperature != 1.0 else z


def sample_sequential(
    flow: GlobalLocalFlow,
    labels,
    rng: np.random.Generator | None = None,
    n_frames: int | None = None,
    guidance: GuidanceSpec | None = None,
    denoiser: DenoiserNet | None = None,
    sigma_test: float = 0.1,
    temperature: float = 1.0,
    z: np.ndarray | None = None,
    prefix: np.ndarray | None = None,
) -> Sample:
    """Generate sequences position by position with an incremental cache.

    ``prefix`` (B, n0, S, D) is encoded and kept; frames n0.. are generated.
    ``z`` (B, N, S, D) overrides the drawn latents (frames before n0 are ignored).
    The corrector is applied once over the generated frames when ``denoiser`` is set.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    c = flow.config
    n_frames = c.n_frames if n_frames is None else n_frames
    if z is not None:
        z = check_tokens(z, c.channels, c.frame_size)
        n_frames = z.shape[1]
    if not 1 <= n_frames <= c.n_frames:
        raise ValueError(f"n_frames must be in [1, {c.n_frames}]; use streaming for longer sequences")
    labels = _labels(labels, None if z is None else z.shape[0])
    if prefix is not None:
        labels = _labels(labels, np.shape(prefix)[0])
    batch = labels.size
    n0 = 0
    if prefix is not None:
        prefix = check_tokens(prefix, c.channels, c.frame_size)
        n0 = prefix.shape[1]
        if n0 > n_frames:
            raise ValueError("prefix is longer than the requested sequence")
        cache, u_prefix = _encode_prefix(flow, prefix, labels, guidance)
    else:
        cache, u_prefix = deep_source(flow, labels, guidance), None
    start_passes = cache.passes
    if z is None:
        if rng is None:
            raise ValueError("either rng or z is required")
        z_new = draw_latents(rng, batch, n_frames - n0, c.frame_size, c.channels, temperature)
    else:
        if z.shape[0] != batch:
            raise ValueError("latent batch does not match labels")
        z_new = z[:, n0:]
    s, d = c.frame_size, c.channels
    g = n_frames - n0
    u_new = invert_sequence(cache, z_new.reshape(batch, g * s, d)).reshape(batch, g, s, d)
    x_new = shallow_inverse(flow, u_new, labels, guidance) if g else u_new
    x = x_new if prefix is None else np.concatenate([prefix, x_new], axis=1)
    if denoiser is not None and g:
        corrected = tweedie_correct(x, denoiser, sigma_test, labels)
        x = np.concatenate([x[:, :n0], corrected[:, n0:]], axis=1)
    u = u_new if prefix is None else np.concatenate([u_prefix, u_new], axis=1)
    if prefix is not None:
        z_prefix = np.zeros((batch, n0, s, d)) if z is None else z[:, :n0]
        z_new = np.concatenate([z_prefix, z_new], axis=1)
    return Sample(x, u, z_new, cache.passes - start_passes)
