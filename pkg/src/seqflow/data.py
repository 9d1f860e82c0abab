"""Synthetic moving-pattern sequences and their binary file format.

Three motion classes on a ``grid x grid`` frame with ``channels`` values per cell:

* ``translate``: a random pattern rolled circularly by an integer velocity
  every frame, so frame t+1 is exactly frame t shifted (before noise).
* ``bounce``: a Gaussian blob moving with constant velocity and reflecting at
  the frame border, with per-channel amplitudes.
* ``rotate-phase``: a plane wave per channel whose phase advances each frame.

File layout (little-endian): ``b"SFDV"``, u32 version, u32 frames, u32 positions,
u32 channels, u32 count, u64 seed, ``count`` u8 class labels, then the float32
frames as (count, frames, positions, channels).
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

DATA_MAGIC = b"SFDV"
DATA_VERSION = 1
MOTION_CLASSES = ("translate", "bounce", "rotate-phase")
VALUE_BOUND = 3.0
_HEAD = struct.Struct("<4sIIIIIQ")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticVideoSpec:
    n_frames: int = 8
    grid: int = 4
    channels: int = 4
    count: int = 1000
    max_velocity: int = 1
    noise_floor: float = 0.05
    seed: int = 0
    motion_class: str = "mixed"  # one of MOTION_CLASSES or "mixed"

    def __post_init__(self):
        if min(self.n_frames, self.grid, self.channels, self.count) < 1:
            raise ValueError(f"invalid dataset geometry in {self}")
        if self.max_velocity < 1:
            raise ValueError("max_velocity must be >= 1")
        if self.noise_floor < 0:
            raise ValueError("noise_floor must be non-negative")
        if self.motion_class != "mixed" and self.motion_class not in MOTION_CLASSES:
            raise ValueError(f"unknown motion class {self.motion_class!r}")

    @property
    def frame_size(self) -> int:
        return self.grid * self.grid

    def header_bytes(self) -> int:
        return _HEAD.size + self.count

    def to_dict(self) -> dict:
        return asdict(self)


def _velocity(rng: np.random.Generator, vmax: int) -> np.ndarray:
    while True:
        v = rng.integers(-vmax, vmax + 1, size=2)
        if v.any():
            return v


def translate_clean(pattern: np.ndarray, velocity: np.ndarray, n_frames: int) -> np.ndarray:
    """Frames (N, grid, grid, C): frame t is ``pattern`` rolled by ``t * velocity``."""
    return np.stack([np.roll(pattern, tuple(t * velocity), axis=(0, 1)) for t in range(n_frames)])


def _pattern(rng: np.random.Generator, grid: int, channels: int) -> np.ndarray:
    raw = rng.standard_normal((grid, grid, channels))
    # light circular smoothing for spatial structure
    smooth = (raw + np.roll(raw, 1, 0) + np.roll(raw, 1, 1)) / np.sqrt(3.0)
    return smooth


def _bounce(rng: np.random.Generator, spec: SyntheticVideoSpec) -> np.ndarray:
    g = spec.grid
    pos = rng.uniform(0, g - 1, size=2)
    vel = rng.uniform(0.4, 1.0, size=2) * rng.choice([-1.0, 1.0], size=2) * spec.max_velocity
    amp = rng.uniform(1.0, 2.0, size=spec.channels) * rng.choice([-1.0, 1.0], size=spec.channels)
    width = rng.uniform(0.7, 1.2)
    ii, jj = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    frames = []
    for _ in range(spec.n_frames):
        d2 = (ii - pos[0]) ** 2 + (jj - pos[1]) ** 2
        frames.append(np.exp(-d2 / (2 * width**2))[..., None] * amp)
        pos = pos + vel
        for k in range(2):
            if pos[k] < 0:
                pos[k], vel[k] = -pos[k], -vel[k]
            elif pos[k] > g - 1:
                pos[k], vel[k] = 2 * (g - 1) - pos[k], -vel[k]
    return np.stack(frames)


def _rotate_phase(rng: np.random.Generator, spec: SyntheticVideoSpec) -> np.ndarray:
    g = spec.grid
    ii, jj = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    k = rng.uniform(-1.2, 1.2, size=(spec.channels, 2))
    phase = rng.uniform(0, 2 * np.pi, size=spec.channels)
    omega = rng.uniform(0.3, 0.9) * rng.choice([-1.0, 1.0])
    amp = rng.uniform(1.0, 1.8, size=spec.channels)
    t = np.arange(spec.n_frames)[:, None, None, None]
    arg = k[:, 0] * ii[..., None] + k[:, 1] * jj[..., None] + phase
    return amp * np.cos(arg[None] + omega * t)


def generate_samples(spec: SyntheticVideoSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(frames, labels)``: float32 (count, N, S, C) and uint8 (count,)."""
    out = np.empty((spec.count, spec.n_frames, spec.frame_size, spec.channels), dtype=np.float32)
    labels = np.empty(spec.count, dtype=np.uint8)
    for i in range(spec.count):
        rng = np.random.default_rng([spec.seed, i])
        if spec.motion_class == "mixed":
            label = int(rng.integers(len(MOTION_CLASSES)))
        else:
            label = MOTION_CLASSES.index(spec.motion_class)
        if label == 0:
            clean = translate_clean(_pattern(rng, spec.grid, spec.channels), _velocity(rng, spec.max_velocity), spec.n_frames)
        elif label == 1:
            clean = _bounce(rng, spec)
        else:
            clean = _rotate_phase(rng, spec)
        noisy = clean + spec.noise_floor * rng.standard_normal(clean.shape)
        out[i] = np.clip(noisy, -VALUE_BOUND, VALUE_BOUND).reshape(spec.n_frames, spec.frame_size, spec.channels)
        labels[i] = label
    return out, labels


def dataset_bytes(frames: np.ndarray, labels: np.ndarray, seed: int = 0) -> bytes:
    frames = np.asarray(frames)
    labels = np.asarray(labels)
    if frames.ndim != 4 or labels.shape != (frames.shape[0],):
        raise ValueError("frames must be (count, N, S, D) with one label per sample")
    count, n, s, d = frames.shape
    head = _HEAD.pack(DATA_MAGIC, DATA_VERSION, n, s, d, count, seed)
    return head + labels.astype(np.uint8).tobytes() + np.ascontiguousarray(frames, dtype="<f4").tobytes()


def write_dataset(path: str | Path, frames: np.ndarray, labels: np.ndarray, seed: int = 0) -> None:
    Path(path).write_bytes(dataset_bytes(frames, labels, seed))


def generate_dataset(spec: SyntheticVideoSpec, path: str | Path) -> Path:
    frames, labels = generate_samples(spec)
    write_dataset(path, frames, labels, spec.seed)
    return Path(path)


@dataclass(frozen=True)
class Dataset:
    frames: np.ndarray  # float32 (count, N, S, D)
    labels: np.ndarray  # uint8 (count,)
    seed: int

    def __len__(self) -> int:
        return self.frames.shape[0]


def read_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise DatasetFormatError(f"{path}: file too short for a dataset header")
    magic, version, n, s, d, count, seed = _HEAD.unpack_from(raw)
    if magic != DATA_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != DATA_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {version}")
    expected = _HEAD.size + count + count * n * s * d * 4
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: size {len(raw)} does not match header (expected {expected})")
    labels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=_HEAD.size).copy()
    frames = np.frombuffer(raw, dtype="<f4", offset=_HEAD.size + count).reshape(count, n, s, d).astype(np.float32)
    return Dataset(frames, labels, seed)


def split_heldout(count: int, seed: int, fraction: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train / held-out index partition."""
    perm = np.random.default_rng([seed, 4]).permutation(count)
    n_held = max(1, int(round(count * fraction)))
    return np.sort(perm[n_held:]), np.sort(perm[:n_held])
