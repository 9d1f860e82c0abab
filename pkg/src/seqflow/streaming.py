"""Frame-by-frame generation beyond the trained horizon.

Each frame: draw ``z_t``, invert the deep block on top of the current cache,
invert the shallow stack, then re-encode the frame through the shallow stack
and replace the frame's cache entries with the re-encoded latents. When the
cache already holds ``W`` frames it is rebuilt from the last ``delta`` frames
before the next frame is generated, so the conditioner never sees more than
``W * S`` positions and memory does not grow with the stream length.

The corrector looks one frame ahead, so frame t is corrected and emitted once
frame t + 1 exists; the final frame is corrected without look-ahead.
"""

from __future__ import annotations

import queue
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .denoiser import DenoiserNet
from .model import GlobalLocalFlow
from .sampler import GuidanceSpec, Source, _labels, deep_source, shallow_encode, shallow_inverse
from .flow_blocks import invert_sequence

Sink = Callable[[int, np.ndarray], None]


class StreamSinkError(RuntimeError):
    def __init__(self, frame_index: int, cause: BaseException):
        super().__init__(f"sink failed at frame {frame_index}: {cause!r}")
        self.frame_index = frame_index


@dataclass
class StreamState:
    """Latent window and deep cache of a running stream."""

    window: int
    delta: int
    buffer: deque = field(default_factory=deque)  # û frames (B, S, D), at most ``window``
    cache: Source | None = None
    frames_in_cache: int = 0
    emitted: int = 0
    rebuilds: int = 0
    passes: int = 0  # deep passes of discarded caches
    peak_positions: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 1 <= self.delta <= self.window:
            raise ValueError("delta must be in [1, window]")
        self.buffer = deque(self.buffer, maxlen=self.window)

    def total_passes(self) -> int:
        return self.passes + (self.cache.passes if self.cache is not None else 0)

    def total_peak(self) -> int:
        live = self.cache.peak_positions if self.cache is not None else 0
        return max(self.peak_positions, live)


def rebuild_cache(flow: GlobalLocalFlow, frames: list[np.ndarray] | np.ndarray, labels, guidance: GuidanceSpec | None = None) -> Source:
    """Fresh deep cache from retained u-frames with one forward pass."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[None]
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise ValueError("rebuild_cache needs at least one frame shaped (delta, B, S, D)")
    delta, b, s, d = frames.shape
    cache = deep_source(flow, _labels(labels, b), guidance)
    cache.push(np.transpose(frames, (1, 0, 2, 3)).reshape(b, delta * s, d))
    cache.flush()
    return cache


def _rebuild(flow, state: StreamState, labels, guidance) -> None:
    if state.cache is not None:
        state.passes += state.cache.passes
        state.peak_positions = max(state.peak_positions, state.cache.peak_positions)
    keep = list(state.buffer)[-state.delta :]
    state.cache = rebuild_cache(flow, keep, labels, guidance)
    state.frames_in_cache = len(keep)
    state.rebuilds += 1


def _correct(denoiser: DenoiserNet | None, frames: list[np.ndarray], index: int, window: int, labels, sigma_test: float):
    """Corrected frame ``index`` using raw frames up to ``index + 1`` (when present)."""
    if denoiser is None:
        return frames[index]
    last = min(index + 1, len(frames) - 1)
    first = max(0, last - window + 1)
    x = np.stack(frames[first : last + 1], axis=1)
    score = denoiser.score(x, labels)
    return frames[index] + sigma_test * score[:, index - first]


def stream_generate(
    flow: GlobalLocalFlow,
    total_frames: int,
    window: int,
    labels,
    rng: np.random.Generator,
    sink: Sink,
    denoiser: DenoiserNet | None = None,
    sigma_test: float = 0.1,
    delta: int | None = None,
    guidance: GuidanceSpec | None = None,
    temperature: float = 1.0,
    reencode: bool = True,
    pipelined: bool = False,
) -> StreamState:
    """Generate ``total_frames`` frames, calling ``sink(t, frame)`` with (B, S, D) frames in order.

    ``window`` (frames) bounds the deep context and is clipped to the model
    horizon; ``delta`` (default ``window // 2``, at least 1, at most the
    horizon minus one) frames are kept on each rebuild. ``pipelined`` runs
    correction and emission on a worker thread; the emitted values are
    identical to the serial schedule.
    """
    c = flow.config
    if total_frames < 1:
        raise ValueError("total_frames must be >= 1")
    if window < 1:
        raise ValueError("window must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    w_ctx = min(window, c.n_frames)
    delta = max(1, w_ctx // 2) if delta is None else min(delta, w_ctx)
    # the rebuilt cache must leave room for the next frame
    delta = max(1, min(delta, c.n_frames - 1))
    labels = _labels(labels)
    batch, s, d = labels.size, c.frame_size, c.channels
    state = StreamState(w_ctx, delta)
    state.cache = deep_source(flow, labels, guidance)
    den_window = min(window, c.n_frames)
    raw: deque = deque(maxlen=den_window + 1)  # uncorrected frames awaiting or feeding the corrector

    def emit(t: int, frame: np.ndarray) -> None:
        try:
            sink(t, frame)
        except Exception as err:  # noqa: BLE001 - surfaced with the frame index
            raise StreamSinkError(t, err) from err
        state.emitted += 1

    def finish(t: int, frames: list[np.ndarray], local: int) -> None:
        emit(t, _correct(denoiser, frames, local, den_window, labels, sigma_test))

    jobs: queue.Queue | None = None
    worker_error: list[BaseException] = []
    if pipelined:
        jobs = queue.Queue(maxsize=2)

        def work():
            while True:
                job = jobs.get()
                if job is None:
                    return
                if worker_error:
                    continue
                try:
                    finish(*job)
                except BaseException as err:  # noqa: BLE001 - re-raised on the main thread
                    worker_error.append(err)

        thread = threading.Thread(target=work, daemon=True)
        thread.start()

    def dispatch(t: int, frames: list[np.ndarray], local: int) -> None:
        if jobs is None:
            finish(t, frames, local)
        else:
            if worker_error:
                raise worker_error[0]
            jobs.put((t, frames, local))

    try:
        for t in range(total_frames):
            if state.frames_in_cache >= w_ctx:
                _rebuild(flow, state, labels, guidance)
            z_t = rng.standard_normal((batch, s, d))
            if temperature != 1.0:
                z_t = z_t * temperature
            cache = state.cache
            start = cache.n_values
            u_t = invert_sequence(cache, z_t)
            x_t = shallow_inverse(flow, u_t[:, None], labels, guidance)[:, 0]
            if reencode:
                u_hat = shallow_encode(flow, x_t[:, None], labels)[:, 0]
                cache.truncate(start)
                cache.push(u_hat)
            else:
                u_hat = u_t
            state.buffer.append(u_hat)
            state.frames_in_cache += 1
            raw.append(x_t)
            if t >= 1:
                frames = list(raw)
                dispatch(t - 1, frames, len(frames) - 2)
        frames = list(raw)
        dispatch(total_frames - 1, frames, len(frames) - 1)
    finally:
        if jobs is not None:
            jobs.put(None)
            thread.join()
    if worker_error:
        raise worker_error[0]
    state.peak_positions = state.total_peak()
    return state
