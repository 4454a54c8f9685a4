"""Pluggable stand-in for the accelerator.

``MockPoseBackend`` is a deterministic reference network obeying the output-size
law ``K = round(E / c)``; ``DelayedBackend`` makes it look like a slower or faster
device; ``FifoBackend`` serializes callers the way a single physical GPU would.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .clock import now, sleep_until
from .wire import F32, Dims, InvalidModel, ModelDescriptor, output_count

__all__ = [
    "Frame", "Heatmap", "BackendProfile", "PRESETS", "preset_profile",
    "Backend", "MockPoseBackend", "DelayedBackend", "FifoBackend", "FifoLock",
    "mockpose_forward", "mockpose_means", "segment_starts", "wrap_delay", "make_backend",
    "UnknownModel", "DegenerateOutput", "InvalidModel",
]


class UnknownModel(LookupError):
    pass


class DegenerateOutput(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Frame:
    """Single-precision tensor flattened in (N, C, H, W) row-major order."""

    dims: Dims
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=F32).reshape(-1)
        if data.size != self.dims.elem_count:
            raise ValueError(f"frame has {data.size} values, dims {self.dims.shape} need "
                             f"{self.dims.elem_count}")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, arr) -> "Frame":
        arr = np.asarray(arr, dtype=F32)
        if arr.ndim != 4:
            raise ValueError(f"expected an (N, C, H, W) array, got shape {arr.shape}")
        return cls(Dims(*arr.shape), arr)

    @property
    def elem_count(self) -> int:
        return self.dims.elem_count

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())


@dataclass(frozen=True, eq=False)
class Heatmap:
    data: np.ndarray

    @property
    def elem_count(self) -> int:
        return int(self.data.size)

    def __eq__(self, other):
        if not isinstance(other, Heatmap):
            return NotImplemented
        a, b = self.data, other.data
        return a.shape == b.shape and np.array_equal(a.view(np.uint32), b.view(np.uint32))


# ---------------------------------------------------------------------------
# MockPose


def segment_starts(elem_count: int, k: int) -> np.ndarray:
    """Boundaries floor(j * E / K) for j = 0..K, computed in exact integer arithmetic."""
    return (np.arange(k + 1, dtype=np.int64) * elem_count) // k


def mockpose_means(x: np.ndarray, c: float) -> np.ndarray:
    """Segment means in double precision, before the final cast.

    Each segment is summed left to right starting from its first element.
    """
    x = np.asarray(x).reshape(-1)
    e = x.size
    k = output_count(e, c)
    if k < 1 or k > e:
        raise DegenerateOutput(f"E={e}, c={c} gives {k} output elements; need 1 <= K <= E")
    starts = segment_starts(e, k)
    first, lengths = starts[:-1], np.diff(starts)
    x64 = x.astype(np.float64)
    acc = x64[first]  # fancy indexing copies
    longest = int(lengths.max())
    if longest > 1 and int(lengths.min()) == longest:
        for p in range(1, longest):
            acc += x64[first + p]
    else:
        for p in range(1, longest):
            live = lengths > p
            acc[live] += x64[first[live] + p]
    return acc / lengths


def mockpose_forward(frame: Frame, c: float) -> Heatmap:
    return Heatmap(mockpose_means(frame.data, c).astype(F32))


# ---------------------------------------------------------------------------
# Backends


class Backend(Protocol):
    def register_model(self, descriptor: ModelDescriptor) -> int: ...

    def forward(self, handle: int, frame: Frame) -> Heatmap: ...


class MockPoseBackend:
    """Model registry plus the reference forward pass. Handles are small ints."""

    def __init__(self):
        self._lock = threading.Lock()
        self._by_digest: dict[bytes, int] = {}
        self._models: list[ModelDescriptor] = []

    def register_model(self, descriptor: ModelDescriptor) -> int:
        if not descriptor.structure:
            raise InvalidModel(f"model {descriptor.name!r} has empty structure bytes")
        with self._lock:
            handle = self._by_digest.get(descriptor.digest)
            if handle is None:
                handle = len(self._models)
                self._models.append(descriptor)
                self._by_digest[descriptor.digest] = handle
            return handle

    def model(self, handle: int) -> ModelDescriptor:
        with self._lock:
            if not isinstance(handle, (int, np.integer)) or not 0 <= handle < len(self._models):
                raise UnknownModel(f"no model with handle {handle!r}")
            return self._models[handle]

    def forward(self, handle: int, frame: Frame) -> Heatmap:
        return mockpose_forward(frame, self.model(handle).c)


@dataclass(frozen=True)
class BackendProfile:
    per_frame_compute_s: float = 0.0
    model_load_s: float = 0.0
    label: str = "none"

    def __post_init__(self):
        for name in ("per_frame_compute_s", "model_load_s"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")

    def scaled(self, factor: float) -> "BackendProfile":
        return BackendProfile(self.per_frame_compute_s * factor, self.model_load_s * factor, self.label)


# per-frame seconds are 1/FPS of each node running natively (images, video);
# load seconds are the measured COCO model transfer times
PRESETS: dict[str, tuple[float, float, float]] = {
    "device": (2.0, 2.5, 6.43),
    "edge": (0.91, 1.43, 5.937),
    "cloud": (0.095, 0.111, 1.757),
    "none": (0.0, 0.0, 0.0),
}


def preset_profile(name: str, kind: str = "images", scale: float = 1.0) -> BackendProfile:
    try:
        images_s, video_s, load_s = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown backend preset {name!r}; choose from {sorted(PRESETS)}") from None
    if kind not in ("images", "video"):
        raise ValueError(f"kind must be 'images' or 'video', got {kind!r}")
    per_frame = images_s if kind == "images" else video_s
    return BackendProfile(per_frame, load_s, name).scaled(scale)


class DelayedBackend:
    """Emulates a device with a fixed per-frame time and a one-off model load time.

    The delay is a target wall time that includes the wrapped computation, so the
    emulated figure does not drift with the reference network's own cost.
    """

    def __init__(self, inner: Backend, profile: BackendProfile):
        self.inner = inner
        self.profile = profile
        self._loaded: set[bytes] = set()
        self._lock = threading.Lock()

    def register_model(self, descriptor: ModelDescriptor) -> int:
        start = now()
        handle = self.inner.register_model(descriptor)
        with self._lock:
            first = descriptor.digest not in self._loaded
            self._loaded.add(descriptor.digest)
        if first:
            sleep_until(start + self.profile.model_load_s)
        return handle

    def forward(self, handle: int, frame: Frame) -> Heatmap:
        deadline = now() + self.profile.per_frame_compute_s
        out = self.inner.forward(handle, frame)
        sleep_until(deadline)
        return out

    def __getattr__(self, name):
        return getattr(self.inner, name)


def wrap_delay(inner: Backend, profile: BackendProfile) -> DelayedBackend:
    return DelayedBackend(inner, profile)


class FifoLock:
    """Ticket lock: waiters are served strictly in arrival order."""

    def __init__(self):
        self._cond = threading.Condition()
        self._next = 0
        self._serving = 0

    def acquire(self) -> int:
        with self._cond:
            ticket = self._next
            self._next += 1
            while self._serving != ticket:
                self._cond.wait()
            return ticket

    def release(self) -> None:
        with self._cond:
            self._serving += 1
            self._cond.notify_all()


@dataclass(frozen=True)
class LogEntry:
    ticket: int
    op: str
    caller: str
    arrived: float
    started: float


class FifoBackend:
    """Admits one operation at a time, in arrival order, and logs the sequence."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self._fifo = FifoLock()
        self._log_lock = threading.Lock()
        self.log: list[LogEntry] = []

    def _run(self, op: str, fn, *args):
        arrived = now()
        ticket = self._fifo.acquire()
        try:
            entry = LogEntry(ticket, op, threading.current_thread().name, arrived, now())
            with self._log_lock:
                self.log.append(entry)
            return fn(*args)
        finally:
            self._fifo.release()

    def register_model(self, descriptor: ModelDescriptor) -> int:
        return self._run("register", self.inner.register_model, descriptor)

    def forward(self, handle: int, frame: Frame) -> Heatmap:
        return self._run("forward", self.inner.forward, handle, frame)

    def __getattr__(self, name):
        return getattr(self.inner, name)


def make_backend(preset: str = "none", kind: str = "images", scale: float = 1.0,
                 per_frame_override_s: float | None = None) -> FifoBackend:
    """Build the standard stack: FIFO admission over a delayed MockPose backend.

    ``per_frame_override_s`` replaces the preset's scaled per-frame time (absolute seconds).
    """
    profile = preset_profile(preset, kind, scale)
    if per_frame_override_s is not None:
        profile = BackendProfile(per_frame_override_s, profile.model_load_s, profile.label)
    return FifoBackend(DelayedBackend(MockPoseBackend(), profile))
