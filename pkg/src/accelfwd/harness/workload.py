"""Seeded synthetic frame workloads.

Frame ``i`` of a workload is filled by numpy's PCG64 generator seeded with
``[seed, i]`` (``np.random.default_rng([seed, i]).random(E, dtype=float32)``),
so values lie in [0, 1) and any frame can be regenerated on its own.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..backend import Frame
from ..wire import Dims, ModelDescriptor


@dataclass(frozen=True)
class Workload:
    kind: str = "images"  # "images" | "video"
    count: int = 64
    width: int = 656
    height: int = 368
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("images", "video"):
            raise ValueError(f"kind must be 'images' or 'video', got {self.kind!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        Dims(1, 3, self.height, self.width)

    @property
    def dims(self) -> Dims:
        return Dims(1, 3, self.height, self.width)


def gen_frame(workload: Workload, index: int) -> Frame:
    dims = workload.dims
    rng = np.random.default_rng([workload.seed, index])
    return Frame(dims, rng.random(dims.elem_count, dtype=np.float32))


def gen_frames(workload: Workload) -> list[Frame]:
    return [gen_frame(workload, i) for i in range(workload.count)]


def save_workload(workload: Workload, path) -> Path:
    path = Path(path)
    frames = np.stack([f.data.reshape(f.dims.shape[1:]) for f in gen_frames(workload)])
    with path.open("wb") as fh:
        np.savez(fh, frames=frames, **{k: np.asarray(v) for k, v in asdict(workload).items()})
    return path


def load_workload(path) -> tuple[Workload, np.ndarray]:
    with np.load(path) as z:
        w = Workload(str(z["kind"]), int(z["count"]), int(z["width"]), int(z["height"]), int(z["seed"]))
        return w, z["frames"]


def make_model(name: str = "mockpose", c: float = 3.368421, weights_bytes: int = 1 << 16,
               seed: int = 0) -> ModelDescriptor:
    """Deterministic synthetic model: a small text structure plus random weights."""
    structure = (f'name: "{name}"\n'
                 f'input: "image"\n'
                 f'layer {{ type: "SegmentMean" output_divisor: {c!r} }}\n').encode()
    weights = np.random.default_rng([seed, weights_bytes]).bytes(weights_bytes)
    return ModelDescriptor(name, structure, weights, c)
