"""Per-cycle timing records, GPU/Communication/Other breakdowns and report writers."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path


class RunClosed(RuntimeError):
    pass


class RunOpen(RuntimeError):
    pass


class NonPositiveTime(ValueError):
    pass


@dataclass(frozen=True)
class CycleTiming:
    """Wall-clock decomposition of one execution cycle."""

    communication_s: float = 0.0
    gpu_s: float = 0.0
    other_s: float = 0.0
    bytes_sent: int = 0
    bytes_received: int = 0

    def __post_init__(self):
        for name in ("communication_s", "gpu_s", "other_s", "bytes_sent", "bytes_received"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)!r}")

    @property
    def total_s(self) -> float:
        return self.communication_s + self.gpu_s + self.other_s

    @property
    def bytes_total(self) -> int:
        return self.bytes_sent + self.bytes_received


@dataclass(frozen=True)
class Breakdown:
    gpu_s: float
    communication_s: float
    other_s: float
    setup_s: float
    total_s: float

    @property
    def accounted_s(self) -> float:
        return self.gpu_s + self.communication_s + self.other_s + self.setup_s

    def relative_gap(self) -> float:
        """|accounted - total| / total; 0 for an empty run."""
        if self.total_s == 0:
            return 0.0 if self.accounted_s == 0 else float("inf")
        return abs(self.accounted_s - self.total_s) / self.total_s


@dataclass
class RunRecord:
    label: str
    mode: str  # "native" | "offload"
    host: str = "host"
    destination: str = ""
    scale_factor: float = 1.0
    cycles: list[CycleTiming] = field(default_factory=list)
    setup_s: float = 0.0
    total_wall_s: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._sums = [0.0, 0.0, 0.0]
        for c in self.cycles:
            self._accumulate(c)

    def _accumulate(self, c: CycleTiming) -> None:
        self._sums[0] += c.gpu_s
        self._sums[1] += c.communication_s
        self._sums[2] += c.other_s

    @property
    def finalized(self) -> bool:
        return self.total_wall_s is not None

    @property
    def frame_count(self) -> int:
        return len(self.cycles)

    def record(self, cycle: CycleTiming) -> None:
        if self.finalized:
            raise RunClosed(f"run {self.label!r} is finalized")
        self.cycles.append(cycle)
        self._accumulate(cycle)

    def finalize(self, total_wall_s: float, setup_s: float | None = None) -> "RunRecord":
        if self.finalized:
            raise RunClosed(f"run {self.label!r} is already finalized")
        if setup_s is not None:
            self.setup_s = setup_s
        self.total_wall_s = total_wall_s
        return self

    def breakdown(self) -> Breakdown:
        if not self.finalized:
            raise RunOpen(f"run {self.label!r} is not finalized")
        gpu, comm, other = self._sums
        return Breakdown(gpu, comm, other, self.setup_s, self.total_wall_s)

    @property
    def processing_s(self) -> float:
        """Wall time spent on frames, excluding one-off model setup."""
        if not self.finalized:
            raise RunOpen(f"run {self.label!r} is not finalized")
        return self.total_wall_s - self.setup_s

    def fps(self) -> float:
        return fps(self.frame_count, self.processing_s)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cycles"] = [asdict(c) for c in self.cycles]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["cycles"] = [CycleTiming(**c) for c in d.get("cycles", [])]
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def speedup(native_total_s: float, offload_total_s: float) -> Fraction:
    """native / offload as an exact rational, so speedup(a, b) * speedup(b, a) == 1."""
    if native_total_s <= 0 or offload_total_s <= 0:
        raise NonPositiveTime(f"times must be > 0: {native_total_s!r}, {offload_total_s!r}")
    return Fraction(native_total_s) / Fraction(offload_total_s)


def fps(frame_count: int, wall_s: float) -> float:
    if wall_s <= 0:
        raise NonPositiveTime(f"wall time must be > 0, got {wall_s!r}")
    return frame_count / wall_s


# ---------------------------------------------------------------------------
# Reports

CSV_COLUMNS = ("index", "gpu_s", "communication_s", "other_s", "bytes_sent", "bytes_received")


def cycles_csv(record: RunRecord) -> str:
    buf = io.StringIO()
    buf.write(f"# run={record.label} mode={record.mode} scale_factor={record.scale_factor!r}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for i, c in enumerate(record.cycles):
        w.writerow([i, f"{c.gpu_s:.9f}", f"{c.communication_s:.9f}", f"{c.other_s:.9f}",
                    c.bytes_sent, c.bytes_received])
    return buf.getvalue()


def _row(r: RunRecord, baseline: RunRecord | None) -> str:
    b = r.breakdown()
    n = max(r.frame_count, 1)
    rate = f"{r.fps():.3f}" if r.processing_s > 0 else "-"
    cells = [r.label, r.mode, r.destination or "-", str(r.frame_count),
             f"{b.total_s:.4f}", f"{b.setup_s:.4f}",
             f"{b.gpu_s / n:.6f}", f"{b.communication_s / n:.6f}", f"{b.other_s / n:.6f}", rate]
    if baseline is not None:
        cells.append(f"{float(speedup(baseline.processing_s, r.processing_s)):.2f}x")
    return "| " + " | ".join(cells) + " |"


def summary_markdown(record: RunRecord, baseline: RunRecord | None = None) -> str:
    """Markdown table: per-frame breakdown, FPS and (with a baseline) speedup."""
    head = ["run", "mode", "destination", "frames", "total_s", "setup_s",
            "gpu_s/frame", "comm_s/frame", "other_s/frame", "fps"]
    if baseline is not None:
        head.append(f"speedup vs {baseline.label}")
    rows = [r for r in (baseline, record) if r is not None]
    lines = [
        f"scale_factor: {record.scale_factor!r}",
        "",
        "| " + " | ".join(head) + " |",
        "|" + "---|" * len(head),
    ]
    lines += [_row(r, baseline) for r in rows]
    return "\n".join(lines) + "\n"
