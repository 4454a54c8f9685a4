"""Native vs offloaded benchmark runs, invariant checks and report emission."""
from __future__ import annotations

import hashlib
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from ..backend import Heatmap, make_backend, mockpose_forward
from ..client import CYCLE_FRAMING_OVERHEAD, Accelerator, DispatchConfig, connect
from ..clock import now, precise_sleep
from ..profiler import CycleTiming, RunRecord, cycles_csv, summary_markdown
from ..server import Server, serve
from ..wire import Dims, transfer_size
from .link import EmulatedLink, LinkProfile, tune_link
from .workload import Workload, gen_frames, make_model

DECOMPOSITION_TOLERANCE = 0.02


@dataclass
class RunConfig:
    workload: Workload = field(default_factory=Workload)
    mode: str = "native"  # "native" | "offload"
    preset: str = "device"  # backend preset of whichever node executes forwards
    scale: float = 0.01
    compute_s: float | None = None  # absolute per-frame compute, overrides the preset
    host_other_s: float = 0.0  # absolute synthetic host work per frame
    link: LinkProfile = field(default_factory=LinkProfile)
    tune_comm_s: float | None = None  # calibrate link delay to this comm time per cycle
    tune_cycles: int = 20
    model_c: float = 3.368421
    model_weights_bytes: int = 1 << 16
    model_seed: int = 0
    endpoint: str | None = None  # None spawns a loopback server
    out_dir: Path | None = None
    label: str | None = None

    def __post_init__(self):
        if self.mode not in ("native", "offload"):
            raise ValueError(f"mode must be 'native' or 'offload', got {self.mode!r}")
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        if self.host_other_s < 0 or (self.compute_s is not None and self.compute_s < 0):
            raise ValueError("times must be >= 0")
        if self.mode == "native" and self.endpoint:
            raise ValueError("an endpoint only makes sense in offload mode")

    @property
    def name(self) -> str:
        w = self.workload
        return self.label or f"{self.mode}-{self.preset}-{w.kind}{w.count}"


def cpu_steal_s() -> float | None:
    """Cumulative hypervisor steal time from /proc/stat, None where unavailable."""
    try:
        with open("/proc/stat") as fh:
            fields = fh.readline().split()
        return int(fields[8]) / os.sysconf("SC_CLK_TCK")
    except (OSError, IndexError, ValueError):
        return None


class RunFailed(RuntimeError):
    def __init__(self, frame_index: int, cause: Exception):
        super().__init__(f"frame {frame_index}: {type(cause).__name__}: {cause}")
        self.frame_index = frame_index


def run(config: RunConfig, on_output: Callable[[int, Heatmap], None] | None = None) -> RunRecord:
    """Execute one workload and return its finalized record (reports written if out_dir)."""
    w = config.workload
    frames = gen_frames(w)
    model = make_model(c=config.model_c, weights_bytes=config.model_weights_bytes, seed=config.model_seed)
    outputs = hashlib.sha256()
    server: Server | None = None
    link = EmulatedLink(None, config.link)

    def wrap(transport):
        link.inner = transport
        return link

    if config.mode == "native":
        facade = Accelerator(DispatchConfig(mode="local", scale_factor=config.scale),
                             backend=make_backend(config.preset, w.kind, config.scale, config.compute_s))
        destination = config.preset
    else:
        endpoint = config.endpoint
        if endpoint is None:
            server = serve(backend=make_backend(config.preset, w.kind, config.scale, config.compute_s))
            endpoint = server.endpoint
        facade = Accelerator(DispatchConfig(mode="remote", endpoint=endpoint, scale_factor=config.scale),
                             wrap_transport=wrap)
        destination = f"{config.preset}@{endpoint}"

    record = RunRecord(config.name, config.mode, host="host", destination=destination,
                       scale_factor=config.scale)
    try:
        t0 = now()
        status = facade.load_model(model)
        setup_s = now() - t0
        calibration_s = 0.0
        if config.mode == "offload" and config.tune_comm_s is not None:
            c0 = now()
            requested = link.link
            link.link = LinkProfile()
            comm = [facade.forward(frames[i % len(frames)])[1].communication_s
                    for i in range(config.tune_cycles)]
            measured = sorted(comm)[len(comm) // 2]
            link.link = tune_link(config.tune_comm_s, measured, requested.label or "tuned")
            record.meta["tuned_one_way_delay_s"] = link.link.one_way_delay_s
            calibration_s = now() - c0

        steal0 = cpu_steal_s()
        loop_start = prev = now()
        for i, frame in enumerate(frames):
            try:
                heatmap, timing = facade.forward(frame)
            except Exception as exc:
                raise RunFailed(i, exc) from exc
            if config.host_other_s:
                precise_sleep(config.host_other_s)
            outputs.update(heatmap.data)  # contiguous float32, hashed in place
            if on_output is not None:
                on_output(i, heatmap)
            t = now()
            # charge everything the host did this iteration that was not GPU or wire to "other"
            other = max((t - prev) - timing.gpu_s - timing.communication_s, 0.0)
            record.record(CycleTiming(timing.communication_s, timing.gpu_s, other,
                                      timing.bytes_sent, timing.bytes_received))
            prev = t
        total = setup_s + (prev - loop_start)
        steal1 = cpu_steal_s()
    finally:
        facade.close()
        if server is not None:
            record.meta["model_uploads"] = server.store.uploads[model.digest]
            server.shutdown()

    record.meta.update({
        "workload": {"kind": w.kind, "count": w.count, "width": w.width, "height": w.height, "seed": w.seed},
        "model_c": model.c,
        "model_digest": model.digest.hex(),
        "model_status": status.outcome.value if status is not None else "local",
        "host_other_s": config.host_other_s,
        "link": {"one_way_delay_s": link.link.one_way_delay_s,
                 "bandwidth_bytes_per_s": link.link.bandwidth_bytes_per_s, "label": link.link.label},
        "calibration_s": calibration_s,
        "output_digest": outputs.hexdigest(),
        "spawned_server": server is not None,
        # vCPU time taken by the hypervisor during the frame loop; inflates wall time on shared hosts
        "cpu_steal_s": None if steal0 is None or steal1 is None else steal1 - steal0,
    })
    record.finalize(total, setup_s)
    if config.out_dir is not None:
        emit_report(record, config.out_dir)
    return record


def check_invariants(record: RunRecord) -> list[str]:
    """Violations of the run-level invariants; empty when the run is sound."""
    problems = []
    gap = record.breakdown().relative_gap()
    if gap > DECOMPOSITION_TOLERANCE:
        problems.append(f"breakdown misses total wall time by {gap:.2%}")
    if record.mode == "offload":
        wl = record.meta.get("workload", {})
        dims = Dims(1, 3, wl["height"], wl["width"])
        expected = transfer_size(dims, record.meta["model_c"]) + CYCLE_FRAMING_OVERHEAD
        bad = [i for i, c in enumerate(record.cycles) if c.bytes_total != expected]
        if bad:
            problems.append(f"{len(bad)} cycles moved a byte count other than {expected} (first: {bad[0]})")
        if record.meta.get("spawned_server") and record.meta.get("model_uploads") != 1:
            problems.append(f"model uploaded {record.meta.get('model_uploads')} times, expected once")
    return problems


def emit_report(record: RunRecord, out_dir, baseline: RunRecord | None = None,
                formats=("csv", "markdown", "json")) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    if "csv" in formats:
        p = out / f"{record.label}.cycles.csv"
        p.write_text(cycles_csv(record))
        paths.append(p)
    if "markdown" in formats:
        suffix = f".vs-{baseline.label}" if baseline is not None else ""
        p = out / f"{record.label}{suffix}.summary.md"
        p.write_text(summary_markdown(record, baseline))
        paths.append(p)
    if "json" in formats:
        paths.append(record.save(out / f"{record.label}.json"))
    return paths


# ---------------------------------------------------------------------------
# Multi-client stress


@dataclass
class StressResult:
    clients: int
    frames_per_client: int
    mismatches: int
    errors: list[str]
    fifo_ok: bool
    forwards_logged: int

    @property
    def ok(self) -> bool:
        return self.mismatches == 0 and not self.errors and self.fifo_ok


def run_stress(clients: int = 4, frames: int = 50, width: int = 64, height: int = 48,
               preset: str = "none", scale: float = 0.01, seed: int = 0) -> StressResult:
    """N independent clients, distinct models and frames, one shared server."""
    server = serve(backend=make_backend(preset, "images", scale))
    mismatches = [0] * clients
    errors: list[str] = []

    def client(k: int) -> None:
        model = make_model(f"client{k}", c=2.0 + 0.5 * k, weights_bytes=4096, seed=seed + k)
        workload = Workload("images", frames, width, height, seed=seed * 1000 + k)
        try:
            with connect(server.endpoint) as session:
                session.ensure_model(model)
                for frame in gen_frames(workload):
                    got, _ = session.forward(frame)
                    if got != mockpose_forward(frame, model.c):
                        mismatches[k] += 1
        except Exception as exc:  # reported, not raised: other clients keep going
            errors.append(f"client {k}: {type(exc).__name__}: {exc}")

    try:
        threads = [threading.Thread(target=client, args=(k,), name=f"client-{k}") for k in range(clients)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        server.shutdown()
    log = list(server.sequence_log)
    tickets = [e.ticket for e in log]
    fifo_ok = tickets == sorted(tickets) and tickets == list(range(tickets[0], tickets[0] + len(tickets))) \
        if tickets else True
    return StressResult(clients, frames, sum(mismatches), errors, fifo_ok,
                        sum(1 for e in log if e.op == "forward"))
