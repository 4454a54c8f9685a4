#!/usr/bin/env python3
"""Emulated speedup and FPS tables: native device/edge/cloud vs offload from the device.

Every timing is scaled by --scale. Offload runs tune the link so each cycle
spends the destination's per-frame transfer overhead on communication, and the
host charges --host-other-s of synthetic work per frame.

    python scripts/reproduce_tables.py --out results/
"""
import argparse
from pathlib import Path

from accelfwd.harness.runner import RunConfig, check_invariants, emit_report, run
from accelfwd.harness.workload import Workload
from accelfwd.profiler import speedup

# per-frame transfer overhead from the host to each destination, seconds at scale 1
TRANSFER_OVERHEAD_S = {"edge": 0.24, "cloud": 0.05}

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--scale", type=float, default=0.01)
parser.add_argument("--width", type=int, default=66)
parser.add_argument("--height", type=int, default=37)
parser.add_argument("--batches", type=int, nargs="+", default=[64, 128, 256])
parser.add_argument("--video-frames", type=int, default=204)
parser.add_argument("--host-other-s", type=float, default=0.18, help="host work per offloaded frame at scale 1")
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out", type=Path, default=None)
args = parser.parse_args()

workloads = [Workload("images", n, args.width, args.height, args.seed + n) for n in args.batches]
workloads.append(Workload("video", args.video_frames, args.width, args.height, args.seed))

speed_rows, fps_rows, problems = [], {}, []
for w in workloads:
    name = f"{w.count} images" if w.kind == "images" else "video"
    records = {}
    for preset in ("device", "edge", "cloud"):
        records[preset] = run(RunConfig(w, "native", preset, args.scale, label=f"native-{preset}-{w.kind}{w.count}"))
    for dest in ("edge", "cloud"):
        records[f"to-{dest}"] = run(RunConfig(
            w, "offload", dest, args.scale, host_other_s=args.host_other_s * args.scale,
            tune_comm_s=TRANSFER_OVERHEAD_S[dest] * args.scale, label=f"offload-{dest}-{w.kind}{w.count}"))
    for r in records.values():
        problems += [f"{r.label}: {p}" for p in check_invariants(r)]
        if args.out:
            emit_report(r, args.out, records["device"] if r.mode == "offload" else None)
    base = records["device"].processing_s
    speed_rows.append((name, *(float(speedup(base, records[k].processing_s)) for k in ("to-edge", "to-cloud"))))
    fps_rows.setdefault(w.kind, {k: r.fps() for k, r in records.items()})

lines = [f"scale_factor: {args.scale!r}, frames {args.width}x{args.height}", "",
         "| test | device-to-edge | device-to-cloud |", "|---|---|---|"]
lines += [f"| {n} | {e:.2f}x | {c:.2f}x |" for n, e, c in speed_rows]
lines += ["", "| test | device | edge | cloud | to edge | to cloud |", "|---|---|---|---|---|---|"]
for kind, f in fps_rows.items():
    lines.append(f"| {kind} | " + " | ".join(f"{f[k]:.1f}" for k in ("device", "edge", "cloud", "to-edge", "to-cloud")) + " |")
text = "\n".join(lines) + "\n"
print(text, end="")
if args.out:
    (args.out / "tables.md").write_text(text)
for p in problems:
    print("INVARIANT VIOLATED:", p)
raise SystemExit(1 if problems else 0)
