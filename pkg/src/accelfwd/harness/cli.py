"""``python -m accelfwd.harness {gen,run,compare,stress}``.

``run`` reads a flat ``key = value`` file (``--config``); keys match the long
flag names with underscores (``mode``, ``kind``, ``count``, ``width``, ``height``,
``seed``, ``preset``, ``scale``, ``compute_s``, ``host_other_s``, ``link_delay_s``,
``link_bandwidth``, ``link_preset``, ``tune_comm_s``, ``endpoint``, ``model_c``,
``model_weights_bytes``, ``label``, ``out``). ``ACCELFWD_MODE``,
``ACCELFWD_ENDPOINT`` and ``ACCELFWD_SCALE_FACTOR`` override the file; explicit
flags override both. Exit status is 1 when a run violates an invariant.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

from ..config import read_kv
from ..profiler import RunRecord, summary_markdown
from .link import LinkProfile, link_preset
from .runner import RunConfig, check_invariants, emit_report, run, run_stress
from .workload import Workload, save_workload

_RUN_KEYS = {
    "mode": str, "kind": str, "count": int, "width": int, "height": int, "seed": int,
    "preset": str, "scale": float, "compute_s": float, "host_other_s": float,
    "link_delay_s": float, "link_bandwidth": float, "link_preset": str, "tune_comm_s": float,
    "endpoint": str, "model_c": float, "model_weights_bytes": int, "label": str, "out": str,
}
_RUN_DEFAULTS = {
    "mode": "native", "kind": "images", "count": 64, "width": 656, "height": 368, "seed": 0,
    "preset": "device", "scale": 0.01, "host_other_s": 0.0, "link_delay_s": 0.0,
    "link_bandwidth": math.inf, "model_c": 3.368421, "model_weights_bytes": 1 << 16,
}
_ENV_KEYS = {"ACCELFWD_MODE": "mode", "ACCELFWD_ENDPOINT": "endpoint", "ACCELFWD_SCALE_FACTOR": "scale"}
_MODES = {"native": "native", "local": "native", "offload": "offload", "remote": "offload"}


def _settings(args) -> dict:
    values = dict(_RUN_DEFAULTS)
    if args.config:
        for k, v in read_kv(args.config).items():
            if k not in _RUN_KEYS:
                raise SystemExit(f"{args.config}: unknown key {k!r}")
            values[k] = _RUN_KEYS[k](v)
    for var, key in _ENV_KEYS.items():
        if var in os.environ:
            values[key] = _RUN_KEYS[key](os.environ[var])
    for key in _RUN_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    values["mode"] = _MODES[values["mode"].lower()]
    return values


def build_run_config(values: dict) -> RunConfig:
    if values.get("link_preset"):
        link = link_preset(values["link_preset"], values["scale"])
    else:
        link = LinkProfile(values["link_delay_s"], values["link_bandwidth"], "custom")
    return RunConfig(
        workload=Workload(values["kind"], values["count"], values["width"], values["height"], values["seed"]),
        mode=values["mode"], preset=values["preset"], scale=values["scale"],
        compute_s=values.get("compute_s"), host_other_s=values["host_other_s"], link=link,
        tune_comm_s=values.get("tune_comm_s"), model_c=values["model_c"],
        model_weights_bytes=values["model_weights_bytes"], endpoint=values.get("endpoint"),
        out_dir=Path(values["out"]) if values.get("out") else None, label=values.get("label"),
    )


def cmd_run(args) -> int:
    config = build_run_config(_settings(args))
    record = run(config)
    if config.out_dir is not None and args.baseline:
        emit_report(record, config.out_dir, RunRecord.load(args.baseline), formats=("markdown",))
    baseline = RunRecord.load(args.baseline) if args.baseline else None
    print(summary_markdown(record, baseline), end="")
    problems = check_invariants(record)
    for p in problems:
        print(f"INVARIANT VIOLATED: {p}", file=sys.stderr)
    return 1 if problems else 0


def cmd_gen(args) -> int:
    w = Workload(args.kind, args.count, args.width, args.height, args.seed)
    path = save_workload(w, args.out)
    print(f"wrote {w.count} frames of {w.dims.shape} to {path}")
    return 0


def cmd_compare(args) -> int:
    baseline, record = RunRecord.load(args.baseline), RunRecord.load(args.record)
    text = summary_markdown(record, baseline)
    if args.out:
        emit_report(record, args.out, baseline, formats=("markdown",))
    print(text, end="")
    return 0


def cmd_stress(args) -> int:
    result = run_stress(args.clients, args.frames, args.width, args.height, args.preset, args.scale, args.seed)
    summary = {**asdict(result), "ok": result.ok}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stress.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0 if result.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="accelfwd-harness", description="Offload benchmark harness.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic workload to an .npz file")
    g.add_argument("--kind", choices=("images", "video"), default="images")
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--width", type=int, default=656)
    g.add_argument("--height", type=int, default=368)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    r = sub.add_parser("run", help="run one native or offloaded configuration")
    r.add_argument("--config", help="key = value run configuration file")
    r.add_argument("--mode", choices=sorted(_MODES))
    r.add_argument("--kind", choices=("images", "video"))
    for name, typ in (("count", int), ("width", int), ("height", int), ("seed", int),
                      ("scale", float), ("compute-s", float), ("host-other-s", float),
                      ("link-delay-s", float), ("link-bandwidth", float), ("tune-comm-s", float),
                      ("model-c", float), ("model-weights-bytes", int)):
        r.add_argument(f"--{name}", type=typ)
    r.add_argument("--preset", choices=("device", "edge", "cloud", "none"))
    r.add_argument("--link-preset", choices=("loopback", "edge", "cloud"))
    r.add_argument("--endpoint", help="connect to host:port instead of spawning a loopback server")
    r.add_argument("--label")
    r.add_argument("--out", help="directory for CSV / markdown / JSON reports")
    r.add_argument("--baseline", help="record JSON to compute speedup against")
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("compare", help="compare two record files")
    c.add_argument("baseline")
    c.add_argument("record")
    c.add_argument("--out")
    c.set_defaults(fn=cmd_compare)

    s = sub.add_parser("stress", help="N concurrent clients against one server")
    s.add_argument("--clients", type=int, default=4)
    s.add_argument("--frames", type=int, default=50)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=48)
    s.add_argument("--preset", default="none")
    s.add_argument("--scale", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_stress)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
