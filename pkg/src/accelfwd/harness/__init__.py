"""Benchmark harness: synthetic workloads, link emulation, native vs offload runs."""
from .link import LINK_PRESETS, EmulatedLink, LinkProfile, emulate_link, link_preset, tune_link
from .runner import (RunConfig, RunFailed, StressResult, check_invariants, emit_report, run,
                     run_stress)
from .workload import Workload, gen_frame, gen_frames, load_workload, make_model, save_workload
