#!/usr/bin/env python3
"""Profile full-resolution execution cycles against a loopback server.

Prints bytes per cycle next to the transfer-size formula and the median
gpu/comm/other split. Use --link-delay-s / --bandwidth to emulate a network.
"""
import argparse
import statistics

from accelfwd.client import CYCLE_FRAMING_OVERHEAD, Accelerator, DispatchConfig
from accelfwd.backend import make_backend
from accelfwd.harness.link import LinkProfile, emulate_link
from accelfwd.harness.workload import Workload, gen_frames, make_model
from accelfwd.server import serve
from accelfwd.wire import transfer_size

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--frames", type=int, default=20)
parser.add_argument("--width", type=int, default=656)
parser.add_argument("--height", type=int, default=368)
parser.add_argument("--c", type=float, default=3.368421)
parser.add_argument("--preset", default="none")
parser.add_argument("--scale", type=float, default=0.01)
parser.add_argument("--link-delay-s", type=float, default=0.0)
parser.add_argument("--bandwidth", type=float, default=float("inf"), help="bytes per second")
args = parser.parse_args()

w = Workload("images", args.frames, args.width, args.height)
link = LinkProfile(args.link_delay_s, args.bandwidth)
server = serve(backend=make_backend(args.preset, "images", args.scale))
try:
    with Accelerator(DispatchConfig(mode="remote", endpoint=server.endpoint),
                     wrap_transport=lambda t: emulate_link(t, link)) as acc:
        status = acc.load_model(make_model(c=args.c))
        timings = [acc.forward(f)[1] for f in gen_frames(w)]
finally:
    server.shutdown()

expected = transfer_size(w.dims, args.c)
print(f"model: {status.outcome.value}, {status.bytes_sent} bytes sent")
print(f"frame {w.dims.shape}: formula {expected} B + framing {CYCLE_FRAMING_OVERHEAD} B = {expected + CYCLE_FRAMING_OVERHEAD} B")
print(f"measured bytes per cycle: {sorted({t.bytes_total for t in timings})}")
for part in ("gpu_s", "communication_s", "other_s", "total_s"):
    print(f"{part:>16}: median {statistics.median(getattr(t, part) for t in timings) * 1e3:.3f} ms")
