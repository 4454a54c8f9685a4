"""Acceptance criteria. Each test prints exactly one PASS/FAIL line.

Timed criteria run at a 0.01 time scale on 66x37 frames so the emulated link
and compute budgets dominate over Python socket overhead.
"""
import contextlib
import struct
import time

import numpy as np
import pytest

from accelfwd import wire
from accelfwd.backend import mockpose_means
from accelfwd.client import Accelerator, CacheOutcome, DispatchConfig, connect
from accelfwd.harness.runner import RunConfig, check_invariants, run, run_stress
from accelfwd.harness.workload import Workload, gen_frames, make_model
from accelfwd.profiler import speedup
from accelfwd.wire import Dims, transfer_size
from conftest import ACCEPTANCE_LINES
from oracles import brute_force_means

pytestmark = pytest.mark.slow

DESK = dict(width=66, height=37)
SCALE = 0.01


@contextlib.contextmanager
def criterion(number: int, title: str):
    detail = {}
    t0 = time.perf_counter()
    try:
        yield detail
    except BaseException as exc:
        reason = str(exc).splitlines()[0] if str(exc) else ""
        line = f"FAIL {number:2d} {title}: " + ", ".join(
            [*(f"{k}={v}" for k, v in detail.items()), f"{type(exc).__name__}: {reason}"])
        raise
    else:
        line = f"PASS {number:2d} {title}: " + ", ".join(f"{k}={v}" for k, v in detail.items())
    finally:
        line += f" ({time.perf_counter() - t0:.1f}s)"
        ACCEPTANCE_LINES.append(line)
        print(line)


@pytest.fixture(scope="module")
def video_runs():
    w = Workload("video", 204, seed=7, **DESK)
    native = run(RunConfig(w, mode="native", preset="device", scale=SCALE, label="native-device-video"))
    offload = run(RunConfig(w, mode="offload", preset="cloud", scale=SCALE, compute_s=0.0010,
                            host_other_s=0.0018, tune_comm_s=0.0005, label="offload-cloud-video"))
    return native, offload


@pytest.fixture(scope="module")
def fps_runs():
    w = Workload("images", 64, seed=3, **DESK)
    return {p: run(RunConfig(w, mode="native", preset=p, scale=SCALE, label=f"native-{p}-images"))
            for p in ("device", "cloud")}


def _steal(*records) -> str:
    values = [r.meta.get("cpu_steal_s") for r in records]
    return "/".join("n/a" if v is None else f"{v:.2f}" for v in values)


# 1 ------------------------------------------------------------------------------

def test_01_transfer_size_exact():
    with criterion(1, "transfer size formula") as d:
        size = transfer_size(Dims(1, 3, 368, 656), 3.368421)
        d["bytes"] = size
        d["rel_to_3.75MB"] = f"{abs(size - 3.75e6) / 3.75e6:.4%}"
        assert size == 3_756_924
        assert abs(size - 3.75e6) / 3.75e6 <= 0.002


# 2 ------------------------------------------------------------------------------

def test_02_transparency(server):
    with criterion(2, "local vs remote bit-identical") as d:
        frames = gen_frames(Workload("images", 100, seed=11))  # full 656x368
        models = [make_model(f"m{i}", c=c, weights_bytes=4096, seed=i)
                  for i, c in enumerate((3.368421, 2.0, 7.25))]
        compared = 0
        for m in models:
            local = Accelerator(DispatchConfig(mode="local"))
            local.load_model(m)
            with Accelerator(DispatchConfig(mode="remote", endpoint=server.endpoint)) as remote:
                remote.load_model(m)
                for f in frames:
                    a, _ = local.forward(f)
                    b, _ = remote.forward(f)
                    assert a.data.tobytes() == b.data.tobytes(), f"model {m.name} differs"
                    compared += 1
        d["pairs"] = compared
        assert compared == 300


# 3 ------------------------------------------------------------------------------

def test_03_model_cache_bytes(server):
    with criterion(3, "model cache efficiency") as d:
        m = make_model("big", weights_bytes=1 << 20)
        with connect(server.endpoint) as s:
            first = s.ensure_model(m)
        with connect(server.endpoint) as s:
            second = s.ensure_model(m)
        check = wire.HEADER_SIZE + wire.DIGEST_SIZE
        upload = wire.HEADER_SIZE + wire.MODEL_UPLOAD_FIXED + len(m.name.encode()) + len(m.structure) + len(m.weights)
        d["first_sent"] = first.bytes_sent
        d["second_sent"] = second.bytes_sent
        assert first.outcome is CacheOutcome.UPLOADED and second.outcome is CacheOutcome.HIT
        assert first.bytes_sent >= 1 << 20
        assert first.bytes_sent == check + upload
        assert second.bytes_sent == check and second.bytes_sent - wire.HEADER_SIZE <= 64
        assert second.bytes_received == check  # ModelAck carries only the digest


# 4 ------------------------------------------------------------------------------

def _random_message(tag: wire.Tag, rng: np.random.Generator):
    u32 = lambda: int(rng.integers(0, 2**32))  # noqa: E731
    digest = lambda: rng.bytes(32)  # noqa: E731
    text = lambda: "".join(chr(int(c)) for c in rng.integers(32, 0x3000, int(rng.integers(0, 24))))  # noqa: E731
    floats = lambda: rng.integers(0, 2**32, int(rng.integers(1, 200)), dtype=np.uint32).view(np.float32)  # noqa: E731
    return {
        wire.Tag.HELLO: lambda: wire.Hello(u32()),
        wire.Tag.HELLO_ACK: lambda: wire.HelloAck(u32()),
        wire.Tag.FRAME_SIZE: lambda: wire.FrameSize(int(rng.integers(1, 2**32))),
        wire.Tag.RESOLUTION: lambda: wire.Resolution(int(rng.integers(1, 65536)), int(rng.integers(1, 65536))),
        wire.Tag.FRAME_DATA: lambda: wire.FrameData(floats()),
        wire.Tag.FORWARD_RESULT: lambda: wire.ForwardResult(float(rng.random() * 10), floats()),
        wire.Tag.MODEL_CHECK: lambda: wire.ModelCheck(digest()),
        wire.Tag.MODEL_NEEDED: lambda: wire.ModelNeeded(digest()),
        wire.Tag.MODEL_UPLOAD: lambda: wire.ModelUpload(digest(), float(rng.uniform(0.5, 50)), text(),
                                                        rng.bytes(int(rng.integers(0, 64))),
                                                        rng.bytes(int(rng.integers(0, 256)))),
        wire.Tag.MODEL_ACK: lambda: wire.ModelAck(digest()),
        wire.Tag.ERROR: lambda: wire.Error(u32(), text()),
    }[tag]()


def test_04_codec_soundness():
    with criterion(4, "codec round trip and corruption") as d:
        rng = np.random.default_rng(2024)
        valid_tags = {int(t) for t in wire.Tag}
        invalid_tags = [t for t in range(256) if t not in valid_tags]
        counts = dict.fromkeys(("round_trips", "incomplete", "unknown_tag", "malformed"), 0)
        for tag in wire.Tag:
            for _ in range(1000):
                msg = _random_message(tag, rng)
                raw = wire.encode(msg)
                got, used = wire.decode(raw)
                assert used == len(raw) and type(got) is type(msg) and wire.encode(got) == raw
                counts["round_trips"] += 1

                with pytest.raises(wire.Incomplete):
                    wire.decode(raw[:int(rng.integers(0, len(raw)))])
                counts["incomplete"] += 1

                bad_tag = bytearray(raw)
                bad_tag[4] = invalid_tags[int(rng.integers(len(invalid_tags)))]
                with pytest.raises(wire.UnknownTag):
                    wire.decode(bytes(bad_tag))
                counts["unknown_tag"] += 1

                # payload one byte too long or too short for its own structure
                bent = bytearray(raw) + b"\0" if rng.random() < 0.5 else bytearray(raw[:-1])
                bent[0:4] = struct.pack("<I", len(bent) - 4)
                with pytest.raises(wire.MalformedPayload):
                    wire.decode(bytes(bent))
                counts["malformed"] += 1
        d.update(counts)
        assert counts["round_trips"] == 1000 * len(wire.Tag)


# 5 ------------------------------------------------------------------------------

def test_05_video_speedup(video_runs):
    with criterion(5, "emulated video speedup device->cloud") as d:
        native, offload = video_runs
        s = float(speedup(native.processing_s, offload.processing_s))
        n = offload.frame_count
        b = offload.breakdown()
        d["native_s_per_frame"] = f"{native.processing_s / native.frame_count:.5f}"
        d["offload_gpu/comm/other"] = f"{b.gpu_s / n:.5f}/{b.communication_s / n:.5f}/{b.other_s / n:.5f}"
        d["speedup"] = f"{s:.2f}"
        d["cpu_steal_s"] = _steal(native, offload)
        assert native.meta["output_digest"] == offload.meta["output_digest"]
        assert native.frame_count == offload.frame_count == 204
        assert s == pytest.approx(7.58, rel=0.10)


# 6 ------------------------------------------------------------------------------

def test_06_breakdown_decomposition(video_runs, fps_runs):
    with criterion(6, "breakdown sums to wall time") as d:
        records = [*video_runs, *fps_runs.values(),
                   run(RunConfig(Workload("images", 20, seed=1, **DESK), mode="offload", preset="edge",
                                 scale=SCALE, label="offload-edge-images"))]
        gaps = {r.label: r.breakdown().relative_gap() for r in records}
        d["worst_gap"] = f"{max(gaps.values()):.3%}"
        d["runs"] = len(records)
        for r in records:
            assert check_invariants(r) == [], r.label
            assert gaps[r.label] <= 0.02, r.label


# 7 ------------------------------------------------------------------------------

def test_07_fps(fps_runs):
    with criterion(7, "FPS at scale 0.01") as d:
        device, cloud = fps_runs["device"].fps(), fps_runs["cloud"].fps()
        d["device_fps"] = f"{device:.1f}"
        d["cloud_fps"] = f"{cloud:.1f}"
        d["cpu_steal_s"] = _steal(*fps_runs.values())
        assert device == pytest.approx(50, rel=0.10)
        assert cloud == pytest.approx(1050, rel=0.10)


# 8 ------------------------------------------------------------------------------

def test_08_concurrency_isolation():
    with criterion(8, "4 clients x 50 frames isolation + FIFO") as d:
        result = run_stress(clients=4, frames=50, seed=8)
        d["mismatches"] = result.mismatches
        d["forwards"] = result.forwards_logged
        d["fifo"] = result.fifo_ok
        assert result.errors == []
        assert result.mismatches == 0
        assert result.forwards_logged == 200
        assert result.fifo_ok


# 9 ------------------------------------------------------------------------------

def test_09_mockpose_oracle():
    with criterion(9, "segment means vs brute force") as d:
        rng = np.random.default_rng(99)
        checked = 0
        for _ in range(500):
            e = int(rng.integers(1, 1001))
            k_target = rng.uniform(0.5, e)  # keeps 1 <= K <= E
            c = e / k_target
            x = rng.standard_normal(e).astype(np.float32)
            assert mockpose_means(x, c).tolist() == brute_force_means(x.tolist(), c), (e, c)
            checked += 1
        d["instances"] = checked


# 10 -----------------------------------------------------------------------------

def test_10_batch_scaling():
    with criterion(10, "batch doubling 64/128/256") as d:
        records = [run(RunConfig(Workload("images", n, seed=n, **DESK), mode="native", preset="device",
                                 scale=SCALE)) for n in (64, 128, 256)]
        totals = [r.total_wall_s for r in records]
        ratios = [totals[1] / totals[0], totals[2] / totals[1]]
        d["totals_s"] = "/".join(f"{t:.3f}" for t in totals)
        d["ratios"] = "/".join(f"{r:.3f}" for r in ratios)
        d["cpu_steal_s"] = _steal(*records)
        for r in ratios:
            assert r == pytest.approx(2.0, rel=0.10)
