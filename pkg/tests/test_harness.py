import json
import math
import signal
import subprocess
import sys
import time

import pytest

from accelfwd.client import CYCLE_FRAMING_OVERHEAD
from accelfwd.harness import cli
from accelfwd.harness.link import (EmulatedLink, LinkProfile, emulate_link, link_preset,
                                   tune_link)
from accelfwd.harness.runner import RunConfig, check_invariants, emit_report, run, run_stress
from accelfwd.harness.workload import Workload, gen_frame, gen_frames, load_workload, make_model, save_workload
from accelfwd.profiler import RunRecord
from accelfwd.wire import Dims, transfer_size

SMALL = dict(width=40, height=30)


# -- workloads ------------------------------------------------------------------

def test_gen_frames_deterministic():
    w = Workload("images", 64, 656, 368, seed=42)
    a, b = gen_frames(w), gen_frames(w)
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a, b))


def test_video_workload_shape():
    w = Workload("video", 204, 656, 368, seed=7)
    assert w.count == 204 and w.dims.elem_count == 724_224
    f = gen_frame(w, 203)
    assert f.elem_count == 724_224
    assert 0.0 <= f.data.min() and f.data.max() < 1.0


def test_seed_sensitivity():
    a = gen_frame(Workload(seed=1, **SMALL), 0)
    b = gen_frame(Workload(seed=2, **SMALL), 0)
    assert a.data.tobytes() != b.data.tobytes()


def test_frames_regenerable_individually():
    w = Workload(count=5, seed=3, **SMALL)
    assert gen_frames(w)[4].data.tobytes() == gen_frame(w, 4).data.tobytes()


def test_workload_file_round_trip(tmp_path):
    w = Workload("video", 3, 8, 6, seed=9)
    got_w, frames = load_workload(save_workload(w, tmp_path / "w.npz"))
    assert got_w == w
    assert frames.shape == (3, 3, 6, 8)
    assert frames[2].tobytes() == gen_frame(w, 2).data.tobytes()


def test_workload_validation():
    with pytest.raises(ValueError):
        Workload("audio")
    with pytest.raises(ValueError):
        Workload(count=0)


def test_make_model_deterministic():
    assert make_model(seed=1).digest == make_model(seed=1).digest
    assert make_model(seed=1).digest != make_model(seed=2).digest
    assert len(make_model(weights_bytes=1 << 20).weights) == 1 << 20


# -- link emulation -------------------------------------------------------------

class CountingTransport:
    def __init__(self):
        self.sent = []

    def send(self, data):
        self.sent.append(data)

    def recv_message(self):
        return "msg", 1000

    def close(self):
        pass


def test_identity_link_is_passthrough():
    t = CountingTransport()
    assert emulate_link(t, LinkProfile()) is t
    assert LinkProfile().cycle_s(3_756_924, 0) == 0


def test_bandwidth_cost():
    link = LinkProfile(0.0, 100e6)
    assert link.cycle_s(3_756_924 - 860_016, 860_016) >= 0.0375
    assert link.delivery_s(3_756_924) == pytest.approx(0.03756924)


def test_delay_paid_per_delivery():
    link = EmulatedLink(CountingTransport(), LinkProfile(0.01))
    t = time.perf_counter()
    link.send(b"abc")
    link.recv_message()
    assert time.perf_counter() - t >= 0.02


def test_delay_per_cycle_over_sockets():
    cfg = RunConfig(Workload(count=3, **SMALL), mode="offload", preset="none",
                    link=LinkProfile(0.01, label="delay"))
    record = run(cfg)
    assert all(c.communication_s >= 2 * 0.01 for c in record.cycles)
    assert all(c.communication_s < 4 * 0.01 for c in record.cycles)  # pipelined requests pay once


def test_link_presets_carry_transfer_overheads():
    dims = Dims(1, 3, 368, 656)
    size = transfer_size(dims, 3.368421)
    assert size / link_preset("edge").bandwidth_bytes_per_s == pytest.approx(0.24)
    assert size / link_preset("cloud").bandwidth_bytes_per_s == pytest.approx(0.05)
    assert size / link_preset("cloud", 0.01).bandwidth_bytes_per_s == pytest.approx(0.0005)
    assert link_preset("loopback").is_identity


def test_tune_link():
    assert tune_link(0.0005, 0.0001).one_way_delay_s == pytest.approx(0.0002)
    assert tune_link(0.0005, 0.001).one_way_delay_s == 0
    with pytest.raises(ValueError):
        LinkProfile(-1.0)
    with pytest.raises(ValueError):
        LinkProfile(0.0, 0.0)


# -- runs -------------------------------------------------------------------------

def test_native_run_fps():
    record = run(RunConfig(Workload("images", 16, **SMALL), mode="native", preset="device"))
    assert record.frame_count == 16
    assert record.processing_s == pytest.approx(16 * 0.02, rel=0.1)
    assert record.fps() == pytest.approx(50, rel=0.1)
    assert check_invariants(record) == []
    assert "cpu_steal_s" in record.meta


def test_offload_matches_native_bitwise():
    w = Workload("images", 10, **SMALL, seed=5)
    native = run(RunConfig(w, mode="native", preset="none"))
    offload = run(RunConfig(w, mode="offload", preset="none"))
    assert native.meta["output_digest"] == offload.meta["output_digest"]
    assert check_invariants(offload) == []


def test_offload_bytes_and_single_upload():
    w = Workload("video", 12, **SMALL)
    record = run(RunConfig(w, mode="offload", preset="none", model_c=2.5))
    expected = transfer_size(w.dims, 2.5) + CYCLE_FRAMING_OVERHEAD
    assert {c.bytes_total for c in record.cycles} == {expected}
    assert record.meta["model_uploads"] == 1


def test_on_output_sees_every_frame():
    seen = []
    run(RunConfig(Workload(count=4, **SMALL), preset="none"), on_output=lambda i, h: seen.append(i))
    assert seen == [0, 1, 2, 3]


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(mode="hybrid")
    with pytest.raises(ValueError):
        RunConfig(mode="native", endpoint="h:1")
    with pytest.raises(ValueError):
        RunConfig(scale=0)


def test_emit_report(tmp_path):
    w = Workload(count=5, **SMALL)
    native = run(RunConfig(w, preset="none", label="native"))
    offload = run(RunConfig(w, mode="offload", preset="none", label="offload"))
    paths = emit_report(offload, tmp_path, native)
    names = sorted(p.name for p in paths)
    assert names == ["offload.cycles.csv", "offload.json", "offload.vs-native.summary.md"]
    csv_rows = (tmp_path / "offload.cycles.csv").read_text().splitlines()
    assert len(csv_rows) - 2 == 5
    md = (tmp_path / "offload.vs-native.summary.md").read_text()
    assert "speedup vs native" in md and "fps" in md
    first = [p.read_bytes() for p in paths]
    again = emit_report(offload, tmp_path, native)
    assert [p.read_bytes() for p in again] == first


def test_check_invariants_flags_bad_bytes():
    record = run(RunConfig(Workload(count=2, **SMALL), mode="offload", preset="none"))
    record.meta["model_c"] = 5.0
    assert any("byte count" in p for p in check_invariants(record))


def test_stress_small():
    result = run_stress(clients=3, frames=5, width=16, height=12)
    assert result.ok
    assert result.forwards_logged == 15


# -- CLI ----------------------------------------------------------------------------

def harness(*args, env=None, cwd=None):
    return subprocess.run([sys.executable, "-m", "accelfwd.harness", *args], capture_output=True,
                          text=True, env=env, cwd=cwd, timeout=120)


def test_same_binary_two_configs(tmp_path):
    common = "kind = images\ncount = 6\nwidth = 40\nheight = 30\nseed = 3\npreset = none\n"
    (tmp_path / "native.conf").write_text(common + "mode = native\nlabel = native\nout = " + str(tmp_path) + "\n")
    (tmp_path / "offload.conf").write_text(common + "mode = offload\nlabel = offload\nout = " + str(tmp_path) + "\n")
    for name in ("native", "offload"):
        proc = harness("run", "--config", str(tmp_path / f"{name}.conf"))
        assert proc.returncode == 0, proc.stderr
    a = RunRecord.load(tmp_path / "native.json")
    b = RunRecord.load(tmp_path / "offload.json")
    assert a.meta["output_digest"] == b.meta["output_digest"]
    assert (a.mode, b.mode) == ("native", "offload")

    proc = harness("compare", str(tmp_path / "native.json"), str(tmp_path / "offload.json"))
    assert proc.returncode == 0 and "speedup vs native" in proc.stdout


def test_env_overrides_config_file(tmp_path, monkeypatch):
    conf = tmp_path / "run.conf"
    conf.write_text("mode = native\ncount = 2\nwidth = 8\nheight = 8\npreset = none\n")

    def settings(*extra):
        return cli._settings(cli.build_parser().parse_args(["run", "--config", str(conf), *extra]))

    monkeypatch.delenv("ACCELFWD_MODE", raising=False)
    assert settings()["mode"] == "native"
    monkeypatch.setenv("ACCELFWD_MODE", "remote")
    assert settings()["mode"] == "offload"
    assert settings("--mode", "local")["mode"] == "native"


def test_cli_rejects_unknown_config_key(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("colour = blue\n")
    proc = harness("run", "--config", str(conf))
    assert proc.returncode != 0 and "colour" in proc.stderr


def test_cli_gen_and_stress(tmp_path):
    proc = harness("gen", "--count", "2", "--width", "8", "--height", "4", "--out", str(tmp_path / "w.npz"))
    assert proc.returncode == 0
    assert load_workload(tmp_path / "w.npz")[1].shape == (2, 3, 4, 8)
    proc = harness("stress", "--clients", "2", "--frames", "3", "--out", str(tmp_path))
    assert proc.returncode == 0, proc.stderr
    summary = json.loads((tmp_path / "stress.json").read_text())
    assert summary["ok"] and summary["forwards_logged"] == 6


def test_cli_link_flags():
    values = cli._settings(cli.build_parser().parse_args(["run", "--link-preset", "cloud", "--scale", "0.01"]))
    cfg = cli.build_run_config(values)
    assert cfg.link.label == "cloud"
    assert not math.isinf(cfg.link.bandwidth_bytes_per_s)


def test_server_binary_with_harness_endpoint(tmp_path):
    proc = subprocess.Popen([sys.executable, "-m", "accelfwd", "--bind", "127.0.0.1:0",
                             "--log", str(tmp_path / "server.log")], stdout=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline()
        assert line.startswith("listening on ")
        endpoint = line.split()[-1]
        out = harness("run", "--mode", "offload", "--endpoint", endpoint, "--count", "3",
                      "--width", "16", "--height", "8", "--preset", "none", "--out", str(tmp_path))
        assert out.returncode == 0, out.stderr
    finally:
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(10) == 0
    events = [json.loads(l) for l in (tmp_path / "server.log").read_text().splitlines()]
    assert any("listening" in e["msg"] for e in events)
