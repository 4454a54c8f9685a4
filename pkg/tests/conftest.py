import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from accelfwd.backend import Frame, make_backend  # noqa: E402
from accelfwd.server import ServerLimits, serve  # noqa: E402
from accelfwd.wire import Dims, ModelDescriptor  # noqa: E402


def random_frame(rng, dims=(1, 3, 12, 20)) -> Frame:
    d = Dims(*dims)
    return Frame(d, rng.random(d.elem_count, dtype=np.float32))


def small_model(c=3.368421, name="m", weights=b"\x01\x02\x03\x04", structure=b"layer { }") -> ModelDescriptor:
    return ModelDescriptor(name, structure, weights, c)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def server():
    srv = serve(backend=make_backend("none"), limits=ServerLimits(max_sessions=8, cycle_timeout_s=5))
    yield srv
    srv.shutdown()


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
