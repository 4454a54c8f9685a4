"""Host-side facade: load-model / forward calls executed locally or forwarded.

Applications talk to :class:`Accelerator` only. Whether a forward runs on the
local backend or on a destination node is decided by :class:`DispatchConfig`,
which is read from a file and/or environment, never from application code.

Environment overrides (take precedence over the config file)::

    ACCELFWD_CONFIG           path of a key = value config file
    ACCELFWD_MODE             local | remote
    ACCELFWD_ENDPOINT         host:port of the destination node
    ACCELFWD_SCALE_FACTOR     multiplier applied to delay presets
    ACCELFWD_PRESET           local backend preset (device|edge|cloud|none)
    ACCELFWD_CONNECT_TIMEOUT  seconds
    ACCELFWD_CYCLE_TIMEOUT    seconds
"""
from __future__ import annotations

import enum
import os
import socket
import threading
from dataclasses import dataclass, fields
from typing import Callable

from . import wire
from .backend import Backend, Frame, Heatmap, make_backend
from .clock import now
from .config import read_kv
from .profiler import CycleTiming
from .transport import SocketTransport

__all__ = [
    "DispatchConfig", "load_config", "Session", "SessionState", "connect", "ensure_model",
    "remote_forward", "dispatch_forward", "close", "Accelerator", "CacheOutcome", "ModelStatus",
    "CycleTiming", "ClientError", "ConnectFailed", "VersionMismatch", "ProtocolViolation",
    "Disconnected", "RemoteError", "ServerBusy", "SessionBusy", "InvalidFrame",
    "CYCLE_FRAMING_OVERHEAD",
]

# header bytes of the four cycle frames (4 x 5), the element counts of FrameData and
# ForwardResult (2 x 4) and the compute-time preamble (8); everything else is in DT
CYCLE_FRAMING_OVERHEAD = 4 * wire.HEADER_SIZE + 2 * 4 + 8


class ClientError(Exception):
    pass


class ConnectFailed(ClientError):
    pass


class VersionMismatch(ClientError):
    pass


class ProtocolViolation(ClientError):
    pass


class Disconnected(ClientError):
    pass


class SessionBusy(ClientError):
    pass


class InvalidFrame(ValueError):
    pass


class RemoteError(ClientError):
    def __init__(self, code: int, message: str):
        super().__init__(f"remote error {code}: {message}")
        self.code = code
        self.message = message


class ServerBusy(RemoteError, ConnectFailed):
    pass


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class DispatchConfig:
    mode: str = "local"
    endpoint: str | None = None
    scale_factor: float = 0.01
    preset: str = "none"
    connect_timeout_s: float = 5.0
    cycle_timeout_s: float = 60.0

    def __post_init__(self):
        if self.mode not in ("local", "remote"):
            raise ValueError(f"mode must be 'local' or 'remote', got {self.mode!r}")
        if self.mode == "remote" and not self.endpoint:
            raise ValueError("remote mode requires an endpoint")
        if self.scale_factor <= 0:
            raise ValueError(f"scale_factor must be > 0, got {self.scale_factor!r}")


_MODE_ALIASES = {"local": "local", "native": "local", "remote": "remote", "offload": "remote"}
_ENV = {
    "mode": "ACCELFWD_MODE",
    "endpoint": "ACCELFWD_ENDPOINT",
    "scale_factor": "ACCELFWD_SCALE_FACTOR",
    "preset": "ACCELFWD_PRESET",
    "connect_timeout_s": "ACCELFWD_CONNECT_TIMEOUT",
    "cycle_timeout_s": "ACCELFWD_CYCLE_TIMEOUT",
}
_FILE_KEYS = {
    "mode": "mode", "endpoint": "endpoint", "scale_factor": "scale_factor", "scale": "scale_factor",
    "preset": "preset", "connect_timeout": "connect_timeout_s", "connect_timeout_s": "connect_timeout_s",
    "cycle_timeout": "cycle_timeout_s", "cycle_timeout_s": "cycle_timeout_s",
}


def _coerce(values: dict[str, str]) -> dict:
    types = {f.name: f.type for f in fields(DispatchConfig)}
    out = {}
    for k, v in values.items():
        if k == "mode":
            try:
                out[k] = _MODE_ALIASES[v.lower()]
            except KeyError:
                raise ValueError(f"unknown mode {v!r}") from None
        elif "float" in str(types[k]):
            out[k] = float(v)
        else:
            out[k] = v or None
    return out


def load_config(path=None, environ=None) -> DispatchConfig:
    """Defaults, then the config file, then environment overrides."""
    env = os.environ if environ is None else environ
    path = path or env.get("ACCELFWD_CONFIG")
    values: dict[str, str] = {}
    if path:
        for k, v in read_kv(path).items():
            if k in _FILE_KEYS:
                values[_FILE_KEYS[k]] = v
    for name, var in _ENV.items():
        if var in env:
            values[name] = env[var]
    return DispatchConfig(**_coerce(values))


# ---------------------------------------------------------------------------
# Sessions


class SessionState(enum.Enum):
    CONNECTED = "connected"
    MODEL_READY = "model-ready"
    CLOSED = "closed"


class CacheOutcome(enum.Enum):
    HIT = "cache-hit"
    UPLOADED = "uploaded"


@dataclass(frozen=True)
class ModelStatus:
    outcome: CacheOutcome
    bytes_sent: int
    bytes_received: int


def parse_endpoint(endpoint) -> tuple[str, int]:
    if isinstance(endpoint, tuple):
        return endpoint[0], int(endpoint[1])
    host, sep, port = str(endpoint).rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {endpoint!r}")
    return host.strip("[]") or "127.0.0.1", int(port)


class Session:
    """One connection to a destination node. Single owner, one cycle in flight."""

    def __init__(self, transport, endpoint: str, version: int, cycle_timeout_s: float):
        self.transport = transport
        self.endpoint = endpoint
        self.version = version
        self.cycle_timeout_s = cycle_timeout_s
        self.state = SessionState.CONNECTED
        self.model: wire.ModelDescriptor | None = None
        self._cycle = threading.Lock()

    @property
    def closed(self) -> bool:
        return self.state is SessionState.CLOSED

    def _require_open(self) -> None:
        if self.closed:
            raise Disconnected(f"session to {self.endpoint} is closed")

    def _send(self, data: bytes) -> None:
        try:
            self.transport.send(data)
        except OSError as exc:
            self.close()
            raise Disconnected(f"send to {self.endpoint} failed: {exc}") from exc

    def _recv(self) -> tuple[wire.Message, int]:
        try:
            msg, n = self.transport.recv_message()
        except (OSError, wire.WireError) as exc:
            # covers timeouts and EOF; a bad frame also poisons the stream
            was_closed = self.closed
            self.close()
            if isinstance(exc, wire.WireError):
                raise ProtocolViolation(f"bad frame from {self.endpoint}: {exc}") from exc
            reason = "session closed" if was_closed else str(exc) or type(exc).__name__
            raise Disconnected(f"receive from {self.endpoint} failed: {reason}") from exc
        if isinstance(msg, wire.Error):
            self.close()
            raise RemoteError(msg.code, msg.message)
        return msg, n

    def _expect(self, msg, *types):
        if not isinstance(msg, types):
            self.close()
            raise ProtocolViolation(f"unexpected {type(msg).__name__} from {self.endpoint}")
        return msg

    def ensure_model(self, descriptor: wire.ModelDescriptor) -> ModelStatus:
        self._require_open()
        with self._claim():
            check = wire.encode(wire.ModelCheck(descriptor.digest))
            self._send(check)
            sent, received = len(check), 0
            reply, n = self._recv()
            received += n
            self._expect(reply, wire.ModelAck, wire.ModelNeeded)
            outcome = CacheOutcome.HIT
            if isinstance(reply, wire.ModelNeeded):
                upload = wire.encode(wire.ModelUpload.from_descriptor(descriptor))
                self._send(upload)
                sent += len(upload)
                reply, n = self._recv()
                received += n
                self._expect(reply, wire.ModelAck)
                outcome = CacheOutcome.UPLOADED
            if reply.digest != descriptor.digest:
                self.close()
                raise ProtocolViolation("destination acknowledged a different model")
            self.model = descriptor
            self.state = SessionState.MODEL_READY
            return ModelStatus(outcome, sent, received)

    def forward(self, frame: Frame) -> tuple[Heatmap, CycleTiming]:
        """One execution cycle: FrameData, Resolution, FrameSize, then ForwardResult."""
        self._require_open()
        if self.state is not SessionState.MODEL_READY:
            raise ProtocolViolation("no model acknowledged on this session")
        with self._claim():
            t0 = now()
            request = b"".join((
                wire.encode(wire.FrameData(frame.data)),
                wire.encode(wire.Resolution(frame.dims.w, frame.dims.h)),
                wire.encode(wire.FrameSize(frame.elem_count)),
            ))
            t_send = now()
            self._send(request)
            t_sent = now()
            reply, n = self._recv()
            t_recv = now()
            result = self._expect(reply, wire.ForwardResult)
            expected = wire.output_count(frame.elem_count, self.model.c)
            if result.elem_count != expected:
                self.close()
                raise ProtocolViolation(f"result has {result.elem_count} elements, expected {expected}")
            heatmap = Heatmap(result.data)
            wall = now() - t0
            waited = t_recv - t_sent
            gpu = min(max(result.compute_s, 0.0), waited)
            comm = (t_sent - t_send) + (waited - gpu)
            timing = CycleTiming(comm, gpu, max(wall - comm - gpu, 0.0), len(request), n)
            return heatmap, timing

    def _claim(self):
        if not self._cycle.acquire(blocking=False):
            raise SessionBusy("a cycle is already in flight on this session")
        return _Release(self._cycle)

    def close(self) -> None:
        if self.state is SessionState.CLOSED:
            return
        self.state = SessionState.CLOSED
        self.transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _Release:
    def __init__(self, lock):
        self.lock = lock

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.lock.release()


def connect(endpoint, config: DispatchConfig | None = None, *,
            version: int = wire.PROTOCOL_VERSION,
            wrap_transport: Callable | None = None) -> Session:
    """Open a session and complete the Hello/HelloAck handshake.

    ``wrap_transport`` lets the caller interpose on the socket transport, e.g. a
    link emulator.
    """
    config = config or DispatchConfig()
    host, port = parse_endpoint(endpoint)
    try:
        sock = socket.create_connection((host, port), timeout=config.connect_timeout_s)
    except OSError as exc:
        raise ConnectFailed(f"cannot reach {host}:{port}: {exc}") from exc
    transport = SocketTransport(sock)
    if wrap_transport is not None:
        transport = wrap_transport(transport)
    session = Session(transport, f"{host}:{port}", version, config.cycle_timeout_s)
    try:
        session._send(wire.encode(wire.Hello(version)))
        reply, _ = session._recv()
    except RemoteError as exc:
        if exc.code == wire.ErrorCode.BUSY:
            raise ServerBusy(exc.code, exc.message) from None
        raise
    except Disconnected as exc:
        raise ConnectFailed(str(exc)) from exc
    session._expect(reply, wire.HelloAck)
    if reply.version != version:
        session.close()
        raise VersionMismatch(f"client speaks version {version}, server {reply.version}")
    sock.settimeout(config.cycle_timeout_s)
    return session


def ensure_model(session: Session, descriptor: wire.ModelDescriptor) -> ModelStatus:
    return session.ensure_model(descriptor)


def remote_forward(session: Session, frame: Frame) -> tuple[Heatmap, CycleTiming]:
    return session.forward(frame)


def close(session: Session) -> None:
    session.close()


# ---------------------------------------------------------------------------
# Facade


class Accelerator:
    """Interception facade with configuration-selected dispatch.

    >>> acc = Accelerator(DispatchConfig(mode="local"))
    >>> acc.load_model(model)            # doctest: +SKIP
    >>> heatmap, timing = acc.forward(frame)  # doctest: +SKIP
    """

    def __init__(self, config: DispatchConfig | None = None, *, backend: Backend | None = None,
                 wrap_transport: Callable | None = None):
        self.config = config or load_config()
        self.backend = backend
        self.wrap_transport = wrap_transport
        self.session: Session | None = None
        self._handle: int | None = None
        if self.config.mode == "local" and self.backend is None:
            self.backend = make_backend(self.config.preset, "images", self.config.scale_factor)

    @property
    def mode(self) -> str:
        return self.config.mode

    def load_model(self, descriptor: wire.ModelDescriptor) -> ModelStatus | None:
        if self.mode == "local":
            self._handle = self.backend.register_model(descriptor)
            return None
        if self.session is None or self.session.closed:
            self.session = connect(self.config.endpoint, self.config,
                                   wrap_transport=self.wrap_transport)
        return self.session.ensure_model(descriptor)

    def forward(self, frame: Frame) -> tuple[Heatmap, CycleTiming]:
        if not frame.is_finite():
            raise InvalidFrame("frame contains NaN or Inf")
        if self.mode == "remote":
            if self.session is None:
                raise ProtocolViolation("load_model must be called before forward")
            return self.session.forward(frame)
        if self._handle is None:
            raise ProtocolViolation("load_model must be called before forward")
        t0 = now()
        heatmap = self.backend.forward(self._handle, frame)
        t1 = now()
        return heatmap, CycleTiming(0.0, t1 - t0, now() - t1)

    def close(self) -> None:
        if self.session is not None:
            self.session.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def dispatch_forward(facade: Accelerator, frame: Frame) -> tuple[Heatmap, CycleTiming]:
    return facade.forward(frame)
