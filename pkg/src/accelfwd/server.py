"""Destination-node service.

Each accepted connection gets a thread running :class:`SessionHandler`, a
sans-IO state machine. All sessions share one :class:`ModelStore` and one
backend; the backend is the single serialization point.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import signal
import socket
import sys
import threading
from collections import Counter
from dataclasses import dataclass

from . import wire
from .backend import Backend, Frame, PRESETS, make_backend
from .clock import now
from .transport import ConnectionClosed, SocketTransport
from .wire import ErrorCode

log = logging.getLogger(__name__)

__all__ = ["ServerLimits", "ModelStore", "SessionHandler", "Server", "serve", "BindFailed", "main"]


class BindFailed(OSError):
    pass


@dataclass(frozen=True)
class ServerLimits:
    max_sessions: int = 16
    # bounds the variable part of an upload: name + structure + weights
    max_model_bytes: int = 1 << 30
    cycle_timeout_s: float = 60.0


class ModelStore:
    """digest -> (descriptor, handle), in insertion order. Survives sessions."""

    def __init__(self, backend: Backend):
        self.backend = backend
        self._lock = threading.Lock()
        self._models: dict[bytes, tuple[wire.ModelDescriptor, int]] = {}
        self.uploads: Counter = Counter()

    def __contains__(self, d: bytes) -> bool:
        with self._lock:
            return d in self._models

    def __len__(self) -> int:
        with self._lock:
            return len(self._models)

    def get(self, d: bytes) -> tuple[wire.ModelDescriptor, int]:
        with self._lock:
            return self._models[d]

    def add(self, descriptor: wire.ModelDescriptor) -> int:
        # registration may sleep (model load); keep it outside the store lock
        handle = self.backend.register_model(descriptor)
        with self._lock:
            self._models.setdefault(descriptor.digest, (descriptor, handle))
            self.uploads[descriptor.digest] += 1
        return handle


class SessionHandler:
    """Per-session protocol state machine.

    ``handle`` maps one inbound message to the responses to send. Once
    ``closed`` is set the caller must send the responses and tear down.
    """

    def __init__(self, store: ModelStore, backend: Backend, limits: ServerLimits = ServerLimits(),
                 version: int = wire.PROTOCOL_VERSION):
        self.store = store
        self.backend = backend
        self.limits = limits
        self.version = version
        self.negotiated: int | None = None
        self.model: bytes | None = None
        self.closed = False
        self._frame: wire.FrameData | None = None
        self._resolution: wire.Resolution | None = None

    def _fail(self, code: ErrorCode, text: str) -> list[wire.Message]:
        self.closed = True
        return [wire.Error(int(code), text)]

    def handle(self, msg: wire.Message) -> list[wire.Message]:
        if self.closed:
            raise RuntimeError("session already closed")
        if self.negotiated is None:
            if not isinstance(msg, wire.Hello):
                return self._fail(ErrorCode.PROTOCOL, f"expected Hello, got {type(msg).__name__}")
            if msg.version != self.version:
                self.closed = True
            else:
                self.negotiated = msg.version
            return [wire.HelloAck(self.version)]

        if isinstance(msg, wire.FrameData):
            if self._frame is not None:
                return self._fail(ErrorCode.PROTOCOL, "FrameData while a cycle is open")
            if self.model is None:
                return self._fail(ErrorCode.UNKNOWN_MODEL, "no model acknowledged on this session")
            self._frame = msg
            return []
        if isinstance(msg, wire.Resolution):
            if self._frame is None or self._resolution is not None:
                return self._fail(ErrorCode.PROTOCOL, "Resolution out of order")
            self._resolution = msg
            return []
        if isinstance(msg, wire.FrameSize):
            if self._frame is None or self._resolution is None:
                return self._fail(ErrorCode.PROTOCOL, "FrameSize out of order")
            return self._execute(msg)

        if self._frame is not None:
            return self._fail(ErrorCode.PROTOCOL, f"{type(msg).__name__} inside a cycle")
        if isinstance(msg, wire.ModelCheck):
            if msg.digest in self.store:
                self.model = msg.digest
                return [wire.ModelAck(msg.digest)]
            return [wire.ModelNeeded(msg.digest)]
        if isinstance(msg, wire.ModelUpload):
            return self._upload(msg)
        return self._fail(ErrorCode.PROTOCOL, f"unexpected {type(msg).__name__}")

    def _upload(self, msg: wire.ModelUpload) -> list[wire.Message]:
        size = len(msg.name.encode("utf-8")) + len(msg.structure) + len(msg.weights)
        if size > self.limits.max_model_bytes:
            return self._fail(ErrorCode.TOO_LARGE, f"model of {size} bytes exceeds {self.limits.max_model_bytes}")
        try:
            descriptor = msg.to_descriptor()
        except wire.InvalidModel as exc:
            return self._fail(ErrorCode.PROTOCOL, str(exc))
        if descriptor.digest != msg.digest:
            return self._fail(ErrorCode.PROTOCOL, "upload digest does not match its content")
        if descriptor.digest not in self.store:
            try:
                self.store.add(descriptor)
            except ValueError as exc:
                return self._fail(ErrorCode.PROTOCOL, f"model rejected: {exc}")
        self.model = descriptor.digest
        return [wire.ModelAck(descriptor.digest)]

    def _execute(self, size: wire.FrameSize) -> list[wire.Message]:
        frame, res = self._frame, self._resolution
        self._frame = self._resolution = None
        e = frame.elem_count
        if size.elem_count != e:
            return self._fail(ErrorCode.PROTOCOL, f"FrameSize {size.elem_count} != FrameData count {e}")
        plane = res.w * res.h
        if e % plane:
            return self._fail(ErrorCode.PROTOCOL, f"{e} elements do not tile a {res.w}x{res.h} frame")
        _, handle = self.store.get(self.model)
        try:
            tensor = Frame(wire.Dims(1, e // plane, res.h, res.w), frame.data)
            t0 = now()
            heatmap = self.backend.forward(handle, tensor)
            compute_s = now() - t0
        except Exception as exc:
            log.exception("forward failed")
            return self._fail(ErrorCode.INTERNAL, f"forward failed: {exc}")
        return [wire.ForwardResult(compute_s, heatmap.data)]


def _graceful_close(sock: socket.socket, linger_s: float = 1.0) -> None:
    """Half-close and drain so queued replies are not lost to a reset."""
    deadline = now() + linger_s
    try:
        sock.shutdown(socket.SHUT_WR)
        sock.settimeout(linger_s)
        while sock.recv(65536) and now() < deadline:
            pass
    except OSError:
        pass
    finally:
        sock.close()


class Server:
    def __init__(self, bind=("127.0.0.1", 0), backend: Backend | None = None,
                 limits: ServerLimits = ServerLimits(), version: int = wire.PROTOCOL_VERSION):
        self.backend = backend if backend is not None else make_backend()
        self.limits = limits
        self.version = version
        self.store = ModelStore(self.backend)
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._sessions: dict[int, tuple[socket.socket, threading.Thread]] = {}
        self._stopping = threading.Event()
        self._stopped = False
        self.sessions_served = 0
        self.cycles_served = 0
        try:
            self._listener = socket.create_server(tuple(bind), reuse_port=False)
        except OSError as exc:
            raise BindFailed(f"cannot bind {bind}: {exc}") from exc
        self._listener.settimeout(0.1)
        self.address = self._listener.getsockname()[:2]
        self._acceptor = threading.Thread(target=self._accept_loop, name="accept", daemon=True)
        self._acceptor.start()

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    @property
    def active_sessions(self) -> int:
        with self._lock:
            return len(self._sessions)

    @property
    def sequence_log(self):
        return getattr(self.backend, "log", [])

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            sock.settimeout(None)
            with self._lock:
                busy = len(self._sessions) >= self.limits.max_sessions
                if not busy:
                    sid = next(self._ids)
                    t = threading.Thread(target=self._run_session, args=(sid, sock, peer),
                                         name=f"session-{sid}", daemon=True)
                    self._sessions[sid] = (sock, t)
                    self.sessions_served += 1
            if busy:
                log.info("rejecting %s: %d sessions active", peer, self.limits.max_sessions)
                threading.Thread(target=self._reject, args=(sock,), daemon=True).start()
            else:
                t.start()

    def _reject(self, sock: socket.socket) -> None:
        try:
            sock.sendall(wire.encode(wire.Error(int(ErrorCode.BUSY), "server busy")))
        except OSError:
            pass
        _graceful_close(sock)

    def _run_session(self, sid: int, sock: socket.socket, peer) -> None:
        transport = SocketTransport(sock)
        handler = SessionHandler(self.store, self.backend, self.limits, self.version)
        log.info("session %d open from %s", sid, peer)
        reason = "closed by peer"
        try:
            while not handler.closed:
                try:
                    length, tag = transport.read_header()
                    if tag is wire.Tag.MODEL_UPLOAD and \
                            length - 1 - wire.MODEL_UPLOAD_FIXED > self.limits.max_model_bytes:
                        out = [wire.Error(int(ErrorCode.TOO_LARGE), "model upload exceeds server limit")]
                        handler.closed = True
                    else:
                        msg = transport.read_payload(length, tag)
                        out = handler.handle(msg)
                except wire.WireError as exc:
                    out = [wire.Error(int(ErrorCode.PROTOCOL), f"bad frame: {exc}")]
                    handler.closed = True
                if out:
                    transport.send(b"".join(wire.encode(m) for m in out))
                    if isinstance(out[-1], wire.ForwardResult):
                        with self._lock:
                            self.cycles_served += 1
                if handler.closed:
                    reason = "protocol end"
        except (ConnectionClosed, OSError) as exc:
            reason = str(exc) or type(exc).__name__
        finally:
            _graceful_close(sock, 0.2)
            with self._lock:
                self._sessions.pop(sid, None)
            log.info("session %d closed: %s", sid, reason)

    def shutdown(self, timeout_s: float | None = None) -> None:
        """Stop accepting, let in-flight cycles finish, close every session. Idempotent."""
        with self._lock:
            if self._stopped:
                return
            self._stopped = True
        self._stopping.set()
        self._acceptor.join()
        self._listener.close()
        with self._lock:
            sessions = list(self._sessions.values())
        for sock, _ in sessions:
            # wakes idle readers with EOF; a reply being written still goes out whole
            try:
                sock.shutdown(socket.SHUT_RD)
            except OSError:
                pass
        limit = self.limits.cycle_timeout_s if timeout_s is None else timeout_s
        deadline = now() + limit
        for _, t in sessions:
            t.join(max(deadline - now(), 0.0))

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve(bind=("127.0.0.1", 0), backend: Backend | None = None,
          limits: ServerLimits = ServerLimits(), **kw) -> Server:
    """Start a destination node in background threads and return it."""
    return Server(bind, backend, limits, **kw)


# ---------------------------------------------------------------------------
# CLI


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"t": record.created, "level": record.levelname,
                           "logger": record.name, "msg": record.getMessage()})


def _bind_arg(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return (host or "0.0.0.0", int(port))


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="accelfwd-server", description="Run a destination node.")
    p.add_argument("--bind", type=_bind_arg, default=("127.0.0.1", 7070), help="host:port (port 0 = any)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="none")
    p.add_argument("--kind", choices=("images", "video"), default="images")
    p.add_argument("--scale", type=float, default=0.01, help="multiplier on preset delays")
    p.add_argument("--max-sessions", type=int, default=16)
    p.add_argument("--max-model-bytes", type=int, default=1 << 30)
    p.add_argument("--log", default=None, help="JSON-lines log file (default stderr)")
    args = p.parse_args(argv)

    handler = logging.FileHandler(args.log) if args.log else logging.StreamHandler()
    handler.setFormatter(_JsonFormatter())
    logging.basicConfig(level=logging.INFO, handlers=[handler])

    try:
        server = serve(args.bind, make_backend(args.preset, args.kind, args.scale),
                       ServerLimits(args.max_sessions, args.max_model_bytes))
    except BindFailed as exc:
        print(exc, file=sys.stderr)
        return 1
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    print(f"listening on {server.endpoint}", flush=True)
    log.info("listening on %s preset=%s scale=%s", server.endpoint, args.preset, args.scale)
    while not stop.wait(0.5):
        pass
    server.shutdown()
    log.info("shut down")
    return 0


if __name__ == "__main__":
    sys.exit(main())
