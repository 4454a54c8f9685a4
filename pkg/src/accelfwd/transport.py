"""Blocking socket transport that moves whole wire frames."""
from __future__ import annotations

import socket

from . import wire


class ConnectionClosed(ConnectionError):
    pass


class SocketTransport:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass

    def send(self, data: bytes) -> None:
        self.sock.sendall(data)

    def _read_exact(self, n: int) -> bytearray:
        buf = bytearray(n)
        view = memoryview(buf)
        got = 0
        while got < n:
            k = self.sock.recv_into(view[got:])
            if k == 0:
                raise ConnectionClosed("peer closed the connection")
            got += k
        return buf

    def read_header(self) -> tuple[int, wire.Tag]:
        """Read and validate a 5-byte header. Raises ConnectionClosed on clean EOF."""
        return wire.parse_header(self._read_exact(wire.HEADER_SIZE))

    def read_payload(self, length: int, tag: wire.Tag) -> wire.Message:
        return wire.decode_payload(tag, self._read_exact(length - 1))

    def recv_message(self) -> tuple[wire.Message, int]:
        """Return the next message and its size on the wire."""
        length, tag = self.read_header()
        return self.read_payload(length, tag), 4 + length

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
