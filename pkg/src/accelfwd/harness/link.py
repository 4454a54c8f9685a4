"""Emulated network links between host and destination.

Store-and-forward per send with pipelining: everything handed to one ``send``
call (the three cycle requests go out back to back) pays one one-way delay plus
its serialization time; each received message pays the same on the way back.
A cycle therefore costs two one-way delays plus bytes / bandwidth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from ..clock import precise_sleep
from ..wire import Dims, transfer_size


@dataclass(frozen=True)
class LinkProfile:
    one_way_delay_s: float = 0.0
    bandwidth_bytes_per_s: float = math.inf
    label: str = "loopback"

    def __post_init__(self):
        if not self.one_way_delay_s >= 0 or math.isnan(self.one_way_delay_s):
            raise ValueError(f"one_way_delay_s must be >= 0, got {self.one_way_delay_s!r}")
        if not self.bandwidth_bytes_per_s > 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth_bytes_per_s!r}")

    @property
    def is_identity(self) -> bool:
        return self.one_way_delay_s == 0 and math.isinf(self.bandwidth_bytes_per_s)

    def delivery_s(self, nbytes: int) -> float:
        return self.one_way_delay_s + nbytes / self.bandwidth_bytes_per_s

    def cycle_s(self, request_bytes: int, response_bytes: int) -> float:
        return self.delivery_s(request_bytes) + self.delivery_s(response_bytes)


def link_for_overhead(comm_s: float, dims: Dims = Dims(1, 3, 368, 656), c: float = 3.368421,
                      scale: float = 1.0, label: str = "") -> LinkProfile:
    """Bandwidth-only link that spends ``comm_s * scale`` moving one frame's data."""
    return LinkProfile(0.0, transfer_size(dims, c) / (comm_s * scale), label)


# the per-frame transfer overheads observed from the host device to each node
LINK_PRESETS = {
    "loopback": LinkProfile(),
    "edge": link_for_overhead(0.24, label="edge"),
    "cloud": link_for_overhead(0.05, label="cloud"),
}


def link_preset(name: str, scale: float = 1.0) -> LinkProfile:
    base = LINK_PRESETS[name]
    if base.is_identity:
        return base
    return LinkProfile(base.one_way_delay_s * scale, base.bandwidth_bytes_per_s / scale, base.label)


class EmulatedLink:
    """Transport wrapper that delays each delivery according to a LinkProfile."""

    def __init__(self, inner, link: LinkProfile):
        self.inner = inner
        self.link = link

    def send(self, data: bytes) -> None:
        precise_sleep(self.link.delivery_s(len(data)))
        self.inner.send(data)

    def recv_message(self):
        msg, n = self.inner.recv_message()
        precise_sleep(self.link.delivery_s(n))
        return msg, n

    def close(self) -> None:
        self.inner.close()


def emulate_link(transport, link: LinkProfile):
    return transport if link.is_identity else EmulatedLink(transport, link)


def tune_link(target_comm_s: float, measured_comm_s: float, label: str = "tuned") -> LinkProfile:
    """Zero-bandwidth-cost link whose two one-way delays top measured comm up to the target."""
    return LinkProfile(max(target_comm_s - measured_comm_s, 0.0) / 2, math.inf, label)
