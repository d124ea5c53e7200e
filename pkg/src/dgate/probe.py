"""Minimum-RTT measurement engine over an abstract datagram transport.

The same probing code runs over real UDP sockets and over the simulated
network. Samples are strictly sequential (send, await echo or timeout,
next) so per-sample timing is never contaminated by pipelining; the
minimum, not the mean, is the statistic, because only the minimum soundly
upper-bounds distance.
"""

from __future__ import annotations

import abc
import logging
import secrets
import socket
import threading
import time
from dataclasses import dataclass

from . import wire
from .model import NodeId

log = logging.getLogger("dgate.probe")

DEFAULT_REPETITIONS = 1000
SEV_LIKE_REPETITIONS = 10000
DEFAULT_TIMEOUT_US = 250_000
DEFAULT_PROBE_PORT = 47474

Endpoint = tuple[str, int]


class ProbeError(Exception):
    pass


class AllSamplesLost(ProbeError):
    """Every repetition timed out; the peer is unreachable or dropping."""


class TransportClosed(ProbeError):
    pass


class Transport(abc.ABC):
    """Datagram sending and receiving with a local monotonic clock."""

    @property
    @abc.abstractmethod
    def local_endpoint(self) -> Endpoint: ...

    @abc.abstractmethod
    def send(self, data: bytes, dest: Endpoint) -> None: ...

    @abc.abstractmethod
    def recv(self, timeout_us: int) -> tuple[bytes, Endpoint, int] | None:
        """Next datagram as (payload, source, receive time in monotonic us),
        or None once `timeout_us` elapsed without one."""

    @abc.abstractmethod
    def now_us(self) -> int:
        """Monotonic clock, microseconds. Used for all RTT arithmetic."""

    @abc.abstractmethod
    def wall_us(self) -> int:
        """UTC wall clock, microseconds since the epoch (for timestamps only)."""

    def close(self) -> None:  # pragma: no cover - default no-op
        pass


class UdpTransport(Transport):
    """Real UDP socket bound to a local port (0 = ephemeral)."""

    def __init__(self, bind: Endpoint = ("0.0.0.0", 0)):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind(bind)
        self._closed = False

    @property
    def local_endpoint(self) -> Endpoint:
        return self._sock.getsockname()

    def send(self, data: bytes, dest: Endpoint) -> None:
        if self._closed:
            raise TransportClosed("socket closed")
        self._sock.sendto(data, dest)

    def recv(self, timeout_us: int) -> tuple[bytes, Endpoint, int] | None:
        if self._closed:
            raise TransportClosed("socket closed")
        self._sock.settimeout(max(timeout_us, 0) / 1_000_000)
        try:
            data, source = self._sock.recvfrom(65535)
        except socket.timeout:
            return None
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc
        return data, source, self.now_us()

    def now_us(self) -> int:
        return time.monotonic_ns() // 1000

    def wall_us(self) -> int:
        return time.time_ns() // 1000

    def close(self) -> None:
        self._closed = True
        self._sock.close()


@dataclass(frozen=True)
class MinDelayRecord:
    """Lowest observed round-trip time to a peer over `samples` echoes."""

    peer: NodeId
    min_rtt_us: int
    samples: int
    measured_at_us: int

    def __post_init__(self) -> None:
        if self.samples < 1:
            raise ProbeError("a delay record needs at least one sample")
        if self.min_rtt_us < 0:
            raise ProbeError("negative round-trip time")

    def to_dict(self) -> dict:
        return {
            "peer": self.peer.hex,
            "min_rtt_us": self.min_rtt_us,
            "samples": self.samples,
            "measured_at_us": self.measured_at_us,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MinDelayRecord":
        return cls(
            peer=NodeId.from_hex(data["peer"]),
            min_rtt_us=int(data["min_rtt_us"]),
            samples=int(data["samples"]),
            measured_at_us=int(data["measured_at_us"]),
        )


def measure_min_delay(
    transport: Transport,
    peer_endpoint: Endpoint,
    peer: NodeId,
    repetitions: int = DEFAULT_REPETITIONS,
    timeout_us: int = DEFAULT_TIMEOUT_US,
    session_id: bytes | None = None,
    rtt_sink: list[int] | None = None,
) -> MinDelayRecord:
    """Run `repetitions` sequenced ping-pong exchanges and keep the minimum.

    Echoes must match both session id and sequence number; anything else is
    ignored. Timed-out repetitions are skipped and excluded from the sample
    count. `rtt_sink`, when given, collects every per-sample RTT.
    """
    if repetitions < 1:
        raise ProbeError("repetitions must be >= 1")
    if timeout_us <= 0:
        raise ProbeError("timeout must be positive")
    sid = session_id if session_id is not None else secrets.token_bytes(16)
    if len(sid) != 16:
        raise ProbeError("session id must be 16 bytes")

    min_rtt: int | None = None
    samples = 0
    for seq in range(repetitions):
        start = transport.now_us()
        transport.send(wire.encode_ping(sid, seq, wire.DIR_REQUEST), peer_endpoint)
        deadline = start + timeout_us
        while True:
            remaining = deadline - transport.now_us()
            if remaining <= 0:
                break
            got = transport.recv(remaining)
            if got is None:
                break
            data, _source, recv_us = got
            try:
                packet = wire.decode_ping(data)
            except wire.CodecError:
                continue
            if (
                packet.direction != wire.DIR_ECHO
                or packet.session_id != sid
                or packet.seq != seq
            ):
                continue  # stale or foreign echo; keep waiting for ours
            rtt = recv_us - start
            samples += 1
            if rtt_sink is not None:
                rtt_sink.append(rtt)
            if min_rtt is None or rtt < min_rtt:
                min_rtt = rtt
            break

    if min_rtt is None:
        raise AllSamplesLost(f"no echoes from {peer_endpoint} in {repetitions} tries")
    return MinDelayRecord(
        peer=peer,
        min_rtt_us=min_rtt,
        samples=samples,
        measured_at_us=transport.wall_us(),
    )


def respond_pings(
    transport: Transport,
    stop: threading.Event | None = None,
    poll_us: int = 100_000,
) -> None:
    """Echo every valid request packet with direction flipped.

    Runs until the transport closes or `stop` is set. Malformed datagrams
    are dropped (and logged at debug level) with no reply.
    """
    while stop is None or not stop.is_set():
        try:
            got = transport.recv(poll_us)
        except TransportClosed:
            return
        if got is None:
            continue
        data, source, _recv_us = got
        reply = make_echo(data)
        if reply is None:
            log.debug("dropping malformed %d-byte datagram from %s", len(data), source)
            continue
        try:
            transport.send(reply, source)
        except TransportClosed:
            return


def make_echo(data: bytes) -> bytes | None:
    """Echo bytes for a valid request datagram, else None."""
    try:
        packet = wire.decode_ping(data)
    except wire.CodecError:
        return None
    if packet.direction != wire.DIR_REQUEST:
        return None
    return wire.encode_ping(packet.session_id, packet.seq, wire.DIR_ECHO)


def spawn_responder(transport: Transport) -> tuple[threading.Thread, threading.Event]:
    """Start respond_pings on a daemon thread (real-network services)."""
    stop = threading.Event()
    thread = threading.Thread(
        target=respond_pings, args=(transport, stop), name="dgate-ping-responder", daemon=True
    )
    thread.start()
    return thread, stop
