"""Framed control-channel links: length-prefixed byte blobs over a stream
socket or over a datagram transport (one frame per datagram).

A link carries opaque frame bodies; whether a body is a plaintext control
message or an AES-GCM sealed one is decided by the session layer above.
Servers expose a FrameService: `handle(conn_key, frame) -> replies`, driven
either by a per-connection TCP thread or by a simulated-network handler.
"""

from __future__ import annotations

import abc
import logging
import socket
import struct
import threading

from .probe import Endpoint, Transport, TransportClosed

log = logging.getLogger("dgate.links")

DEFAULT_CONTROL_PORT = 47475
DEFAULT_LINK_TIMEOUT_US = 30_000_000


class LinkError(Exception):
    pass


class LinkClosed(LinkError):
    pass


class FrameLink(abc.ABC):
    """Bidirectional ordered frame pipe to one peer."""

    @abc.abstractmethod
    def send_frame(self, body: bytes) -> None: ...

    @abc.abstractmethod
    def recv_frame(self, timeout_us: int = DEFAULT_LINK_TIMEOUT_US) -> bytes | None: ...

    def close(self) -> None:  # pragma: no cover - default no-op
        pass


class DatagramFrameLink(FrameLink):
    """Frames over a datagram transport, one frame per datagram.

    Used with the simulated network, where links are reliable and ordered by
    construction; the 4-byte prefix is kept so the bytes match the stream
    encoding exactly.
    """

    def __init__(self, transport: Transport, peer: Endpoint):
        self._transport = transport
        self._peer = peer

    def send_frame(self, body: bytes) -> None:
        self._transport.send(struct.pack(">I", len(body)) + body, self._peer)

    def recv_frame(self, timeout_us: int = DEFAULT_LINK_TIMEOUT_US) -> bytes | None:
        deadline = self._transport.now_us() + timeout_us
        while True:
            remaining = deadline - self._transport.now_us()
            if remaining <= 0:
                return None
            got = self._transport.recv(remaining)
            if got is None:
                return None
            data, source, _ = got
            if source != self._peer or len(data) < 4:
                continue
            (length,) = struct.unpack(">I", data[:4])
            if length != len(data) - 4:
                continue
            return data[4:]

    def close(self) -> None:
        self._transport.close()


class TcpFrameLink(FrameLink):
    """Frames over a connected TCP socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._lock = threading.Lock()

    @classmethod
    def connect(cls, endpoint: Endpoint, timeout_s: float = 10.0) -> "TcpFrameLink":
        sock = socket.create_connection(endpoint, timeout=timeout_s)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock)

    def send_frame(self, body: bytes) -> None:
        with self._lock:
            try:
                self._sock.sendall(struct.pack(">I", len(body)) + body)
            except OSError as exc:
                raise LinkClosed(str(exc)) from exc

    def _recv_exact(self, count: int, deadline_s: float | None) -> bytes | None:
        buf = b""
        while len(buf) < count:
            if deadline_s is not None:
                import time

                remaining = deadline_s - time.monotonic()
                if remaining <= 0:
                    return None
                self._sock.settimeout(remaining)
            try:
                chunk = self._sock.recv(count - len(buf))
            except socket.timeout:
                return None
            except OSError as exc:
                raise LinkClosed(str(exc)) from exc
            if not chunk:
                raise LinkClosed("peer closed the connection")
            buf += chunk
        return buf

    def recv_frame(self, timeout_us: int = DEFAULT_LINK_TIMEOUT_US) -> bytes | None:
        import time

        deadline = time.monotonic() + timeout_us / 1_000_000
        header = self._recv_exact(4, deadline)
        if header is None:
            return None
        (length,) = struct.unpack(">I", header)
        body = self._recv_exact(length, deadline)
        return body

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class FrameService(abc.ABC):
    """Per-peer request handling for control servers."""

    @abc.abstractmethod
    def handle(self, conn_key, frame: bytes) -> list[bytes]:
        """Process one inbound frame; returns reply frames in order."""

    def on_connect(self, conn_key) -> list[bytes]:
        """Frames to send when a peer attaches (server-speaks-first hooks)."""
        return []

    def on_disconnect(self, conn_key) -> None:
        pass


class TcpFrameServer:
    """Accept loop running a FrameService, one thread per connection."""

    def __init__(self, service: FrameService, bind: Endpoint = ("0.0.0.0", 0)):
        self._service = service
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(bind)
        self._listener.listen(16)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)

    @property
    def endpoint(self) -> Endpoint:
        return self._listener.getsockname()

    def start(self) -> "TcpFrameServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, peer = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(
                target=self._serve_conn, args=(conn, peer), daemon=True
            ).start()

    def _serve_conn(self, conn: socket.socket, peer) -> None:
        link = TcpFrameLink(conn)
        conn_key = peer
        try:
            for frame in self._service.on_connect(conn_key):
                link.send_frame(frame)
            while not self._stop.is_set():
                frame = link.recv_frame(timeout_us=3_600_000_000)
                if frame is None:
                    continue
                for reply in self._service.handle(conn_key, frame):
                    link.send_frame(reply)
        except (LinkClosed, OSError):
            pass
        finally:
            self._service.on_disconnect(conn_key)
            link.close()
