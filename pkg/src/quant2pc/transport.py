"""Two-party duplex channels with exact byte and round accounting.

Every message is a length-prefixed frame (u32 little-endian length, then the
payload). Payload bytes are metered under the sender's current label path;
the four framing bytes per message go to the reserved ``__framing`` label.

Both endpoints record every message they see, sent or received. Protocols
run in lockstep, so each endpoint ends up with the same complete meter and
no end-of-run meter exchange is needed.
"""

from __future__ import annotations

import enum
import os
import queue
import socket
import struct
import threading
from collections import defaultdict
from contextlib import contextmanager

FRAMING_LABEL = "__framing"
FRAME_HEADER = struct.Struct("<I")
MAX_FRAME = (1 << 32) - 1
DEFAULT_TIMEOUT = float(os.environ.get("QUANT2PC_TIMEOUT", "600"))
ADDR_ENV = "QUANT2PC_ADDR"


class Role(enum.IntEnum):
    SERVER = 0
    CLIENT = 1

    @property
    def peer(self) -> "Role":
        return Role(1 - self)

    def __str__(self) -> str:
        return self.name.lower()


class ChannelError(RuntimeError):
    """Peer disconnected, timed out, or sent a malformed frame."""


class PeerDisconnected(ChannelError):
    pass


class FramingError(ChannelError):
    pass


class CommMeter:
    """Byte and round counters with a per-label breakdown.

    Labels form paths such as ``requant/tr/wrap/ot``. Querying a label sums
    every path that contains it as a component (or as a run of components
    when the query itself contains ``/``).
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.bytes_sent_by = {Role.SERVER: 0, Role.CLIENT: 0}
        self.rounds = 0
        self.messages = 0
        self.framing_bytes = 0
        self._paths: dict[str, list[int]] = defaultdict(lambda: [0, 0])
        self._last_sender: Role | None = None

    def record(self, sender: Role, path: str, nbytes: int) -> None:
        with self._lock:
            entry = self._paths[path]
            entry[0] += nbytes
            if sender != self._last_sender:
                self.rounds += 1
                entry[1] += 1
                self._last_sender = sender
            self.bytes_sent_by[sender] += nbytes
            self.messages += 1
            self.framing_bytes += FRAME_HEADER.size

    def total_bytes(self) -> int:
        with self._lock:
            return sum(self.bytes_sent_by.values())

    def total_bits(self) -> int:
        return 8 * self.total_bytes()

    def breakdown(self) -> dict[str, tuple[int, int]]:
        """Map each recorded label path to ``(bytes, rounds)``."""
        with self._lock:
            out = {p: (b, r) for p, (b, r) in sorted(self._paths.items())}
            out[FRAMING_LABEL] = (self.framing_bytes, 0)
            return out

    def bytes(self, label: str | None = None) -> int:
        if label is None:
            return self.total_bytes()
        if label == FRAMING_LABEL:
            return self.framing_bytes
        with self._lock:
            return sum(b for p, (b, _) in self._paths.items() if _matches(p, label))

    def bits(self, label: str | None = None) -> int:
        return 8 * self.bytes(label)

    def rounds_for(self, label: str) -> int:
        with self._lock:
            return sum(r for p, (_, r) in self._paths.items() if _matches(p, label))

    def snapshot(self) -> tuple[int, int]:
        """``(total bytes, rounds)`` for computing deltas around a step."""
        with self._lock:
            return sum(self.bytes_sent_by.values()), self.rounds


def _matches(path: str, label: str) -> bool:
    parts = path.split("/")
    want = label.split("/")
    n = len(want)
    return any(parts[i : i + n] == want for i in range(len(parts) - n + 1))


class Endpoint:
    """One party's end of a channel.

    ``scope`` pushes a label onto the stack used to attribute traffic.
    """

    def __init__(self, role: Role, meter: CommMeter | None = None, timeout: float = DEFAULT_TIMEOUT):
        self.role = Role(role)
        self.meter = meter if meter is not None else CommMeter()
        self.timeout = timeout
        self._stack: list[str] = []

    @property
    def path(self) -> str:
        return "/".join(self._stack) if self._stack else "unlabeled"

    @contextmanager
    def scope(self, label: str):
        self._stack.append(label)
        try:
            yield
        finally:
            self._stack.pop()

    def send(self, payload: bytes, label: str | None = None) -> None:
        payload = bytes(payload)
        if len(payload) > MAX_FRAME:
            raise FramingError("payload exceeds the u32 frame length")
        path = self.path if label is None else f"{self.path}/{label}" if self._stack else label
        self._write(payload)
        self.meter.record(self.role, path, len(payload))

    def recv(self, label: str | None = None) -> bytes:
        payload = self._read()
        path = self.path if label is None else f"{self.path}/{label}" if self._stack else label
        self.meter.record(self.role.peer, path, len(payload))
        return payload

    def _write(self, payload: bytes) -> None:
        raise NotImplementedError

    def _read(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_CLOSED = object()


class QueueEndpoint(Endpoint):
    """In-process endpoint backed by a pair of queues."""

    def __init__(self, role, inbox: queue.Queue, outbox: queue.Queue, **kw):
        super().__init__(role, **kw)
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def _write(self, payload: bytes) -> None:
        if self._closed:
            raise PeerDisconnected("endpoint already closed")
        self._outbox.put(payload)

    def _read(self) -> bytes:
        try:
            item = self._inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise ChannelError("timed out waiting for the peer") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise PeerDisconnected("peer closed the channel")
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def open_inproc_pair(timeout: float = DEFAULT_TIMEOUT) -> tuple[QueueEndpoint, QueueEndpoint]:
    """Return connected ``(server, client)`` endpoints in one process."""
    a, b = queue.Queue(), queue.Queue()
    return (
        QueueEndpoint(Role.SERVER, a, b, timeout=timeout),
        QueueEndpoint(Role.CLIENT, b, a, timeout=timeout),
    )


class TcpEndpoint(Endpoint):
    """TCP endpoint. A reader thread drains the socket so that large
    simultaneous sends can never deadlock on kernel buffers."""

    def __init__(self, role, sock: socket.socket, **kw):
        super().__init__(role, **kw)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._inbox: queue.Queue = queue.Queue()
        self._closed = False
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _recv_exact(self, n: int) -> bytes | None:
        chunks, got = [], 0
        while got < n:
            chunk = self._sock.recv(min(n - got, 1 << 20))
            if not chunk:
                return None
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def _pump(self) -> None:
        try:
            while True:
                head = self._recv_exact(FRAME_HEADER.size)
                if head is None:
                    break
                (n,) = FRAME_HEADER.unpack(head)
                body = self._recv_exact(n) if n else b""
                if body is None:
                    self._inbox.put(FramingError("connection closed inside a frame"))
                    return
                self._inbox.put(body)
        except OSError as exc:
            if not self._closed:
                self._inbox.put(PeerDisconnected(str(exc)))
                return
        self._inbox.put(_CLOSED)

    def _write(self, payload: bytes) -> None:
        try:
            self._sock.sendall(FRAME_HEADER.pack(len(payload)) + payload)
        except OSError as exc:
            raise PeerDisconnected(str(exc)) from exc

    def _read(self) -> bytes:
        try:
            item = self._inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise ChannelError("timed out waiting for the peer") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise PeerDisconnected("peer closed the connection")
        if isinstance(item, Exception):
            raise item
        return item

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def parse_addr(addr: str | None) -> tuple[str, int]:
    """Parse ``host:port``; falls back to ``$QUANT2PC_ADDR`` then 127.0.0.1:0."""
    addr = addr or os.environ.get(ADDR_ENV) or "127.0.0.1:0"
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {addr!r}")
    return host, int(port)


class TcpListener:
    """Bound listening socket; ``port`` is known before ``accept``."""

    def __init__(self, addr: str | None = None):
        host, port = parse_addr(addr)
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind((host, port))
        except OSError as exc:
            self._sock.close()
            raise ChannelError(f"cannot bind {host}:{port}: {exc}") from exc
        self._sock.listen(1)
        self.host, self.port = self._sock.getsockname()[:2]

    @property
    def addr(self) -> str:
        return f"{self.host}:{self.port}"

    def accept(self, role: Role = Role.SERVER, timeout: float = DEFAULT_TIMEOUT) -> TcpEndpoint:
        self._sock.settimeout(timeout)
        try:
            conn, _ = self._sock.accept()
        except OSError as exc:
            raise ChannelError(f"accept failed: {exc}") from exc
        finally:
            self._sock.close()
        conn.settimeout(None)
        return TcpEndpoint(role, conn, timeout=timeout)


def open_tcp(
    role: Role,
    listen_addr: str | None = None,
    connect_addr: str | None = None,
    timeout: float = DEFAULT_TIMEOUT,
) -> TcpEndpoint:
    """Open a TCP endpoint by listening (and accepting once) or connecting."""
    if (listen_addr is None) == (connect_addr is None):
        raise ValueError("give exactly one of listen_addr and connect_addr")
    if listen_addr is not None:
        return TcpListener(listen_addr).accept(role, timeout)
    host, port = parse_addr(connect_addr)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ChannelError(f"cannot connect to {host}:{port}: {exc}") from exc
    sock.settimeout(None)
    return TcpEndpoint(role, sock, timeout=timeout)


def open_tcp_pair(timeout: float = DEFAULT_TIMEOUT) -> tuple[TcpEndpoint, TcpEndpoint]:
    """Loopback ``(server, client)`` pair over a real TCP connection."""
    listener = TcpListener("127.0.0.1:0")
    result: dict = {}

    def accept():
        try:
            result["server"] = listener.accept(Role.SERVER, timeout)
        except Exception as exc:  # surfaced below
            result["error"] = exc

    t = threading.Thread(target=accept)
    t.start()
    client = open_tcp(Role.CLIENT, connect_addr=listener.addr, timeout=timeout)
    t.join()
    if "error" in result:
        client.close()
        raise result["error"]
    return result["server"], client
