"""Wire format and duplex channels between the two parties.

Every frame is::

    b"FTL1" | kind:u8 | payload_len:u32le | payload

Matrices are ``rows:u32le | cols:u32le | rows*cols float64le`` (row-major),
label vectors ``n:u32le | n * int8`` and loss reports five float64le values
in the order ``j_b, j_ab, j_a_reg, j_b_reg, total``.

Payload per kind:

=================  ==========================================================
LATENTS_A          matrix z (overlap) | labels | matrix prototype (1 x k)
LATENTS_B          matrix z (overlap)
LOSS_REPORT_A/B    loss report
GRADIENTS_A/B      count:u32le | count matrices (biases sent as 1 x n)
STOP               empty
PREDICT_REQUEST    matrix z
PREDICT_RESPONSE   matrix of scores (n x 1)
=================  ==========================================================

Both channel realizations move encoded bytes, so what a party observes does
not depend on which one is in use. Over TCP party A listens and party B dials.
"""

from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import (
    ChannelClosed,
    ChannelTimeout,
    FramingError,
    FrameSizeError,
    HandshakeError,
    ProtocolError,
    TransportError,
)
from .losses import LossBreakdown

MAGIC = b"FTL1"
HEADER = struct.Struct("<4sBI")
MAX_PAYLOAD = 2**31
DEFAULT_TIMEOUT = 30.0

_U32 = struct.Struct("<I")
_LOSS = struct.Struct("<5d")
_F64 = np.dtype("<f8")


class MsgKind(enum.IntEnum):
    LATENTS_A = 0x01
    LATENTS_B = 0x02
    LOSS_REPORT_A = 0x03
    LOSS_REPORT_B = 0x04
    GRADIENTS_A = 0x05
    GRADIENTS_B = 0x06
    STOP = 0x07
    PREDICT_REQUEST = 0x08
    PREDICT_RESPONSE = 0x09


_MATRIX_KINDS = {MsgKind.LATENTS_A, MsgKind.LATENTS_B, MsgKind.PREDICT_REQUEST, MsgKind.PREDICT_RESPONSE}
_LOSS_KINDS = {MsgKind.LOSS_REPORT_A, MsgKind.LOSS_REPORT_B}
_GRAD_KINDS = {MsgKind.GRADIENTS_A, MsgKind.GRADIENTS_B}


@dataclass(eq=False)
class FtlMessage:
    kind: MsgKind
    matrix: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    prototype: Optional[np.ndarray] = None
    loss: Optional[LossBreakdown] = None
    arrays: List[np.ndarray] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, FtlMessage) or self.kind != other.kind:
            return False

        def same(a, b):
            if a is None or b is None:
                return a is b
            a, b = np.asarray(a), np.asarray(b)
            # bitwise comparison so that NaN payloads still compare equal
            return a.shape == b.shape and a.astype(_F64).tobytes() == b.astype(_F64).tobytes()

        if self.loss != other.loss and not (
            self.loss is not None and other.loss is not None
            and _LOSS.pack(*self.loss.as_tuple()) == _LOSS.pack(*other.loss.as_tuple())
        ):
            return False
        return (
            same(self.matrix, other.matrix)
            and same(self.labels, other.labels)
            and same(self.prototype, other.prototype)
            and len(self.arrays) == len(other.arrays)
            and all(same(a, b) for a, b in zip(self.arrays, other.arrays))
        )


def latents_a(z, labels, prototype) -> FtlMessage:
    return FtlMessage(MsgKind.LATENTS_A, matrix=z, labels=labels, prototype=prototype)


def latents_b(z) -> FtlMessage:
    return FtlMessage(MsgKind.LATENTS_B, matrix=z)


def loss_report(kind, breakdown) -> FtlMessage:
    return FtlMessage(MsgKind(kind), loss=breakdown)


def stop() -> FtlMessage:
    return FtlMessage(MsgKind.STOP)


# -- encoding ---------------------------------------------------------------


def _pack_matrix(m) -> bytes:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ProtocolError(f"matrix payload must be 2-D, got shape {m.shape}")
    rows, cols = m.shape
    return struct.pack("<II", rows, cols) + np.ascontiguousarray(m, dtype=_F64).tobytes()


def _pack_labels(y) -> bytes:
    y = np.asarray(y)
    if y.size and not np.isin(y, (-1, 1)).all():
        raise ProtocolError("label payload entries must be -1 or +1")
    return _U32.pack(y.size) + y.astype(np.int8).tobytes()


def encode_message(m: FtlMessage) -> bytes:
    kind = MsgKind(m.kind)
    if kind is MsgKind.LATENTS_A:
        payload = _pack_matrix(m.matrix) + _pack_labels(m.labels) + _pack_matrix(
            np.asarray(m.prototype, dtype=np.float64).reshape(1, -1)
        )
    elif kind in _MATRIX_KINDS:
        payload = _pack_matrix(m.matrix)
    elif kind in _LOSS_KINDS:
        payload = _LOSS.pack(*m.loss.as_tuple())
    elif kind in _GRAD_KINDS:
        payload = _U32.pack(len(m.arrays)) + b"".join(_pack_matrix(a) for a in m.arrays)
    else:
        payload = b""
    if len(payload) > MAX_PAYLOAD:
        raise FrameSizeError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, int(kind), len(payload)) + payload


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FramingError(
                f"payload truncated: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def matrix(self) -> np.ndarray:
        rows, cols = self.u32(), self.u32()
        raw = self.take(8 * rows * cols)
        return np.frombuffer(raw, dtype=_F64).astype(np.float64).reshape(rows, cols)

    def labels(self) -> np.ndarray:
        n = self.u32()
        y = np.frombuffer(self.take(n), dtype=np.int8).copy()
        if n and not np.isin(y, (-1, 1)).all():
            raise ProtocolError("label payload entries must be -1 or +1")
        return y


def decode_header(header: bytes):
    """Validate a 9-byte header; returns ``(kind, payload_len)``."""
    if len(header) < HEADER.size:
        raise FramingError(f"header truncated: {len(header)} of {HEADER.size} bytes")
    magic, kind, length = HEADER.unpack(header[:HEADER.size])
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    try:
        kind = MsgKind(kind)
    except ValueError:
        raise ProtocolError(f"unknown message kind 0x{kind:02x}") from None
    if length > MAX_PAYLOAD:
        raise FrameSizeError(f"declared payload of {length} bytes exceeds {MAX_PAYLOAD}")
    return kind, length


def _decode_payload(kind: MsgKind, payload: bytes) -> FtlMessage:
    r = _Reader(payload)
    if kind is MsgKind.LATENTS_A:
        msg = FtlMessage(kind, matrix=r.matrix(), labels=r.labels(), prototype=r.matrix().reshape(-1))
    elif kind in _MATRIX_KINDS:
        msg = FtlMessage(kind, matrix=r.matrix())
    elif kind in _LOSS_KINDS:
        msg = FtlMessage(kind, loss=LossBreakdown(*_LOSS.unpack(r.take(_LOSS.size))))
    elif kind in _GRAD_KINDS:
        msg = FtlMessage(kind, arrays=[r.matrix() for _ in range(r.u32())])
    else:
        msg = FtlMessage(kind)
    if r.pos != len(payload):
        raise FramingError(f"{len(payload) - r.pos} trailing bytes in {kind.name} payload")
    return msg


def decode_message(data: bytes) -> FtlMessage:
    """Decode exactly one complete frame."""
    msg, used = decode_stream(data)
    if used != len(data):
        raise FramingError(f"{len(data) - used} bytes after the end of the frame")
    return msg


def decode_stream(data: bytes, offset: int = 0):
    """Decode the frame starting at ``offset``; returns ``(message, next_offset)``."""
    kind, length = decode_header(bytes(data[offset:offset + HEADER.size]))
    start = offset + HEADER.size
    if start + length > len(data):
        raise FramingError(
            f"length field says {length} payload bytes, only {len(data) - start} remain"
        )
    return _decode_payload(kind, bytes(data[start:start + length])), start + length


# -- channels -----------------------------------------------------------------


class Channel:
    """One end of an ordered, reliable duplex message pipe."""

    role = "?"
    timeout = DEFAULT_TIMEOUT

    def send(self, msg: FtlMessage) -> None:
        self.send_bytes(encode_message(msg))

    def recv(self, timeout: Optional[float] = None) -> FtlMessage:
        return decode_message(self.recv_bytes(self.timeout if timeout is None else timeout))

    def expect(self, kind: MsgKind, timeout: Optional[float] = None) -> FtlMessage:
        msg = self.recv(timeout)
        if msg.kind != kind:
            raise ProtocolError(f"expected {kind.name}, received {msg.kind.name}")
        return msg

    def send_bytes(self, frame: bytes) -> None:
        raise NotImplementedError

    def recv_bytes(self, timeout: float) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_CLOSED = object()


class InProcessChannel(Channel):
    def __init__(self, role, inbox: queue.Queue, outbox: queue.Queue, timeout=DEFAULT_TIMEOUT):
        self.role = role
        self._inbox = inbox
        self._outbox = outbox
        self.timeout = timeout
        self._closed = False

    def send_bytes(self, frame: bytes) -> None:
        if self._closed:
            raise ChannelClosed("send on a closed channel")
        self._outbox.put(bytes(frame))

    def recv_bytes(self, timeout: float) -> bytes:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ChannelTimeout(f"no message within {timeout:g} s") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise ChannelClosed("peer closed the channel")
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def inprocess_pair(timeout=DEFAULT_TIMEOUT):
    """Two connected in-process endpoints ``(a, b)``."""
    a_to_b, b_to_a = queue.Queue(), queue.Queue()
    return (
        InProcessChannel("A", b_to_a, a_to_b, timeout),
        InProcessChannel("B", a_to_b, b_to_a, timeout),
    )


_HELLO = struct.Struct("<4sc")


class TcpChannel(Channel):
    def __init__(self, sock: socket.socket, role: str, timeout=DEFAULT_TIMEOUT):
        self.sock = sock
        self.role = role
        self.timeout = timeout
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send_bytes(self, frame: bytes) -> None:
        try:
            self.sock.sendall(frame)
        except OSError as e:
            raise ChannelClosed(f"send failed: {e}") from e

    def _read_exact(self, n: int) -> bytes:
        chunks, got = [], 0
        while got < n:
            try:
                chunk = self.sock.recv(min(n - got, 1 << 20))
            except socket.timeout:
                raise ChannelTimeout(f"no data within {self.sock.gettimeout():g} s") from None
            except OSError as e:
                raise ChannelClosed(f"receive failed: {e}") from e
            if not chunk:
                raise ChannelClosed(f"peer closed the connection after {got} of {n} bytes")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv_bytes(self, timeout: float) -> bytes:
        self.sock.settimeout(timeout)
        header = self._read_exact(HEADER.size)
        _, length = decode_header(header)
        return header + self._read_exact(length)

    def handshake(self, timeout: float) -> None:
        self.sock.settimeout(timeout)
        self.sock.sendall(_HELLO.pack(MAGIC, self.role.encode()))
        magic, peer = _HELLO.unpack(self._read_exact(_HELLO.size))
        want = b"B" if self.role == "A" else b"A"
        if magic != MAGIC or peer != want:
            raise HandshakeError(f"unexpected handshake {magic!r}/{peer!r} from peer")

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class TcpListener:
    """Bound listening socket for party A; ``port`` is known before accept."""

    def __init__(self, host: str, port: int):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, port))
        self.sock.listen(1)
        self.host, self.port = self.sock.getsockname()[:2]

    def accept(self, timeout=DEFAULT_TIMEOUT) -> TcpChannel:
        self.sock.settimeout(timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            raise ChannelTimeout(f"no peer connected within {timeout:g} s") from None
        finally:
            self.sock.close()
        ch = TcpChannel(conn, "A", timeout)
        ch.handshake(timeout)
        return ch


def dial(host: str, port: int, timeout=DEFAULT_TIMEOUT, retry_for: float = 10.0) -> TcpChannel:
    """Connect as party B, retrying while the listener comes up."""
    deadline = time.monotonic() + retry_for
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            break
        except (ConnectionRefusedError, socket.timeout) as e:
            if time.monotonic() >= deadline:
                raise TransportError(f"cannot reach {host}:{port}: {e}") from e
            time.sleep(0.05)
    ch = TcpChannel(sock, "B", timeout)
    ch.handshake(timeout)
    return ch


def parse_endpoint(text: str):
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise TransportError(f"endpoint must look like host:port, got {text!r}")
    return host, int(port)


_registry = {}
_registry_lock = threading.Lock()


def connect(endpoint: str, role: str, timeout=DEFAULT_TIMEOUT) -> Channel:
    """Open one end of a channel.

    ``endpoint`` is either ``"inproc:<name>"`` (both roles in this process
    call ``connect`` with the same name) or ``"host:port"`` for TCP, where
    role ``"A"`` listens and role ``"B"`` dials.
    """
    if role not in ("A", "B"):
        raise TransportError(f"role must be 'A' or 'B', got {role!r}")
    if endpoint.startswith("inproc:"):
        with _registry_lock:
            pair = _registry.get(endpoint)
            if pair is None:
                pair = _registry[endpoint] = list(inprocess_pair(timeout))
            ch = pair[0 if role == "A" else 1]
            if ch is None:
                raise TransportError(f"role {role} of {endpoint} already taken")
            pair[0 if role == "A" else 1] = None
            if pair == [None, None]:
                del _registry[endpoint]
        return ch
    host, port = parse_endpoint(endpoint)
    if role == "A":
        return TcpListener(host, port).accept(timeout)
    return dial(host, port, timeout)
