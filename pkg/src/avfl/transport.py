"""Two-party message transport.

Frames are a 4-byte big-endian length followed by a UTF-8 JSON body.  The body
is an :class:`Envelope`: protocol name, step tag, per-direction sequence
number and a payload of plain JSON values (big integers travel as lowercase
hex strings, encoded by the protocol layer).

Two channels are provided: :class:`InProcChannel` (a pair of queues, used by
tests and single-process simulation) and :class:`TcpChannel`.
"""
from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import Any, Optional

from .errors import PeerAbortError, ProtocolStateError, TransportError

log = logging.getLogger(__name__)

PROTOCOLS = ("apsi", "avlr")
ABORT_TAG = "abort"
_HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 30


@dataclass(frozen=True)
class Envelope:
    protocol: str
    step_tag: str
    sequence: int
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.sequence < 0:
            raise ValueError("sequence must be non-negative")

    def to_bytes(self) -> bytes:
        body = {
            "protocol": self.protocol,
            "step_tag": self.step_tag,
            "sequence": self.sequence,
            "payload": self.payload,
        }
        return json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")

    @classmethod
    def from_bytes(cls, data: bytes) -> "Envelope":
        try:
            body = json.loads(data.decode("utf-8"))
            return cls(body["protocol"], body["step_tag"], int(body["sequence"]), body["payload"])
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise TransportError(f"malformed envelope: {exc}") from exc


def frame(body: bytes) -> bytes:
    if len(body) > MAX_FRAME:
        raise TransportError("frame too large")
    return _HEADER.pack(len(body)) + body


class InProcChannel:
    """One end of an in-memory duplex pipe carrying framed bytes."""

    def __init__(self, inbox: "queue.Queue[bytes]", outbox: "queue.Queue[bytes]", timeout: Optional[float] = 600.0):
        self._inbox = inbox
        self._outbox = outbox
        self.timeout = timeout
        self.closed = False

    @classmethod
    def pair(cls, timeout: Optional[float] = 600.0) -> tuple["InProcChannel", "InProcChannel"]:
        a_to_b: queue.Queue = queue.Queue()
        b_to_a: queue.Queue = queue.Queue()
        return cls(b_to_a, a_to_b, timeout), cls(a_to_b, b_to_a, timeout)

    def send_bytes(self, body: bytes) -> None:
        if self.closed:
            raise TransportError("channel closed")
        self._outbox.put(frame(body))

    def recv_bytes(self) -> bytes:
        if self.closed:
            raise TransportError("channel closed")
        try:
            data = self._inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise TransportError("timed out waiting for peer") from None
        if data is None:
            raise TransportError("peer closed the channel")
        (length,) = _HEADER.unpack_from(data)
        if length != len(data) - _HEADER.size:
            raise TransportError("frame length mismatch")
        return data[_HEADER.size:]

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._outbox.put(None)


class TcpChannel:
    """Framed byte stream over a connected TCP socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock

    @classmethod
    def listen(cls, host: str, port: int, timeout: Optional[float] = 600.0) -> "TcpChannel":
        with socket.create_server((host, port)) as server:
            server.settimeout(timeout)
            try:
                conn, addr = server.accept()
            except socket.timeout:
                raise TransportError(f"no peer connected to {host}:{port}") from None
        log.info("accepted peer %s:%s", *addr[:2])
        conn.settimeout(timeout)
        return cls(conn)

    @classmethod
    def connect(cls, host: str, port: int, timeout: Optional[float] = 600.0, retry_for: float = 30.0) -> "TcpChannel":
        deadline = time.monotonic() + retry_for
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=timeout)
                return cls(sock)
            except OSError as exc:
                if time.monotonic() >= deadline:
                    raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
                time.sleep(0.1)

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            try:
                chunk = self.sock.recv(min(n, 1 << 20))
            except OSError as exc:
                raise TransportError(f"connection lost: {exc}") from exc
            if not chunk:
                raise TransportError("connection closed by peer")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def send_bytes(self, body: bytes) -> None:
        try:
            self.sock.sendall(frame(body))
        except OSError as exc:
            raise TransportError(f"connection lost: {exc}") from exc

    def recv_bytes(self) -> bytes:
        (length,) = _HEADER.unpack(self._read_exact(_HEADER.size))
        if length > MAX_FRAME:
            raise TransportError("frame too large")
        return self._read_exact(length)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


class Endpoint:
    """A session's view of the channel: numbers outgoing envelopes and checks incoming ones."""

    def __init__(self, channel):
        self.channel = channel
        self._next_send = 0
        self._next_recv = 0

    def send(self, step_tag: str, payload: Optional[dict] = None) -> Envelope:
        protocol = step_tag.split("/", 1)[0]
        env = Envelope(protocol, step_tag, self._next_send, payload or {})
        self.channel.send_bytes(env.to_bytes())
        self._next_send += 1
        log.debug("sent %s #%d", step_tag, env.sequence)
        return env

    def recv(self, expected_step_tag: str) -> Envelope:
        env = Envelope.from_bytes(self.channel.recv_bytes())
        if env.sequence != self._next_recv:
            raise TransportError(f"sequence gap: expected {self._next_recv}, got {env.sequence}")
        self._next_recv += 1
        if env.step_tag.endswith("/" + ABORT_TAG):
            raise PeerAbortError(env.payload.get("reason", "peer aborted"))
        if env.step_tag != expected_step_tag:
            raise ProtocolStateError(f"expected {expected_step_tag!r}, received {env.step_tag!r}")
        log.debug("received %s #%d", env.step_tag, env.sequence)
        return env

    def abort(self, protocol: str, reason: str) -> None:
        try:
            self.send(f"{protocol}/{ABORT_TAG}", {"reason": reason})
        except TransportError:
            pass

    def close(self) -> None:
        self.channel.close()
