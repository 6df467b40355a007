"""Length-prefixed JSON frames: a 4-byte big-endian length, then a UTF-8
JSON body ``{type, run_digest, payload}``."""
from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass, field

MESSAGE_TYPES = frozenset(
    {
        "Hello",
        "RegisterSource",
        "PublicKeyDelivery",
        "MetaInfo",
        "Alignment",
        "CiphertextBatch",
        "SiKeyRequest",
        "SiKeyResponse",
        "MiKeyRequest",
        "MiKeyResponse",
        "LabelBlock",
        "Reject",
        "Abort",
        "Done",
    }
)
DEFAULT_MAX_FRAME = 256 * 2**20
_LEN = struct.Struct(">I")


class WireError(RuntimeError):
    pass


class FrameTooLarge(WireError):
    pass


class ConnectionClosed(WireError):
    pass


class RemoteAbort(WireError):
    pass


@dataclass(frozen=True)
class WireMessage:
    type: str
    run_digest: str
    payload: dict = field(default_factory=dict)


def encode_frame(msg: WireMessage, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    if msg.type not in MESSAGE_TYPES:
        raise WireError(f"unknown message type {msg.type!r}")
    body = json.dumps(
        {"type": msg.type, "run_digest": msg.run_digest, "payload": msg.payload},
        separators=(",", ":"),
    ).encode("utf-8")
    if len(body) > max_frame:
        raise FrameTooLarge(f"frame of {len(body)} bytes exceeds {max_frame}")
    return _LEN.pack(len(body)) + body


def decode_body(body: bytes) -> WireMessage:
    try:
        obj = json.loads(body.decode("utf-8"))
        msg = WireMessage(obj["type"], obj["run_digest"], obj["payload"])
    except (ValueError, KeyError, TypeError) as exc:
        raise WireError(f"malformed frame: {exc}") from exc
    if msg.type not in MESSAGE_TYPES:
        raise WireError(f"unknown message type {msg.type!r}")
    return msg


def decode_frame(data: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> tuple:
    """Parse one frame from the front of ``data``; returns ``(msg, rest)``."""
    if len(data) < 4:
        raise WireError("incomplete length prefix")
    (n,) = _LEN.unpack(data[:4])
    if n > max_frame:
        raise FrameTooLarge(f"frame of {n} bytes exceeds {max_frame}")
    if len(data) < 4 + n:
        raise WireError("incomplete frame body")
    return decode_body(data[4 : 4 + n]), data[4 + n :]


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionClosed("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


class Channel:
    """One framed, digest-checked connection."""

    def __init__(self, sock: socket.socket, run_digest: str, max_frame: int = DEFAULT_MAX_FRAME):
        self.sock = sock
        self.run_digest = run_digest
        self.max_frame = max_frame

    @classmethod
    def connect(cls, host, port, run_digest, max_frame=DEFAULT_MAX_FRAME, timeout=30.0):
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        return cls(sock, run_digest, max_frame)

    def send(self, type_: str, payload: dict | None = None) -> None:
        self.sock.sendall(encode_frame(WireMessage(type_, self.run_digest, payload or {}), self.max_frame))

    def recv(self) -> WireMessage:
        (n,) = _LEN.unpack(_recv_exact(self.sock, 4))
        if n > self.max_frame:
            self.abort(f"frame of {n} bytes exceeds {self.max_frame}")
            raise FrameTooLarge(f"frame of {n} bytes exceeds {self.max_frame}")
        try:
            msg = decode_body(_recv_exact(self.sock, n))
        except WireError as exc:
            self.abort(str(exc))
            raise
        if msg.type == "Abort":
            raise RemoteAbort(msg.payload.get("reason", "aborted"))
        if msg.run_digest != self.run_digest:
            self.abort("run digest mismatch")
            raise WireError("run digest mismatch")
        return msg

    def expect(self, *types: str) -> WireMessage:
        msg = self.recv()
        if msg.type not in types:
            self.abort(f"expected {'/'.join(types)}, got {msg.type}")
            raise WireError(f"expected {'/'.join(types)}, got {msg.type}")
        return msg

    def abort(self, reason: str) -> None:
        try:
            self.send("Abort", {"reason": reason})
        except OSError:
            pass

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass
