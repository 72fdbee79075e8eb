"""Byte-stream transports carrying framed messages."""

from __future__ import annotations

import socket
from typing import Optional

from ..errors import SessionAbort, WireDecodeError
from .wire import HEADER, WireMessage, decode_message, encode_message, frame_length


class StreamChannel:
    """Framed messages over a connected stream socket.

    Every frame sent and received is appended to ``transcript`` as
    ``(direction, bytes)`` with direction ``"tx"`` or ``"rx"``.
    """

    def __init__(self, sock: socket.socket, timeout: Optional[float] = 30.0):
        self.sock = sock
        self.sock.settimeout(timeout)
        self.transcript: list[tuple[str, bytes]] = []

    def send(self, msg: WireMessage) -> None:
        data = encode_message(msg)
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise SessionAbort("transport", str(exc)) from exc
        self.transcript.append(("tx", data))

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except OSError as exc:
                raise SessionAbort("transport", str(exc)) from exc
            if not chunk:
                raise SessionAbort("transport", "connection closed mid-session")
            buf += chunk
        return bytes(buf)

    def recv(self) -> WireMessage:
        head = self._read_exact(HEADER.size)
        try:
            total = frame_length(head)
        except WireDecodeError as exc:
            raise SessionAbort("decode", str(exc)) from exc
        data = head + self._read_exact(total - HEADER.size)
        self.transcript.append(("rx", data))
        try:
            return decode_message(data)
        except WireDecodeError as exc:
            raise SessionAbort("decode", str(exc)) from exc

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def loopback_pair(timeout: Optional[float] = 30.0) -> tuple[StreamChannel, StreamChannel]:
    """Two connected in-process channels (a socketpair)."""
    a, b = socket.socketpair()
    return StreamChannel(a, timeout), StreamChannel(b, timeout)


def connect(host: str, port: int, timeout: Optional[float] = 30.0) -> StreamChannel:
    return StreamChannel(socket.create_connection((host, port), timeout=timeout), timeout)


def accept_one(host: str, port: int, timeout: Optional[float] = 30.0,
               ready=None) -> StreamChannel:
    """Listen on ``(host, port)`` and return the first connection.

    ``ready`` is called with the bound port once listening, which lets callers
    pass port 0 and learn the ephemeral port.
    """
    with socket.create_server((host, port)) as srv:
        srv.settimeout(timeout)
        if ready is not None:
            ready(srv.getsockname()[1])
        conn, _ = srv.accept()
    return StreamChannel(conn, timeout)

