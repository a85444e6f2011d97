"""Minimal RFC 6455 WebSocket framing over blocking sockets.

Just enough for the bridge: HTTP upgrade handshake, binary frames (the
envelope wire format travels inside them unchanged), ping/pong, close.
No extensions, no compression, no TLS.
"""

from __future__ import annotations

import base64
import hashlib
import os
import socket
import struct

_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_CONT = 0x0
OP_TEXT = 0x1
OP_BINARY = 0x2
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA


class HandshakeError(ConnectionError):
    pass


def _read_until(sock: socket.socket, marker: bytes, limit: int = 65536) -> bytes:
    buf = bytearray()
    while marker not in buf:
        chunk = sock.recv(4096)
        if not chunk:
            raise HandshakeError("connection closed during handshake")
        buf.extend(chunk)
        if len(buf) > limit:
            raise HandshakeError("handshake header too large")
    return bytes(buf)


def accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + _GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def server_handshake(sock: socket.socket) -> None:
    """Answer an HTTP upgrade request on a freshly accepted socket."""
    raw = _read_until(sock, b"\r\n\r\n")
    head = raw.split(b"\r\n\r\n", 1)[0].decode("latin-1")
    lines = head.split("\r\n")
    headers = {}
    for line in lines[1:]:
        if ":" in line:
            k, v = line.split(":", 1)
            headers[k.strip().lower()] = v.strip()
    if headers.get("upgrade", "").lower() != "websocket" or "sec-websocket-key" not in headers:
        sock.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
        raise HandshakeError("not a websocket upgrade request")
    response = (
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {accept_key(headers['sec-websocket-key'])}\r\n"
        "\r\n"
    )
    sock.sendall(response.encode("latin-1"))


def client_handshake(sock: socket.socket, host: str, port: int, path: str = "/") -> None:
    key = base64.b64encode(os.urandom(16)).decode("ascii")
    request = (
        f"GET {path} HTTP/1.1\r\n"
        f"Host: {host}:{port}\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Key: {key}\r\n"
        "Sec-WebSocket-Version: 13\r\n"
        "\r\n"
    )
    sock.sendall(request.encode("latin-1"))
    raw = _read_until(sock, b"\r\n\r\n")
    head = raw.split(b"\r\n\r\n", 1)[0].decode("latin-1")
    if "101" not in head.split("\r\n")[0]:
        raise HandshakeError(f"unexpected handshake response: {head.splitlines()[0]}")
    for line in head.split("\r\n")[1:]:
        if line.lower().startswith("sec-websocket-accept:"):
            got = line.split(":", 1)[1].strip()
            if got != accept_key(key):
                raise HandshakeError("bad Sec-WebSocket-Accept")
            return
    raise HandshakeError("missing Sec-WebSocket-Accept")


def send_frame(sock: socket.socket, payload: bytes, opcode: int = OP_BINARY, mask: bool = False) -> None:
    head = bytearray([0x80 | opcode])
    n = len(payload)
    mask_bit = 0x80 if mask else 0x00
    if n < 126:
        head.append(mask_bit | n)
    elif n < 65536:
        head.append(mask_bit | 126)
        head.extend(struct.pack(">H", n))
    else:
        head.append(mask_bit | 127)
        head.extend(struct.pack(">Q", n))
    if mask:
        key = os.urandom(4)
        head.extend(key)
        masked = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
        sock.sendall(bytes(head) + masked)
    else:
        sock.sendall(bytes(head) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("socket closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def recv_frame(sock: socket.socket) -> tuple[int, bytes, bool]:
    """Read one frame; returns (opcode, payload, fin)."""
    b0, b1 = _recv_exact(sock, 2)
    fin = bool(b0 & 0x80)
    opcode = b0 & 0x0F
    masked = bool(b1 & 0x80)
    n = b1 & 0x7F
    if n == 126:
        (n,) = struct.unpack(">H", _recv_exact(sock, 2))
    elif n == 127:
        (n,) = struct.unpack(">Q", _recv_exact(sock, 8))
    key = _recv_exact(sock, 4) if masked else None
    payload = _recv_exact(sock, n) if n else b""
    if key:
        payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
    return opcode, payload, fin


class WsSocket:
    """Message-oriented wrapper: send/recv binary payloads, auto ping/pong.

    `server` decides masking (clients mask, servers don't, per the RFC).
    """

    def __init__(self, sock: socket.socket, server: bool):
        self._sock = sock
        self._mask = not server
        self._frag = bytearray()

    def send(self, payload: bytes) -> None:
        send_frame(self._sock, payload, OP_BINARY, self._mask)

    def recv(self) -> bytes:
        """Next binary message; b'' once the peer closes."""
        while True:
            try:
                opcode, payload, fin = recv_frame(self._sock)
            except (ConnectionError, OSError):
                return b""
            if opcode == OP_CLOSE:
                try:
                    send_frame(self._sock, payload[:2], OP_CLOSE, self._mask)
                except OSError:
                    pass
                return b""
            if opcode == OP_PING:
                send_frame(self._sock, payload, OP_PONG, self._mask)
                continue
            if opcode == OP_PONG:
                continue
            if opcode in (OP_BINARY, OP_TEXT, OP_CONT):
                self._frag.extend(payload)
                if fin:
                    msg = bytes(self._frag)
                    self._frag.clear()
                    return msg

    def close(self) -> None:
        try:
            send_frame(self._sock, struct.pack(">H", 1000), OP_CLOSE, self._mask)
        except OSError:
            pass
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
