"""Loopback WebSocket adapter for the control API.

The daemon speaks newline-delimited JSON over a plain TCP socket on
loopback; browser pages cannot open those.  This bridge accepts WebSocket
connections and splices each one onto its own fresh control connection,
relaying messages 1:1 — one control line becomes one text message and one
text message becomes one control line.  Nothing is parsed or rewritten in
transit, so the schema seen by the browser is exactly the daemon's.

The WebSocket side implements RFC 6455 directly, but only the pieces a
loopback text relay needs: the HTTP upgrade handshake, masked client
frames, unmasked server frames, fragmentation, ping/pong, and close.
Binary messages are refused with status 1003.
"""

from __future__ import annotations

import base64
import hashlib
import selectors
import socket
import time
from typing import Callable, Optional

from .errors import SocketFailure

# Fixed by RFC 6455 §1.3; every conforming endpoint uses this exact string.
_GUID = b"258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

_OP_CONT = 0x0
_OP_TEXT = 0x1
_OP_BINARY = 0x2
_OP_CLOSE = 0x8
_OP_PING = 0x9
_OP_PONG = 0xA

# A control line is at most a few KiB; anything near this is hostile or lost.
_MAX_MESSAGE = 1 << 20


def accept_value(key: str) -> str:
    """Sec-WebSocket-Accept for a client's Sec-WebSocket-Key."""
    digest = hashlib.sha1(key.strip().encode("ascii") + _GUID).digest()
    return base64.b64encode(digest).decode("ascii")


def encode_frame(opcode: int, payload: bytes = b"") -> bytes:
    """One unmasked (server-side) frame."""
    head = bytearray((0x80 | opcode,))
    n = len(payload)
    if n < 126:
        head.append(n)
    elif n < 1 << 16:
        head.append(126)
        head += n.to_bytes(2, "big")
    else:
        head.append(127)
        head += n.to_bytes(8, "big")
    return bytes(head) + payload


def parse_frame(buf: bytearray) -> Optional[tuple[bool, int, bytes, int]]:
    """Decode one frame from the front of ``buf``.

    Returns (fin, opcode, unmasked payload, bytes consumed), or None while
    the frame is still incomplete.  Raises ValueError on protocol errors
    (unmasked client frame, oversize payload).
    """
    if len(buf) < 2:
        return None
    b0, b1 = buf[0], buf[1]
    fin = bool(b0 & 0x80)
    opcode = b0 & 0x0F
    masked = bool(b1 & 0x80)
    length = b1 & 0x7F
    idx = 2
    if length == 126:
        if len(buf) < 4:
            return None
        length = int.from_bytes(buf[2:4], "big")
        idx = 4
    elif length == 127:
        if len(buf) < 10:
            return None
        length = int.from_bytes(buf[2:10], "big")
        idx = 10
    if length > _MAX_MESSAGE:
        raise ValueError("frame too large")
    if not masked:
        # RFC 6455 §5.1: client-to-server frames MUST be masked.
        raise ValueError("client frame not masked")
    if len(buf) < idx + 4:
        return None
    mask = buf[idx:idx + 4]
    idx += 4
    if len(buf) < idx + length:
        return None
    payload = bytes(b ^ mask[i % 4]
                    for i, b in enumerate(buf[idx:idx + length]))
    return fin, opcode, payload, idx + length


def _parse_headers(blob: bytes) -> dict[str, str]:
    headers = {}
    for line in blob.split(b"\r\n")[1:]:
        if b":" in line:
            name, _, value = line.partition(b":")
            headers[name.strip().lower().decode("latin-1")] = \
                value.strip().decode("latin-1")
    return headers


class _Pair:
    """One browser connection spliced onto one control connection."""

    def __init__(self, ws: socket.socket) -> None:
        self.ws = ws
        self.ctl: Optional[socket.socket] = None
        self.state = "handshake"
        self.ws_in = bytearray()      # raw bytes from the browser
        self.ws_out = bytearray()     # encoded frames to the browser
        self.ctl_in = bytearray()     # partial line from the daemon
        self.ctl_out = bytearray()    # lines headed to the daemon
        self.frag = bytearray()       # text message under fragmentation
        self.dying = False            # close sent; drop once ws_out drains


class ControlBridge:
    """Accept WebSocket clients and relay each to the daemon's control port.

    The listener binds to loopback only; this is operator plumbing, not a
    public service.  ``listen_port=0`` picks a free port (see ``port``).
    """

    def __init__(self, *, control_port: int, listen_port: int = 0,
                 host: str = "127.0.0.1",
                 control_host: str = "127.0.0.1") -> None:
        self.control_address = (control_host, control_port)
        self._sel = selectors.DefaultSelector()
        lsock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            lsock.bind((host, listen_port))
        except OSError as exc:
            lsock.close()
            raise SocketFailure(
                f"cannot bind WebSocket port {listen_port}: {exc}") from exc
        lsock.listen(16)
        lsock.setblocking(False)
        self._lsock = lsock
        self._sel.register(lsock, selectors.EVENT_READ, ("accept", None))
        self._pairs: set[_Pair] = set()
        self._closed = False

    @property
    def port(self) -> int:
        return self._lsock.getsockname()[1]

    # --- lifecycle -----------------------------------------------------------

    def serve(self, *, max_seconds: Optional[float] = None,
              should_stop: Optional[Callable[[], bool]] = None) -> None:
        deadline = (time.monotonic() + max_seconds
                    if max_seconds is not None else None)
        try:
            while True:
                if should_stop is not None and should_stop():
                    return
                if deadline is not None and time.monotonic() >= deadline:
                    return
                for key, _mask in self._sel.select(timeout=0.1):
                    kind, pair = key.data
                    try:
                        if kind == "accept":
                            self._accept()
                        elif kind == "ws":
                            self._ws_event(pair, key.fileobj)
                        else:
                            self._ctl_event(pair, key.fileobj)
                    except (OSError, ValueError):
                        self._drop(pair)
        finally:
            self.close()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for pair in list(self._pairs):
            self._drop(pair)
        try:
            self._sel.unregister(self._lsock)
        except KeyError:
            pass
        self._lsock.close()
        self._sel.close()

    # --- plumbing ------------------------------------------------------------

    def _accept(self) -> None:
        conn, _addr = self._lsock.accept()
        conn.setblocking(False)
        pair = _Pair(conn)
        self._pairs.add(pair)
        self._sel.register(conn, selectors.EVENT_READ, ("ws", pair))

    def _drop(self, pair: Optional[_Pair]) -> None:
        if pair is None or pair not in self._pairs:
            return
        self._pairs.discard(pair)
        for sock in (pair.ws, pair.ctl):
            if sock is None:
                continue
            try:
                self._sel.unregister(sock)
            except (KeyError, ValueError):
                pass
            sock.close()

    def _update(self, pair: _Pair) -> None:
        """Re-arm write interest to match buffered output, flushing first."""
        for sock, buf in ((pair.ws, pair.ws_out), (pair.ctl, pair.ctl_out)):
            if sock is None:
                continue
            if buf:
                try:
                    sent = sock.send(buf)
                    del buf[:sent]
                except BlockingIOError:
                    pass
            events = selectors.EVENT_READ
            if buf:
                events |= selectors.EVENT_WRITE
            kind = "ws" if sock is pair.ws else "ctl"
            self._sel.modify(sock, events, (kind, pair))
        if pair.dying and not pair.ws_out:
            self._drop(pair)

    # --- browser side ----------------------------------------------------------

    def _ws_event(self, pair: _Pair, sock: socket.socket) -> None:
        try:
            chunk = sock.recv(65536)
        except BlockingIOError:
            chunk = None
        if chunk == b"":
            self._drop(pair)
            return
        if chunk:
            pair.ws_in += chunk
            if len(pair.ws_in) > _MAX_MESSAGE:
                raise ValueError("inbound buffer overrun")
        if pair.state == "handshake":
            self._try_handshake(pair)
        if pair.state == "open":
            self._pump_frames(pair)
        self._update(pair)

    def _try_handshake(self, pair: _Pair) -> None:
        end = pair.ws_in.find(b"\r\n\r\n")
        if end < 0:
            return
        headers = _parse_headers(bytes(pair.ws_in[:end]))
        del pair.ws_in[:end + 4]
        key = headers.get("sec-websocket-key")
        if (key is None
                or "websocket" not in headers.get("upgrade", "").lower()):
            pair.ws_out += (b"HTTP/1.1 400 Bad Request\r\n"
                            b"Connection: close\r\n\r\n")
            pair.dying = True
            return
        pair.ws_out += (
            "HTTP/1.1 101 Switching Protocols\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Accept: {accept_value(key)}\r\n"
            "\r\n").encode("ascii")
        try:
            ctl = socket.create_connection(self.control_address, timeout=5.0)
        except OSError:
            # Upgrade completes, then an honest close: the browser gets a
            # code it can show instead of a vanished TCP connection.
            pair.ws_out += encode_frame(
                _OP_CLOSE, (1011).to_bytes(2, "big") + b"control API down")
            pair.dying = True
            return
        ctl.setblocking(False)
        pair.ctl = ctl
        self._sel.register(ctl, selectors.EVENT_READ, ("ctl", pair))
        pair.state = "open"

    def _pump_frames(self, pair: _Pair) -> None:
        while True:
            frame = parse_frame(pair.ws_in)
            if frame is None:
                return
            fin, opcode, payload, consumed = frame
            del pair.ws_in[:consumed]
            if opcode in (_OP_TEXT, _OP_CONT):
                pair.frag += payload
                if len(pair.frag) > _MAX_MESSAGE:
                    raise ValueError("message too large")
                if fin:
                    line = bytes(pair.frag).rstrip(b"\n") + b"\n"
                    pair.frag.clear()
                    pair.ctl_out += line
            elif opcode == _OP_BINARY:
                pair.ws_out += encode_frame(
                    _OP_CLOSE, (1003).to_bytes(2, "big") + b"text only")
                pair.dying = True
                return
            elif opcode == _OP_PING:
                pair.ws_out += encode_frame(_OP_PONG, payload)
            elif opcode == _OP_CLOSE:
                pair.ws_out += encode_frame(_OP_CLOSE, payload[:2])
                pair.dying = True
                return
            # pong and anything unknown: ignore

    # --- daemon side -------------------------------------------------------------

    def _ctl_event(self, pair: _Pair, sock: socket.socket) -> None:
        try:
            chunk = sock.recv(65536)
        except BlockingIOError:
            chunk = None
        if chunk == b"":
            # Daemon went away: tell the browser it is over, then drain.
            pair.ws_out += encode_frame(
                _OP_CLOSE, (1001).to_bytes(2, "big") + b"daemon closed")
            pair.dying = True
            self._update(pair)
            return
        if chunk:
            pair.ctl_in += chunk
            while True:
                cut = pair.ctl_in.find(b"\n")
                if cut < 0:
                    break
                line = bytes(pair.ctl_in[:cut])
                del pair.ctl_in[:cut + 1]
                pair.ws_out += encode_frame(_OP_TEXT, line)
        self._update(pair)
