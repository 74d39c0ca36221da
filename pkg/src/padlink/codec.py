"""Sealing and opening of one-time-pad datagrams.

A data packet starts from three inputs: the plaintext P (one type byte plus
payload, 1..1416 bytes long), a 16-byte authentication slice A, and a key
slice K the same length as P, both checked out of the shared pad.  The body
is T = P xor K and the header is the keyed digest

    H = md5(A || md5(A || T))

so the wire datagram is C = H || T, exactly |P| + 16 bytes.  The matching
acknowledgement is the bare 16 bytes of A echoed in the clear: A is spent
the moment the packet is built and never drawn again, so disclosing it
proves receipt without giving an observer anything to reuse.

Two deliberate oddities, kept on purpose:

* The header is the plain catenation construction shown above, NOT the
  RFC 2104 ipad/opad schedule.  Pass ``rfc2104=True`` to every digest-taking
  function to get the padded schedule instead; the default stays off.
* Decryption never fails loudly.  ``try_decrypt`` answers the question "do
  these candidate key bytes open this datagram" with the plaintext or None,
  and the caller stays silent about the misses.

Key bytes move through :class:`KeySlice`, which scrubs its buffer window
with fresh pseudorandom bytes (never zeros) once the slice is consumed.
"""

from __future__ import annotations

import hashlib
import hmac as _hmac
import os
from enum import IntEnum
from typing import Callable, Optional

from .errors import SliceAlreadyConsumed, SliceLengthMismatch, TooShort

HEADER_LEN = 16
ACK_LEN = 16
AUTH_SLICE_LEN = 16
MAX_PLAINTEXT = 1416                     # type byte included
MAX_DATAGRAM = HEADER_LEN + MAX_PLAINTEXT   # 1432

_RFC2104_BLOCK = 64
_IPAD = bytes(0x36 for _ in range(_RFC2104_BLOCK))
_OPAD = bytes(0x5C for _ in range(_RFC2104_BLOCK))


class PacketType(IntEnum):
    """First plaintext byte of every packet.  Values are local plumbing."""

    CHAT = 0x01
    FILE_BEGIN = 0x02
    FILE_DATA = 0x03
    FILE_END = 0x04
    LISTING = 0x05
    GIBBERISH = 0x06
    TURN_REQUEST = 0x07
    TURN_GRANT = 0x08
    PROBE = 0x09
    RTE = 0x0A          # round trip established
    DISCONNECT = 0x0B
    QUIT = 0x0C
    ABORT = 0x0D


def md5(data: bytes) -> bytes:
    """RFC 1321 digest, 16 raw bytes."""
    return hashlib.md5(bytes(data)).digest()


def xor_bytes(a: bytes, b: bytes) -> bytes:
    if len(a) != len(b):
        raise SliceLengthMismatch(f"xor of {len(a)} vs {len(b)} bytes")
    n = len(a)
    if n == 0:
        return b""
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(n, "big")


def hmac_header(a: bytes, t: bytes, *, rfc2104: bool = False) -> bytes:
    """Authentication header for body ``t`` under the 16-byte slice ``a``.

    Plain form: md5(a || md5(a || t)).  With ``rfc2104=True`` the standard
    padded schedule md5((a^opad) || md5((a^ipad) || t)) is used instead.
    """
    a = bytes(a)
    t = bytes(t)
    if len(a) != AUTH_SLICE_LEN:
        raise SliceLengthMismatch(f"auth slice must be 16 bytes, got {len(a)}")
    if not rfc2104:
        return md5(a + md5(a + t))
    key = a + bytes(_RFC2104_BLOCK - len(a))
    inner = md5(xor_bytes(key, _IPAD) + t)
    return md5(xor_bytes(key, _OPAD) + inner)


class KeySlice:
    """A run of key bytes checked out of a pad page.

    The slice remembers where it came from (pad, page, offset) so every
    consumption can be audited, and holds a window onto the mutable page
    buffer.  ``mark_consumed`` overwrites that window with fresh
    pseudorandom bytes — never zeros, which would advertise exactly where
    spent key material used to live — after which reads raise.
    """

    __slots__ = ("pad_id", "page_no", "offset", "consumed",
                 "_buf", "_start", "_len", "_fill", "_on_scrub")

    def __init__(self, buf: bytearray, start: int, length: int, *,
                 pad_id: int = 0, page_no: int = 0, offset: int | None = None,
                 fill: Callable[[int], bytes] | None = None,
                 on_scrub: Callable[["KeySlice"], None] | None = None):
        if start < 0 or length < 0 or start + length > len(buf):
            raise SliceLengthMismatch("slice window outside its buffer")
        self._buf = buf
        self._start = start
        self._len = length
        self._fill = fill or os.urandom
        self._on_scrub = on_scrub
        self.pad_id = pad_id
        self.page_no = page_no
        self.offset = start if offset is None else offset
        self.consumed = False

    @classmethod
    def of(cls, raw: bytes, *, pad_id: int = 0, page_no: int = 0,
           offset: int = 0) -> "KeySlice":
        """Wrap loose bytes in a slice (tests and one-off callers)."""
        buf = bytearray(raw)
        return cls(buf, 0, len(buf), pad_id=pad_id, page_no=page_no, offset=offset)

    def __len__(self) -> int:
        return self._len

    @property
    def bytes(self) -> bytes:
        if self.consumed:
            raise SliceAlreadyConsumed(
                f"slice pad {self.pad_id} page {self.page_no} off {self.offset}")
        return bytes(self._buf[self._start:self._start + self._len])

    def mark_consumed(self) -> None:
        """Overwrite the buffer window and make the slice unreadable."""
        if self.consumed:
            return
        if self._len:
            self._buf[self._start:self._start + self._len] = self._fill(self._len)
        self.consumed = True
        if self._on_scrub is not None:
            self._on_scrub(self)


class PlaintextPacket:
    """Type byte plus payload; the unit the session layer hands the codec."""

    __slots__ = ("type_code", "payload")

    def __init__(self, type_code: int, payload: bytes = b""):
        n = 1 + len(payload)
        if not 1 <= n <= MAX_PLAINTEXT:
            raise SliceLengthMismatch(
                f"plaintext must be 1..{MAX_PLAINTEXT} bytes, got {n}")
        if not 0 <= type_code <= 0xFF:
            raise ValueError(f"type code out of range: {type_code}")
        self.type_code = type_code
        self.payload = bytes(payload)

    def encode(self) -> bytes:
        return bytes((self.type_code,)) + self.payload

    @classmethod
    def decode(cls, raw: bytes) -> "PlaintextPacket":
        if not raw:
            raise TooShort("empty plaintext has no type byte")
        return cls(raw[0], raw[1:])

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"PlaintextPacket(0x{self.type_code:02x}, {len(self.payload)}B)"


def encrypt_packet(plaintext: bytes, a: KeySlice, k: KeySlice, *,
                   rfc2104: bool = False) -> tuple[bytes, bytes]:
    """Seal ``plaintext`` and return ``(datagram, expected_ack)``.

    Consumes both slices: by the time the datagram exists, the key bytes
    that built it are already scrubbed out of their buffers.  The returned
    expected_ack is a copy of A, kept only to recognise the peer's echo.
    """
    plaintext = bytes(plaintext)
    n = len(plaintext)
    if not 1 <= n <= MAX_PLAINTEXT:
        raise SliceLengthMismatch(
            f"plaintext must be 1..{MAX_PLAINTEXT} bytes, got {n}")
    if len(a) != AUTH_SLICE_LEN:
        raise SliceLengthMismatch(f"auth slice is {len(a)} bytes, want 16")
    if len(k) != n:
        raise SliceLengthMismatch(
            f"key slice is {len(k)} bytes, plaintext is {n}")
    if a.consumed or k.consumed:
        raise SliceAlreadyConsumed("encrypt_packet needs fresh slices")

    a_bytes = a.bytes
    t = xor_bytes(plaintext, k.bytes)
    h = hmac_header(a_bytes, t, rfc2104=rfc2104)
    expected_ack = bytes(a_bytes)
    a.mark_consumed()
    k.mark_consumed()
    return h + t, expected_ack


def try_decrypt(datagram: bytes, a_candidate: bytes, k_candidate: bytes, *,
                rfc2104: bool = False) -> Optional[bytes]:
    """Open ``datagram`` with candidate key bytes, or report no match.

    Returns the plaintext when the recomputed header agrees with the one on
    the wire, else None.  Never consumes anything and never raises on a
    mismatch — a wrong guess must stay indistinguishable from silence.
    Raises TooShort only when the datagram cannot even hold a header.
    """
    if len(datagram) < HEADER_LEN:
        raise TooShort(f"datagram of {len(datagram)} bytes has no header")
    h, t = datagram[:HEADER_LEN], datagram[HEADER_LEN:]
    if len(k_candidate) != len(t):
        raise SliceLengthMismatch(
            f"key candidate {len(k_candidate)}B for body {len(t)}B")
    if not _hmac.compare_digest(hmac_header(a_candidate, t, rfc2104=rfc2104), h):
        return None
    return xor_bytes(t, k_candidate)
