"""Per-pad protocol state machines over the datagram layer.

One :class:`ProtocolEngine` owns every session of one vault.  A session is
identified by its pad — never by a network address; addresses are learned
passively from whichever datagram last decrypted correctly and merely say
where to aim the next reply.

The engine is strictly stop-and-wait: a session holds at most one
unacknowledged packet, kept only as ciphertext, and retransmits it
byte-identically at 0.3 s after first send and every 2.0 s thereafter until
the 16-byte acknowledgement (the packet's own authentication slice, echoed
in the clear) arrives.  Everything else a peer or attacker may send is
answered the same way: with silence.

Incoming datagram dispatch, in order:

1. a 16-byte datagram equal to some session's expected acknowledgement
   clears that session's pending packet (a 16-byte datagram can never be a
   data packet, so this costs no digest work);
2. each pad's receive cursor is tried once (one digest evaluation per pad);
3. a header equal to a session's last accepted header is a duplicate: the
   stored acknowledgement is re-sent and nothing is delivered twice;
4. a bounded resynchronization search walks up to ``resync_window`` bytes
   forward within the current receive page, one offset at a time — this is
   deliberately the expensive path, costing at most pads × (1 + window)
   digest evaluations per hostile datagram;
5. silence.

Page turns are coordinated, not unilateral.  The side with the LOWER
transmit page asks; the side with the higher transmit page answers with the
next page number neither side has ever touched, moving its own receive
cursor there as it answers.  The answering side never asks: when its own
transmit page runs low it announces a turn (an unsolicited grant), turns
once the announcement is acknowledged, and the peer follows on receipt.
Both message kinds travel inside TURN_GRANT, distinguished by a flag byte.
Granted page numbers only ever go up; a grant naming a page already used is
a protocol failure and halts the session rather than risk key reuse.

Session state that must survive a restart — the pending ciphertext and its
expected acknowledgement, the duplicate-detection header, the learned peer
address, the page-turn flags — is serialized to the vault's session.data.
Outbound plaintext queues are deliberately NOT persisted: plaintext never
touches disk.  On restore, pending packets are re-emitted immediately.
"""

from __future__ import annotations

import hmac as _hmac
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .codec import (
    ACK_LEN,
    HEADER_LEN,
    MAX_PLAINTEXT,
    PacketType,
    encrypt_packet,
    try_decrypt,
)
from .errors import (
    Blocked,
    CorruptSessionData,
    GrantCollision,
    NotConnected,
    PageAlreadyUsed,
    PageCollision,
)
from .vault import Vault

__all__ = [
    "IDLE", "PROBING", "CONNECTED", "DISCONNECTED", "HALTED",
    "Pending", "SessionState", "ProtocolEngine", "chunk_sizes",
    "encode_addr", "decode_addr",
]

# Phases.  "blocked" is not a phase: it is the presence of a pending packet.
IDLE = "idle"
PROBING = "probing"
CONNECTED = "connected"
DISCONNECTED = "disconnected"
HALTED = "halted"

_PHASE_CODES = {IDLE: 0, PROBING: 1, CONNECTED: 2, DISCONNECTED: 3, HALTED: 4}
_PHASE_NAMES = {v: k for k, v in _PHASE_CODES.items()}

RETRY_FIRST = 0.3
RETRY_LATER = 2.0
RESYNC_WINDOW = 1500
# Ask for a fresh transmit page while there is still room for roughly two
# maximum datagrams, so the request/grant exchange finishes before the page
# actually starves.
TURN_THRESHOLD = 2 * (HEADER_LEN + MAX_PLAINTEXT)

_GRANT_FMT = ">BI"          # flag byte (1 solicited / 0 announced) + page
_GRANT_LEN = struct.calcsize(_GRANT_FMT)
_GRANT_SOLICITED = 1
_GRANT_ANNOUNCED = 0

# Packet sizes of the two turn messages, used by the pump's key-reserve
# arithmetic: a data packet is only sent if afterwards the turn message this
# side might need still fits on the page.
_REQUEST_COST = HEADER_LEN + 1
_GRANT_COST = HEADER_LEN + 1 + _GRANT_LEN

_MAGIC = b"OTPS"
_STATE_VERSION = 1

_F_PENDING = 0x01
_F_TURNING = 0x02
_F_GRANT_OWED = 0x04
_F_ANNOUNCED = 0x08
_F_LAST_HMAC = 0x10
_F_LAST_ACK = 0x20
_F_REMOTE = 0x40


def chunk_sizes(total: int, limit: int, *, min_tail: int = 64) -> list[int]:
    """Split ``total`` units into chunks of at most ``limit``.

    All chunks are full-size except the tail; if the tail would be shorter
    than ``min_tail`` (and there is more than one chunk), the final two
    chunks are rebalanced to ceil/floor halves of their combined length so
    no runt packet goes out last.
    """
    if total < 0 or limit < 1:
        raise ValueError("need total >= 0 and limit >= 1")
    if total == 0:
        return []
    sizes = [limit] * (total // limit)
    tail = total % limit
    if tail:
        sizes.append(tail)
    if len(sizes) >= 2 and sizes[-1] < min_tail:
        r = sizes[-2] + sizes[-1]
        sizes[-2:] = [(r + 1) // 2, r // 2]
    return sizes


# --- address bytes --------------------------------------------------------
#
# Addresses are opaque to the engine (simulator node names are strings, real
# endpoints are (host, port) tuples) but must survive in session.data.

def encode_addr(addr) -> bytes:
    if addr is None:
        return b""
    if isinstance(addr, str):
        return b"s" + addr.encode("utf-8")
    host, port = addr
    return b"u" + struct.pack(">H", port) + host.encode("utf-8")


def decode_addr(blob: bytes):
    if not blob:
        return None
    kind, rest = blob[:1], blob[1:]
    if kind == b"s":
        return rest.decode("utf-8")
    if kind == b"u":
        (port,) = struct.unpack(">H", rest[:2])
        return (rest[2:].decode("utf-8"), port)
    raise CorruptSessionData(f"unknown address tag {kind!r}")


# --- state ------------------------------------------------------------------

@dataclass
class Pending:
    """The single unacknowledged packet of a session (ciphertext only)."""

    datagram: bytes
    expected_ack: bytes
    ptype: int
    first_sent: float
    deadline: float
    retries: int = 0


@dataclass
class SessionState:
    pad_id: int
    phase: str = IDLE
    pending: Optional[Pending] = None
    queue: deque = field(default_factory=deque)    # (ptype, payload) plaintext
    last_correct_hmac: Optional[bytes] = None
    last_ack: Optional[bytes] = None
    remote_addr: object = None
    turning: bool = False            # our TURN_REQUEST is out; tx frozen
    grant_owed: bool = False         # peer asked while we were blocked
    announced_turn_page: Optional[int] = None   # our announce, turn tx on ack
    halt_error: Optional[GrantCollision] = None

    @property
    def blocked(self) -> bool:
        return self.pending is not None


class ProtocolEngine:
    """All sessions of one vault, driven by explicit ``now`` timestamps.

    The engine never sleeps and never looks at a clock: callers hand in the
    current time and collect outgoing datagrams from :meth:`drain_outbox`
    and state changes from :meth:`drain_events`.  That makes the same code
    byte-for-byte reproducible under the simulator and live under sockets.
    """

    def __init__(self, vault: Vault, *, rfc2104: bool = False,
                 resync_window: int = RESYNC_WINDOW,
                 retry_first: float = RETRY_FIRST,
                 retry_later: float = RETRY_LATER,
                 turn_threshold: int = TURN_THRESHOLD) -> None:
        self.vault = vault
        self.rfc2104 = rfc2104
        self.resync_window = resync_window
        self.retry_first = retry_first
        self.retry_later = retry_later
        self.turn_threshold = turn_threshold
        # A pad whose receive page is pinned at the page count is an entropy
        # reserve: it exists to be carved, never to carry traffic, so it
        # gets no session and its key can never leak onto the wire.
        self.sessions: dict[int, SessionState] = {
            pad_id: SessionState(pad_id)
            for pad_id, m in sorted(vault.pads.items())
            if m.rx_pg < m.pages}
        self.outbox: list[tuple[object, bytes]] = []
        self.events: list[dict] = []
        self.hmac_evals = 0
        self.stats = {"accepted": 0, "ignored": 0, "duplicates": 0,
                      "resyncs": 0, "acks_in": 0}

    # ----- plumbing -----

    def _event(self, kind: str, **fields) -> None:
        fields["kind"] = kind
        self.events.append(fields)

    def drain_events(self) -> list[dict]:
        out, self.events = self.events, []
        return out

    def drain_outbox(self) -> list[tuple[object, bytes]]:
        out, self.outbox = self.outbox, []
        return out

    def session(self, pad_id: int) -> SessionState:
        return self.sessions[pad_id]

    # ----- operator-facing operations -----

    def connect(self, pad_id: int, addr=None, *, now: float) -> None:
        """Send a connectivity probe; the session is up once it is acked
        and the peer is up once our round-trip notice reaches it."""
        s = self.session(pad_id)
        if s.phase == PROBING:
            return
        if s.phase not in (IDLE, DISCONNECTED):
            raise Blocked(f"pad {pad_id} is {s.phase}; disconnect first")
        if s.pending is not None:
            raise Blocked(f"pad {pad_id} has an unacknowledged packet; "
                          "/f to forget it first")
        if addr is not None:
            s.remote_addr = addr
        if s.remote_addr is None:
            raise NotConnected(f"pad {pad_id} has no peer address to probe")
        s.phase = PROBING
        s.queue.append((PacketType.PROBE, b""))
        self._pump(s, now)
        self._persist()

    def disconnect(self, pad_id: int, *, now: float) -> None:
        s = self.session(pad_id)
        if s.phase not in (CONNECTED, PROBING):
            raise NotConnected(f"pad {pad_id} is {s.phase}")
        if s.pending is not None or s.queue:
            raise Blocked(f"pad {pad_id} is busy; wait or /f first")
        s.queue.append((PacketType.DISCONNECT, b""))
        self._pump(s, now)
        self._persist()

    def forget(self, pad_id: int) -> bool:
        """Abandon the pending packet (its key is already spent).  The
        operator's lever for a peer that is gone for good.  True if there
        was anything to forget."""
        s = self.session(pad_id)
        had = s.pending is not None
        s.pending = None
        self._event("forgotten", pad=pad_id)
        self._persist()
        return had

    def adopt_new_pads(self) -> list[int]:
        """Create idle sessions for pads installed after this engine was
        built (a hub distribution landing mid-run).  Reserve-style pads
        (receive cursor pinned past the end) stay session-less."""
        added = []
        for pad_id, m in sorted(self.vault.pads.items()):
            if pad_id not in self.sessions and m.rx_pg < m.pages:
                self.sessions[pad_id] = SessionState(pad_id)
                added.append(pad_id)
        return added

    def send_chat(self, pad_id: int, text: str, *, now: float) -> None:
        s = self.session(pad_id)
        if s.phase != CONNECTED:
            raise NotConnected(f"pad {pad_id} is {s.phase}")
        if s.pending is not None or s.queue:
            raise Blocked(f"pad {pad_id} is awaiting an acknowledgement")
        payload = text.encode("utf-8")
        if 1 + len(payload) > MAX_PLAINTEXT:
            raise Blocked(f"chat line over {MAX_PLAINTEXT - 1} bytes")
        s.queue.append((PacketType.CHAT, payload))
        self._pump(s, now)
        self._persist()

    def send_bulk(self, pad_id: int, packets: list[tuple[int, bytes]], *,
                  now: float) -> None:
        """Queue a prepared packet train (file transfer, gibberish, listing).

        One bulk job at a time: refused while anything is pending or queued.
        """
        s = self.session(pad_id)
        if s.phase != CONNECTED:
            raise NotConnected(f"pad {pad_id} is {s.phase}")
        if s.pending is not None or s.queue:
            raise Blocked(f"pad {pad_id} is busy")
        for ptype, payload in packets:
            if 1 + len(payload) > MAX_PLAINTEXT:
                raise Blocked("bulk chunk over the plaintext maximum")
            s.queue.append((int(ptype), bytes(payload)))
        self._pump(s, now)
        self._persist()

    def abort_bulk(self, pad_id: int, *, now: float, notify: bool = True) -> int:
        """Drop everything queued and tell the peer to drop its side too.

        The in-flight packet, if any, still completes: stop-and-wait never
        abandons ciphertext that consumed key.  Returns number dropped.
        ``notify=False`` clears the queue without sending an abort notice —
        the reaction to a PEER's abort, which must not echo one back.
        """
        s = self.session(pad_id)
        dropped = len(s.queue)
        s.queue.clear()
        if notify and s.phase == CONNECTED:
            s.queue.append((PacketType.ABORT, b""))
            self._pump(s, now)
        self._event("bulk-aborted", pad=pad_id, dropped=dropped)
        self._persist()
        return dropped

    def send_quit(self, pad_id: int, *, now: float) -> bool:
        """Queue a quit notice; True if one went out."""
        s = self.session(pad_id)
        if s.phase != CONNECTED or s.pending is not None or s.queue:
            return False
        s.queue.append((PacketType.QUIT, b""))
        self._pump(s, now)
        self._persist()
        return True

    # ----- inbound dispatch -----

    def on_datagram(self, data: bytes, src, *, now: float) -> int:
        """Process one datagram; returns digest evaluations it cost."""
        data = bytes(data)
        if len(data) < HEADER_LEN:
            # Too short to carry a header: discarded for free.
            self.stats["ignored"] += 1
            self._event("ignored", reason="runt", size=len(data))
            return 0
        evals = 0

        # 1. Exact acknowledgement match (16 bytes can't be a data packet).
        if len(data) == ACK_LEN:
            for pad_id in sorted(self.sessions):
                s = self.sessions[pad_id]
                if s.pending is not None and _hmac.compare_digest(
                        data, s.pending.expected_ack):
                    self.stats["acks_in"] += 1
                    self._acked(s, now)
                    return evals

        n = len(data) - HEADER_LEN

        # 2. One attempt per pad at the current receive cursor.
        for pad_id in sorted(self.sessions):
            window = self.vault.peek(pad_id, "rx", HEADER_LEN + n)
            if window is None:
                continue
            evals += 1
            plaintext = try_decrypt(data, window[:HEADER_LEN],
                                    window[HEADER_LEN:], rfc2104=self.rfc2104)
            if plaintext:
                self._accept(self.sessions[pad_id], data, plaintext, src, now)
                return evals

        # 3. Duplicate of the last accepted packet: re-ack, deliver nothing.
        head = data[:HEADER_LEN]
        for pad_id in sorted(self.sessions):
            s = self.sessions[pad_id]
            if s.last_correct_hmac is not None and _hmac.compare_digest(
                    head, s.last_correct_hmac):
                self.stats["duplicates"] += 1
                if s.last_ack is not None:
                    self.outbox.append((src, s.last_ack))
                self._event("duplicate", pad=pad_id)
                return evals

        # 4. Resynchronization: walk forward within the receive page.
        for pad_id in sorted(self.sessions):
            hit, plaintext, cost = self._resync_search(pad_id, data, n)
            evals += cost
            if hit is not None:
                s = self.sessions[pad_id]
                self.stats["resyncs"] += 1
                self._event("resync", pad=pad_id, offset=hit)
                self.vault.skip_to(pad_id, "rx", hit)
                self._accept(s, data, plaintext, src, now)
                return evals

        # 5. Eloquent silence.
        self.stats["ignored"] += 1
        self._event("ignored", reason="no-match", size=len(data))
        return evals

    def _resync_search(self, pad_id: int, data: bytes,
                       n: int) -> tuple[Optional[int], Optional[bytes], int]:
        """Try offsets cursor+1..cursor+window on the current rx page.

        Returns (matching offset, plaintext, digest evaluations spent); the
        first two are None on a miss.  The search never crosses into the
        next page and consumes no key on a miss.
        """
        m = self.vault.pads[pad_id]
        base = m.rx_off
        page_bytes = m.page_bytes
        lo = base + 1
        hi = min(page_bytes, base + self.resync_window + HEADER_LEN + n)
        if lo + HEADER_LEN + n > hi:
            return None, None, 0
        region = self.vault.peek(pad_id, "rx", hi - lo, at=lo)
        if region is None:
            return None, None, 0
        evals = 0
        last_start = min(self.resync_window - 1,
                         (hi - lo) - (HEADER_LEN + n))
        for i in range(last_start + 1):
            evals += 1
            a_cand = region[i:i + HEADER_LEN]
            k_cand = region[i + HEADER_LEN:i + HEADER_LEN + n]
            plaintext = try_decrypt(data, a_cand, k_cand,
                                    rfc2104=self.rfc2104)
            if plaintext:    # a verified but EMPTY plaintext stays a miss
                return lo + i, plaintext, evals
        return None, None, evals

    def _accept(self, s: SessionState, data: bytes, plaintext: bytes,
                src, now: float) -> None:
        """Consume key, acknowledge, learn the address, act on the type."""
        a_slice = self.vault.consume(s.pad_id, "rx", HEADER_LEN)
        ack = a_slice.bytes
        a_slice.mark_consumed()
        k_slice = self.vault.consume(s.pad_id, "rx", len(plaintext))
        k_slice.mark_consumed()

        s.last_correct_hmac = data[:HEADER_LEN]
        s.last_ack = ack
        s.remote_addr = src          # addresses learned only on decryption
        self.outbox.append((src, ack))
        self.stats["accepted"] += 1

        ptype, payload = plaintext[0], plaintext[1:]
        self._event("accepted", pad=s.pad_id, ptype=ptype, size=len(data))
        if ptype == PacketType.PROBE:
            self._event("probe", pad=s.pad_id)
        elif ptype == PacketType.RTE:
            if s.phase != HALTED:
                s.phase = CONNECTED
                self._event("connected", pad=s.pad_id, how="rte")
        elif ptype == PacketType.DISCONNECT:
            s.phase = DISCONNECTED
            self._event("disconnected", pad=s.pad_id, by="remote")
        elif ptype == PacketType.QUIT:
            s.phase = DISCONNECTED
            self._event("quit", pad=s.pad_id)
        elif ptype == PacketType.TURN_REQUEST:
            self._handle_turn_request(s, now)
        elif ptype == PacketType.TURN_GRANT:
            self._handle_grant(s, payload, now)
        elif ptype == PacketType.ABORT:
            self._event("abort", pad=s.pad_id)
        else:
            # Chat, file machinery, listings, gibberish: the application's
            # business.  The engine only moves and accounts for bytes.
            self._event("deliver", pad=s.pad_id, ptype=ptype, payload=payload)
        self._pump(s, now)
        self._persist()

    # ----- acknowledgement handling -----

    def _acked(self, s: SessionState, now: float) -> None:
        p = s.pending
        s.pending = None
        self._event("ack", pad=s.pad_id, ptype=p.ptype, retries=p.retries)
        if p.ptype == PacketType.PROBE and s.phase == PROBING:
            s.phase = CONNECTED
            self._event("connected", pad=s.pad_id, how="probe-ack")
            # Tell the peer its answers made it back: round trip established.
            s.queue.appendleft((PacketType.RTE, b""))
        elif p.ptype == PacketType.DISCONNECT:
            s.phase = DISCONNECTED
            self._event("disconnected", pad=s.pad_id, by="local")
        elif p.ptype == PacketType.QUIT:
            s.phase = DISCONNECTED
            self._event("disconnected", pad=s.pad_id, by="quit")
        elif (p.ptype == PacketType.TURN_GRANT
              and s.announced_turn_page is not None):
            # Our announced turn reached the peer; move our own transmit
            # cursor to the page we promised.
            page = s.announced_turn_page
            s.announced_turn_page = None
            self._turn_or_halt(s, "tx", page, how="announced")
        self._pump(s, now)
        self._persist()

    # ----- page-turn machinery -----

    def _controls_turns(self, pad_id: int) -> bool:
        m = self.vault.pads[pad_id]
        return m.tx_pg > m.rx_pg

    def _turn_or_halt(self, s: SessionState, direction: str, page: int, *,
                      how: str) -> bool:
        try:
            self.vault.turn_page(s.pad_id, direction, page)
        except (PageAlreadyUsed, PageCollision) as exc:
            # Never risk reuse: record the collision and stop this session
            # dead rather than answer the wire with anything.
            s.phase = HALTED
            s.halt_error = GrantCollision(str(exc))
            self._event("halted", pad=s.pad_id,
                        reason=f"grant collision: {exc}")
            return False
        self._event("turn", pad=s.pad_id, direction=direction, page=page,
                    how=how)
        return True

    def _handle_turn_request(self, s: SessionState, now: float) -> None:
        """Peer's transmit page is running out; owe it a fresh page."""
        if s.grant_owed:
            return                     # already queued for the next free slot
        if s.pending is not None:
            s.grant_owed = True
        elif self.vault.remaining(s.pad_id, "tx") < _GRANT_COST:
            # Our own page cannot even carry the grant; sort ourselves out
            # first and deliver the grant once that completes.
            s.grant_owed = True
            self._initiate_own_turn(s, now)
        else:
            self._send_grant(s, now)

    def _send_grant(self, s: SessionState, now: float) -> None:
        also = [s.announced_turn_page] if s.announced_turn_page else []
        page = self.vault.next_page_number(s.pad_id, *also)
        # The peer's new transmit page is by definition our new receive
        # page; position our cursor before the first byte can arrive.
        if not self._turn_or_halt(s, "rx", page, how="granted"):
            return
        s.grant_owed = False
        payload = struct.pack(_GRANT_FMT, _GRANT_SOLICITED, page)
        self._transmit(s, PacketType.TURN_GRANT, payload, now)

    def _handle_grant(self, s: SessionState, payload: bytes,
                      now: float) -> None:
        if len(payload) != _GRANT_LEN:
            s.phase = HALTED
            self._event("halted", pad=s.pad_id, reason="malformed grant")
            return
        flag, page = struct.unpack(_GRANT_FMT, payload)
        if flag == _GRANT_SOLICITED:
            if not s.turning:
                self._event("ignored", reason="unsolicited-solicited-grant",
                            pad=s.pad_id)
                return
            if self._turn_or_halt(s, "tx", page, how="requested"):
                s.turning = False
        else:
            # Peer announced its own transmit turn; our receive side follows.
            self._turn_or_halt(s, "rx", page, how="announced")

    # ----- transmit path -----

    def _transmit(self, s: SessionState, ptype: int, payload: bytes,
                  now: float) -> None:
        assert s.pending is None, "stop-and-wait violated"
        if s.remote_addr is None:
            raise NotConnected(f"pad {s.pad_id} has no peer address")
        plaintext = bytes((int(ptype),)) + payload
        a = self.vault.consume(s.pad_id, "tx", HEADER_LEN)
        k = self.vault.consume(s.pad_id, "tx", len(plaintext))
        datagram, expected_ack = encrypt_packet(plaintext, a, k,
                                                rfc2104=self.rfc2104)
        s.pending = Pending(datagram, expected_ack, int(ptype), now,
                            now + self.retry_first)
        self.outbox.append((s.remote_addr, datagram))
        self._event("sent", pad=s.pad_id, ptype=int(ptype),
                    size=len(datagram), retransmit=False)

    def _pump(self, s: SessionState, now: float) -> None:
        """Send the next thing this session owes the world, if any.

        Order of duties: an owed page grant jumps any queue; a session whose
        own turn request is out keeps its transmit side frozen; otherwise
        the head of the plaintext queue goes out, preceded by page-turn
        traffic whenever the page is running low.
        """
        if s.pending is not None or s.phase == HALTED:
            return
        if s.turning:
            return
        m = self.vault.pads[s.pad_id]
        page_bytes = m.page_bytes
        remaining = self.vault.remaining(s.pad_id, "tx")
        threshold = min(self.turn_threshold, page_bytes)

        if s.grant_owed:
            if remaining >= _GRANT_COST:
                self._send_grant(s, now)
            else:
                self._initiate_own_turn(s, now)
            return

        if not s.queue:
            return
        ptype, payload = s.queue[0]
        need = HEADER_LEN + 1 + len(payload)
        if need > page_bytes:
            # No page of this pad can ever carry the packet; refusing is
            # kinder than burning page after page looking for room.
            s.queue.popleft()
            self._event("drop", pad=s.pad_id, ptype=int(ptype),
                        reason="packet larger than a page")
            self._pump(s, now)
            return
        reserve = (_GRANT_COST if self._controls_turns(s.pad_id)
                   else _REQUEST_COST)
        if need + reserve > page_bytes:
            # Tight geometry: this packet and the turn reserve cannot share
            # one page.  Send it if it literally fits now rather than wedge
            # the queue; the application chunks sanely.
            if need <= remaining:
                s.queue.popleft()
                self._transmit(s, ptype, payload, now)
            else:
                self._initiate_own_turn(s, now)
            return
        if remaining < threshold or remaining < need + reserve:
            self._initiate_own_turn(s, now)
            return
        s.queue.popleft()
        self._transmit(s, ptype, payload, now)

    def _initiate_own_turn(self, s: SessionState, now: float) -> None:
        """Low on transmit key: ask the coordinator, or — if we ARE the
        coordinator — announce a self-turn the peer will follow."""
        if self.vault.exhausted(s.pad_id, "tx"):
            s.phase = HALTED
            self._event("halted", pad=s.pad_id, reason="pad exhausted")
            return
        cost = _GRANT_COST if self._controls_turns(s.pad_id) else _REQUEST_COST
        if self.vault.remaining(s.pad_id, "tx") < cost:
            # Not even the turn message fits.  Unreachable while the pump's
            # reserve arithmetic holds; if geometry games ever get us here,
            # stopping is the only move that cannot reuse key.
            s.phase = HALTED
            self._event("halted", pad=s.pad_id, reason="transmit page starved")
            return
        if self._controls_turns(s.pad_id):
            also = [s.announced_turn_page] if s.announced_turn_page else []
            page = self.vault.next_page_number(s.pad_id, *also)
            s.announced_turn_page = page
            payload = struct.pack(_GRANT_FMT, _GRANT_ANNOUNCED, page)
            self._transmit(s, PacketType.TURN_GRANT, payload, now)
            self._event("turn-announced", pad=s.pad_id, page=page)
        else:
            s.turning = True
            self._transmit(s, PacketType.TURN_REQUEST, b"", now)
            self._event("turn-requested", pad=s.pad_id)

    # ----- timers -----

    def next_deadline(self) -> Optional[float]:
        deadlines = [s.pending.deadline for s in self.sessions.values()
                     if s.pending is not None]
        return min(deadlines) if deadlines else None

    def on_timer(self, *, now: float) -> None:
        """Retransmit every overdue pending packet, byte-identically."""
        changed = False
        for pad_id in sorted(self.sessions):
            s = self.sessions[pad_id]
            p = s.pending
            if p is None or p.deadline > now:
                continue
            if s.remote_addr is not None:
                self.outbox.append((s.remote_addr, p.datagram))
            p.retries += 1
            p.deadline = p.deadline + self.retry_later
            self._event("sent", pad=pad_id, ptype=p.ptype,
                        size=len(p.datagram), retransmit=True)
            changed = True
        if changed:
            self._persist()

    # ----- reporting -----

    def list_sessions(self) -> list[dict]:
        rows = []
        for pad_id in sorted(self.sessions):
            s = self.sessions[pad_id]
            m = self.vault.pads[pad_id]
            rows.append({
                "pad": pad_id,
                "phase": s.phase,
                "blocked": s.blocked,
                "queued": len(s.queue),
                "remote": s.remote_addr,
                "controls_turns": self._controls_turns(pad_id),
                "tx": [m.tx_pg, m.tx_off],
                "rx": [m.rx_pg, m.rx_off],
                "tx_remaining": self.vault.remaining(pad_id, "tx"),
                "turning": s.turning,
            })
        return rows

    # ----- persistence -----

    def _persist(self) -> None:
        self.vault.write_session_data(self.encode_state())

    def encode_state(self) -> bytes:
        out = [_MAGIC, struct.pack(">BH", _STATE_VERSION, len(self.sessions))]
        for pad_id in sorted(self.sessions):
            s = self.sessions[pad_id]
            flags = 0
            if s.pending is not None:
                flags |= _F_PENDING
            if s.turning:
                flags |= _F_TURNING
            if s.grant_owed:
                flags |= _F_GRANT_OWED
            if s.announced_turn_page is not None:
                flags |= _F_ANNOUNCED
            if s.last_correct_hmac is not None:
                flags |= _F_LAST_HMAC
            if s.last_ack is not None:
                flags |= _F_LAST_ACK
            addr_blob = encode_addr(s.remote_addr)
            if addr_blob:
                flags |= _F_REMOTE
            out.append(struct.pack(
                ">IBBHB", pad_id, _PHASE_CODES[s.phase], flags,
                s.pending.retries if s.pending else 0,
                s.pending.ptype if s.pending else 0))
            if s.announced_turn_page is not None:
                out.append(struct.pack(">I", s.announced_turn_page))
            if s.pending is not None:
                out.append(s.pending.expected_ack)
                out.append(struct.pack(">H", len(s.pending.datagram)))
                out.append(s.pending.datagram)
            if s.last_correct_hmac is not None:
                out.append(s.last_correct_hmac)
            if s.last_ack is not None:
                out.append(s.last_ack)
            if addr_blob:
                out.append(struct.pack(">H", len(addr_blob)))
                out.append(addr_blob)
        return b"".join(out)

    def restore_state(self, blob: bytes, *, now: float) -> None:
        """Load session.data and immediately re-emit anything unacked."""
        try:
            self._restore(blob, now)
        except (struct.error, IndexError, KeyError, UnicodeDecodeError) as exc:
            raise CorruptSessionData(f"session data unreadable: {exc}") from exc
        # Pick up any duty the previous run persisted between steps of a
        # page-turn exchange (an owed grant, for instance).
        for pad_id in sorted(self.sessions):
            s = self.sessions[pad_id]
            if s.pending is None and s.remote_addr is not None:
                self._pump(s, now)
        self._persist()

    def _restore(self, blob: bytes, now: float) -> None:
        if blob[:4] != _MAGIC:
            raise CorruptSessionData("bad magic")
        version, count = struct.unpack_from(">BH", blob, 4)
        if version != _STATE_VERSION:
            raise CorruptSessionData(f"unknown version {version}")
        pos = 7
        seen = set()
        for _ in range(count):
            pad_id, phase_code, flags, retries, ptype = struct.unpack_from(
                ">IBBHB", blob, pos)
            pos += 9
            if pad_id not in self.sessions or pad_id in seen:
                raise CorruptSessionData(f"pad {pad_id} not in this vault")
            seen.add(pad_id)
            s = self.sessions[pad_id]
            s.phase = _PHASE_NAMES[phase_code]
            s.turning = bool(flags & _F_TURNING)
            s.grant_owed = bool(flags & _F_GRANT_OWED)
            if flags & _F_ANNOUNCED:
                (s.announced_turn_page,) = struct.unpack_from(">I", blob, pos)
                pos += 4
            if flags & _F_PENDING:
                expected_ack = blob[pos:pos + ACK_LEN]
                pos += ACK_LEN
                (dlen,) = struct.unpack_from(">H", blob, pos)
                pos += 2
                datagram = blob[pos:pos + dlen]
                pos += dlen
                if len(expected_ack) != ACK_LEN or len(datagram) != dlen:
                    raise CorruptSessionData("truncated pending packet")
                # Clock bases differ across restarts, so persisted
                # timestamps would lie; re-emit now and restart the timer
                # at the slow cadence.
                s.pending = Pending(datagram, expected_ack, ptype, now,
                                    now + self.retry_later, retries + 1)
            if flags & _F_LAST_HMAC:
                s.last_correct_hmac = blob[pos:pos + HEADER_LEN]
                pos += HEADER_LEN
            if flags & _F_LAST_ACK:
                s.last_ack = blob[pos:pos + ACK_LEN]
                pos += ACK_LEN
            if flags & _F_REMOTE:
                (alen,) = struct.unpack_from(">H", blob, pos)
                pos += 2
                s.remote_addr = decode_addr(blob[pos:pos + alen])
                pos += alen
            if s.pending is not None and s.remote_addr is not None:
                self.outbox.append((s.remote_addr, s.pending.datagram))
                self._event("sent", pad=pad_id, ptype=s.pending.ptype,
                            size=len(s.pending.datagram), retransmit=True)
        if pos != len(blob):
            raise CorruptSessionData(
                f"{len(blob) - pos} trailing bytes in session data")
