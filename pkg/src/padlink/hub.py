"""Hub-side key logistics: the pad-0 entropy reserve and automated
distribution of fresh pads to endpoint pairs over existing encrypted links.

A hub holds one oversized reserve pad (id 0) whose receive cursor is pinned
past its last page — every byte of it is transmit-side material waiting to
be carved out.  Distribution withdraws whole pages from the reserve,
wraps them in ordinary file-transfer packet trains under a reserved name
(``__otpdist__/<pad>/<page>``), and sends the SAME material down two
different client links.  Each client auto-installs its copy with opposite
transmit/receive orientation, after which the pair talks directly and the
hub never sees their traffic again.

Failure handling is deliberately pessimistic: once a page leaves the
reserve it never goes back.  If a distribution dies half way, the carved
material is scrubbed and accounted as lost, exactly like any other
consumed key.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

from .codec import PacketType
from .errors import BadDistribution, ClientUnreachable, ReserveExhausted
from .session import CONNECTED, ProtocolEngine, chunk_sizes
from .vault import Vault

RESERVE_PAD = 0
RESERVED_PREFIX = "__otpdist__/"

# A plaintext packet is one type byte plus at most 1,415 payload bytes.
FILE_CHUNK = 1_415


def pair_count(n_users: int) -> int:
    """Full-mesh pad demand for ``n_users`` endpoints plus the hub that
    serves them: every party can reach every other, so (n+1 choose 2) pads.

    This is the capacity-planning headline a star topology avoids paying —
    with a hub, the same population needs only n pads plus reserve.
    """
    if n_users < 0:
        raise ValueError(f"user count cannot be negative: {n_users}")
    return n_users * (n_users + 1) // 2


def reserve_requirement(pad_sizes: list[int]) -> int:
    """Reserve bytes a hub should hold for a set of client pads: half the
    sum of their sizes."""
    total = 0
    for size in pad_sizes:
        if size < 0:
            raise ValueError(f"pad size cannot be negative: {size}")
        total += size
    return total // 2


# --- the reserved-name convention -------------------------------------------

def manifest_name(pad_id: int) -> str:
    return f"{RESERVED_PREFIX}{pad_id:05d}/manifest"


def page_name(pad_id: int, page_no: int) -> str:
    return f"{RESERVED_PREFIX}{pad_id:05d}/{page_no:05d}"


def parse_reserved_name(name: str) -> Optional[tuple]:
    """Classify a filename under the distribution convention.

    Returns ``("manifest", pad_id)`` or ``("page", pad_id, page_no)``
    for well-formed names, ``None`` for ordinary filenames, and raises
    BadDistribution for names that claim the prefix but are malformed —
    those must never fall through to the receive directory.
    """
    if not name.startswith(RESERVED_PREFIX):
        return None
    rest = name[len(RESERVED_PREFIX):]
    parts = rest.split("/")
    if len(parts) != 2 or len(parts[0]) != 5 or not parts[0].isdigit():
        raise BadDistribution(f"malformed distribution name: {name!r}")
    pad_id = int(parts[0])
    if parts[1] == "manifest":
        return ("manifest", pad_id)
    if len(parts[1]) == 5 and parts[1].isdigit():
        return ("page", pad_id, int(parts[1]))
    raise BadDistribution(f"malformed distribution name: {name!r}")


@dataclass(frozen=True)
class PadManifest:
    """What a client needs to install a distributed pad and find its peer."""
    pad_id: int
    kb_per_page: int
    pages: int
    role: str                      # "a" or "b": which end transmits page 0
    peer: object = None            # address of the other endpoint, if known

    def encode(self) -> bytes:
        peer: object
        if isinstance(self.peer, tuple):
            peer = {"host": self.peer[0], "port": self.peer[1]}
        else:
            peer = self.peer
        return json.dumps({
            "pad": self.pad_id,
            "kb_per_page": self.kb_per_page,
            "pages": self.pages,
            "role": self.role,
            "peer": peer,
        }, separators=(",", ":")).encode()

    @classmethod
    def decode(cls, blob: bytes) -> "PadManifest":
        try:
            d = json.loads(blob.decode())
            pad_id = int(d["pad"])
            kb = int(d["kb_per_page"])
            pages = int(d["pages"])
            role = d["role"]
            peer = d.get("peer")
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
            raise BadDistribution(f"undecodable manifest: {exc}") from exc
        if role not in ("a", "b"):
            raise BadDistribution(f"manifest role must be a/b, got {role!r}")
        if isinstance(peer, dict):
            try:
                peer = (str(peer["host"]), int(peer["port"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise BadDistribution(f"bad peer address: {exc}") from exc
        return cls(pad_id, kb, pages, role, peer)


# --- carving ------------------------------------------------------------------

def pages_available(vault: Vault, pad_id: int = RESERVE_PAD) -> int:
    """Uncarved whole pages left in a reserve pad."""
    m = vault.pads[pad_id]
    if m.tx_pg >= m.pages:
        return 0
    return m.pages - m.tx_pg


def carve_reserve(vault: Vault, n_pages: int, *,
                  pad_id: int = RESERVE_PAD) -> list[bytearray]:
    """Withdraw ``n_pages`` whole pages from the reserve.

    The pages die on disk immediately and the reserve cursor advances past
    them; the returned buffers are the only copies in existence.  Callers
    own their scrubbing.
    """
    if n_pages < 0:
        raise ValueError(f"cannot carve {n_pages} pages")
    if n_pages == 0:
        return []
    have = pages_available(vault, pad_id)
    if have < n_pages:
        raise ReserveExhausted(
            f"reserve pad {pad_id}: {have} pages left, {n_pages} wanted")
    first = vault.pads[pad_id].tx_pg
    blobs = [vault.withdraw_page(pad_id, first + i) for i in range(n_pages)]
    vault.mark_pages_carved(pad_id, n_pages)
    return blobs


def scrub(blobs: list[bytearray]) -> None:
    for b in blobs:
        for i in range(len(b)):
            b[i] = 0


# --- packet trains --------------------------------------------------------------

def file_train(name: str, blob: bytes) -> list[tuple[int, bytes]]:
    """An ordinary file as a begin/data/end packet sequence."""
    encoded = name.encode()
    if len(encoded) > 1_000:
        raise ValueError(f"filename too long for one packet: {name!r}")
    begin = struct.pack(">H", len(encoded)) + encoded + struct.pack(
        ">Q", len(blob))
    train: list[tuple[int, bytes]] = [(PacketType.FILE_BEGIN, begin)]
    off = 0
    for size in chunk_sizes(len(blob), FILE_CHUNK):
        train.append((PacketType.FILE_DATA, bytes(blob[off:off + size])))
        off += size
    train.append((PacketType.FILE_END, b""))
    return train


def decode_file_begin(payload: bytes) -> tuple[str, int]:
    """Inverse of the begin record in :func:`file_train`."""
    if len(payload) < 10:
        raise BadDistribution("file-begin record too short")
    (name_len,) = struct.unpack(">H", payload[:2])
    if len(payload) != 2 + name_len + 8:
        raise BadDistribution("file-begin record length mismatch")
    name = payload[2:2 + name_len].decode(errors="replace")
    (size,) = struct.unpack(">Q", payload[2 + name_len:])
    return name, size


def distribution_trains(new_pad: int, kb_per_page: int,
                        page_blobs: list[bytearray], *,
                        peer_a: object = None,
                        peer_b: object = None) -> tuple[list, list]:
    """Packet trains delivering one new pad to each of two clients.

    The first client receives role "a" (transmit page 0) and the address of
    the second; the second receives the mirror image.  Both trains carry
    byte-identical page material.
    """
    pages = len(page_blobs)
    trains = []
    for role, peer in (("a", peer_b), ("b", peer_a)):
        manifest = PadManifest(new_pad, kb_per_page, pages, role, peer)
        train = file_train(manifest_name(new_pad), manifest.encode())
        for no, blob in enumerate(page_blobs):
            train.extend(file_train(page_name(new_pad, no), blob))
        trains.append(train)
    return trains[0], trains[1]


def start_distribution(engine: ProtocolEngine, *, to_a: int, to_b: int,
                       new_pad: int, kb_per_page: int, n_pages: int,
                       now: float, peer_a: object = None,
                       peer_b: object = None,
                       reserve_pad: int = RESERVE_PAD) -> dict:
    """Carve a pad from the hub reserve and queue its delivery to the two
    clients reached over sessions ``to_a`` and ``to_b``.

    Carved pages never return to the reserve: a client found unreachable
    AFTER the carve costs those pages, which are scrubbed and accounted as
    lost.  Returns a summary of what was queued.
    """
    if n_pages < 1:
        raise ValueError("a distributed pad needs at least one page")
    for pad in (to_a, to_b):
        if pad not in engine.sessions:
            raise ClientUnreachable(f"no session on pad {pad}")
    blobs = carve_reserve(engine.vault, n_pages, pad_id=reserve_pad)
    try:
        for pad in (to_a, to_b):
            s = engine.session(pad)
            if s.phase != CONNECTED:
                raise ClientUnreachable(f"pad {pad} is {s.phase}")
            if s.pending is not None or s.queue:
                raise ClientUnreachable(f"pad {pad} is mid-transfer")
        train_a, train_b = distribution_trains(
            new_pad, kb_per_page, blobs, peer_a=peer_a, peer_b=peer_b)
        engine.send_bulk(to_a, train_a, now=now)
        engine.send_bulk(to_b, train_b, now=now)
    except Exception:
        scrub(blobs)
        for pad in (to_a, to_b):
            s = engine.sessions.get(pad)
            if s is not None and (s.queue or s.pending is not None):
                engine.abort_bulk(pad, now=now)
        raise
    return {"pad": new_pad, "pages": n_pages, "kb_per_page": kb_per_page,
            "packets_each": len(train_a), "to_a": to_a, "to_b": to_b}


# --- client side ------------------------------------------------------------------

class IncomingPadAssembler:
    """Client-side collector for distribution files.

    The application's file-receive path offers every COMPLETED incoming
    file here first.  Ordinary names are declined (returned to the normal
    receive path); reserved names accumulate until a manifest and all of
    its pages are present, at which point the pad is installed and a
    record returned so the caller can point a session at the new peer.
    """

    def __init__(self, vault: Vault) -> None:
        self.vault = vault
        self.partial: dict[int, dict] = {}

    def offer(self, name: str, blob: bytes) -> Optional[dict]:
        parsed = parse_reserved_name(name)
        if parsed is None:
            return None
        pad_id = parsed[1]
        entry = self.partial.setdefault(
            pad_id, {"manifest": None, "pages": {}})
        if parsed[0] == "manifest":
            entry["manifest"] = PadManifest.decode(blob)
        else:
            entry["pages"][parsed[2]] = bytes(blob)
        return self._try_install(pad_id)

    def _try_install(self, pad_id: int) -> Optional[dict]:
        entry = self.partial[pad_id]
        manifest: Optional[PadManifest] = entry["manifest"]
        if manifest is None:
            return None
        if sorted(entry["pages"]) != list(range(manifest.pages)):
            return None
        self.vault.install_received_pad(
            manifest.pad_id, manifest.kb_per_page, manifest.pages,
            manifest.role, entry["pages"])
        del self.partial[pad_id]
        return {"pad": manifest.pad_id, "pages": manifest.pages,
                "kb_per_page": manifest.kb_per_page,
                "role": manifest.role, "peer": manifest.peer}


def client_registry(engine: ProtocolEngine) -> list[dict]:
    """Addresses learned from successfully decrypted traffic, per pad."""
    rows = []
    for pad_id in sorted(engine.sessions):
        s = engine.sessions[pad_id]
        if s.remote_addr is not None:
            rows.append({"pad": pad_id, "addr": s.remote_addr,
                         "phase": s.phase})
    return rows
