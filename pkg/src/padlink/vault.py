"""On-disk store for one-time-pad material.

A vault is a directory of zero-padded five-digit pad directories, each
holding zero-padded five-digit page files, plus three bookkeeping files::

    <vault>/
        00000/            page files 00000, 00001, ... for pad 0
        00001/
        pad.metadata      fixed-width cursor table (see below)
        session.data      opaque session records owned by the session layer
        vault.locked      present only while a daemon owns the vault

pad.metadata is a fixed-width, zero-padded decimal table — deliberately
boring so an operator can repair it with a text editor when a crash forces
manual page turns::

    pad   kb/pg pages tx pg rx pg tx off   rx off
    00001 00512 00256 00054 00053 00085898 00085114

Field widths cap the geometry: five-digit page numbers reserve 99,998 and
99,999 as exhaustion sentinels, the eight-digit offset column caps a page at
97,656 KB (99,999,744 bytes), and the defaults below keep pad directories
and page counts inside what a mid-2000s filesystem tolerated per directory.
The transmit and receive cursors of one pad must never name the same page;
that is what makes "each byte encrypts exactly once" a local property.

Key hygiene contract, enforced here and instrumented for the tests:

* loading a page immediately overwrites its disk file with fresh
  pseudorandom bytes (never zeros) — unless the vault was opened with
  ``have_mercy=True``, which trades that destruction for crash recovery;
* every consumed or skipped buffer region is overwritten after use;
* a clean shutdown writes the unconsumed remainders back so the next run
  resumes at the same offsets; a crash leaves vault.locked behind and the
  next run must refuse to start.
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional

from .codec import KeySlice
from .errors import (
    DestinationNotEmpty,
    DuplicatePadId,
    FieldOverflow,
    InsufficientPage,
    IoFailure,
    MalformedLine,
    NotLocked,
    PadExhausted,
    PageAlreadyUsed,
    PageCollision,
    PageMissing,
    SourceTooShort,
    TooManyPads,
    VaultError,
    VaultLocked,
)

META_NAME = "pad.metadata"
SESSION_NAME = "session.data"
LOCK_NAME = "vault.locked"

META_HEADER = "pad   kb/pg pages tx pg rx pg tx off   rx off"
_FIELD_WIDTHS = (5, 5, 5, 5, 5, 8, 8)

MAX_KB_PER_PAGE = 97_656          # 97,656 KB * 1024 = 99,999,744 <= 8 digits
MAX_PAGES_DEFAULT = 31_998
MAX_PADS_DEFAULT = 31_995
SENTINEL_PAGES = (99_998, 99_999)  # double-exhaustion markers, honored on read
MAX_PAD_BYTES = MAX_KB_PER_PAGE * 1024 * MAX_PAGES_DEFAULT   # ~2.91 TiB

TRACER_WORD = 8


@dataclass
class PadMetadata:
    """One row of pad.metadata."""

    pad_id: int
    kb_per_page: int
    pages: int
    tx_pg: int
    rx_pg: int
    tx_off: int
    rx_off: int

    @property
    def page_bytes(self) -> int:
        return self.kb_per_page * 1024

    def cursor(self, direction: str) -> tuple[int, int]:
        if direction == "tx":
            return self.tx_pg, self.tx_off
        if direction == "rx":
            return self.rx_pg, self.rx_off
        raise ValueError(f"direction must be tx or rx, got {direction!r}")

    def set_cursor(self, direction: str, page: int, off: int) -> None:
        if direction == "tx":
            self.tx_pg, self.tx_off = page, off
        elif direction == "rx":
            self.rx_pg, self.rx_off = page, off
        else:
            raise ValueError(f"direction must be tx or rx, got {direction!r}")

    def validate(self, *, max_pages: int = MAX_PAGES_DEFAULT) -> None:
        if not 0 <= self.pad_id <= 99_999:
            raise FieldOverflow(f"pad id {self.pad_id} outside 0..99999")
        if not 1 <= self.kb_per_page <= MAX_KB_PER_PAGE:
            raise FieldOverflow(
                f"pad {self.pad_id}: kb/pg {self.kb_per_page} outside "
                f"1..{MAX_KB_PER_PAGE}")
        if not 1 <= self.pages <= max_pages:
            raise FieldOverflow(
                f"pad {self.pad_id}: page count {self.pages} outside 1..{max_pages}")
        for name, pg in (("tx pg", self.tx_pg), ("rx pg", self.rx_pg)):
            if not 0 <= pg <= 99_999:
                raise FieldOverflow(f"pad {self.pad_id}: {name} {pg} overflows field")
        for name, off in (("tx off", self.tx_off), ("rx off", self.rx_off)):
            if not 0 <= off <= self.page_bytes:
                raise FieldOverflow(
                    f"pad {self.pad_id}: {name} {off} outside 0..{self.page_bytes}")
        if self.tx_pg == self.rx_pg:
            raise MalformedLine(
                f"pad {self.pad_id}: tx and rx page are both {self.tx_pg}")


def _format_row(m: PadMetadata) -> str:
    return (f"{m.pad_id:05d} {m.kb_per_page:05d} {m.pages:05d} "
            f"{m.tx_pg:05d} {m.rx_pg:05d} {m.tx_off:08d} {m.rx_off:08d}")


def serialize_metadata(pads: Iterable[PadMetadata], *,
                       max_pads: int = MAX_PADS_DEFAULT,
                       max_pages: int = MAX_PAGES_DEFAULT) -> str:
    rows = list(pads)
    if len(rows) > max_pads:
        raise TooManyPads(f"{len(rows)} pads exceeds the {max_pads} ceiling")
    seen: set[int] = set()
    lines = [META_HEADER]
    for m in rows:
        m.validate(max_pages=max_pages)
        if m.pad_id in seen:
            raise DuplicatePadId(f"pad {m.pad_id} listed twice")
        seen.add(m.pad_id)
        lines.append(_format_row(m))
    return "\n".join(lines) + "\n"


def parse_metadata(text: str, *,
                   max_pads: int = MAX_PADS_DEFAULT,
                   max_pages: int = MAX_PAGES_DEFAULT) -> dict[int, PadMetadata]:
    lines = text.splitlines()
    if not lines or lines[0] != META_HEADER:
        raise MalformedLine("missing or mangled header line")
    pads: dict[int, PadMetadata] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if line == "":
            raise MalformedLine(f"line {lineno}: blank line inside table")
        fields = line.split(" ")
        if len(fields) != len(_FIELD_WIDTHS):
            raise MalformedLine(f"line {lineno}: expected 7 columns")
        values = []
        for field, width in zip(fields, _FIELD_WIDTHS):
            if len(field) != width or not field.isdigit():
                raise MalformedLine(
                    f"line {lineno}: field {field!r} is not {width} digits")
            values.append(int(field))
        m = PadMetadata(*values)
        m.validate(max_pages=max_pages)
        if m.pad_id in pads:
            raise DuplicatePadId(f"line {lineno}: pad {m.pad_id} repeated")
        pads[m.pad_id] = m
    if len(pads) > max_pads:
        raise TooManyPads(f"{len(pads)} pads exceeds the {max_pads} ceiling")
    return pads


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"writing {path}: {exc}") from exc


class _LoadedPage:
    __slots__ = ("page_no", "buf")

    def __init__(self, page_no: int, buf: bytearray):
        self.page_no = page_no
        self.buf = buf


class Vault:
    """A locked-open pad store.  All mutation requires the lock."""

    def __init__(self, root: Path | str, *,
                 rng: random.Random | None = None,
                 have_mercy: bool = False,
                 delete_turned_pages: bool = False,
                 max_pads: int = MAX_PADS_DEFAULT,
                 max_pages: int = MAX_PAGES_DEFAULT,
                 tag: str | None = None):
        self.root = Path(root)
        self.have_mercy = have_mercy
        self.delete_turned_pages = delete_turned_pages
        self.max_pads = max_pads
        self.max_pages = max_pages
        self.tag = tag if tag is not None else str(self.root)
        self.pads: dict[int, PadMetadata] = {}
        self.observers: list[Callable[[dict], None]] = []
        self._rng = rng
        self._loaded: dict[tuple[int, str], _LoadedPage] = {}
        self._locked = False

    # --- plumbing ---------------------------------------------------------

    def _fill(self, n: int) -> bytes:
        if self._rng is not None:
            return self._rng.randbytes(n)
        return os.urandom(n)

    def _emit(self, kind: str, **fields) -> None:
        if not self.observers:
            return
        event = {"kind": kind, "vault": self.tag}
        event.update(fields)
        for fn in self.observers:
            fn(event)

    def require_lock(self) -> None:
        if not self._locked:
            raise NotLocked(f"{self.root}: operation requires the vault lock")

    @property
    def lock_path(self) -> Path:
        return self.root / LOCK_NAME

    @property
    def meta_path(self) -> Path:
        return self.root / META_NAME

    def pad_dir(self, pad_id: int) -> Path:
        return self.root / f"{pad_id:05d}"

    def page_path(self, pad_id: int, page_no: int) -> Path:
        return self.pad_dir(pad_id) / f"{page_no:05d}"

    # --- lifecycle ----------------------------------------------------------

    @classmethod
    def open(cls, root: Path | str, **kwargs) -> "Vault":
        v = cls(root, **kwargs)
        if not v.meta_path.exists():
            raise IoFailure(f"{v.meta_path} does not exist; not a vault")
        v.reload_metadata()
        return v

    def reload_metadata(self) -> None:
        try:
            text = self.meta_path.read_text(encoding="ascii")
        except OSError as exc:
            raise IoFailure(f"reading {self.meta_path}: {exc}") from exc
        self.pads = parse_metadata(text, max_pads=self.max_pads,
                                   max_pages=self.max_pages)

    def acquire_lock(self) -> None:
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise VaultLocked(
                f"{self.lock_path} exists: previous run did not shut down; "
                "manual recovery required") from None
        except OSError as exc:
            raise IoFailure(f"creating {self.lock_path}: {exc}") from exc
        os.write(fd, b"locked by pid %d\n" % os.getpid())
        os.close(fd)
        self._locked = True

    def release_lock(self) -> None:
        if self._locked:
            try:
                self.lock_path.unlink()
            except FileNotFoundError:
                pass
            self._locked = False

    @property
    def locked(self) -> bool:
        return self._locked

    # --- cursors and pages ----------------------------------------------------

    def remaining(self, pad_id: int, direction: str) -> int:
        m = self.pads[pad_id]
        pg, off = m.cursor(direction)
        if pg >= m.pages:
            return 0
        return m.page_bytes - off

    def exhausted(self, pad_id: int, direction: str) -> bool:
        m = self.pads[pad_id]
        return m.cursor(direction)[0] >= m.pages

    def load_page(self, pad_id: int, direction: str) -> _LoadedPage:
        self.require_lock()
        m = self.pads[pad_id]
        pg, _ = m.cursor(direction)
        if pg >= m.pages:
            raise PadExhausted(f"pad {pad_id} {direction} cursor at page {pg} "
                               f"of {m.pages}")
        path = self.page_path(pad_id, pg)
        if not path.exists():
            raise PageMissing(f"{path} named by {direction} cursor is missing")
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise IoFailure(f"reading {path}: {exc}") from exc
        if len(data) != m.page_bytes:
            raise IoFailure(f"{path} is {len(data)} bytes, metadata says "
                            f"{m.page_bytes}")
        buf = bytearray(data)
        if not self.have_mercy:
            # RAM copy exists; the disk copy dies right now.
            try:
                path.write_bytes(self._fill(m.page_bytes))
            except OSError as exc:
                raise IoFailure(f"obliterating {path}: {exc}") from exc
            self._emit("obliterate_disk", pad=pad_id, page=pg)
        page = _LoadedPage(pg, buf)
        self._loaded[(pad_id, direction)] = page
        self._emit("load_page", pad=pad_id, page=pg, direction=direction)
        return page

    def ensure_loaded(self, pad_id: int, direction: str) -> _LoadedPage:
        page = self._loaded.get((pad_id, direction))
        if page is None:
            page = self.load_page(pad_id, direction)
        return page

    def peek(self, pad_id: int, direction: str, n: int,
             at: int | None = None) -> Optional[bytes]:
        """Read key bytes without consuming them; None if they aren't there."""
        m = self.pads[pad_id]
        try:
            page = self.ensure_loaded(pad_id, direction)
        except (PadExhausted, PageMissing):
            return None
        off = m.cursor(direction)[1] if at is None else at
        if off < 0 or off + n > m.page_bytes:
            return None
        return bytes(page.buf[off:off + n])

    def consume(self, pad_id: int, direction: str, n: int) -> KeySlice:
        """Check out ``n`` key bytes at the cursor and advance it."""
        self.require_lock()
        m = self.pads[pad_id]
        page = self.ensure_loaded(pad_id, direction)
        _, off = m.cursor(direction)
        if off + n > m.page_bytes:
            raise InsufficientPage(
                f"pad {pad_id} {direction} page {page.page_no}: "
                f"{m.page_bytes - off} bytes left, {n} requested")

        def scrubbed(s: KeySlice, *, _v=self, _d=direction) -> None:
            _v._emit("scrub_ram", pad=s.pad_id, page=s.page_no,
                     direction=_d, offset=s.offset, length=len(s))

        sl = KeySlice(page.buf, off, n, pad_id=pad_id, page_no=page.page_no,
                      offset=off, fill=self._fill, on_scrub=scrubbed)
        m.set_cursor(direction, page.page_no, off + n)
        self._emit("consume", pad=pad_id, page=page.page_no,
                   direction=direction, offset=off, length=n)
        self.persist_metadata()
        return sl

    def skip_to(self, pad_id: int, direction: str, new_off: int) -> None:
        """Jump the cursor forward, destroying everything it hops over."""
        self.require_lock()
        m = self.pads[pad_id]
        page = self.ensure_loaded(pad_id, direction)
        _, off = m.cursor(direction)
        if new_off < off:
            raise PageAlreadyUsed(
                f"pad {pad_id} {direction}: cursor cannot move back "
                f"({off} -> {new_off})")
        if new_off > m.page_bytes:
            raise InsufficientPage(
                f"pad {pad_id} {direction}: offset {new_off} past page end")
        if new_off > off:
            page.buf[off:new_off] = self._fill(new_off - off)
            self._emit("skip", pad=pad_id, page=page.page_no,
                       direction=direction, offset=off, length=new_off - off)
        m.set_cursor(direction, page.page_no, new_off)
        self.persist_metadata()

    def turn_page(self, pad_id: int, direction: str, new_page_no: int) -> None:
        """Abandon the current page for ``new_page_no``.

        The unconsumed remainder of the old page is destroyed in RAM and on
        disk — turned-away key material is lost by design, at both ends.
        ``new_page_no`` at or past the page count simply marks the direction
        exhausted; page numbers only ever go up.
        """
        self.require_lock()
        m = self.pads[pad_id]
        other = m.cursor("rx" if direction == "tx" else "tx")[0]
        if new_page_no == other:
            raise PageCollision(
                f"pad {pad_id}: page {new_page_no} is the {('rx' if direction == 'tx' else 'tx')} page")
        if new_page_no <= max(m.tx_pg, m.rx_pg):
            raise PageAlreadyUsed(
                f"pad {pad_id}: page {new_page_no} not above high mark "
                f"{max(m.tx_pg, m.rx_pg)}")
        if not 0 <= new_page_no <= 99_999:
            raise FieldOverflow(f"page number {new_page_no} overflows field")

        old_pg, old_off = m.cursor(direction)
        loaded = self._loaded.pop((pad_id, direction), None)
        if loaded is not None and old_off < m.page_bytes:
            loaded.buf[old_off:] = self._fill(m.page_bytes - old_off)
            self._emit("retire_remainder", pad=pad_id, page=old_pg,
                       direction=direction, offset=old_off,
                       length=m.page_bytes - old_off)
        if old_pg < m.pages:
            path = self.page_path(pad_id, old_pg)
            if path.exists():
                try:
                    if self.delete_turned_pages:
                        path.unlink()
                        self._emit("page_deleted", pad=pad_id, page=old_pg)
                    else:
                        path.write_bytes(self._fill(m.page_bytes))
                        self._emit("obliterate_disk", pad=pad_id, page=old_pg)
                except OSError as exc:
                    raise IoFailure(f"retiring {path}: {exc}") from exc

        m.set_cursor(direction, new_page_no, 0)
        self._emit("turn_page", pad=pad_id, direction=direction,
                   old_page=old_pg, new_page=new_page_no)
        self.persist_metadata()

    def next_page_number(self, pad_id: int, *also: int) -> int:
        """Lowest page number above everything this pad has touched."""
        m = self.pads[pad_id]
        return max(m.tx_pg, m.rx_pg, *also) + 1 if also else max(m.tx_pg, m.rx_pg) + 1

    # --- persistence -----------------------------------------------------------

    def persist_metadata(self) -> None:
        text = serialize_metadata(self.pads.values(), max_pads=self.max_pads,
                                  max_pages=self.max_pages)
        _atomic_write(self.meta_path, text.encode("ascii"))

    def persist_on_shutdown(self) -> None:
        """Write unconsumed remainders back, flush metadata, drop the lock."""
        self.require_lock()
        for (pad_id, direction), page in sorted(self._loaded.items()):
            m = self.pads[pad_id]
            if page.page_no < m.pages:
                _atomic_write(self.page_path(pad_id, page.page_no),
                              bytes(page.buf))
                self._emit("writeback", pad=pad_id, page=page.page_no,
                           direction=direction)
        self._loaded.clear()
        self.persist_metadata()
        self.release_lock()

    # --- session records (opaque to the vault) -----------------------------------

    @property
    def session_path(self) -> Path:
        return self.root / SESSION_NAME

    def read_session_data(self) -> Optional[bytes]:
        try:
            return self.session_path.read_bytes()
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise IoFailure(f"reading {self.session_path}: {exc}") from exc

    def write_session_data(self, blob: bytes) -> None:
        self.require_lock()
        _atomic_write(self.session_path, blob)

    # --- hub support ---------------------------------------------------------------

    def withdraw_page(self, pad_id: int, page_no: int) -> bytearray:
        """Remove a whole page from disk for carving; the file dies now."""
        self.require_lock()
        m = self.pads[pad_id]
        if page_no >= m.pages:
            raise PadExhausted(f"pad {pad_id} has no page {page_no}")
        path = self.page_path(pad_id, page_no)
        if not path.exists():
            raise PageMissing(f"{path} missing")
        try:
            data = bytearray(path.read_bytes())
            path.write_bytes(self._fill(m.page_bytes))
        except OSError as exc:
            raise IoFailure(f"withdrawing {path}: {exc}") from exc
        if len(data) != m.page_bytes:
            raise IoFailure(f"{path} was {len(data)} bytes, wanted {m.page_bytes}")
        self._emit("obliterate_disk", pad=pad_id, page=page_no)
        self._emit("carve", pad=pad_id, page=page_no, offset=0,
                   length=m.page_bytes)
        return data

    def mark_pages_carved(self, pad_id: int, n_pages: int) -> None:
        """Advance the reserve's tx cursor past ``n_pages`` carved pages."""
        self.require_lock()
        m = self.pads[pad_id]
        new_tx = m.tx_pg + n_pages
        if new_tx == m.rx_pg:
            # the pinned rx (== page count) blocks this value; fall to the
            # reserved exhaustion sentinels
            new_tx = SENTINEL_PAGES[0] if m.rx_pg != SENTINEL_PAGES[0] \
                else SENTINEL_PAGES[1]
        m.set_cursor("tx", new_tx, 0)
        self.persist_metadata()

    def install_received_pad(self, pad_id: int, kb_per_page: int, pages: int,
                             role: str, page_data: dict[int, bytes]) -> None:
        """Install a pad delivered over the wire (hub distribution)."""
        self.require_lock()
        if pad_id in self.pads:
            raise DuplicatePadId(f"pad {pad_id} already in this vault")
        if sorted(page_data) != list(range(pages)):
            raise VaultError(
                f"pad {pad_id}: have pages {sorted(page_data)}, want 0..{pages - 1}")
        page_bytes = kb_per_page * 1024
        for no, blob in page_data.items():
            if len(blob) != page_bytes:
                raise VaultError(
                    f"pad {pad_id} page {no}: {len(blob)} bytes, want {page_bytes}")
        row = _initial_row(pad_id, kb_per_page, pages, role)
        row.validate(max_pages=self.max_pages)
        d = self.pad_dir(pad_id)
        if d.exists():
            raise DestinationNotEmpty(f"{d} already exists")
        try:
            d.mkdir(parents=True)
            for no in range(pages):
                self.page_path(pad_id, no).write_bytes(page_data[no])
        except OSError as exc:
            raise IoFailure(f"installing pad {pad_id}: {exc}") from exc
        self.pads[pad_id] = row
        self.persist_metadata()
        self._emit("install_pad", pad=pad_id, pages=pages,
                   kb_per_page=kb_per_page, role=role)

    def report_rows(self) -> list[PadMetadata]:
        return [PadMetadata(**vars(m)) for m in self.pads.values()]


# --- installation ----------------------------------------------------------------

@dataclass
class PadPlan:
    """Geometry of one pad an install should create."""

    pad_id: int
    kb_per_page: int
    pages: int

    @property
    def page_bytes(self) -> int:
        return self.kb_per_page * 1024

    @property
    def total_bytes(self) -> int:
        return self.page_bytes * self.pages


def _initial_row(pad_id: int, kb_per_page: int, pages: int, role: str) -> PadMetadata:
    # Endpoint A transmits on page 0 and receives on page 1; endpoint B is
    # the mirror image.  The reserve role pins rx to the page count so every
    # real page is carvable from the tx side.
    if role == "a":
        tx, rx = 0, 1
    elif role == "b":
        tx, rx = 1, 0
    elif role == "reserve":
        tx, rx = 0, pages
    else:
        raise ValueError(f"role must be a, b or reserve, got {role!r}")
    return PadMetadata(pad_id, kb_per_page, pages, tx, rx, 0, 0)


def _merge_metadata(dest: Path, new_rows: list[PadMetadata], *,
                    max_pads: int, max_pages: int) -> None:
    meta = dest / META_NAME
    pads: dict[int, PadMetadata] = {}
    if meta.exists():
        pads = parse_metadata(meta.read_text(encoding="ascii"),
                              max_pads=max_pads, max_pages=max_pages)
    for row in new_rows:
        if row.pad_id in pads:
            raise DuplicatePadId(f"{dest}: pad {row.pad_id} already present")
        pads[row.pad_id] = row
    _atomic_write(meta, serialize_metadata(
        pads.values(), max_pads=max_pads, max_pages=max_pages).encode("ascii"))


def _check_dest(dest: Path, plan: list[PadPlan], append: bool, *,
                max_pads: int, max_pages: int) -> None:
    if dest.exists():
        entries = list(dest.iterdir())
        if entries and not append:
            raise DestinationNotEmpty(f"{dest} is not empty")
    meta = dest / META_NAME
    existing: dict[int, PadMetadata] = {}
    if meta.exists():
        existing = parse_metadata(meta.read_text(encoding="ascii"),
                                  max_pads=max_pads, max_pages=max_pages)
    for p in plan:
        if p.pad_id in existing:
            raise DuplicatePadId(f"{dest}: pad {p.pad_id} already present")
        if (dest / f"{p.pad_id:05d}").exists():
            raise DestinationNotEmpty(
                f"{dest / f'{p.pad_id:05d}'} already exists")


def _validate_plan(plan: list[PadPlan], max_pages: int) -> None:
    seen: set[int] = set()
    for p in plan:
        if p.pad_id in seen:
            raise DuplicatePadId(f"plan names pad {p.pad_id} twice")
        seen.add(p.pad_id)
        PadMetadata(p.pad_id, p.kb_per_page, p.pages, 0, 1, 0, 0).validate(
            max_pages=max_pages)


def _stream_install(source: Path, plan: list[PadPlan], dests: list[Path],
                    offset: int, fill: Callable[[int], bytes]) -> int:
    """Copy source key material into page files, destroying it behind us."""
    needed = sum(p.total_bytes for p in plan)
    try:
        size = source.stat().st_size
    except OSError as exc:
        raise IoFailure(f"stat {source}: {exc}") from exc
    if size - offset < needed:
        raise SourceTooShort(
            f"{source}: {size - offset} bytes from offset {offset}, "
            f"plan needs {needed}")
    try:
        with source.open("r+b") as src:
            src.seek(offset)
            for p in plan:
                for d in dests:
                    (d / f"{p.pad_id:05d}").mkdir(parents=True, exist_ok=True)
                for page_no in range(p.pages):
                    data = src.read(p.page_bytes)
                    if len(data) != p.page_bytes:
                        raise SourceTooShort(f"{source} truncated mid-read")
                    for d in dests:
                        (d / f"{p.pad_id:05d}" / f"{page_no:05d}").write_bytes(data)
                    # march back over what we just took and destroy it
                    src.seek(-p.page_bytes, os.SEEK_CUR)
                    src.write(fill(p.page_bytes))
            end = src.tell()
    except OSError as exc:
        raise IoFailure(f"installing from {source}: {exc}") from exc
    return end


def install_pair(source: Path | str, plan: list[PadPlan],
                 dest_a: Path | str, dest_b: Path | str, *,
                 rng: random.Random | None = None,
                 append: bool = False,
                 source_offset: int = 0,
                 max_pads: int = MAX_PADS_DEFAULT,
                 max_pages: int = MAX_PAGES_DEFAULT) -> int:
    """Install the same pads at two endpoints from one entropy source.

    Page files come out pairwise byte-identical; the consumed stretch of the
    source file is overwritten as it is read.  Returns the new source offset
    so several installs can share one source.  Role A (dest_a) starts
    transmitting on page 0; role B on page 1.
    """
    source, dest_a, dest_b = Path(source), Path(dest_a), Path(dest_b)
    _validate_plan(plan, max_pages)
    fill = rng.randbytes if rng is not None else os.urandom
    _check_dest(dest_a, plan, append, max_pads=max_pads, max_pages=max_pages)
    _check_dest(dest_b, plan, append, max_pads=max_pads, max_pages=max_pages)
    dest_a.mkdir(parents=True, exist_ok=True)
    dest_b.mkdir(parents=True, exist_ok=True)
    end = _stream_install(source, plan, [dest_a, dest_b], source_offset, fill)
    for dest, role in ((dest_a, "a"), (dest_b, "b")):
        rows = [_initial_row(p.pad_id, p.kb_per_page, p.pages, role)
                for p in plan]
        _merge_metadata(dest, rows, max_pads=max_pads, max_pages=max_pages)
    return end


def install_reserve(source: Path | str, dest: Path | str, *,
                    pad_id: int = 0, kb_per_page: int, pages: int,
                    rng: random.Random | None = None,
                    source_offset: int = 0,
                    max_pads: int = MAX_PADS_DEFAULT,
                    max_pages: int = MAX_PAGES_DEFAULT) -> int:
    """Install a hub reserve pad: receive cursor pinned past every page."""
    source, dest = Path(source), Path(dest)
    plan = [PadPlan(pad_id, kb_per_page, pages)]
    _validate_plan(plan, max_pages)
    fill = rng.randbytes if rng is not None else os.urandom
    _check_dest(dest, plan, append=True, max_pads=max_pads, max_pages=max_pages)
    dest.mkdir(parents=True, exist_ok=True)
    end = _stream_install(source, plan, [dest], source_offset, fill)
    _merge_metadata(dest, [_initial_row(pad_id, kb_per_page, pages, "reserve")],
                    max_pads=max_pads, max_pages=max_pages)
    return end


# --- tracer streams -----------------------------------------------------------------

def write_tracer(path: Path | str, n_bytes: int) -> None:
    """Write a self-describing test stream: each aligned 8-byte word is its
    own byte offset as zero-padded ASCII decimal."""
    if n_bytes % TRACER_WORD:
        raise ValueError(f"tracer length must be a multiple of {TRACER_WORD}")
    if n_bytes > 10 ** 8:
        raise ValueError("tracer offsets only go to 99,999,999")
    path = Path(path)
    with path.open("wb") as f:
        for off in range(0, n_bytes, TRACER_WORD):
            f.write(b"%08d" % off)


def _expected_tracer_page(base: int, page_bytes: int) -> bytes:
    return b"".join(b"%08d" % off
                    for off in range(base, base + page_bytes, TRACER_WORD))


@dataclass
class TracerFinding:
    pad_id: int
    page_no: int
    kind: str                      # "mismatch" | "short" | "missing"
    page_offset: int
    expected_source_offset: int
    found: bytes | None

    def __str__(self) -> str:
        where = (f"pad {self.pad_id:05d} page {self.page_no:05d} "
                 f"offset {self.page_offset}")
        if self.kind == "missing":
            return f"{where}: page file missing"
        if self.kind == "short":
            return f"{where}: page file truncated"
        return (f"{where}: expected source offset {self.expected_source_offset}, "
                f"found {self.found!r}")


def verify_tracer(root: Path | str) -> list[TracerFinding]:
    """Check a tracer-installed vault: every page must carry the words of its
    own source interval.  Returns findings, empty when the vault is faithful.

    Only meaningful on a freshly installed vault — one load_page() later the
    pages are deliberately gibberish.
    """
    root = Path(root)
    meta = parse_metadata((root / META_NAME).read_text(encoding="ascii"))
    findings: list[TracerFinding] = []
    base = 0
    for m in meta.values():
        for page_no in range(m.pages):
            page_base = base + page_no * m.page_bytes
            path = root / f"{m.pad_id:05d}" / f"{page_no:05d}"
            if not path.exists():
                findings.append(TracerFinding(m.pad_id, page_no, "missing",
                                              0, page_base, None))
                continue
            blob = path.read_bytes()
            if len(blob) != m.page_bytes:
                findings.append(TracerFinding(m.pad_id, page_no, "short",
                                              len(blob), page_base + len(blob),
                                              None))
                continue
            want = _expected_tracer_page(page_base, m.page_bytes)
            if blob != want:
                diff = next(i for i in range(m.page_bytes)
                            if blob[i] != want[i])
                word = diff - diff % TRACER_WORD
                findings.append(TracerFinding(
                    m.pad_id, page_no, "mismatch", word, page_base + word,
                    bytes(blob[word:word + TRACER_WORD])))
        base += m.pages * m.page_bytes
    return findings
