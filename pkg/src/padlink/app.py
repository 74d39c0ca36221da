"""The operator daemon: slash commands, file transfer, and the control API.

One Daemon object owns a vault, a protocol engine, and the operator-facing
state (selected session, transfers in flight, gibberish timing).  It is
deliberately I/O-free at this layer: datagrams go in through
``on_datagram`` and come out of ``drain_outbox``, operator lines go in
through ``handle_line``, and everything the operator or an attached
console should see comes out as event dictionaries.  The same object
therefore runs unmodified under the deterministic simulator and under the
real socket loop in ``run_real``.

Shutdown discipline: every orderly exit funnels through :meth:`shutdown`,
the single place where session state is persisted and the vault lock
released.  The one deliberate exception is the ``/Z`` crash command,
which abandons the process exactly as a segfault would — lock file left
behind, loaded pages lost.
"""

from __future__ import annotations

import json
import os
import random
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .codec import PacketType
from .config import Config
from .errors import (
    Blocked,
    CrashInjected,
    LocalReadFailure,
    NotConnected,
    PadlinkError,
    PageAlreadyUsed,
    PageCollision,
    RejectedWhileBlocked,
    UnknownCommand,
    VaultError,
)
from .hub import (
    FILE_CHUNK,
    IncomingPadAssembler,
    decode_file_begin,
    file_train,
)
from .session import CONNECTED, ProtocolEngine, chunk_sizes
from .vault import Vault

CONTROL_SCHEMA_VERSION = 1

HELP_TEXT = """/? help
/4 use session 4
/a abort /g or /s
/b execute the configured batch of commands
/c connect this session
/d disconnect this session
/f forget a missing ACK
/g20 send 20 bytes of ciphertext gibberish
/q quit program at both endpoints
/sFILE send FILE to remote system
/s/tmp list files in /tmp to remote system
/v vault information
/Z crash on purpose
// include literal / in message"""


@dataclass
class OutgoingTransfer:
    name: str
    total: int
    done: int = 0
    started_at: float = 0.0
    kind: str = "file"            # "file" | "gibberish" | "listing"
    # mirror of every queued (ptype, payload_len) awaiting acknowledgement
    unacked: deque = field(default_factory=deque)


@dataclass
class IncomingTransfer:
    name: str                      # name as offered by the sender
    dest: Optional[Path]           # where it lands; None while refusing
    total: int
    done: int = 0
    handle: Optional[object] = None
    distribution: bool = False
    buffer: bytearray = field(default_factory=bytearray)


class Daemon:
    """Protocol engine plus operator state; see the module docstring."""

    def __init__(self, config: Config, *, vault: Optional[Vault] = None,
                 rng: Optional[random.Random] = None) -> None:
        self.config = config
        self.rng = rng or random.Random()
        if vault is None:
            vault = Vault.open(Path(config.vault_path), rng=self.rng,
                               have_mercy=config.have_mercy)
            vault.acquire_lock()
        self.vault = vault
        self.engine = ProtocolEngine(vault)
        blob = vault.read_session_data()
        if blob:
            self.engine.restore_state(blob, now=0.0)
        self.assembler = IncomingPadAssembler(vault)
        self.selected: Optional[int] = self._default_selection()
        self.out_jobs: dict[int, OutgoingTransfer] = {}
        self.in_jobs: dict[int, IncomingTransfer] = {}
        self.refusing_rx: set[int] = set()
        self.sinks: list[Callable[[dict], None]] = []
        self.exit_code: Optional[int] = None
        self.shutdown_calls = 0
        self.quit_wanted = False
        # client mode: the server's address is configured, not learned
        if config.mode == "client" and config.user_pad in self.engine.sessions:
            s = self.engine.session(config.user_pad)
            if s.remote_addr is None:
                s.remote_addr = config.server_address

    # ----- plumbing ---------------------------------------------------------

    def _default_selection(self) -> Optional[int]:
        if self.config.mode == "client" \
                and self.config.user_pad in self.engine.sessions:
            return self.config.user_pad
        pads = sorted(self.engine.sessions)
        return pads[0] if pads else None

    def add_sink(self, sink: Callable[[dict], None]) -> None:
        """Attach a control-API subscriber; it gets a snapshot at once."""
        self.sinks.append(sink)
        sink(self._frame("session-list", rows=self.engine.list_sessions()))

    def _frame(self, event: str, **fields) -> dict:
        fields["v"] = CONTROL_SCHEMA_VERSION
        fields["event"] = event
        return fields

    def _emit(self, event: str, **fields) -> dict:
        frame = self._frame(event, **fields)
        for sink in list(self.sinks):
            sink(frame)
        return frame

    # ----- the network face (SimNode protocol) --------------------------------

    def on_datagram(self, data: bytes, src, *, now: float) -> int:
        evals = self.engine.on_datagram(data, src, now=now)
        self._consume_engine_events(now)
        return evals

    def on_timer(self, *, now: float) -> None:
        self.engine.on_timer(now=now)
        self._consume_engine_events(now)

    def next_deadline(self) -> Optional[float]:
        return self.engine.next_deadline()

    def drain_outbox(self) -> list[tuple[object, bytes]]:
        return self.engine.drain_outbox()

    # ----- operator input ---------------------------------------------------------

    def handle_line(self, line: str, *, now: float) -> list[dict]:
        """One operator line (terminal or control API) -> feedback frames."""
        out: list[dict] = []
        try:
            self._dispatch_line(line, now, out)
        except RejectedWhileBlocked as exc:
            out.append(self._emit("error", error="blocked", text=str(exc)))
        except UnknownCommand as exc:
            out.append(self._emit("error", error="unknown-command",
                                  text=str(exc)))
        except PadlinkError as exc:
            out.append(self._emit(
                "error", error=type(exc).__name__, text=str(exc)))
        self._consume_engine_events(now)
        return out

    def _dispatch_line(self, line: str, now: float, out: list[dict]) -> None:
        if line.startswith("//"):
            self._send_chat(line[1:], now, out)
            return
        if not line.startswith("/"):
            if line:
                self._send_chat(line, now, out)
            return
        cmd, arg = line[1:2], line[2:]
        if cmd == "?":
            out.append(self._emit("status", text=HELP_TEXT))
        elif cmd.isdigit():
            self._select_session(line[1:], out)
        elif cmd == "a":
            self._abort(now, out)
        elif cmd == "b":
            self._run_batch(now, out)
        elif cmd == "c":
            self._connect(now, out)
        elif cmd == "d":
            self._disconnect(now, out)
        elif cmd in ("f", "F"):
            self._forget(now, out)
        elif cmd == "g":
            self._gibberish(arg, now, out)
        elif cmd == "q":
            self._quit(now, out)
        elif cmd == "s":
            self._send_path(arg, now, out)
        elif cmd == "v":
            out.append(self._emit("vault-rows", rows=self.vault_report()))
        elif cmd == "Z":
            raise CrashInjected("/Z: deliberate crash")
        else:
            raise UnknownCommand(f"/{cmd}: no such command (try /?)")

    # ----- individual commands ------------------------------------------------------

    def _need_session(self) -> int:
        if self.selected is None or self.selected not in self.engine.sessions:
            raise UnknownCommand("no session selected (use /N)")
        return self.selected

    def _check_unblocked(self, pad: int) -> None:
        s = self.engine.session(pad)
        if s.blocked:
            raise RejectedWhileBlocked(
                f"session {pad} is waiting for an ACK (use /f to forget it)")

    def _select_session(self, digits: str, out: list[dict]) -> None:
        if not digits.isdigit():
            raise UnknownCommand(f"/{digits}: no such command (try /?)")
        pad = int(digits)
        if pad not in self.engine.sessions:
            raise UnknownCommand(f"no pad {pad} in this vault")
        self.selected = pad
        out.append(self._emit("status", text=f"session {pad} selected",
                              session=pad))

    def _send_chat(self, text: str, now: float, out: list[dict]) -> None:
        pad = self._need_session()
        try:
            self.engine.send_chat(pad, text, now=now)
        except Blocked as exc:
            raise RejectedWhileBlocked(str(exc)) from None
        except NotConnected as exc:
            raise RejectedWhileBlocked(
                f"session {pad} is not connected (use /c): {exc}") from None
        job = self.out_jobs.get(pad)
        if job is None or job.kind != "chat":
            self.out_jobs[pad] = job = OutgoingTransfer(
                name="", total=0, kind="chat")
        job.unacked.append((int(PacketType.CHAT), len(text.encode())))
        out.append(self._emit("chat-echo", session=pad, text=text))

    def _connect(self, now: float, out: list[dict]) -> None:
        pad = self._need_session()
        addr = None
        if self.config.mode == "client" and pad == self.config.user_pad:
            addr = self.config.server_address
        self.engine.connect(pad, addr, now=now)
        out.append(self._emit("status", session=pad,
                              text=f"probing on pad {pad}"))

    def _disconnect(self, now: float, out: list[dict]) -> None:
        pad = self._need_session()
        try:
            self.engine.disconnect(pad, now=now)
        except Blocked as exc:
            raise RejectedWhileBlocked(str(exc)) from None
        out.append(self._emit("status", session=pad,
                              text=f"disconnect requested on pad {pad}"))

    def _forget(self, now: float, out: list[dict]) -> None:
        pad = self._need_session()
        had = self.engine.forget(pad)
        text = "pending ACK forgotten; peer must resynchronize" if had \
            else "nothing was pending"
        out.append(self._emit("status", session=pad, text=text))

    def _abort(self, now: float, out: list[dict]) -> None:
        pad = self._need_session()
        job = self.out_jobs.pop(pad, None)
        incoming = self.in_jobs.pop(pad, None)
        if job is None and incoming is None:
            out.append(self._emit("status", session=pad,
                                  text="nothing to abort"))
            return
        dropped = self.engine.abort_bulk(pad, now=now)
        if incoming is not None:
            self._scrap_incoming(pad, incoming)
        what = job.kind if job else "receive"
        out.append(self._emit("status", session=pad,
                              text=f"aborted {what} ({dropped} queued packets dropped)"))
        if job is not None:
            self._emit("transfer-progress", session=pad, direction="out",
                       name=job.name, done=job.done, total=job.total,
                       state="aborted")

    def _run_batch(self, now: float, out: list[dict]) -> None:
        if not self.config.batch:
            out.append(self._emit("status", text="batch is empty"))
            return
        for line in self.config.batch:
            out.extend(self.handle_line(line, now=now))

    def _gibberish(self, arg: str, now: float, out: list[dict]) -> None:
        pad = self._need_session()
        if not arg.isdigit() or int(arg) < 1:
            raise UnknownCommand(f"/g needs a byte count, got {arg!r}")
        total = int(arg)
        self._check_unblocked(pad)
        if pad in self.out_jobs and self.out_jobs[pad].kind != "chat":
            raise RejectedWhileBlocked(
                f"session {pad} already has a {self.out_jobs[pad].kind} job")
        sizes = chunk_sizes(total, FILE_CHUNK)
        train = [(PacketType.GIBBERISH, self.rng.randbytes(n)) for n in sizes]
        job = OutgoingTransfer(name=f"{total} gibberish bytes", total=total,
                               started_at=now, kind="gibberish")
        job.unacked.extend((int(t), len(p)) for t, p in train)
        try:
            self.engine.send_bulk(pad, train, now=now)
        except (Blocked, NotConnected) as exc:
            raise RejectedWhileBlocked(str(exc)) from None
        self.out_jobs[pad] = job
        out.append(self._emit("status", session=pad,
                              text=f"sending {total} bytes of gibberish "
                                   f"in {len(sizes)} packets"))

    def _quit(self, now: float, out: list[dict]) -> None:
        pad = self._need_session()
        if self.engine.send_quit(pad, now=now):
            self.quit_wanted = True
            out.append(self._emit("status", session=pad,
                                  text="quit requested at both endpoints"))
        else:
            # nothing to tell anyone: quit locally right now
            out.append(self._emit("status", text="quitting"))
            self.shutdown(0, "operator quit", now=now)

    def _send_path(self, arg: str, now: float, out: list[dict]) -> None:
        pad = self._need_session()
        if not arg:
            raise UnknownCommand("/s needs a path")
        self._check_unblocked(pad)
        if pad in self.out_jobs and self.out_jobs[pad].kind != "chat":
            raise RejectedWhileBlocked(
                f"session {pad} already has a {self.out_jobs[pad].kind} job")
        path = Path(arg)
        try:
            if path.is_dir():
                listing = "\n".join(sorted(p.name for p in path.iterdir()))
                train = [(PacketType.LISTING, chunk.encode())
                         for chunk in _split_text(listing or "(empty)", FILE_CHUNK)]
                job = OutgoingTransfer(name=str(path), total=len(listing),
                                       started_at=now, kind="listing")
            else:
                blob = path.read_bytes()
                train = file_train(path.name, blob)
                job = OutgoingTransfer(name=path.name, total=len(blob),
                                       started_at=now, kind="file")
        except OSError as exc:
            raise LocalReadFailure(f"cannot read {path}: {exc}") from exc
        job.unacked.extend((int(t), len(p)) for t, p in train)
        try:
            self.engine.send_bulk(pad, train, now=now)
        except (Blocked, NotConnected) as exc:
            raise RejectedWhileBlocked(str(exc)) from None
        self.out_jobs[pad] = job
        what = "listing of" if job.kind == "listing" else "file"
        out.append(self._emit("status", session=pad,
                              text=f"sending {what} {job.name}"))

    # ----- control API ------------------------------------------------------------

    def handle_control_line(self, raw, *, now: float) -> list[dict]:
        """One newline-delimited JSON message from an attached console."""
        try:
            if isinstance(raw, bytes):
                raw = raw.decode()
            msg = json.loads(raw)
            if not isinstance(msg, dict):
                raise ValueError("control message must be an object")
        except (ValueError, UnicodeDecodeError) as exc:
            return [self._emit("error", error="malformed-control-message",
                               text=str(exc))]
        if "command" in msg:
            return self.handle_line(str(msg["command"]), now=now)
        if "chat" in msg:
            if "session" in msg:
                try:
                    self._select_session(str(int(msg["session"])), [])
                except (ValueError, UnknownCommand) as exc:
                    return [self._emit("error", error="unknown-command",
                                       text=str(exc))]
            text = str(msg["chat"])
            if text.startswith("/"):
                text = "/" + text       # keep leading slash literal
            return self.handle_line(text, now=now)
        return [self._emit("error", error="malformed-control-message",
                           text="need 'command' or 'chat'")]

    # ----- engine event translation --------------------------------------------------

    def _consume_engine_events(self, now: float) -> None:
        for e in self.engine.drain_events():
            kind = e["kind"]
            if kind == "deliver":
                self._on_deliver(e, now)
            elif kind == "ack":
                self._on_ack(e, now)
            elif kind == "quit":
                self._emit("status", session=e["pad"],
                           text="peer quit: closing this endpoint too")
                self.shutdown(0, "quit from peer", now=now)
            elif kind == "abort":
                self._on_remote_abort(e["pad"], now)
            elif kind == "connected":
                self._emit("status", session=e["pad"],
                           text=f"session {e['pad']} connected")
                self._emit("session-list", rows=self.engine.list_sessions())
            elif kind == "disconnected":
                self._emit("status", session=e["pad"],
                           text=f"session {e['pad']} disconnected ({e['by']})")
                self._emit("session-list", rows=self.engine.list_sessions())
                if e["by"] == "quit" and self.quit_wanted:
                    self.shutdown(0, "quit acknowledged", now=now)
            elif kind == "halted":
                self._emit("error", error="halted", session=e["pad"],
                           text=f"session {e['pad']} halted: {e['reason']}")
            elif kind == "duplicate":
                self._emit("status", session=e["pad"],
                           text="duplicate packet re-acknowledged")
            elif kind in ("turn", "turn-requested", "turn-announced",
                          "resync"):
                self._emit("status", session=e.get("pad"),
                           text=_describe(e))
            # "sent", "ignored", "probe", "drop", "bulk-aborted" stay internal

    def _on_deliver(self, e: dict, now: float) -> None:
        pad, ptype, payload = e["pad"], e["ptype"], e["payload"]
        if ptype == PacketType.CHAT:
            self._emit("chat-in", session=pad,
                       text=payload.decode(errors="replace"))
        elif ptype == PacketType.LISTING:
            self._emit("chat-in", session=pad,
                       text=payload.decode(errors="replace"), listing=True)
        elif ptype == PacketType.FILE_BEGIN:
            self._begin_incoming(pad, payload, now)
        elif ptype == PacketType.FILE_DATA:
            self._incoming_data(pad, payload)
        elif ptype == PacketType.FILE_END:
            self._finish_incoming(pad, now)
        elif ptype == PacketType.GIBBERISH:
            pass                        # content is the point of NOT displaying
        elif ptype == PacketType.ABORT:
            self._on_remote_abort(pad, now)

    def _on_ack(self, e: dict, now: float) -> None:
        pad = e["pad"]
        job = self.out_jobs.get(pad)
        if job is None or not job.unacked:
            return
        head_ptype, head_len = job.unacked[0]
        if e["ptype"] != head_ptype:
            return                     # engine-internal packet, not ours
        job.unacked.popleft()
        if head_ptype in (PacketType.FILE_DATA, PacketType.GIBBERISH,
                          PacketType.LISTING):
            job.done += head_len
            if job.kind == "file":
                self._emit("transfer-progress", session=pad, direction="out",
                           name=job.name, done=job.done, total=job.total,
                           state="active")
        if not job.unacked:
            del self.out_jobs[pad]
            if job.kind == "gibberish":
                elapsed = now - job.started_at
                self._emit("status", session=pad, elapsed=elapsed,
                           text=f"{job.total} gibberish bytes acknowledged "
                                f"in {elapsed:.3f} s")
            elif job.kind == "file":
                self._emit("transfer-progress", session=pad, direction="out",
                           name=job.name, done=job.done, total=job.total,
                           state="done")
            elif job.kind == "listing":
                self._emit("status", session=pad,
                           text=f"listing of {job.name} delivered")

    def _on_remote_abort(self, pad: int, now: float) -> None:
        job = self.out_jobs.pop(pad, None)
        if job is not None:
            self.engine.abort_bulk(pad, now=now, notify=False)
            self._emit("transfer-progress", session=pad, direction="out",
                       name=job.name, done=job.done, total=job.total,
                       state="aborted")
        incoming = self.in_jobs.pop(pad, None)
        if incoming is not None:
            self._scrap_incoming(pad, incoming)
            self._emit("transfer-progress", session=pad, direction="in",
                       name=incoming.name, done=incoming.done,
                       total=incoming.total, state="aborted")
        self.refusing_rx.discard(pad)
        self._emit("status", session=pad, text="transfer aborted by peer")

    # ----- incoming files ------------------------------------------------------------

    def _begin_incoming(self, pad: int, payload: bytes, now: float) -> None:
        try:
            name, size = decode_file_begin(payload)
        except PadlinkError:
            self.refusing_rx.add(pad)
            return
        distribution = name.startswith("__otpdist__/")
        if not distribution and self.config.rx_files_dir is None:
            # No landing area: the begin packet was acknowledged (the key is
            # spent either way) but the answer is an abort notice.
            self.refusing_rx.add(pad)
            self.engine.abort_bulk(pad, now=now)
            self._emit("status", session=pad,
                       text=f"refused incoming file {name!r}: "
                            "no receive directory configured")
            return
        old = self.in_jobs.pop(pad, None)
        if old is not None:
            self._scrap_incoming(pad, old)
        self.refusing_rx.discard(pad)
        job = IncomingTransfer(name=name, dest=None, total=size,
                               distribution=distribution)
        if not distribution:
            job.dest = _collision_free(
                Path(self.config.rx_files_dir), Path(name).name)
            try:
                job.handle = open(job.dest, "wb")
            except OSError as exc:
                self.refusing_rx.add(pad)
                self.engine.abort_bulk(pad, now=now)
                self._emit("error", error="rx-open-failed", session=pad,
                           text=f"cannot open {job.dest}: {exc}")
                return
        self.in_jobs[pad] = job
        self._emit("transfer-progress", session=pad, direction="in",
                   name=name, done=0, total=size, state="active")

    def _incoming_data(self, pad: int, payload: bytes) -> None:
        job = self.in_jobs.get(pad)
        if job is None:
            return                      # refused or aborted: drain silently
        job.done += len(payload)
        if job.distribution:
            job.buffer.extend(payload)
        else:
            job.handle.write(payload)
            self._emit("transfer-progress", session=pad, direction="in",
                       name=job.name, done=job.done, total=job.total,
                       state="active")

    def _finish_incoming(self, pad: int, now: float) -> None:
        self.refusing_rx.discard(pad)
        job = self.in_jobs.pop(pad, None)
        if job is None:
            return
        if job.distribution:
            try:
                got = self.assembler.offer(job.name, bytes(job.buffer))
            except PadlinkError as exc:
                self._emit("error", error="bad-distribution", session=pad,
                           text=str(exc))
                return
            if got is not None:
                self.engine.adopt_new_pads()
                if got["peer"] is not None \
                        and got["pad"] in self.engine.sessions:
                    self.engine.session(got["pad"]).remote_addr = \
                        _as_addr(got["peer"])
                self._emit("status", session=pad,
                           text=f"new pad {got['pad']} installed "
                                f"({got['pages']} pages)")
                self._emit("session-list", rows=self.engine.list_sessions())
            return
        job.handle.close()
        self._emit("transfer-progress", session=pad, direction="in",
                   name=job.name, done=job.done, total=job.total,
                   state="done", saved_as=str(job.dest))

    def _scrap_incoming(self, pad: int, job: IncomingTransfer) -> None:
        if job.handle is not None:
            job.handle.close()
            try:
                job.dest.unlink()
            except OSError:
                pass
        for i in range(len(job.buffer)):
            job.buffer[i] = 0

    # ----- reporting -----------------------------------------------------------------

    def vault_report(self) -> list[dict]:
        """What pad.metadata would say right now, plus who turns pages."""
        rows = []
        for m in self.vault.report_rows():
            if m.rx_pg >= m.pages:
                controls = None         # a reserve has no peer to negotiate with
            else:
                controls = m.tx_pg > m.rx_pg
            rows.append({
                "pad": m.pad_id, "kb_per_page": m.kb_per_page,
                "pages": m.pages, "tx_pg": m.tx_pg, "rx_pg": m.rx_pg,
                "tx_off": m.tx_off, "rx_off": m.rx_off,
                "controls_turns": controls,
            })
        return rows

    # ----- lifecycle -----------------------------------------------------------------

    def shutdown(self, code: int, reason: str, *, now: float) -> int:
        """The single exit point: persist sessions, flush pages, unlock."""
        self.shutdown_calls += 1
        if self.exit_code is not None:
            return self.exit_code       # idempotent: first reason wins
        self.exit_code = code
        try:
            self.vault.write_session_data(self.engine.encode_state())
            self.vault.persist_on_shutdown()
        except PadlinkError as exc:
            self._emit("error", error="shutdown", text=str(exc))
            self.exit_code = code or 1
        self._emit("status", text=f"shutdown: {reason}", code=self.exit_code)
        return self.exit_code

    @property
    def finished(self) -> bool:
        return self.exit_code is not None


def _describe(e: dict) -> str:
    kind = e["kind"]
    if kind == "turn":
        return (f"pad {e['pad']}: {e['direction']} page turned to "
                f"{e['page']} ({e['how']})")
    if kind == "turn-requested":
        return f"pad {e['pad']}: page turn requested"
    if kind == "turn-announced":
        return f"pad {e['pad']}: page turn announced"
    if kind == "resync":
        return f"pad {e['pad']}: receive offset resynchronized to {e['offset']}"
    return kind


def _split_text(text: str, limit: int) -> list[str]:
    encoded = text.encode()
    if not encoded:
        return [""]
    return [encoded[i:i + limit].decode(errors="replace")
            for i in range(0, len(encoded), limit)]


def _collision_free(directory: Path, name: str) -> Path:
    """`name`, or `name.1`, `name.2`, ... — whichever doesn't exist yet."""
    candidate = directory / name
    suffix = 0
    while candidate.exists():
        suffix += 1
        candidate = directory / f"{name}.{suffix}"
    return candidate


def _as_addr(peer) -> object:
    if isinstance(peer, list) and len(peer) == 2:
        return (str(peer[0]), int(peer[1]))
    if isinstance(peer, tuple):
        return peer
    return peer


# --- crash recovery ------------------------------------------------------------------


def recover_vault(root, *, pad: Optional[int] = None,
                  tx_page: Optional[int] = None,
                  rx_page: Optional[int] = None,
                  rng=None) -> list[str]:
    """Bring a vault back after a crash left `vault.locked` behind.

    The procedure the daemon's refusal message points at: remove the stale
    sentinel, then turn BOTH cursors of the affected pads to fresh pages —
    whatever a half-sent packet or a lost acknowledgement did to the offsets
    dies with the abandoned pages.  The peer must mirror the turn (its
    transmit page = our receive page and vice versa); each returned line
    spells out the numbers to give the other operator.

    Explicit page numbers (`tx_page`/`rx_page`) are for the *second* end,
    whose fresh pages must match what the first end already picked; they
    require naming a single pad.  The interrupted session record is dropped
    entirely — retransmitting a packet whose key bytes were just destroyed
    would only block the session — so addresses are re-learned on the next
    probe (clients bootstrap from ServerAddr).

    Returns human-readable report lines; raises VaultError subclasses on a
    vault that cannot be recovered this way.
    """
    root = Path(root)
    if (tx_page is not None or rx_page is not None) and pad is None:
        raise VaultError("explicit page numbers require naming one pad")

    lines: list[str] = []
    lock = root / "vault.locked"
    if lock.exists():
        lock.unlink()
        lines.append("removed stale lock sentinel")
    else:
        lines.append("no lock sentinel present (recovering anyway)")

    vault = Vault.open(root, rng=rng)
    vault.acquire_lock()
    try:
        if pad is not None:
            if pad not in vault.pads:
                raise VaultError(f"no pad {pad} in {root}")
            targets = [pad]
        else:
            targets = sorted(vault.pads)
        for p in targets:
            m = vault.pads[p]
            if m.rx_pg >= m.pages and p != pad:
                lines.append(f"pad {p:05d}: reserve, untouched")
                continue
            new_tx = tx_page if tx_page is not None else \
                vault.next_page_number(p)
            new_rx = rx_page if rx_page is not None else \
                vault.next_page_number(p, new_tx)
            # Lower page first: on the mirrored end the receive page is
            # numbered below the transmit page, and turning the higher one
            # first would trip the never-reuse high-water check.
            try:
                for direction, page in sorted((("tx", new_tx),
                                               ("rx", new_rx)),
                                              key=lambda t: t[1]):
                    vault.turn_page(p, direction, page)
            except (PageAlreadyUsed, PageCollision) as exc:
                if tx_page is None and rx_page is None:
                    raise
                raise VaultError(
                    f"{exc} — this end is further along than those page "
                    f"numbers; run `recover` here WITHOUT --tx-page/"
                    f"--rx-page and give its printed instruction to the "
                    f"peer instead") from exc
            m = vault.pads[p]
            if m.tx_pg >= m.pages and m.rx_pg >= m.pages:
                lines.append(f"pad {p:05d}: out of pages, now exhausted")
                continue
            lines.append(
                f"pad {p:05d}: transmitting on page {new_tx}, receiving on "
                f"page {new_rx} — the peer must recover with "
                f"--pad {p} --tx-page {new_rx} --rx-page {new_tx}")
        if vault.session_path.exists():
            vault.session_path.unlink()
            lines.append("dropped the interrupted session record")
        vault.persist_on_shutdown()
    except BaseException:
        if vault.locked:
            vault.release_lock()
        raise
    return lines


# --- real-socket run loop -------------------------------------------------------------


def run_real(daemon: Daemon, *, port: Optional[int] = None,
             control_port: Optional[int] = None,
             stdin=None, max_seconds: Optional[float] = None) -> int:
    """Drive a Daemon with real sockets until it shuts down.

    One thread, one ``select`` loop: the UDP socket, an optional loopback
    control listener, optional interactive input, and the retry timers.
    Returns the daemon's exit code.
    """
    import selectors
    import socket as socket_mod

    from .transport import UdpTransport

    sel = selectors.DefaultSelector()
    bind_port = port if port is not None else daemon.config.listen_port
    udp = UdpTransport(("0.0.0.0", bind_port))
    sel.register(udp.sock, selectors.EVENT_READ, "udp")

    control = None
    control_conns: dict = {}
    if control_port is not None:
        control = socket_mod.socket(socket_mod.AF_INET,
                                    socket_mod.SOCK_STREAM)
        control.setsockopt(socket_mod.SOL_SOCKET,
                           socket_mod.SO_REUSEADDR, 1)
        control.bind(("127.0.0.1", control_port))
        control.listen(8)
        control.setblocking(False)
        sel.register(control, selectors.EVENT_READ, "control-accept")

    if stdin is not None:
        sel.register(stdin, selectors.EVENT_READ, "stdin")

    def flush_outbox():
        for addr, data in daemon.drain_outbox():
            if isinstance(addr, tuple):
                udp.send(addr, data)

    start = time.monotonic()
    try:
        while not daemon.finished:
            now = time.monotonic()
            if max_seconds is not None and now - start > max_seconds:
                daemon.shutdown(0, "time limit", now=now)
                break
            deadline = daemon.next_deadline()
            timeout = max(0.0, min(deadline - now, 0.5)) \
                if deadline is not None else 0.5
            events = sel.select(timeout)
            now = time.monotonic()
            for key, _mask in events:
                tag = key.data
                if tag == "udp":
                    for data, src in udp.poll():
                        daemon.on_datagram(data, src, now=now)
                elif tag == "control-accept":
                    conn, _ = control.accept()
                    conn.setblocking(False)
                    control_conns[conn] = b""
                    sel.register(conn, selectors.EVENT_READ, "control-data")
                    daemon.add_sink(_control_sink(conn, sel, control_conns))
                elif tag == "control-data":
                    conn = key.fileobj
                    try:
                        chunk = conn.recv(65536)
                    except OSError:
                        chunk = b""
                    if not chunk:
                        sel.unregister(conn)
                        conn.close()
                        control_conns.pop(conn, None)
                        continue
                    control_conns[conn] += chunk
                    while b"\n" in control_conns[conn]:
                        line, _, rest = control_conns[conn].partition(b"\n")
                        control_conns[conn] = rest
                        if line.strip():
                            daemon.handle_control_line(line, now=now)
                elif tag == "stdin":
                    line = key.fileobj.readline()
                    if not line:
                        daemon.shutdown(0, "end of input", now=now)
                        break
                    daemon.handle_line(line.rstrip("\n"), now=now)
            now = time.monotonic()
            deadline = daemon.next_deadline()
            if deadline is not None and deadline <= now:
                daemon.on_timer(now=now)
            flush_outbox()
    except CrashInjected:
        # the deliberate segfault stand-in: no persistence, lock left behind
        raise
    finally:
        for conn in list(control_conns):
            try:
                conn.close()
            except OSError:
                pass
        if control is not None:
            control.close()
        udp.close()
        sel.close()
    return daemon.exit_code if daemon.exit_code is not None else 0


def _control_sink(conn, sel, conns):
    def sink(frame: dict) -> None:
        if conn not in conns:
            return
        try:
            conn.sendall(json.dumps(frame).encode() + b"\n")
        except OSError:
            try:
                sel.unregister(conn)
            except (KeyError, ValueError):
                pass
            conns.pop(conn, None)
            try:
                conn.close()
            except OSError:
                pass
    return sink
