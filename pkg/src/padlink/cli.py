"""Command-line front door.

Everything operable from a shell lives here: running the daemon against
real sockets, installing key material at endpoint pairs, the tracer
verification tool, crash recovery, the adversarial-traffic sweep, and a
self-contained demonstration that runs the whole star-to-mesh story on the
in-process simulator.

Exit codes follow the daemon's contract everywhere: 0 clean, 2 when the
vault is locked, 3 for configuration trouble (including bad command
lines), 1 for anything else that failed.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
import tempfile
from pathlib import Path

from .app import Daemon, recover_vault, run_real
from .codec import PacketType
from .config import parse_config
from .errors import ConfigError, PadlinkError, VaultLocked
from .hub import (
    IncomingPadAssembler,
    client_registry,
    decode_file_begin,
    pages_available,
    pair_count,
    start_distribution,
)
from .jamlab import VictimConfig, format_table, sweep, table_rows
from .session import ProtocolEngine
from .transport import LinkModel
from .vault import (
    PadPlan,
    Vault,
    install_pair,
    install_reserve,
    verify_tracer,
    write_tracer,
)
from .wsbridge import ControlBridge

EXIT_CLEAN = 0
EXIT_FAILURE = 1
EXIT_LOCKED = 2
EXIT_CONFIG = 3


class _Parser(argparse.ArgumentParser):
    """argparse, but bad usage exits with the config-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# --- subcommand bodies -------------------------------------------------------

def _cmd_run(args) -> int:
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {args.config}: {exc}") from exc
    config = parse_config(text)
    daemon = Daemon(config)
    daemon.add_sink(_stderr_sink)
    stdin = None if args.no_stdin else sys.stdin
    return run_real(daemon, port=args.port,
                    control_port=args.control_port,
                    stdin=stdin, max_seconds=args.max_seconds)


def _stderr_sink(frame: dict) -> None:
    kind = frame.get("event")
    if kind in ("chat-in", "chat-echo"):
        prefix = "peer" if kind == "chat-in" else "sent"
        print(f"[{prefix} {frame.get('session')}] {frame.get('text')}",
              file=sys.stderr)
    elif kind in ("status", "error"):
        print(f"[{kind}] {frame.get('text')}", file=sys.stderr)


def _cmd_bridge(args) -> int:
    bridge = ControlBridge(control_port=args.control_port,
                           listen_port=args.listen)
    print(f"bridging ws://127.0.0.1:{bridge.port}/ to the control API on "
          f"port {args.control_port}", flush=True)
    bridge.serve(max_seconds=args.max_seconds)
    return EXIT_CLEAN


def _cmd_install(args) -> int:
    plan = [PadPlan(args.pad, args.kb_per_page, args.pages)]
    end = install_pair(args.source, plan, args.dest_a, args.dest_b,
                       append=args.append, source_offset=args.source_offset)
    print(f"installed pad {args.pad:05d}: {args.kb_per_page} KiB/page x "
          f"{args.pages} pages at {args.dest_a} (role a) and "
          f"{args.dest_b} (role b)")
    print(f"source consumed through byte {end} "
          f"(pass --source-offset {end} to continue from it)")
    return EXIT_CLEAN


def _cmd_install_reserve(args) -> int:
    end = install_reserve(args.source, args.dest, pad_id=args.pad,
                          kb_per_page=args.kb_per_page, pages=args.pages,
                          source_offset=args.source_offset)
    print(f"installed reserve pad {args.pad:05d}: {args.kb_per_page} "
          f"KiB/page x {args.pages} pages at {args.dest}")
    print(f"source consumed through byte {end}")
    return EXIT_CLEAN


def _cmd_tracer_write(args) -> int:
    write_tracer(args.path, args.n_bytes)
    print(f"wrote {args.n_bytes}-byte tracer stream to {args.path}")
    return EXIT_CLEAN


def _cmd_tracer_verify(args) -> int:
    findings = verify_tracer(args.vault)
    if not findings:
        print("tracer layout verified: every byte where it belongs")
        return EXIT_CLEAN
    for f in findings:
        print(str(f))
    print(f"{len(findings)} finding(s)")
    return EXIT_FAILURE


def _cmd_recover(args) -> int:
    for line in recover_vault(args.vault, pad=args.pad,
                              tx_page=args.tx_page, rx_page=args.rx_page):
        print(line)
    return EXIT_CLEAN


def _cmd_show(args) -> int:
    vault = Vault.open(args.vault)
    rows = vault.report_rows()
    header = (f"{'pad':>5} {'kb/pg':>6} {'pages':>5} "
              f"{'tx pg':>6} {'tx off':>9} {'rx pg':>6} {'rx off':>9} "
              f"{'tx left':>12} {'rx left':>12}  note")
    print(header)
    for m in rows:
        note = "reserve" if m.rx_pg >= m.pages else ""
        if m.tx_pg >= m.pages and m.rx_pg >= m.pages:
            note = "exhausted"
        print(f"{m.pad_id:>5} {m.kb_per_page:>6} {m.pages:>5} "
              f"{m.tx_pg:>6} {m.tx_off:>9} {m.rx_pg:>6} {m.rx_off:>9} "
              f"{vault.remaining(m.pad_id, 'tx'):>12} "
              f"{vault.remaining(m.pad_id, 'rx'):>12}  {note}")
    # the sentinel on disk is what matters here, not whether *we* hold it
    locked = "locked" if vault.lock_path.exists() else "unlocked"
    print(f"{len(rows)} pad(s); vault is {locked}")
    return EXIT_CLEAN


def _cmd_jam(args) -> int:
    frequencies = [float(f) for f in args.frequencies.split(",") if f != ""]
    victim = VictimConfig(pads=args.pads,
                          transfer_bytes=args.transfer_bytes,
                          seed=args.seed)
    link = LinkModel(latency=args.rtt_ms / 2_000.0)
    reports = sweep(frequencies, link=link, victim=victim,
                    cpu_budget=args.cpu_budget, packet_len=args.packet_len,
                    seed=args.seed)
    if args.json:
        print(json.dumps(table_rows(reports), indent=2))
    else:
        print(format_table(reports))
    return EXIT_CLEAN


def _cmd_pairs(args) -> int:
    n = args.users
    print(f"{n} users -> {pair_count(n):,} pads "
          f"(every user pair plus a hub link per user)")
    return EXIT_CLEAN


def _cmd_demo(args) -> int:
    """Hub + two clients on the simulator: distribute a pad, then go direct."""
    rng = random.Random(args.seed)
    with tempfile.TemporaryDirectory(prefix="padlink-demo-") as tmp:
        root = Path(tmp)
        entropy = root / "entropy.bin"
        entropy.write_bytes(rng.randbytes(1 << 21))
        off = install_pair(entropy, [PadPlan(1, 8, 6)],
                           root / "hub", root / "alpha", rng=rng)
        off = install_pair(entropy, [PadPlan(2, 8, 6)],
                           root / "hub", root / "bravo", rng=rng,
                           append=True, source_offset=off)
        install_reserve(entropy, root / "hub", pad_id=0, kb_per_page=4,
                        pages=8, rng=rng, source_offset=off)
        vaults = {name: Vault.open(root / name, rng=random.Random(i), tag=name)
                  for i, name in enumerate(("hub", "alpha", "bravo"))}
        for v in vaults.values():
            v.acquire_lock()
        engines = {name: ProtocolEngine(v) for name, v in vaults.items()}
        now = 0.0

        def pump(now: float) -> float:
            """Instant delivery; falls forward to timers when frozen."""
            for _ in range(5_000):
                moved = False
                for name, eng in engines.items():
                    for dst, data in eng.drain_outbox():
                        if dst in engines:
                            engines[dst].on_datagram(data, name, now=now)
                            moved = True
                if moved:
                    continue
                busy = any(s.pending is not None or s.queue
                           for e in engines.values()
                           for s in e.sessions.values())
                if not busy:
                    return now
                deadlines = [d for e in engines.values()
                             if (d := e.next_deadline()) is not None]
                now = min(deadlines)
                for e in engines.values():
                    e.on_timer(now=now)
            raise RuntimeError("demo wire never went quiet")

        print("1. clients probe the hub (the hub never dials out)")
        engines["alpha"].connect(1, "hub", now=now)
        engines["bravo"].connect(2, "hub", now=now)
        now = pump(now)
        print(f"   hub registry: {client_registry(engines['hub'])}")

        print("2. hub carves its reserve into a fresh pad for the pair")
        before = pages_available(vaults["hub"])
        start_distribution(engines["hub"], to_a=1, to_b=2, new_pad=5,
                           kb_per_page=4, n_pages=2, now=now,
                           peer_a="alpha", peer_b="bravo")
        assemblers = {n: IncomingPadAssembler(vaults[n])
                      for n in ("alpha", "bravo")}
        installed: dict[str, dict] = {}
        partial: dict[str, list] = {"alpha": [None, bytearray()],
                                    "bravo": [None, bytearray()]}
        for _ in range(100):
            now = pump(now)
            for name in ("alpha", "bravo"):
                for ev in engines[name].drain_events():
                    if ev["kind"] != "deliver":
                        continue
                    slot = partial[name]
                    if ev["ptype"] == PacketType.FILE_BEGIN:
                        fname, _size = decode_file_begin(ev["payload"])
                        slot[0], slot[1] = fname, bytearray()
                    elif ev["ptype"] == PacketType.FILE_DATA:
                        slot[1] += ev["payload"]
                    elif ev["ptype"] == PacketType.FILE_END:
                        record = assemblers[name].offer(slot[0],
                                                        bytes(slot[1]))
                        if record is not None:
                            installed[name] = record
            if len(installed) == 2:
                break
        else:
            raise RuntimeError("distribution never completed")
        after = pages_available(vaults["hub"])
        print(f"   reserve spent: {before - after} pages of 4 KiB "
              f"({before} were banked, {after} remain)")
        for name, record in sorted(installed.items()):
            print(f"   {name}: pad {record['pad']} installed, "
                  f"role {record['role']}, peer {record['peer']}")

        print("3. the clients leave the hub out of it")
        for name in ("alpha", "bravo"):
            engines[name].adopt_new_pads()
        engines["alpha"].connect(5, "bravo", now=now)
        now = pump(now)
        engines["alpha"].send_chat(5, "meet you off the star", now=now)
        now = pump(now)
        said = [ev["payload"].decode()
                for ev in engines["bravo"].drain_events()
                if ev["kind"] == "deliver"
                and ev["ptype"] == PacketType.CHAT]
        print(f"   bravo heard, directly: {said[0]!r}")
        assert 5 not in engines["hub"].sessions
        print("   hub never carried (or could read) a word of it")
        for v in vaults.values():
            v.release_lock()
    return EXIT_CLEAN


# --- parser assembly ----------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="padlink",
                     description="One-time-pad session encryption over UDP: "
                                 "daemon, vault tooling, and the lab.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="subcommand")

    p = sub.add_parser("run", help="run the daemon for a config file")
    p.add_argument("config", help="path to the configuration file")
    p.add_argument("--port", type=int, default=None,
                   help="override ListenOn from the config")
    p.add_argument("--control-port", type=int, default=None,
                   help="serve the line-JSON control API on this loopback "
                        "TCP port")
    p.add_argument("--max-seconds", type=float, default=None,
                   help="stop after this many seconds (for supervision)")
    p.add_argument("--no-stdin", action="store_true",
                   help="do not read operator commands from standard input")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("bridge",
                       help="WebSocket adapter for the control API "
                            "(loopback only), for browser consoles")
    p.add_argument("--control-port", type=int, required=True,
                   help="the daemon's control API port")
    p.add_argument("--listen", type=int, required=True,
                   help="WebSocket port to serve on 127.0.0.1 (0 picks one)")
    p.add_argument("--max-seconds", type=float, default=None,
                   help="stop after this many seconds (for supervision)")
    p.set_defaults(func=_cmd_bridge)

    p = sub.add_parser("install",
                       help="install one pad at two endpoints from an "
                            "entropy file (destroys the source as it reads)")
    p.add_argument("source")
    p.add_argument("dest_a")
    p.add_argument("dest_b")
    p.add_argument("--pad", type=int, required=True)
    p.add_argument("--kb-per-page", type=int, required=True)
    p.add_argument("--pages", type=int, required=True)
    p.add_argument("--append", action="store_true",
                   help="add to existing vaults instead of requiring empty "
                        "destinations")
    p.add_argument("--source-offset", type=int, default=0)
    p.set_defaults(func=_cmd_install)

    p = sub.add_parser("install-reserve",
                       help="install a hub distribution reserve "
                            "(receive cursor pinned past the end)")
    p.add_argument("source")
    p.add_argument("dest")
    p.add_argument("--pad", type=int, default=0)
    p.add_argument("--kb-per-page", type=int, required=True)
    p.add_argument("--pages", type=int, required=True)
    p.add_argument("--source-offset", type=int, default=0)
    p.set_defaults(func=_cmd_install_reserve)

    p = sub.add_parser("tracer", help="offset-labeled entropy stand-in for "
                                      "verifying installation")
    tsub = p.add_subparsers(dest="tracer_command", required=True,
                            metavar="write|verify")
    tw = tsub.add_parser("write", help="write a tracer stream")
    tw.add_argument("path")
    tw.add_argument("n_bytes", type=int)
    tw.set_defaults(func=_cmd_tracer_write)
    tv = tsub.add_parser("verify",
                         help="check every page of a tracer-installed vault")
    tv.add_argument("vault")
    tv.set_defaults(func=_cmd_tracer_verify)

    p = sub.add_parser("recover",
                       help="after a crash: drop the stale lock and turn "
                            "both cursors to fresh pages")
    p.add_argument("vault")
    p.add_argument("--pad", type=int, default=None,
                   help="recover only this pad (default: all)")
    p.add_argument("--tx-page", type=int, default=None,
                   help="explicit fresh transmit page (second end only)")
    p.add_argument("--rx-page", type=int, default=None,
                   help="explicit fresh receive page (second end only)")
    p.set_defaults(func=_cmd_recover)

    p = sub.add_parser("show", help="print a vault's pad table")
    p.add_argument("vault")
    p.set_defaults(func=_cmd_show)

    p = sub.add_parser("jam",
                       help="sweep hostile-datagram injection frequencies "
                            "against a budgeted receiver (simulated)")
    p.add_argument("--frequencies", default="0,1,6",
                   help="comma-separated injection rates in Hz")
    p.add_argument("--packet-len", type=int, default=16)
    p.add_argument("--cpu-budget", type=float, default=5_000.0,
                   help="victim budget in digest evaluations per virtual "
                        "second")
    p.add_argument("--transfer-bytes", type=int, default=14_150)
    p.add_argument("--pads", type=int, default=2)
    p.add_argument("--rtt-ms", type=float, default=40.0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--json", action="store_true",
                   help="machine-readable rows instead of the text table")
    p.set_defaults(func=_cmd_jam)

    p = sub.add_parser("pairs",
                       help="pads needed for full-mesh secure reach among "
                            "N users (hub included)")
    p.add_argument("users", type=int)
    p.set_defaults(func=_cmd_pairs)

    p = sub.add_parser("demo",
                       help="scripted star-to-mesh distribution on the "
                            "in-process simulator")
    p.add_argument("--seed", type=int, default=11)
    p.set_defaults(func=_cmd_demo)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VaultLocked as exc:
        print(f"sorry, cannot run: {exc}", file=sys.stderr)
        print("a `vault.locked` sentinel is present — either another "
              "instance owns this vault or the last one died with it; "
              "`padlink recover` documents the way back", file=sys.stderr)
        return EXIT_LOCKED
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PadlinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
