"""Adversarial traffic lab: the pad-search exhaustion attack, on the bench.

A receiver that answers every datagram with a full key search is cheap to
hurt: a hostile 16-byte datagram (the smallest that clears the runt check)
forces one authenticator evaluation at the receive cursor plus a whole
resynchronization sweep — per installed pad — before it can be dismissed.
The arithmetic is brutal for the defender: 16 bytes of attacker bandwidth
buy `pads × 1,501` digest evaluations of victim CPU, and nothing about the
datagram's content changes that (all-zeros costs exactly the same as
random bytes, since the search runs to exhaustion either way).

This module stages that attack inside the deterministic simulator:

* ``JamProfile`` describes the injector (datagram length, cadence, content).
* ``JamSource`` is a sim node that fires datagrams on that cadence and
  speaks no protocol at all.
* ``run_jam_experiment`` wires victim + sender + jammer into a ``SimWorld``,
  meters the victim with a ``NodeCpu`` budget, optionally drives a bulk
  transfer through the jam, and returns a ``JamReport``.
* ``sweep`` repeats the experiment across injection frequencies and
  ``format_table`` renders the classic collapse table.

CPU here is a modeled budget of digest evaluations per virtual second, so
every number in a report is a pure function of the seeds.  Absolute
percentages from any particular piece of hardware are out of scope; the
*shape* — goodput collapsing while the protocol stays correct — is the
reproducible claim.
"""

from __future__ import annotations

import math
import random
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

from .codec import PacketType
from .session import CONNECTED, ProtocolEngine, chunk_sizes
from .transport import EngineNode, LinkModel, NodeCpu, SimWorld
from .vault import PadPlan, Vault, install_pair

__all__ = [
    "JamProfile", "JamReport", "JamSource", "VictimConfig",
    "run_jam_experiment", "sweep", "format_table", "table_rows",
]

_CHUNK = 1_415          # largest payload once the type byte is counted
_T_LIMIT = 3_600.0      # virtual seconds before declaring non-convergence


# --- the injector -----------------------------------------------------------

@dataclass(frozen=True)
class JamProfile:
    """What the injector sends and how often.

    packet_len:    datagram size in bytes (≥ 1; 16 is the sweet spot,
                   anything smaller is discarded for free)
    frequency_hz:  injections per virtual second; 0 disables the jammer
    duration_s:    injection window measured from t = 0
    content:       "random" (seeded) or "zeros" — measurements must not
                   depend on which
    seed:          stream seed for random content
    """

    packet_len: int
    frequency_hz: float
    duration_s: float
    content: str = "random"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.packet_len < 1:
            raise ValueError("packet_len must be at least 1 byte")
        if self.frequency_hz < 0:
            raise ValueError("frequency_hz must be non-negative")
        if self.duration_s < 0:
            raise ValueError("duration_s must be non-negative")
        if self.content not in ("random", "zeros"):
            raise ValueError(f"content must be random or zeros, "
                             f"got {self.content!r}")

    @property
    def bit_rate(self) -> float:
        """Offered hostile load in bits per virtual second."""
        return self.packet_len * 8 * self.frequency_hz


class JamSource:
    """Sim node that fires one datagram every 1/frequency seconds.

    It never reads replies (there are none — the victim answers garbage
    with silence) and never retransmits; it is pure offered load.
    """

    def __init__(self, target: str, profile: JamProfile) -> None:
        self.target = target
        self.profile = profile
        self.sent = 0
        self._rng = random.Random(profile.seed)
        self._outbox: list[tuple[str, bytes]] = []

    def _payload(self) -> bytes:
        if self.profile.content == "zeros":
            return bytes(self.profile.packet_len)
        return self._rng.randbytes(self.profile.packet_len)

    def next_deadline(self) -> Optional[float]:
        if self.profile.frequency_hz <= 0:
            return None
        t = self.sent / self.profile.frequency_hz
        return t if t < self.profile.duration_s else None

    def on_timer(self, now: float) -> None:
        while True:
            due = self.next_deadline()
            if due is None or due > now:
                return
            self._outbox.append((self.target, self._payload()))
            self.sent += 1

    def on_datagram(self, src: str, data: bytes, now: float) -> int:
        return 0

    def drain_outbox(self) -> list[tuple[str, bytes]]:
        out, self._outbox = self._outbox, []
        return out


# --- the victim and the measurement ------------------------------------------

@dataclass(frozen=True)
class VictimConfig:
    """Shape of the endpoint under attack.

    pads:           installed pads holding receive material (each one is
                    searched per hostile datagram); pad 1 carries the
                    transfer, the rest sit idle
    kb_per_page:    page size — large enough that a transfer never turns
                    a page mid-experiment, keeping the work metric clean
    pages:          pages per pad
    queue_limit:    inbound datagrams the victim can hold while busy;
                    beyond this they are shed at the door
    transfer_bytes: legitimate bulk payload pushed through the jam
                    (0 = no transfer, measure pure jam absorption)
    seed:           master seed for key material and the world schedule
    """

    pads: int = 2
    kb_per_page: int = 256
    pages: int = 4
    queue_limit: int = 64
    transfer_bytes: int = 100_000
    seed: int = 7

    def __post_init__(self) -> None:
        if self.pads < 1:
            raise ValueError("the victim needs at least one pad")
        if self.transfer_bytes < 0:
            raise ValueError("transfer_bytes must be non-negative")


@dataclass(frozen=True)
class JamReport:
    """Everything measured in one run.  Durations and rates are virtual.

    transfer_time_s/goodput_kbit are None when no transfer was configured.
    evals_per_jam_packet is None when the jammer never fired (baseline).
    """

    frequency_hz: float
    jam_bit_rate: float                    # bits/s offered by the jammer
    victim_evals_per_s: float              # digest evaluations per second
    cpu_utilization: float                 # fraction of the modeled budget
    goodput_kbit: Optional[float]          # delivered payload, kbit/s
    transfer_time_s: Optional[float]
    transfer_bytes: int
    delivered_bytes: int
    delivered_packets: int
    dropped: int                           # shed at the victim's full queue
    jam_packets_sent: int
    jam_packets_processed: int
    evals_per_jam_packet: Optional[float]  # measured mean over the run


class _TalliedNode:
    """EngineNode wrapper that books evaluations per traffic source."""

    def __init__(self, inner: EngineNode) -> None:
        self.inner = inner
        self.evals_by_src: Counter[str] = Counter()
        self.packets_by_src: Counter[str] = Counter()

    def on_datagram(self, src: str, data: bytes, now: float) -> int:
        evals = self.inner.on_datagram(src, data, now) or 0
        self.evals_by_src[src] += evals
        self.packets_by_src[src] += 1
        return evals

    def on_timer(self, now: float) -> None:
        self.inner.on_timer(now)

    def next_deadline(self) -> Optional[float]:
        return self.inner.next_deadline()

    def drain_outbox(self) -> list[tuple[str, bytes]]:
        return self.inner.drain_outbox()


def _build_vaults(root: Path, cfg: VictimConfig) -> tuple[Vault, Vault]:
    """Victim + sender vaults sharing pad 1; extra victim pads face ghosts.

    The ghost ends exist only so the extra pads have somewhere to have come
    from; nothing ever opens them.
    """
    rng = random.Random(cfg.seed)
    page = cfg.kb_per_page * 1024
    need = cfg.pads * page * cfg.pages * 2 + 64
    source = root / "entropy.bin"
    source.write_bytes(rng.randbytes(need))

    victim_dir, sender_dir = root / "victim", root / "sender"
    off = install_pair(source, [PadPlan(1, cfg.kb_per_page, cfg.pages)],
                       sender_dir, victim_dir, rng=rng)
    for extra in range(2, cfg.pads + 1):
        off = install_pair(source, [PadPlan(extra, cfg.kb_per_page, cfg.pages)],
                           victim_dir, root / f"ghost{extra}",
                           rng=rng, append=True, source_offset=off)
    victim = Vault.open(victim_dir, rng=random.Random(cfg.seed + 1),
                        tag="victim")
    sender = Vault.open(sender_dir, rng=random.Random(cfg.seed + 2),
                        tag="sender")
    victim.acquire_lock()
    sender.acquire_lock()
    return victim, sender


def _drive(world: SimWorld, done, limit: float) -> None:
    """Step the world until ``done()`` or nothing is scheduled any more."""
    while not done():
        if world.clock.now() > limit:
            raise RuntimeError(
                "experiment passed the virtual time limit without finishing "
                "— the victim never got a word in")
        if not world.step():
            return


def run_jam_experiment(link: LinkModel, victim_config: VictimConfig,
                       profile: JamProfile, cpu_budget: float) -> JamReport:
    """One deterministic run: jam the victim, push the transfer, measure.

    ``link`` models both directions between sender and victim; the jammer
    reaches the victim over a clean zero-latency path (a flood that loses
    itself in transit would flatter the defender).  The victim's CPU is a
    ``cpu_budget``-evaluations-per-second meter with a bounded inbox; the
    sender and jammer are unmetered.  Returns the report; the victim's
    correctness (exact delivery, untouched cursors on hostile traffic) is
    the caller's to assert from the report fields.
    """
    with tempfile.TemporaryDirectory(prefix="jamlab-") as tmp:
        victim_vault, sender_vault = _build_vaults(Path(tmp), victim_config)
        try:
            victim_eng = ProtocolEngine(victim_vault)
            sender_eng = ProtocolEngine(sender_vault)

            world = SimWorld(seed=victim_config.seed)
            cpu = NodeCpu(cpu_budget, victim_config.queue_limit)
            victim_node = _TalliedNode(EngineNode(victim_eng))
            jammer = JamSource("victim", profile)
            world.add_node("victim", victim_node, cpu)
            world.add_node("sender", EngineNode(sender_eng))
            world.add_node("jammer", jammer)
            world.net.connect("sender", "victim", link)
            world.net.set_link("jammer", "victim", LinkModel())

            delivered_bytes = delivered_packets = 0
            transfer_time: Optional[float] = None
            if victim_config.transfer_bytes > 0:
                sess = sender_eng.session(1)
                sender_eng.connect(1, "victim", now=0.0)
                # Settled means the round-trip notice is acknowledged too,
                # not merely that the probe came back.
                _drive(world, lambda: (sess.phase == CONNECTED
                                       and sess.pending is None
                                       and not sess.queue), _T_LIMIT)
                t0 = world.clock.now()
                evals0 = cpu.evals_total
                chunks = [(PacketType.GIBBERISH, bytes(n))
                          for n in chunk_sizes(victim_config.transfer_bytes,
                                               _CHUNK)]
                sender_eng.send_bulk(1, chunks, now=t0)
                _drive(world,
                       lambda: not sess.queue and sess.pending is None,
                       _T_LIMIT)
                t1 = world.clock.now()
                if sess.queue or sess.pending is not None:
                    raise RuntimeError("world went idle mid-transfer")
                transfer_time = t1 - t0
                window = (t0, max(t1, t0 + 1e-9), evals0)
                for ev in victim_eng.drain_events():
                    if (ev["kind"] == "deliver"
                            and ev["ptype"] == PacketType.GIBBERISH):
                        delivered_bytes += len(ev["payload"])
                        delivered_packets += 1
            else:
                _drive(world, lambda: False, _T_LIMIT)
                end = max(world.clock.now(), cpu.free_at, 1e-9)
                window = (0.0, end, 0)

            w_start, w_end, w_evals0 = window
            span = w_end - w_start
            evals = cpu.evals_total - w_evals0
            jam_done = victim_node.packets_by_src.get("jammer", 0)
            jam_evals = victim_node.evals_by_src.get("jammer", 0)
            goodput = None
            if transfer_time is not None:
                goodput = delivered_bytes * 8 / max(transfer_time, 1e-9) / 1e3
            return JamReport(
                frequency_hz=profile.frequency_hz,
                jam_bit_rate=profile.bit_rate,
                victim_evals_per_s=evals / span,
                cpu_utilization=evals / (cpu_budget * span),
                goodput_kbit=goodput,
                transfer_time_s=transfer_time,
                transfer_bytes=victim_config.transfer_bytes,
                delivered_bytes=delivered_bytes,
                delivered_packets=delivered_packets,
                dropped=cpu.dropped,
                jam_packets_sent=jammer.sent,
                jam_packets_processed=jam_done,
                evals_per_jam_packet=(jam_evals / jam_done
                                      if jam_done else None),
            )
        finally:
            victim_vault.release_lock()
            sender_vault.release_lock()


# --- the frequency sweep -----------------------------------------------------

def sweep(frequencies: Sequence[float], *,
          link: Optional[LinkModel] = None,
          victim: Optional[VictimConfig] = None,
          cpu_budget: float = 5_000.0,
          packet_len: int = 16,
          content: str = "random",
          duration_s: Optional[float] = None,
          seed: int = 0) -> list[JamReport]:
    """Run the experiment once per injection frequency.

    Defaults model a 40 ms round trip and a deliberately small CPU budget so
    the collapse happens at desk-scale frequencies.  When a transfer is
    configured the jammer runs for as long as the transfer needs (the run
    ends when the last acknowledgement lands); a pure-absorption sweep
    (transfer_bytes = 0) defaults to a ten-second injection window instead,
    since only the end of the jam ends the run.  ``duration_s`` overrides
    either default.
    """
    link = link if link is not None else LinkModel(latency=0.020)
    victim = victim if victim is not None else VictimConfig()
    if duration_s is None:
        duration_s = _T_LIMIT if victim.transfer_bytes else 10.0
    out = []
    for f in frequencies:
        profile = JamProfile(packet_len=packet_len, frequency_hz=f,
                             duration_s=duration_s, content=content,
                             seed=seed)
        out.append(run_jam_experiment(link, victim, profile, cpu_budget))
    return out


def table_rows(reports: Sequence[JamReport]) -> list[dict]:
    """Machine-readable sweep rows (plain dicts, JSON-friendly)."""
    return [asdict(r) for r in reports]


def _fmt(x: Optional[float], spec: str, none: str = "—") -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return none
    return format(x, spec)


def format_table(reports: Sequence[JamReport]) -> str:
    """Aligned text table, one sweep row per report."""
    headers = ["freq (Hz)", "jam rate (kbit/s)", "CPU use", "tx time (s)",
               "goodput (kbit/s)", "shed", "evals/jam pkt"]
    rows = []
    for r in reports:
        rows.append([
            "none" if r.frequency_hz == 0 else _fmt(r.frequency_hz, ".3g"),
            _fmt(r.jam_bit_rate / 1e3, ".3f"),
            _fmt(r.cpu_utilization * 100, ".1f") + "%",
            _fmt(r.transfer_time_s, ".2f"),
            _fmt(r.goodput_kbit, ".1f"),
            str(r.dropped),
            _fmt(r.evals_per_jam_packet, ".1f"),
        ])
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    out = ["  ".join(h.rjust(w) for h, w in zip(headers, widths))]
    for row in rows:
        out.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
    return "\n".join(out)
