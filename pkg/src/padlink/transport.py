"""Datagram plumbing: real UDP sockets and a deterministic in-process network.

Two back ends share one mental model — fire a datagram at an endpoint, get
datagrams back — but they serve different masters:

* ``UdpTransport`` wraps a non-blocking IPv4 socket multiplexed by readiness
  (``selectors``), for running against a real network.

* ``SimNetwork`` / ``SimWorld`` run any number of nodes against a virtual
  clock with per-link latency, jitter, loss, reordering and a bandwidth cap.
  Every run is a pure function of (seed, link models, offered traffic): the
  RNG streams are derived per directed link, so adding a link never perturbs
  the delivery schedule of another.

The simulator also carries a small CPU model (``NodeCpu``): datagram handling
is metered in authenticator evaluations, a node has a budget of evaluations
per second and a bounded input queue, and replies leave the node only when the
work that produced them completes.  That is enough to reproduce resource-
exhaustion behaviour (hostile traffic forcing worst-case key searches) without
ever touching a wall clock.

Event ordering at equal virtual times is fixed so ties cannot wander between
runs: deliveries first (in send order), then queued CPU work, then timers, and
nodes always in sorted-name order.
"""

from __future__ import annotations

import heapq
import itertools
import random
import selectors
import socket
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol

from .codec import MAX_DATAGRAM
from .errors import OversizeDatagram, SocketFailure

__all__ = [
    "VirtualClock", "WallClock", "LinkModel", "Delivery", "SimNetwork",
    "NodeCpu", "SimNode", "SimWorld", "EngineNode", "UdpTransport",
    "MAX_DATAGRAM",
]


# --- clocks ---------------------------------------------------------------

class VirtualClock:
    """Monotonic clock whose time passes only when told to."""

    __slots__ = ("_now",)

    def __init__(self, start: float = 0.0) -> None:
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError("time does not run backwards")
        self._now += dt
        return self._now

    def advance_to(self, t: float) -> float:
        if t < self._now:
            raise ValueError("time does not run backwards")
        self._now = t
        return self._now


class WallClock:
    """Real time, same face as VirtualClock (advance is a no-op wait)."""

    __slots__ = ()

    def now(self) -> float:
        return time.monotonic()

    def advance(self, dt: float) -> float:
        if dt > 0:
            time.sleep(dt)
        return self.now()


# --- the simulated network -----------------------------------------------

@dataclass(frozen=True)
class LinkModel:
    """One direction of a link.  Times in seconds, bandwidth in bits/s.

    latency:       fixed one-way delay
    jitter:        extra delay drawn uniformly from [0, jitter]
    drop:          probability a datagram vanishes
    reorder:       probability a datagram is held back long enough that a
                   later one can overtake it
    bandwidth_bps: serialization cap; 0 means uncapped.  Datagrams queue
                   behind each other at the sender, like a real uplink.
    """

    latency: float = 0.0
    jitter: float = 0.0
    drop: float = 0.0
    reorder: float = 0.0
    bandwidth_bps: int = 0

    def __post_init__(self) -> None:
        if self.latency < 0 or self.jitter < 0:
            raise ValueError("negative delay")
        if not (0.0 <= self.drop <= 1.0 and 0.0 <= self.reorder <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.bandwidth_bps < 0:
            raise ValueError("negative bandwidth")


@dataclass(frozen=True)
class Delivery:
    """One line of the network log (kept for every datagram offered)."""

    sent_at: float
    arrives_at: float | None    # None = dropped in flight
    src: str
    dst: str
    size: int


class SimNetwork:
    """Scheduled datagram delivery between named nodes.

    The network never duplicates: each accepted datagram is delivered at most
    once (exactly once unless the link model dropped it).
    """

    def __init__(self, seed: int = 0) -> None:
        self._seed = seed
        self._links: dict[tuple[str, str], LinkModel] = {}
        self._rngs: dict[tuple[str, str], random.Random] = {}
        self._busy_until: dict[tuple[str, str], float] = {}
        self._heap: list[tuple[float, int, str, str, bytes]] = []
        self._seq = itertools.count()
        self.log: list[Delivery] = []

    # -- wiring --

    def set_link(self, src: str, dst: str, model: LinkModel) -> None:
        """Install (or replace) the model for the src→dst direction."""
        key = (src, dst)
        self._links[key] = model
        # Stream is a function of (seed, endpoints) only, so runs are stable
        # no matter in what order links were wired up.
        self._rngs.setdefault(
            key, random.Random(f"{self._seed}/{src}>{dst}"))
        self._busy_until.setdefault(key, 0.0)

    def connect(self, a: str, b: str, model: LinkModel,
                model_ba: LinkModel | None = None) -> None:
        """Wire both directions; asymmetric if model_ba given."""
        self.set_link(a, b, model)
        self.set_link(b, a, model_ba if model_ba is not None else model)

    # -- traffic --

    def send(self, src: str, dst: str, payload: bytes, now: float) -> None:
        if len(payload) > MAX_DATAGRAM:
            raise OversizeDatagram(
                f"{len(payload)} bytes > {MAX_DATAGRAM}-byte maximum")
        key = (src, dst)
        model = self._links.get(key)
        if model is None:
            # Unreachable destination: silently gone, but logged.
            self.log.append(Delivery(now, None, src, dst, len(payload)))
            return
        rng = self._rngs[key]
        if rng.random() < model.drop:
            self.log.append(Delivery(now, None, src, dst, len(payload)))
            return
        depart = now
        if model.bandwidth_bps:
            tx_time = len(payload) * 8 / model.bandwidth_bps
            depart = max(now, self._busy_until[key])
            self._busy_until[key] = depart + tx_time
            depart += tx_time
        arrive = depart + model.latency + rng.uniform(0.0, model.jitter)
        if rng.random() < model.reorder:
            # Hold it back far enough that the next datagram can overtake.
            arrive += model.latency + model.jitter + 0.001
        self.log.append(Delivery(now, arrive, src, dst, len(payload)))
        heapq.heappush(self._heap, (arrive, next(self._seq), dst, src, payload))

    # -- schedule inspection --

    def next_arrival(self) -> float | None:
        return self._heap[0][0] if self._heap else None

    def pop_due(self, now: float) -> list[tuple[str, str, bytes]]:
        """All deliveries with arrival ≤ now, in (time, send-order)."""
        out: list[tuple[str, str, bytes]] = []
        while self._heap and self._heap[0][0] <= now:
            _, _, dst, src, payload = heapq.heappop(self._heap)
            out.append((dst, src, payload))
        return out

    def pending(self) -> int:
        return len(self._heap)


# --- nodes and the world loop ---------------------------------------------

class SimNode(Protocol):
    """What SimWorld expects of a node.

    on_datagram returns the number of authenticator evaluations the datagram
    cost (None counts as zero) so the CPU model can charge for it.
    """

    def on_datagram(self, src: str, data: bytes, now: float) -> int | None: ...
    def on_timer(self, now: float) -> None: ...
    def next_deadline(self) -> float | None: ...
    def drain_outbox(self) -> list[tuple[str, bytes]]: ...


class NodeCpu:
    """Finite processing budget: evaluations per second, bounded inbox.

    While the node is busy, arriving datagrams queue; when the queue is full
    they are dropped at the door (counted in ``dropped``).  Work costing zero
    evaluations is free — discarding a runt datagram costs nothing.
    """

    __slots__ = ("budget", "queue_limit", "free_at", "queue",
                 "dropped", "processed", "evals_total")

    def __init__(self, budget_evals_per_s: float, queue_limit: int = 64) -> None:
        if budget_evals_per_s <= 0:
            raise ValueError("budget must be positive")
        if queue_limit < 1:
            raise ValueError("queue_limit must be at least 1")
        self.budget = float(budget_evals_per_s)
        self.queue_limit = queue_limit
        self.free_at = 0.0
        self.queue: deque[tuple[float, str, bytes]] = deque()
        self.dropped = 0
        self.processed = 0
        self.evals_total = 0

    def offer(self, arrival: float, src: str, data: bytes) -> bool:
        if len(self.queue) >= self.queue_limit:
            self.dropped += 1
            return False
        self.queue.append((arrival, src, data))
        return True

    def next_start(self) -> float | None:
        """When the head of the queue can begin processing."""
        if not self.queue:
            return None
        return max(self.queue[0][0], self.free_at)


class SimWorld:
    """Single-threaded event loop tying nodes, clock and network together.

    At one instant the order is: due deliveries (send order), due CPU work,
    due timers — nodes visited in sorted-name order throughout.  Outputs a
    node produced while handling an event enter the network at the instant
    the handling completed (the event time, or CPU completion time when the
    node is metered).
    """

    def __init__(self, seed: int = 0, clock: VirtualClock | None = None) -> None:
        self.clock = clock if clock is not None else VirtualClock()
        self.net = SimNetwork(seed)
        self._nodes: dict[str, SimNode] = {}
        self._cpus: dict[str, NodeCpu] = {}

    # -- assembly --

    def add_node(self, name: str, node: SimNode,
                 cpu: NodeCpu | None = None) -> None:
        if name in self._nodes:
            raise ValueError(f"duplicate node name {name!r}")
        self._nodes[name] = node
        if cpu is not None:
            self._cpus[name] = cpu

    def node_names(self) -> list[str]:
        return sorted(self._nodes)

    # -- plumbing --

    def _flush(self, name: str, at: float) -> None:
        for dst, payload in self._nodes[name].drain_outbox():
            self.net.send(name, dst, payload, at)

    def flush_all(self) -> None:
        """Pick up anything nodes queued outside the loop (setup, operator)."""
        for name in sorted(self._nodes):
            self._flush(name, self.clock.now())

    def _next_event(self) -> float | None:
        candidates: list[float] = []
        t = self.net.next_arrival()
        if t is not None:
            candidates.append(t)
        for name in sorted(self._nodes):
            cpu = self._cpus.get(name)
            if cpu is not None:
                s = cpu.next_start()
                if s is not None:
                    candidates.append(s)
            d = self._nodes[name].next_deadline()
            if d is not None:
                candidates.append(d)
        return min(candidates) if candidates else None

    def _service(self, now: float) -> None:
        # 1. deliveries
        for dst, src, payload in self.net.pop_due(now):
            node = self._nodes.get(dst)
            if node is None:
                continue
            cpu = self._cpus.get(dst)
            if cpu is None:
                node.on_datagram(src, payload, now)
                self._flush(dst, now)
            else:
                cpu.offer(now, src, payload)
        # 2. CPU work that can start now
        for name in sorted(self._cpus):
            cpu = self._cpus[name]
            while True:
                start = cpu.next_start()
                if start is None or start > now:
                    break
                _, src, payload = cpu.queue.popleft()
                evals = self._nodes[name].on_datagram(src, payload, start) or 0
                cpu.processed += 1
                cpu.evals_total += evals
                cpu.free_at = start + evals / cpu.budget
                self._flush(name, cpu.free_at)
        # 3. timers
        for name in sorted(self._nodes):
            node = self._nodes[name]
            d = node.next_deadline()
            if d is not None and d <= now:
                node.on_timer(now)
                self._flush(name, now)

    # -- running --

    def step(self) -> bool:
        """Advance to the next event and service it.  False when idle."""
        self.flush_all()
        t = self._next_event()
        if t is None:
            return False
        self.clock.advance_to(max(t, self.clock.now()))
        self._service(self.clock.now())
        return True

    def run_until(self, t_end: float) -> None:
        self.flush_all()
        while True:
            t = self._next_event()
            if t is None or t > t_end:
                break
            self.clock.advance_to(max(t, self.clock.now()))
            self._service(self.clock.now())
            self.flush_all()
        if t_end > self.clock.now():
            self.clock.advance_to(t_end)

    def run_for(self, dt: float) -> None:
        self.run_until(self.clock.now() + dt)

    def run_idle(self, max_steps: int = 1_000_000) -> None:
        """Run until no node has work queued anywhere."""
        for _ in range(max_steps):
            if not self.step():
                return
        raise RuntimeError("simulation did not go idle")


class EngineNode:
    """Adapt a protocol engine or daemon to the SimNode calling shape.

    The protocol side takes ``on_datagram(data, src, *, now)`` and keyword
    ``now`` everywhere; the world loop calls positionally with source first.
    Everything else passes straight through.
    """

    __slots__ = ("engine",)

    def __init__(self, engine) -> None:
        self.engine = engine

    def on_datagram(self, src: str, data: bytes, now: float) -> int:
        return self.engine.on_datagram(data, src, now=now)

    def on_timer(self, now: float) -> None:
        self.engine.on_timer(now=now)

    def next_deadline(self) -> float | None:
        return self.engine.next_deadline()

    def drain_outbox(self) -> list[tuple[str, bytes]]:
        return self.engine.drain_outbox()


# --- real sockets ----------------------------------------------------------

class UdpTransport:
    """Non-blocking UDP/IPv4, multiplexed by readiness notification.

    The workhorse for live operation: bind once, then interleave sends with
    ``wait(deadline)`` / ``poll()`` from a single event loop.  No napping —
    the loop sleeps exactly until the socket is readable or a protocol timer
    is due, whichever comes first.
    """

    def __init__(self, bind: tuple[str, int] | None = None) -> None:
        try:
            self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            self._sock.setblocking(False)
            if bind is not None:
                self._sock.bind(bind)
        except OSError as exc:
            raise SocketFailure(f"opening UDP socket: {exc}") from exc
        self._sel = selectors.DefaultSelector()
        self._sel.register(self._sock, selectors.EVENT_READ)

    @property
    def sock(self) -> socket.socket:
        """The underlying socket, for registration in an outer event loop."""
        return self._sock

    @property
    def local_address(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def send(self, addr: tuple[str, int], data: bytes) -> None:
        if len(data) > MAX_DATAGRAM:
            raise OversizeDatagram(
                f"{len(data)} bytes > {MAX_DATAGRAM}-byte maximum")
        try:
            self._sock.sendto(data, addr)
        except BlockingIOError:
            # Kernel buffer momentarily full; UDP may shed load.  The
            # protocol's retransmission covers it like any other loss.
            pass
        except OSError as exc:
            raise SocketFailure(f"sendto {addr}: {exc}") from exc

    def wait(self, timeout: float | None) -> bool:
        """Block until readable or timeout (None = forever).  True if readable."""
        if timeout is not None and timeout < 0:
            timeout = 0.0
        return bool(self._sel.select(timeout))

    def poll(self) -> list[tuple[bytes, tuple[str, int]]]:
        """Drain every datagram currently queued on the socket."""
        out: list[tuple[bytes, tuple[str, int]]] = []
        while True:
            try:
                data, addr = self._sock.recvfrom(65535)
            except BlockingIOError:
                return out
            except OSError as exc:
                raise SocketFailure(f"recvfrom: {exc}") from exc
            out.append((data, addr))

    def close(self) -> None:
        try:
            self._sel.unregister(self._sock)
        except (KeyError, ValueError):
            pass
        self._sel.close()
        self._sock.close()
