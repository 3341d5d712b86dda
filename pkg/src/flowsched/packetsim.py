"""Packet-level discrete-event simulator of the same bottleneck.

Sources are AIMD TCP (congestion avoidance only) and CBR UDP.  A TCP source
paces its packets at cwnd/R rather than waiting for acks, with R the
propagation RTT, plus the shared queue's drain time in queue-augmented mode.
Under strict LQF or SQF an ack-clocked window parked in an unserved queue
would never be released again; a paced source keeps growing its queue until
the scheduler turns to it.
The bottleneck keeps one FIFO per flow inside a shared memory of ``B``
packets, evicts from the longest queue when full, and picks the next packet
with FQ (deficit round robin), LQF or SQF.

Loss detection is abstracted: the sender learns about a dropped packet one
propagation RTT after the drop and halves at most once per RTT.
There are no sequence numbers, retransmissions or timeouts.
"""

from __future__ import annotations

import heapq
import json
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import Discipline, RttMode, Scenario, SteadyStateSummary
from .metrics import DEFAULT_WINDOW, WindowedTrace

# event kinds, ordered so that simultaneous events resolve deterministically
_TX_DONE, _DELIVER, _ACK, _LOSS, _UDP, _TCP, _MARK = range(7)


# --- scheduling ------------------------------------------------------------------

class DeficitRoundRobin:
    """DRR over per-flow queues of equal-size packets.

    ``quantum`` is in packets; with a quantum of one packet every backlogged
    flow sends exactly one packet per round.
    """

    def __init__(self, n: int, quantum: float = 1.0):
        self.deficit = [0.0] * n
        self.quantum = quantum
        self.pointer = 0

    def select(self, lengths) -> int:
        n = len(lengths)
        for _ in range(2 * n + 2):
            k = self.pointer
            if lengths[k] > 0:
                if self.deficit[k] < 1.0:
                    self.deficit[k] += self.quantum
                if self.deficit[k] >= 1.0:
                    self.deficit[k] -= 1.0
                    if self.deficit[k] < 1.0:
                        self.pointer = (k + 1) % n
                    return k
            else:
                self.deficit[k] = 0.0
            self.pointer = (k + 1) % n
        raise RuntimeError("select() called with every queue empty")


def scheduler_select(lengths, discipline, rr_state: DeficitRoundRobin | None = None) -> int:
    """Index of the queue to serve next.  Ties go to the lowest index.

    Exception: SQF ties rotate when ``rr_state`` is given (a fresh state still
    starts at the lowest index).  Serving one of two tied queues makes it the
    strictly shortest, so a fixed tie order would lock the link onto it and
    starve the other flow forever, whereas the fluid tie group shares the
    link.  LQF needs no such rule: serving a tied queue hands the lead over.
    """
    d = Discipline(discipline)
    if d is Discipline.FQ:
        if rr_state is None:
            raise ValueError("FQ needs a DeficitRoundRobin state")
        return rr_state.select(lengths)
    best = -1
    for k, size in enumerate(lengths):
        if size == 0:
            continue
        if best < 0:
            best = k
        elif d is Discipline.LQF and size > lengths[best]:
            best = k
        elif d is Discipline.SQF and size < lengths[best]:
            best = k
    if best < 0:
        raise RuntimeError("select() called with every queue empty")
    if d is Discipline.SQF and rr_state is not None:
        n = len(lengths)
        for i in range(n):
            k = (rr_state.pointer + i) % n
            if lengths[k] == lengths[best]:
                rr_state.pointer = (k + 1) % n
                return k
    return best


class Admission(NamedTuple):
    outcome: str            # "enqueued", "dropped" or "pushed_out"
    victim: int | None      # flow that lost a packet, if any
    victim_packet: object = None


def lqd_admit(queues, capacity: int, flow: int, packet) -> Admission:
    """Longest-queue-drop admission into a shared buffer of ``capacity`` packets.

    When the buffer is full the longest queue (lowest index on ties) pays:
    if the arrival belongs to it, or ties with it, the arrival is dropped;
    otherwise that queue loses its tail packet and the arrival is stored.
    """
    occupancy = sum(len(q) for q in queues)
    if occupancy < capacity:
        queues[flow].append(packet)
        return Admission("enqueued", None)
    longest = max(range(len(queues)), key=lambda k: (len(queues[k]), -k))
    if len(queues[flow]) >= len(queues[longest]):
        return Admission("dropped", flow, packet)
    victim_packet = queues[longest].pop()
    queues[flow].append(packet)
    return Admission("pushed_out", longest, victim_packet)


# --- TCP source ----------------------------------------------------------------------

@dataclass
class TcpSource:
    """AIMD window state.  ``rtt`` is the round trip the sender assumes when
    none is supplied (its propagation RTT)."""

    rtt: float
    cwnd: float = 1.0
    last_decrease: float = -math.inf
    slow_start: bool = False
    ssthresh: float = math.inf

    def on_ack(self) -> None:
        if self.slow_start and self.cwnd < self.ssthresh:
            self.cwnd += 1.0
        else:
            self.cwnd += 1.0 / self.cwnd

    def on_loss(self, now: float, rtt: float | None = None) -> bool:
        """Halve the window unless that already happened within one RTT."""
        if now - self.last_decrease < (self.rtt if rtt is None else rtt):
            return False
        self.cwnd = max(self.cwnd / 2.0, 1.0)
        self.ssthresh = self.cwnd
        self.last_decrease = now
        return True

    def gap(self, rtt: float | None = None) -> float:
        """Time between two paced transmissions."""
        return (self.rtt if rtt is None else rtt) / self.cwnd


def tcp_on_ack(state: TcpSource) -> None:
    state.on_ack()


def tcp_on_loss(state: TcpSource, now: float, rtt: float | None = None) -> bool:
    return state.on_loss(now, rtt)


# --- report ------------------------------------------------------------------------------

@dataclass
class PacketSimReport:
    """Counters and rates from one run.  Rates are in packets/second."""

    scenario: Scenario
    warmup: float
    interval: float
    sent: np.ndarray
    delivered: np.ndarray
    dropped: np.ndarray
    in_queue: np.ndarray
    in_flight: np.ndarray
    sent_measured: np.ndarray
    delivered_measured: np.ndarray
    dropped_measured: np.ndarray
    mean_queue: np.ndarray
    trace: WindowedTrace
    samples: dict = field(default_factory=dict)

    @property
    def throughput(self) -> np.ndarray:
        return self.delivered_measured / self.interval

    @property
    def sending_rate(self) -> np.ndarray:
        return self.sent_measured / self.interval

    @property
    def loss_rate(self) -> np.ndarray:
        return self.dropped_measured / self.interval

    @property
    def goodput(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.sent_measured > 0, self.delivered_measured / self.sent_measured, np.nan)

    @property
    def utilization(self) -> float:
        return float(self.throughput.sum() / self.scenario.capacity_pkts)

    def to_summary(self) -> SteadyStateSummary:
        s = self.scenario
        return SteadyStateSummary(
            discipline=s.discipline, capacity=s.capacity_pkts, buffer=float(s.buffer_pkts),
            sending_rate=self.sending_rate.tolist(), throughput=self.throughput.tolist(),
            mean_queue=self.mean_queue.tolist(), loss_rate=self.loss_rate.tolist(),
            source="packet", packet_size=s.packet_size,
            notes=[f"seed={s.seed}", f"warmup={self.warmup:g}s"],
        )

    def to_dict(self) -> dict:
        doc = self.to_summary().to_dict()
        for k, flow in enumerate(doc["flows"]):
            flow["packets"] = {
                "sent": int(self.sent[k]), "delivered": int(self.delivered[k]),
                "dropped": int(self.dropped[k]),
                "sent_measured": int(self.sent_measured[k]),
                "delivered_measured": int(self.delivered_measured[k]),
                "dropped_measured": int(self.dropped_measured[k]),
            }
            g = self.goodput[k]
            flow["goodput_ratio"] = None if np.isnan(g) else float(g)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def trace_csv(self) -> str:
        lines = ["t,flow,rate_pkts"]
        for t, k, bits_rate in self.trace.rows():
            lines.append(f"{t!r},{k},{bits_rate / (8.0 * self.scenario.packet_size)!r}")
        return "\n".join(lines) + "\n"


# --- engine ---------------------------------------------------------------------------------

class _Engine:
    def __init__(self, scenario: Scenario, warmup: float, window: float,
                 slow_start: bool, sample_period: float | None):
        self.s = scenario
        self.n = scenario.n_flows
        self.B = scenario.buffer_pkts
        self.tx_time = 1.0 / scenario.capacity_pkts
        self.augmented = scenario.rtt_mode is RttMode.QUEUE_AUGMENTED
        self.warmup = warmup
        self.window = window
        self.rng = random.Random(scenario.seed)
        self.events: list = []
        self.seq = 0
        self.now = 0.0

        self.queues = [deque() for _ in range(self.n)]
        self.drr = DeficitRoundRobin(self.n)
        self.busy = False
        self.sent = np.zeros(self.n, dtype=np.int64)
        self.delivered = np.zeros(self.n, dtype=np.int64)
        self.dropped = np.zeros(self.n, dtype=np.int64)
        self.in_flight = np.zeros(self.n, dtype=np.int64)
        self.snap = None
        n_win = max(0, int(math.floor((scenario.horizon - warmup) / window + 1e-9)))
        self.win_bits = np.zeros((n_win, self.n))
        self.q_area = np.zeros(self.n)
        self.q_last = warmup

        self.tcp: list[TcpSource | None] = []
        for k, f in enumerate(scenario.flows):
            if f.is_tcp:
                cwnd = max(1.0, f.initial_rate * f.propagation_rtt)
                self.tcp.append(TcpSource(rtt=f.propagation_rtt, cwnd=cwnd, slow_start=slow_start))
            else:
                self.tcp.append(None)

        self.sample_period = sample_period
        self.samples = {"t": [], "cwnd": [], "queue": []} if sample_period else {}

    # calendar
    def push(self, t: float, kind: int, flow: int, data=None) -> None:
        self.seq += 1
        heapq.heappush(self.events, (t, kind, self.seq, flow, data))

    # queue occupancy integral (only counted after warmup)
    def _touch_queues(self) -> None:
        if self.now > self.q_last:
            dt = self.now - self.q_last
            for k in range(self.n):
                self.q_area[k] += len(self.queues[k]) * dt
            self.q_last = self.now

    def round_trip(self, k: int) -> float:
        pd = self.s.flows[k].propagation_rtt
        if self.augmented:
            return pd + sum(len(q) for q in self.queues) * self.tx_time
        return pd

    def send(self, k: int) -> None:
        self.sent[k] += 1
        self.in_flight[k] += 1
        self.arrive(k, self.now)

    def arrive(self, k: int, stamp: float) -> None:
        self.in_flight[k] -= 1
        if self.now >= self.warmup:
            self._touch_queues()
        res = lqd_admit(self.queues, self.B, k, stamp)
        if res.victim is not None:
            self.dropped[res.victim] += 1
            if self.tcp[res.victim] is not None:
                self.push(self.now + self.s.flows[res.victim].propagation_rtt, _LOSS, res.victim)
        if not self.busy:
            self.start_tx()

    def start_tx(self) -> None:
        lengths = [len(q) for q in self.queues]
        if sum(lengths) == 0:
            self.busy = False
            return
        if self.now >= self.warmup:
            self._touch_queues()
        k = scheduler_select(lengths, self.s.discipline, self.drr)
        stamp = self.queues[k].popleft()
        self.in_flight[k] += 1
        self.busy = True
        self.push(self.now + self.tx_time, _TX_DONE, k, stamp)

    def run(self):
        s = self.s
        for k, f in enumerate(s.flows):
            if f.is_tcp:
                self.push(0.0, _TCP, k)
            else:
                gap = 8.0 * s.packet_size / f.rate
                self.push(self.rng.uniform(0.0, gap), _UDP, k, gap)
        self.push(self.warmup, _MARK, -1, "warmup")
        if self.sample_period:
            self.push(0.0, _MARK, -1, "sample")

        horizon = s.horizon
        while self.events:
            t, kind, _, k, data = self.events[0]
            if t > horizon:
                break
            heapq.heappop(self.events)
            self.now = t
            if kind == _TX_DONE:
                self.push(t + s.flows[k].propagation_rtt / 2.0 if s.flows[k].is_tcp else t,
                          _DELIVER, k, data)
                self.start_tx()
            elif kind == _DELIVER:
                self.in_flight[k] -= 1
                self.delivered[k] += 1
                if t >= self.warmup:
                    w = int((t - self.warmup) / self.window)
                    if w < self.win_bits.shape[0]:
                        self.win_bits[w, k] += 8.0 * s.packet_size
                if self.tcp[k] is not None:
                    self.push(t + s.flows[k].propagation_rtt / 2.0, _ACK, k, data)
            elif kind == _ACK:
                self.tcp[k].on_ack()
            elif kind == _LOSS:
                self.tcp[k].on_loss(t, self.round_trip(k))
            elif kind == _TCP:
                self.send(k)
                self.push(t + self.tcp[k].gap(self.round_trip(k)), _TCP, k)
            elif kind == _UDP:
                self.send(k)
                self.push(t + data, _UDP, k, data)
            elif data == "warmup":
                self.snap = (self.sent.copy(), self.delivered.copy(), self.dropped.copy())
                self.q_last = t
            else:
                self.samples["t"].append(t)
                self.samples["cwnd"].append([src.cwnd if src else float("nan") for src in self.tcp])
                self.samples["queue"].append([len(q) for q in self.queues])
                self.push(t + self.sample_period, _MARK, -1, "sample")
        self.now = horizon
        self._touch_queues()

    def report(self) -> PacketSimReport:
        interval = self.s.horizon - self.warmup
        sent0, deliv0, drop0 = self.snap
        samples = {key: np.asarray(v) for key, v in self.samples.items()}
        return PacketSimReport(
            scenario=self.s, warmup=self.warmup, interval=interval,
            sent=self.sent.copy(), delivered=self.delivered.copy(), dropped=self.dropped.copy(),
            in_queue=np.array([len(q) for q in self.queues]), in_flight=self.in_flight.copy(),
            sent_measured=self.sent - sent0, delivered_measured=self.delivered - deliv0,
            dropped_measured=self.dropped - drop0,
            mean_queue=self.q_area / interval,
            trace=WindowedTrace(self.window, self.win_bits, start=self.warmup),
            samples=samples,
        )


def default_warmup(scenario: Scenario) -> float:
    return min(10.0, scenario.horizon / 4.0)


def run_packet_sim(scenario: Scenario, warmup: float | None = None,
                   window: float = DEFAULT_WINDOW, slow_start: bool = False,
                   sample_period: float | None = None) -> PacketSimReport:
    """Simulate ``scenario.horizon`` seconds; counters after ``warmup`` are reported.

    Deterministic for a given scenario (the seed lives in the scenario).
    """
    warmup = default_warmup(scenario) if warmup is None else float(warmup)
    if not 0 <= warmup < scenario.horizon:
        raise ValueError("warmup must lie in [0, horizon)")
    if not window > 0:
        raise ValueError("window must be positive")
    eng = _Engine(scenario, warmup, window, slow_start, sample_period)
    eng.run()
    return eng.report()
