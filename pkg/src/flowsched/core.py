"""Scenario definition, unit handling and shared result types.

Everything inside the engines runs in canonical units: rates in packets per
second, queues in packets, time in seconds.  The scenario file speaks Mbps,
kB and ms; the conversion happens once, here.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

DEFAULT_PACKET_BYTES = 1500


class ScenarioError(ValueError):
    """A scenario violates one of its invariants."""


class ScenarioParseError(ScenarioError):
    """A scenario document could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class Discipline(str, enum.Enum):
    FQ = "fq"
    LQF = "lqf"
    SQF = "sqf"

    @property
    def code(self) -> int:
        # integer code used by the compiled fluid kernel
        return _DISCIPLINE_CODES[self]


_DISCIPLINE_CODES = {Discipline.FQ: 0, Discipline.LQF: 1, Discipline.SQF: 2}


class FlowKind(str, enum.Enum):
    TCP = "tcp"
    UDP = "udp"


class RttMode(str, enum.Enum):
    CONSTANT = "constant"
    QUEUE_AUGMENTED = "queue_augmented"


class DetectionMode(str, enum.Enum):
    INSTANTANEOUS = "instantaneous"
    DELAYED = "delayed"


# --- units -----------------------------------------------------------------

def bits_to_packets(rate_bps: float, packet_size: int = DEFAULT_PACKET_BYTES) -> float:
    """Convert a bit rate to packets per second."""
    return rate_bps / (8.0 * packet_size)


def packets_to_bits(rate_pps: float, packet_size: int = DEFAULT_PACKET_BYTES) -> float:
    """Convert packets per second back to bits per second."""
    return rate_pps * 8.0 * packet_size


def packets_to_mbps(rate_pps: float, packet_size: int = DEFAULT_PACKET_BYTES) -> float:
    return packets_to_bits(rate_pps, packet_size) / 1e6


def mbps_to_packets(rate_mbps: float, packet_size: int = DEFAULT_PACKET_BYTES) -> float:
    return bits_to_packets(rate_mbps * 1e6, packet_size)


# --- scenario types ----------------------------------------------------------

@dataclass(frozen=True)
class FlowSpec:
    """One long-lived source.

    TCP flows carry ``propagation_rtt`` (seconds), UDP CBR flows carry
    ``rate`` (bits/second).  ``initial_rate`` is in packets/second and
    ``initial_queue`` in packets.
    """

    kind: FlowKind
    propagation_rtt: float | None = None
    rate: float | None = None
    initial_rate: float = 0.0
    initial_queue: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", FlowKind(self.kind))
        if self.kind is FlowKind.TCP:
            if self.rate is not None:
                raise ScenarioError("tcp flow must not set a rate")
            if self.propagation_rtt is None or not self.propagation_rtt > 0:
                raise ScenarioError("tcp flow needs propagation_rtt > 0")
        else:
            if self.propagation_rtt is not None:
                raise ScenarioError("udp flow must not set propagation_rtt")
            if self.rate is None or not self.rate > 0:
                raise ScenarioError("udp flow needs rate > 0")
        if not self.initial_queue >= 0:
            raise ScenarioError("initial_queue must be >= 0")
        if not self.initial_rate >= 0:
            raise ScenarioError("initial_rate must be >= 0")

    @classmethod
    def tcp(cls, rtt: float, **kw) -> "FlowSpec":
        return cls(FlowKind.TCP, propagation_rtt=rtt, **kw)

    @classmethod
    def udp(cls, rate_bps: float, **kw) -> "FlowSpec":
        return cls(FlowKind.UDP, rate=rate_bps, **kw)

    @property
    def is_tcp(self) -> bool:
        return self.kind is FlowKind.TCP


def alpha_of(flow: FlowSpec) -> float:
    """Additive-increase slope 1/PD^2 of a TCP flow, in pkt/s per second."""
    if not flow.is_tcp:
        raise ScenarioError("alpha is only defined for tcp flows")
    return 1.0 / flow.propagation_rtt ** 2


@dataclass(frozen=True)
class Scenario:
    """A single-bottleneck experiment.

    ``capacity`` is in bits/second and ``buffer`` in bytes, as written in the
    scenario file; the ``*_pkts`` properties give the canonical values.
    """

    capacity: float
    buffer: float
    flows: tuple[FlowSpec, ...]
    discipline: Discipline = Discipline.FQ
    packet_size: int = DEFAULT_PACKET_BYTES
    horizon: float = 60.0
    rtt_mode: RttMode = RttMode.CONSTANT
    detection_mode: DetectionMode = DetectionMode.INSTANTANEOUS
    seed: int = 1

    def __post_init__(self):
        object.__setattr__(self, "flows", tuple(self.flows))
        object.__setattr__(self, "discipline", Discipline(self.discipline))
        object.__setattr__(self, "rtt_mode", RttMode(self.rtt_mode))
        object.__setattr__(self, "detection_mode", DetectionMode(self.detection_mode))
        self.validate()

    def validate(self) -> None:
        if not self.capacity > 0:
            raise ScenarioError("capacity must be > 0")
        if not self.packet_size > 0:
            raise ScenarioError("packet size must be > 0")
        if not self.buffer >= 2 * self.packet_size:
            raise ScenarioError("buffer must hold at least two packets")
        if len(self.flows) < 1:
            raise ScenarioError("scenario needs at least one flow")
        if not self.horizon > 0:
            raise ScenarioError("horizon must be > 0")
        for f in self.flows:
            if not f.is_tcp and f.rate > self.capacity:
                raise ScenarioError("udp rate exceeds capacity")
        if sum(f.initial_queue for f in self.flows) > self.buffer_pkts:
            raise ScenarioError("initial queues exceed the buffer")

    # canonical views
    @property
    def capacity_pkts(self) -> float:
        return bits_to_packets(self.capacity, self.packet_size)

    @property
    def buffer_pkts(self) -> int:
        return int(self.buffer // self.packet_size)

    @property
    def n_flows(self) -> int:
        return len(self.flows)

    def alphas(self) -> list[float]:
        """Per-flow 1/PD^2; UDP entries are 0."""
        return [alpha_of(f) if f.is_tcp else 0.0 for f in self.flows]

    def tcp_indices(self) -> list[int]:
        return [i for i, f in enumerate(self.flows) if f.is_tcp]

    def udp_indices(self) -> list[int]:
        return [i for i, f in enumerate(self.flows) if not f.is_tcp]

    def with_overrides(self, overrides: Mapping[str, str]) -> "Scenario":
        """Apply ``key=value`` overrides using scenario-file keys.

        Flow keys are addressed as ``flowN.key`` (1-based), e.g.
        ``flow2.rtt_ms=50``.
        """
        if not overrides:
            return self
        doc = dump_scenario(self)
        top, flows = _parse_document(doc)
        for key, value in overrides.items():
            m = re.fullmatch(r"flow(\d+)\.(\w+)", key)
            if m:
                idx = int(m.group(1)) - 1
                if not 0 <= idx < len(flows):
                    raise ScenarioError(f"no flow {idx + 1} to override")
                if m.group(2) not in _FLOW_KEYS:
                    raise ScenarioParseError(f"unknown flow key '{m.group(2)}'")
                flows[idx][m.group(2)] = (str(value), None)
            else:
                if key not in _TOP_KEYS:
                    raise ScenarioParseError(f"unknown key '{key}'")
                top[key] = (str(value), None)
        return _build(top, flows)


# --- scenario file -----------------------------------------------------------

_TOP_KEYS = {
    "capacity_mbps", "buffer_kb", "packet_bytes", "discipline", "horizon_s",
    "rtt_mode", "detection_mode", "seed",
}
_FLOW_KEYS = {"kind", "rtt_ms", "rate_mbps", "initial_rate_pps", "initial_queue_pkts"}
_REQUIRED = ("capacity_mbps", "buffer_kb", "discipline")

_Entry = tuple[str, "int | None"]


def _split_pairs(text: str, lineno: int) -> list[tuple[str, str]]:
    # "a=1 b = 2" -> [(a, 1), (b, 2)]
    tokens = re.findall(r"([A-Za-z_][\w.]*)\s*=\s*([^\s=]+)", text)
    leftover = re.sub(r"([A-Za-z_][\w.]*)\s*=\s*([^\s=]+)", "", text).strip()
    if leftover:
        raise ScenarioParseError(f"cannot parse '{leftover}'", lineno)
    return tokens


def _parse_document(text: str) -> tuple[dict[str, _Entry], list[dict[str, _Entry]]]:
    top: dict[str, _Entry] = {}
    flows: list[dict[str, _Entry]] = []
    current = top
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            m = re.match(r"\[(\w+)\]\s*(.*)$", line)
            if not m:
                raise ScenarioParseError(f"malformed section header '{line}'", lineno)
            if m.group(1) != "flow":
                raise ScenarioParseError(f"unknown section '[{m.group(1)}]'", lineno)
            current = {}
            flows.append(current)
            rest = m.group(2)
        else:
            rest = line
            if "=" not in rest:
                raise ScenarioParseError(f"expected 'key = value', got '{line}'", lineno)
        keys = _FLOW_KEYS if current is not top else _TOP_KEYS
        for key, value in _split_pairs(rest, lineno):
            if key not in keys:
                where = "flow" if current is not top else "scenario"
                raise ScenarioParseError(f"unknown {where} key '{key}'", lineno)
            if key in current:
                raise ScenarioParseError(f"duplicate key '{key}'", lineno)
            current[key] = (value, lineno)
    return top, flows


def _number(entry: _Entry, key: str, kind=float):
    value, line = entry
    try:
        out = kind(value)
    except ValueError:
        raise ScenarioParseError(f"'{key}' expects a number, got '{value}'", line) from None
    if isinstance(out, float) and not math.isfinite(out):
        raise ScenarioParseError(f"'{key}' must be finite", line)
    return out


def _enum(entry: _Entry, key: str, enum_cls):
    value, line = entry
    try:
        return enum_cls(value.lower())
    except ValueError:
        allowed = "|".join(e.value for e in enum_cls)
        raise ScenarioParseError(f"'{key}' must be one of {allowed}, got '{value}'", line) from None


def _build(top: dict[str, _Entry], flows: list[dict[str, _Entry]]) -> Scenario:
    for key in _REQUIRED:
        if key not in top:
            raise ScenarioParseError(f"missing required key '{key}'")
    packet = _number(top["packet_bytes"], "packet_bytes", int) if "packet_bytes" in top else DEFAULT_PACKET_BYTES
    specs = []
    for block in flows:
        if "kind" not in block:
            raise ScenarioParseError("flow block without 'kind'")
        kind = _enum(block["kind"], "kind", FlowKind)
        extra = {}
        if "initial_rate_pps" in block:
            extra["initial_rate"] = _number(block["initial_rate_pps"], "initial_rate_pps")
        if "initial_queue_pkts" in block:
            extra["initial_queue"] = _number(block["initial_queue_pkts"], "initial_queue_pkts")
        if kind is FlowKind.TCP:
            if "rate_mbps" in block:
                raise ScenarioError("tcp flow must not set rate_mbps")
            if "rtt_ms" not in block:
                raise ScenarioError("tcp flow needs rtt_ms")
            specs.append(FlowSpec.tcp(_number(block["rtt_ms"], "rtt_ms") / 1e3, **extra))
        else:
            if "rtt_ms" in block:
                raise ScenarioError("udp flow must not set rtt_ms")
            if "rate_mbps" not in block:
                raise ScenarioError("udp flow needs rate_mbps")
            specs.append(FlowSpec.udp(_number(block["rate_mbps"], "rate_mbps") * 1e6, **extra))
    kw = {}
    if "horizon_s" in top:
        kw["horizon"] = _number(top["horizon_s"], "horizon_s")
    if "rtt_mode" in top:
        kw["rtt_mode"] = _enum(top["rtt_mode"], "rtt_mode", RttMode)
    if "detection_mode" in top:
        kw["detection_mode"] = _enum(top["detection_mode"], "detection_mode", DetectionMode)
    if "seed" in top:
        kw["seed"] = _number(top["seed"], "seed", int)
    return Scenario(
        capacity=_number(top["capacity_mbps"], "capacity_mbps") * 1e6,
        buffer=_number(top["buffer_kb"], "buffer_kb") * 1e3,
        packet_size=packet,
        discipline=_enum(top["discipline"], "discipline", Discipline),
        flows=tuple(specs),
        **kw,
    )


def load_scenario(text: str) -> Scenario:
    """Parse a scenario document (``key = value`` lines, ``[flow]`` blocks)."""
    top, flows = _parse_document(text)
    return _build(top, flows)


def load_scenario_file(path: str | Path) -> Scenario:
    return load_scenario(Path(path).read_text(encoding="utf-8"))


def _fmt(x: float) -> str:
    r = repr(float(x))
    return r[:-2] if r.endswith(".0") else r


def dump_scenario(s: Scenario) -> str:
    """Serialize a scenario back to the file format (round-trips through load)."""
    lines = [
        f"capacity_mbps = {_fmt(s.capacity / 1e6)}",
        f"buffer_kb = {_fmt(s.buffer / 1e3)}",
        f"packet_bytes = {s.packet_size}",
        f"discipline = {s.discipline.value}",
        f"horizon_s = {_fmt(s.horizon)}",
        f"rtt_mode = {s.rtt_mode.value}",
        f"detection_mode = {s.detection_mode.value}",
        f"seed = {s.seed}",
    ]
    for f in s.flows:
        if f.is_tcp:
            head = f"[flow] kind=tcp rtt_ms={_fmt(f.propagation_rtt * 1e3)}"
        else:
            head = f"[flow] kind=udp rate_mbps={_fmt(f.rate / 1e6)}"
        if f.initial_rate:
            head += f" initial_rate_pps={_fmt(f.initial_rate)}"
        if f.initial_queue:
            head += f" initial_queue_pkts={_fmt(f.initial_queue)}"
        lines.append(head)
    return "\n".join(lines) + "\n"


# --- shared result type --------------------------------------------------------

@dataclass
class SteadyStateSummary:
    """Per-flow stationary means, all in packets/second and packets."""

    discipline: Discipline
    capacity: float
    buffer: float
    sending_rate: list[float]
    throughput: list[float]
    mean_queue: list[float]
    loss_rate: list[float]
    source: str = "analytic"
    cycle_period: float | None = None
    limit_cycle: object | None = None
    notes: list[str] = field(default_factory=list)
    packet_size: int = DEFAULT_PACKET_BYTES

    @property
    def utilization(self) -> float:
        return sum(self.throughput) / self.capacity

    @property
    def n_flows(self) -> int:
        return len(self.throughput)

    def to_mbps(self, values: Sequence[float | None]) -> list[float | None]:
        return [None if v is None else packets_to_mbps(float(v), self.packet_size) for v in values]

    def to_dict(self) -> dict:
        A, X, L = (self.to_mbps(v) for v in (self.sending_rate, self.throughput, self.loss_rate))
        flows = []
        for k in range(self.n_flows):
            flows.append({
                "flow": k + 1,
                "sending_rate": _plain(self.sending_rate[k]),
                "throughput": _plain(self.throughput[k]),
                "mean_queue": _plain(self.mean_queue[k]),
                "loss_rate": _plain(self.loss_rate[k]),
                "sending_rate_mbps": A[k],
                "throughput_mbps": X[k],
                "loss_rate_mbps": L[k],
            })
        doc = {
            "source": self.source,
            "discipline": self.discipline.value,
            "parameters": {
                "capacity_pkts": self.capacity,
                "buffer_pkts": self.buffer,
                "packet_bytes": self.packet_size,
            },
            "units": {"rate": "pkt/s", "queue": "pkt"},
            "flows": flows,
            "utilization": float(self.utilization),
        }
        if self.cycle_period is not None:
            doc["cycle_period_s"] = self.cycle_period
        if self.notes:
            doc["notes"] = list(self.notes)
        return doc


def _plain(v):
    return None if v is None else float(v)


def scenario_with(s: Scenario, **changes) -> Scenario:
    """``dataclasses.replace`` that re-validates."""
    return replace(s, **changes)
