"""Closed-form stationary regime of the fluid model.

Rates are in packets/second, ``alpha`` values in pkt/s per second
(``1/RTT^2``), queues in packets.

Many expressions contain factors like ``exp(C**2 / (2*beta))`` that
overflow a double at ordinary parameters (C ~ 833 pkt/s, beta ~ 400 gives
an exponent near 868) even though the final quantities are well scaled.
Those are all evaluated in log space.

``gain`` is the multiplicative-decrease coefficient of the lossy-phase ODE
``dA/dt = -gain * A * (A + b + slope*t - C)``.  The model's halving rule
gives 0.5, the default; ``gain=1`` gives the variant of every expression
obtained by integrating the same equation without the halving factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erfcx

from .core import Discipline, Scenario, SteadyStateSummary, bits_to_packets

LOSS_GAIN = 0.5
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def erf(x: float) -> float:
    """Error function (double precision, ~1e-16 absolute)."""
    return math.erf(x)


def _log_scaled_erf_diff(v: float, u: float) -> float:
    """log( exp(v**2) * (erf(u) - erf(v)) ) for u >= v, without overflow."""
    if u <= v:
        return -math.inf
    if u <= 0.0:
        # both tails on the negative side: erf(u) - erf(v) = erfc(-u) - erfc(-v)
        d = erfcx(-u) * math.exp(v * v - u * u) - erfcx(-v)
        return math.log(d) if d > 0 else -math.inf
    if v >= 0.0:
        d = erfcx(v) - erfcx(u) * math.exp(v * v - u * u)
        return math.log(d) if d > 0 else -math.inf
    return v * v + math.log(math.erf(u) - math.erf(v))


def log_decay_factor(a: float, b: float, t: float, slope: float, C: float,
                     gain: float = LOSS_GAIN) -> float:
    """Natural log of the decay factor ``f`` (see :func:`f_decay`)."""
    if not (a > 0 and slope > 0 and t >= 0):
        raise ValueError("need a > 0, slope > 0, t >= 0")
    expo = -gain * t * (b - C) - 0.5 * gain * slope * t * t
    scale = math.sqrt(gain / (2.0 * slope))
    log_g = _log_scaled_erf_diff(scale * (b - C), scale * (b - C + slope * t))
    log_head = math.log(2.0 * math.sqrt(slope))
    if log_g == -math.inf:
        log_den = log_head
    else:
        log_tail = math.log(a) + _LOG_SQRT_2PI + 0.5 * math.log(gain) + log_g
        log_den = float(np.logaddexp(log_head, log_tail))
    return expo - log_den


def f_decay(a: float, b: float, t: float, beta: float, C: float,
            gain: float = LOSS_GAIN) -> float:
    """Decay factor of the flow losing packets while the other flow is served.

    ``2*sqrt(beta)*a*f_decay(a, b, t, beta, C)`` is the sending rate, ``t``
    seconds into the lossy phase, of a flow that entered it at rate ``a``
    while the in-service flow started at ``b`` and grows with slope
    ``beta``.
    """
    return math.exp(log_decay_factor(a, b, t, beta, C, gain))


def g_decay(a: float, b: float, t: float, alpha: float, C: float,
            gain: float = LOSS_GAIN) -> float:
    """Mirror of :func:`f_decay` with the roles of the two flows swapped."""
    return math.exp(log_decay_factor(a, b, t, alpha, C, gain))


def decay_rate(a: float, b: float, t: float, slope: float, C: float,
               gain: float = LOSS_GAIN) -> float:
    """Sending rate of the lossy flow: ``2*sqrt(slope)*a*f``."""
    lf = log_decay_factor(a, b, t, slope, C, gain)
    return math.exp(math.log(2.0 * math.sqrt(slope) * a) + lf)


# --- SQF -------------------------------------------------------------------------

@dataclass
class LimitCycle:
    """Stationary SQF cycle: flows take turns owning the link.

    Flow ``k``'s phase lasts ``2C/alpha_k``; inside it that flow's rate is
    ``alpha_k * t`` and its queue dips below ``B/2`` and comes back.  The
    closed-form evaluators (:meth:`rates`, :meth:`queues`) cover the
    two-flow cycle.
    """

    alphas: tuple[float, ...]
    C: float
    B: float
    gain: float = LOSS_GAIN
    order: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.order:
            self.order = tuple(range(len(self.alphas)))

    @property
    def phase_durations(self) -> list[float]:
        return [2.0 * self.C / a for a in self.alphas]

    @property
    def period(self) -> float:
        return sum(self.phase_durations)

    @property
    def feasible(self) -> bool:
        # the in-service queue bottoms out at B/2 - C^2/(2 alpha_k)
        return self.B >= self.C ** 2 / min(self.alphas)

    def phase_at(self, t: float) -> tuple[int, float]:
        """(flow in service, time since its phase started) at cycle time t."""
        t = t % self.period
        for k in self.order:
            d = 2.0 * self.C / self.alphas[k]
            if t < d:
                return k, t
            t -= d
        k = self.order[-1]
        return k, 2.0 * self.C / self.alphas[k]

    def rates(self, t: float) -> list[float]:
        if len(self.alphas) != 2:
            raise NotImplementedError("closed-form rates are for two flows")
        k, s = self.phase_at(t)
        other = 1 - k
        out = [0.0, 0.0]
        out[k] = self.alphas[k] * s
        out[other] = decay_rate(2.0 * self.C, 0.0, s, self.alphas[k], self.C, self.gain)
        return out

    def queues(self, t: float) -> list[float]:
        if len(self.alphas) != 2:
            raise NotImplementedError("closed-form queues are for two flows")
        k, s = self.phase_at(t)
        out = [0.0, 0.0]
        out[k] = self.B / 2.0 + 0.5 * self.alphas[k] * s * s - self.C * s
        out[1 - k] = self.B - out[k]
        return out


def _sqf_log_term(slope: float, C: float, gain: float) -> float:
    """(1/gain) * log(1 + 2 sqrt(2 pi gain) C/sqrt(slope) e^{gain C^2/2slope} Erf(C sqrt(gain/2slope)))."""
    z = C * math.sqrt(gain / (2.0 * slope))
    log_inner = (math.log(2.0 * C) + _LOG_SQRT_2PI + 0.5 * math.log(gain)
                 - 0.5 * math.log(slope) + gain * C * C / (2.0 * slope) + math.log(math.erf(z)))
    return float(np.logaddexp(0.0, log_inner)) / gain


def sqf_steady(alpha: float, beta: float, C: float, B: float,
               gain: float = LOSS_GAIN) -> SteadyStateSummary:
    """Two TCP flows under SQF: cycle means of rate, throughput and queue."""
    if min(alpha, beta, C, B) <= 0:
        raise ValueError("alpha, beta, C, B must be positive")
    s = alpha + beta
    X = [C * beta / s, C * alpha / s]
    coeff = alpha * beta / (2.0 * C * s)
    A = [X[0] + coeff * _sqf_log_term(beta, C, gain),
         X[1] + coeff * _sqf_log_term(alpha, C, gain)]
    shift = C * C * (alpha - beta) / (3.0 * alpha * beta)
    Q1 = B / 2.0 + shift
    cycle = LimitCycle((alpha, beta), C, B, gain)
    notes = []
    if not cycle.feasible:
        notes.append(
            f"buffer {B:g} pkt is below C^2/min(alpha) = {C * C / min(alpha, beta):.4g} pkt: "
            "the cycle would drive a queue below zero, so these means do not describe the fluid run"
        )
    return SteadyStateSummary(
        discipline=Discipline.SQF, capacity=C, buffer=B,
        sending_rate=A, throughput=X, mean_queue=[Q1, B - Q1],
        loss_rate=[A[0] - X[0], A[1] - X[1]],
        cycle_period=cycle.period, limit_cycle=cycle, notes=notes,
    )


# --- LQF / FQ ------------------------------------------------------------------------

def lqf_steady(alphas: Sequence[float], C: float, B: float = 0.0) -> SteadyStateSummary:
    """LQF fixed point: all queues tied, service and losses split by rate."""
    alphas = [float(a) for a in alphas]
    if min(alphas) <= 0 or C <= 0:
        raise ValueError("alphas and C must be positive")
    total = sum(alphas)
    A_tot = 0.5 * C * (1.0 + math.sqrt(1.0 + 8.0 * total / C ** 2))
    A = [a / total * A_tot for a in alphas]
    X = [C * a / A_tot for a in A]
    n = len(alphas)
    notes = ["throughput approx C*alpha_k/sum(alpha) (8 sum(alpha) << C^2): "
             + ", ".join(f"{C * a / total:.6g}" for a in alphas)]
    if n > 2:
        notes.append("sending rates for N>2 extend the two-flow fixed point (sum of alphas)")
    return SteadyStateSummary(
        discipline=Discipline.LQF, capacity=C, buffer=B,
        sending_rate=A, throughput=X, mean_queue=[B / n] * n,
        loss_rate=[a - x for a, x in zip(A, X)], notes=notes,
    )


def tcp_fixed_point(alpha: float, share: float, C: float) -> float:
    """Stationary rate of a TCP flow served at ``share`` that loses ``A - share``.

    Root of ``alpha*share/C = (A/2)*(A - share)``.
    """
    return share / 2.0 + math.sqrt(share * share / 4.0 + 2.0 * alpha * share / C)


def fq_steady(alphas: Sequence[float], C: float, B: float = 0.0) -> SteadyStateSummary:
    """FQ fixed point: every flow gets C/N, queues tie at B/N."""
    alphas = [float(a) for a in alphas]
    if min(alphas) <= 0 or C <= 0:
        raise ValueError("alphas and C must be positive")
    n = len(alphas)
    fair = C / n
    A = [tcp_fixed_point(a, fair, C) for a in alphas]
    return SteadyStateSummary(
        discipline=Discipline.FQ, capacity=C, buffer=B,
        sending_rate=A, throughput=[fair] * n, mean_queue=[B / n] * n,
        loss_rate=[a - fair for a in A],
    )


def steady_state(discipline, alphas: Sequence[float], C: float, B: float,
                 gain: float = LOSS_GAIN) -> SteadyStateSummary:
    """Dispatch to the closed form for ``discipline`` with TCP flows only."""
    d = Discipline(discipline)
    if d is Discipline.FQ:
        return fq_steady(alphas, C, B)
    if d is Discipline.LQF:
        return lqf_steady(alphas, C, B)
    if len(alphas) == 2:
        return sqf_steady(alphas[0], alphas[1], C, B, gain)
    X = list(nflow_throughputs(d, [1.0 / math.sqrt(a) for a in alphas], C))
    n = len(alphas)
    period = sum(2.0 * C / a for a in alphas)
    return SteadyStateSummary(
        discipline=d, capacity=C, buffer=B,
        sending_rate=[None] * n, throughput=X, mean_queue=[None] * n,
        loss_rate=[None] * n, cycle_period=period,
        limit_cycle=LimitCycle(tuple(alphas), C, B, gain),
        notes=["N>2 SQF: only throughputs and the cycle period have closed forms"],
    )


def nflow_throughputs(discipline, rtts: Sequence[float], C: float) -> np.ndarray:
    """Long-run throughputs of N TCP flows with propagation RTTs ``rtts`` (s)."""
    r = np.asarray(rtts, dtype=float)
    if r.size < 1 or np.any(r <= 0):
        raise ValueError("need at least one positive RTT")
    alpha = 1.0 / r ** 2
    d = Discipline(discipline)
    if d is Discipline.SQF:
        w = 1.0 / alpha
    elif d is Discipline.LQF:
        w = alpha
    else:
        w = np.ones_like(alpha)
    return C * w / w.sum()


# --- UDP ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UdpMetrics:
    udp_loss: float
    tcp_throughput: float
    tcp_rate: float

    def __iter__(self):
        return iter((self.udp_loss, self.tcp_throughput, self.tcp_rate))


def udp_metrics(discipline, x_udp: float, C: float, alpha: float) -> UdpMetrics:
    """One TCP flow (slope ``alpha``) against a CBR flow at ``x_udp``."""
    if not 0 < x_udp <= C:
        raise ValueError("need 0 < x_udp <= C")
    d = Discipline(discipline)
    rest = C - x_udp
    if d is Discipline.SQF:
        loss = 0.0
        rate = tcp_fixed_point(alpha, rest, C) if rest > 0 else 0.0
    elif d is Discipline.LQF:
        # A = rest/2 (1 + sqrt(1 + 8 alpha/rest^2)), written to survive rest -> 0
        rate = rest / 2.0 + math.sqrt(rest * rest / 4.0 + 2.0 * alpha)
        loss = C * x_udp / (x_udp + rate)
    else:
        loss = max(x_udp - C / 2.0, 0.0)
        share = C - x_udp + loss
        rate = tcp_fixed_point(alpha, share, C)
    return UdpMetrics(udp_loss=loss, tcp_throughput=C - x_udp + loss, tcp_rate=rate)


def analyze(scenario: Scenario, gain: float = LOSS_GAIN) -> SteadyStateSummary:
    """Closed-form summary for a whole scenario.

    Covers TCP-only scenarios and one TCP flow against one UDP flow.
    """
    C = scenario.capacity_pkts
    B = float(scenario.buffer_pkts)
    tcp, udp = scenario.tcp_indices(), scenario.udp_indices()
    if not udp:
        out = steady_state(scenario.discipline, scenario.alphas(), C, B, gain)
    elif len(tcp) == 1 and len(udp) == 1:
        i, j = tcp[0], udp[0]
        x = bits_to_packets(scenario.flows[j].rate, scenario.packet_size)
        m = udp_metrics(scenario.discipline, x, C, scenario.alphas()[i])
        n = scenario.n_flows
        A, X, L = [0.0] * n, [0.0] * n, [0.0] * n
        A[i], X[i], L[i] = m.tcp_rate, m.tcp_throughput, m.tcp_rate - m.tcp_throughput
        A[j], X[j], L[j] = x, x - m.udp_loss, m.udp_loss
        out = SteadyStateSummary(
            discipline=scenario.discipline, capacity=C, buffer=B,
            sending_rate=A, throughput=X, mean_queue=[None] * n, loss_rate=L,
            notes=["tcp/udp closed form: queues not modelled"],
        )
    else:
        raise ValueError("closed forms cover TCP-only scenarios or one TCP flow against one UDP flow")
    out.packet_size = scenario.packet_size
    return out


# --- convergence of the phase-start rates ---------------------------------------------

@dataclass
class EpsilonRecursion:
    """Phase-start rates of the SQF cycle and their geometric bound.

    ``eps[i]`` / ``gamma[i]`` are the rates of flow 1 / flow 2 when their
    (i+1)-th service phase begins.  Logs are kept alongside because the
    linear values underflow to zero after one step at realistic parameters.
    """

    eps: np.ndarray
    gamma: np.ndarray
    log_eps: np.ndarray
    log_gamma: np.ndarray
    log_envelope: np.ndarray
    log_K: float
    K: float = field(init=False)
    envelope: np.ndarray = field(init=False)

    def __post_init__(self):
        self.K = math.exp(self.log_K)
        self.envelope = np.exp(self.log_envelope)

    def within_envelope(self, rtol: float = 1e-12) -> bool:
        return bool(np.all(self.log_eps <= self.log_envelope + rtol))


def log_contraction_constant(beta: float, C: float, gain: float = LOSS_GAIN) -> float:
    """log K with K = 2sqrt(b) / (2sqrt(b) + 2C sqrt(2 pi gain) e^{gain C^2/2b} Erf(C sqrt(gain/2b)))."""
    head = math.log(2.0 * math.sqrt(beta))
    z = C * math.sqrt(gain / (2.0 * beta))
    tail = (math.log(2.0 * C) + _LOG_SQRT_2PI + 0.5 * math.log(gain)
            + gain * C * C / (2.0 * beta) + math.log(math.erf(z)))
    return head - float(np.logaddexp(head, tail))


def _phase_length(slope: float, C: float, start_rate: float) -> float:
    return C / slope * (1.0 + math.sqrt(max(0.0, 1.0 - 2.0 * slope * start_rate / C ** 2)))


def epsilon_recursion(alpha: float, beta: float, C: float, eps1: float, n: int,
                      gamma1: float | None = None,
                      gain: float = LOSS_GAIN) -> EpsilonRecursion:
    """Iterate the phase-start rate recursion ``n`` times.

    ``eps_{i+1} = eps_i * 2sqrt(beta) * f(eps_i + alpha tau_i, gamma_i, tau'_i)``
    and symmetrically for ``gamma``, with the phase lengths ``tau`` computed
    from the previous phase-start rates.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if min(alpha, beta, C, eps1) <= 0:
        raise ValueError("parameters must be positive")
    gamma1 = eps1 if gamma1 is None else gamma1
    log_eps = [math.log(eps1)]
    log_gam = [math.log(gamma1)]
    eps_prev, gam_prev = eps1, gamma1
    for _ in range(n - 1):
        e, g = math.exp(log_eps[-1]), math.exp(log_gam[-1])
        tau = _phase_length(alpha, C, eps_prev)
        tau_p = _phase_length(beta, C, gam_prev)
        lf = log_decay_factor(e + alpha * tau, g, tau_p, beta, C, gain)
        new_log_eps = log_eps[-1] + math.log(2.0 * math.sqrt(beta)) + lf
        tau_next = _phase_length(alpha, C, e)
        lg = log_decay_factor(g + beta * tau_p, e, tau_next, alpha, C, gain)
        new_log_gam = log_gam[-1] + math.log(2.0 * math.sqrt(alpha)) + lg
        eps_prev, gam_prev = e, g
        log_eps.append(new_log_eps)
        log_gam.append(new_log_gam)

    log_K = log_contraction_constant(beta, C, gain)
    log_2c = math.log(2.0 * C)
    env = []
    for i in range(1, n + 1):
        terms = [math.log(eps1) + (i - 1) * log_K]
        terms += [(i - j) * log_2c + j * log_K for j in range(1, i)]
        env.append(float(np.logaddexp.reduce(terms)))
    le = np.array(log_eps)
    lg_ = np.array(log_gam)
    return EpsilonRecursion(
        eps=np.exp(le), gamma=np.exp(lg_), log_eps=le, log_gamma=lg_,
        log_envelope=np.array(env), log_K=log_K,
    )
