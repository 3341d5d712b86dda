"""Fluid model of TCP/UDP sources behind a per-flow scheduler with LQD.

State is the vector of sending rates ``A`` (pkt/s) and virtual queues ``Q``
(pkt).  Integration is fixed-step explicit Euler; the right-hand side has
indicator functions everywhere, so higher order buys nothing.

The per-step physics lives in a few numba-compiled functions that are also
the implementation behind the public :func:`departure_rates`,
:func:`loss_rates` and :func:`rhs`, so the simulator and the unit-tested
operations cannot drift apart.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .core import (
    DetectionMode,
    Discipline,
    RttMode,
    Scenario,
    SteadyStateSummary,
    bits_to_packets,
)

FQ, LQF, SQF = 0, 1, 2

TIE_RTOL = 1e-9   # queues within TIE_RTOL * B form one tie set
SAT_RTOL = 1e-6   # epsilon_B: sum(Q) >= B(1 - SAT_RTOL) counts as full
MAX_STEP = 50e-6
RTT_STEPS = 200
MAX_REL_JUMP = 0.2
MAX_SWITCHES = 200_000


class StepSizeError(RuntimeError):
    """The integrator step is too coarse for the scenario dynamics."""


# --- compiled kernels ----------------------------------------------------------

@njit(cache=True)
def _departures(A, Q, C, disc, tol_q, out):
    n = A.shape[0]
    for k in range(n):
        out[k] = 0.0
    if disc == FQ:
        # water-filling; a backlogged queue has unbounded demand
        active = np.ones(n, dtype=np.bool_)
        residual = C
        n_active = n
        changed = True
        while changed and n_active > 0:
            changed = False
            share = residual / n_active
            for k in range(n):
                if active[k] and Q[k] <= tol_q and A[k] < share:
                    out[k] = A[k]
                    residual -= A[k]
                    active[k] = False
                    n_active -= 1
                    changed = True
        if n_active > 0:
            share = residual / n_active
            for k in range(n):
                if active[k]:
                    out[k] = share
        return
    # LQF / SQF: strict priority over groups of tied queue lengths
    if disc == LQF:
        order = np.argsort(-Q, kind="mergesort")
    else:
        order = np.argsort(Q, kind="mergesort")
    residual = C
    i = 0
    while i < n and residual > 0.0:
        head = Q[order[i]]
        j = i
        a_sum = 0.0
        while j < n and abs(Q[order[j]] - head) <= tol_q:
            a_sum += A[order[j]]
            j += 1
        if head <= tol_q:
            # empty queues can only pass through what arrives
            give = min(residual, a_sum)
            if a_sum > 0.0:
                for m in range(i, j):
                    out[order[m]] = give * A[order[m]] / a_sum
            residual -= give
        else:
            for m in range(i, j):
                if a_sum > 0.0:
                    out[order[m]] = residual * A[order[m]] / a_sum
                else:
                    out[order[m]] = residual / (j - i)
            residual = 0.0
        i = j


@njit(cache=True)
def _losses(A, Q, D, B, C, tol_q, eps_b, out):
    n = A.shape[0]
    q_sum = 0.0
    q_max = -1.0
    for k in range(n):
        out[k] = 0.0
        q_sum += Q[k]
        if Q[k] > q_max:
            q_max = Q[k]
    if q_sum < B - eps_b:
        return
    members = 0
    for k in range(n):
        if q_max - Q[k] <= tol_q:
            members += 1
    if members == 1:
        excess = -C
        for k in range(n):
            excess += A[k]
        for k in range(n):
            if q_max - Q[k] <= tol_q:
                out[k] = max(excess, 0.0)
    else:
        for k in range(n):
            if q_max - Q[k] <= tol_q:
                out[k] = max(A[k] - D[k], 0.0)


@njit(cache=True)
def _pin_saturated_losses(A, Q, D, C, tol_q, L):
    """Rescale tie-set losses so total loss equals the excess input.

    Keeps the buffer exactly full while sum(A) >= C.  With a full tie set
    (every flow at the same queue) this is a no-op.
    """
    n = A.shape[0]
    excess = -C
    q_max = -1.0
    for k in range(n):
        excess += A[k]
        if Q[k] > q_max:
            q_max = Q[k]
    if excess <= 0.0:
        return
    total = 0.0
    weight = 0.0
    for k in range(n):
        total += L[k]
        if q_max - Q[k] <= tol_q:
            weight += A[k]
    if abs(total - excess) <= 1e-12 * C:
        return
    if total > 0.0:
        scale = excess / total
        for k in range(n):
            L[k] *= scale
    elif weight > 0.0:
        for k in range(n):
            if q_max - Q[k] <= tol_q:
                L[k] = excess * A[k] / weight


@njit(cache=True)
def _rates_rhs(A, Q, D, L_seen, is_tcp, R, C, tol_q, dA):
    n = A.shape[0]
    q_sum = 0.0
    for k in range(n):
        q_sum += Q[k]
    empty = q_sum <= tol_q
    for k in range(n):
        if not is_tcp[k]:
            dA[k] = 0.0
            continue
        gain = 1.0 if empty else D[k] / C
        dA[k] = gain / (R[k] * R[k]) - 0.5 * A[k] * L_seen[k]


@njit(cache=True)
def _integrate(A0, Q0, is_tcp, pd, C, B, disc, augmented, delayed,
               dt, n_steps, sample_every, max_rel_jump,
               t_out, A_out, Q_out, D_out, L_out, cum_out,
               sw_t, sw_k):
    n = A0.shape[0]
    tol_q = TIE_RTOL * B
    eps_b = SAT_RTOL * B
    A = A0.copy()
    Q = Q0.copy()
    D = np.zeros(n)
    L = np.zeros(n)
    L_seen = np.zeros(n)
    R = np.zeros(n)
    dA = np.zeros(n)
    cum = np.zeros(4 * n)

    # loss history ring for the delayed-detection term
    max_delay = 0.0
    for k in range(n):
        if pd[k] > max_delay:
            max_delay = pd[k]
    if augmented:
        max_delay += B / C
    H = int(math.ceil(max_delay / dt)) + 2 if delayed else 1
    hist = np.zeros((H, n))

    serving = -1
    n_sw = 0
    n_rec = 0
    for step in range(n_steps + 1):
        _departures(A, Q, C, disc, tol_q, D)
        _losses(A, Q, D, B, C, tol_q, eps_b, L)
        q_sum = 0.0
        a_sum = 0.0
        for k in range(n):
            q_sum += Q[k]
            a_sum += A[k]
        saturated = q_sum >= B - eps_b and a_sum >= C
        if saturated:
            _pin_saturated_losses(A, Q, D, C, tol_q, L)

        if step % sample_every == 0:
            t_out[n_rec] = step * dt
            for k in range(n):
                A_out[n_rec, k] = A[k]
                Q_out[n_rec, k] = Q[k]
                D_out[n_rec, k] = D[k]
                L_out[n_rec, k] = L[k]
            for m in range(4 * n):
                cum_out[n_rec, m] = cum[m]
            n_rec += 1
        if step == n_steps:
            break

        # service-phase bookkeeping: a flow owns the link when D_k > C/2
        owner = -1
        for k in range(n):
            if D[k] > 0.5 * C:
                owner = k
        if owner >= 0 and owner != serving:
            if n_sw < sw_t.shape[0]:
                sw_t[n_sw] = step * dt
                sw_k[n_sw] = owner
                n_sw += 1
            serving = owner

        for k in range(n):
            R[k] = pd[k] + (Q[k] / C if augmented else 0.0)
        if delayed:
            slot = step % H
            for k in range(n):
                hist[slot, k] = L[k]
            for k in range(n):
                lag = int(round(R[k] / dt))
                if lag >= H:
                    lag = H - 1
                if step - lag < 0:
                    L_seen[k] = 0.0
                else:
                    L_seen[k] = hist[(step - lag) % H, k]
        else:
            for k in range(n):
                L_seen[k] = L[k]
        _rates_rhs(A, Q, D, L_seen, is_tcp, R, C, tol_q, dA)

        for k in range(n):
            cum[k] += A[k] * dt
            cum[n + k] += D[k] * dt
            cum[2 * n + k] += Q[k] * dt
            cum[3 * n + k] += L[k] * dt

        floor = 0.01 * C
        for k in range(n):
            step_a = dA[k] * dt
            # only the multiplicative decrease can be stiff
            if -step_a > max_rel_jump * max(A[k], floor):
                return -(step + 1), n_rec, n_sw
            Q[k] += (A[k] - D[k] - L[k]) * dt
            A[k] += step_a
            if A[k] < 0.0:
                A[k] = 0.0
            if Q[k] < 0.0:
                Q[k] = 0.0
        q_sum = 0.0
        for k in range(n):
            q_sum += Q[k]
        if q_sum > B or (saturated and q_sum > 0.0):
            # stay exactly on the full-buffer surface
            scale = B / q_sum
            for k in range(n):
                Q[k] *= scale
    return 0, n_rec, n_sw


# --- public single-step operations ---------------------------------------------

def _disc_code(discipline) -> int:
    return Discipline(discipline).code


def departure_rates(A, Q, C: float, discipline, B: float | None = None) -> np.ndarray:
    """Per-flow service rates under FQ, LQF or SQF.

    Work conserving: the rates sum to ``C`` whenever something is queued or
    the offered load reaches ``C``.  Queues within ``1e-9 * B`` of each
    other are treated as tied (``B`` defaults to the largest queue, or 1).
    """
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if A.shape != Q.shape or A.ndim != 1:
        raise ValueError(f"dimension mismatch: A{A.shape} vs Q{Q.shape}")
    if not C > 0:
        raise ValueError("capacity must be positive")
    if B is None:
        B = max(float(Q.sum()), 1.0)
    out = np.zeros_like(A)
    _departures(A, Q, float(C), _disc_code(discipline), TIE_RTOL * B, out)
    return out


def loss_rates(A, Q, D, B: float, C: float) -> np.ndarray:
    """Per-flow loss rates for a shared buffer with longest-queue drop.

    Zero unless the buffer is full.  A single longest queue absorbs the whole
    excess ``sum(A) - C``; a tie set loses ``(A_k - D_k)^+`` per member.
    """
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    D = np.asarray(D, dtype=float)
    out = np.zeros_like(A)
    _losses(A, Q, D, float(B), float(C), TIE_RTOL * B, SAT_RTOL * B, out)
    return out


@dataclass
class FluidState:
    t: float
    A: np.ndarray
    Q: np.ndarray
    loss_history: list = field(default_factory=list)  # (time, L vector) pairs

    def loss_at(self, when: float, n: int) -> np.ndarray:
        """Loss vector in force at time ``when``; zero before the history starts."""
        best = None
        for t, L in self.loss_history:
            if t <= when + 1e-15:
                best = L
            else:
                break
        return np.zeros(n) if best is None else np.asarray(best, dtype=float)


def rhs(state: FluidState, scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Time derivatives ``(dA/dt, dQ/dt)`` at ``state``.

    Delayed detection reads ``L_k(t - R_k)`` from ``state.loss_history``;
    missing history counts as zero loss.
    """
    A = np.asarray(state.A, dtype=float)
    Q = np.asarray(state.Q, dtype=float)
    C = scenario.capacity_pkts
    B = float(scenario.buffer_pkts)
    n = scenario.n_flows
    if A.shape != (n,) or Q.shape != (n,):
        raise ValueError("state does not match the scenario's flow count")
    D = np.zeros(n)
    L = np.zeros(n)
    _departures(A, Q, C, scenario.discipline.code, TIE_RTOL * B, D)
    _losses(A, Q, D, B, C, TIE_RTOL * B, SAT_RTOL * B, L)
    if Q.sum() >= B - SAT_RTOL * B and A.sum() >= C:
        _pin_saturated_losses(A, Q, D, C, TIE_RTOL * B, L)
    pd = np.array([f.propagation_rtt if f.is_tcp else 0.0 for f in scenario.flows])
    R = pd + (Q / C if scenario.rtt_mode is RttMode.QUEUE_AUGMENTED else 0.0)
    if scenario.detection_mode is DetectionMode.DELAYED:
        seen = np.array([state.loss_at(state.t - R[k], n)[k] for k in range(n)])
    else:
        seen = L
    is_tcp = np.array([f.is_tcp for f in scenario.flows])
    dA = np.zeros(n)
    _rates_rhs(A, Q, D, seen, is_tcp, np.where(is_tcp, R, 1.0), C, TIE_RTOL * B, dA)
    return dA, A - D - L


# --- trajectory ----------------------------------------------------------------

@dataclass
class Trajectory:
    """Sampled fluid solution.

    ``cumulative`` holds running integrals of A, D, Q, L (columns in that
    order, ``n`` each) at every sample, so time averages over any window are
    exact with respect to the integration grid.
    """

    scenario: Scenario
    dt: float
    sample_period: float
    t: np.ndarray
    A: np.ndarray
    Q: np.ndarray
    D: np.ndarray
    L: np.ndarray
    cumulative: np.ndarray
    switch_times: np.ndarray
    switch_flows: np.ndarray

    @property
    def n_flows(self) -> int:
        return self.A.shape[1]

    def first_saturation_index(self) -> int | None:
        B = self.scenario.buffer_pkts
        C = self.scenario.capacity_pkts
        full = (self.Q.sum(axis=1) >= B * (1 - SAT_RTOL)) & (self.A.sum(axis=1) > C)
        idx = np.flatnonzero(full)
        return int(idx[0]) if idx.size else None

    def to_csv(self, path: str | Path | None = None) -> str:
        n = self.n_flows
        header = ["t"] + [f"{p}{k + 1}" for p in "AQDL" for k in range(n)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for i in range(len(self.t)):
            row = [repr(float(self.t[i]))]
            for arr in (self.A, self.Q, self.D, self.L):
                row.extend(repr(float(v)) for v in arr[i])
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def default_step(scenario: Scenario) -> float:
    tcp = [f.propagation_rtt for f in scenario.flows if f.is_tcp]
    if not tcp:
        return MAX_STEP
    return min(min(tcp) / RTT_STEPS, MAX_STEP)


def simulate(scenario: Scenario, dt: float | None = None,
             sample_period: float = 1e-3) -> Trajectory:
    """Integrate the fluid model over ``[0, scenario.horizon]``."""
    dt = default_step(scenario) if dt is None else float(dt)
    if not dt > 0:
        raise ValueError("dt must be positive")
    sample_every = max(1, int(round(sample_period / dt)))
    n_steps = int(math.ceil(scenario.horizon / dt - 1e-9))
    n_rec = n_steps // sample_every + 1
    n = scenario.n_flows
    C = scenario.capacity_pkts
    B = float(scenario.buffer_pkts)

    is_tcp = np.array([f.is_tcp for f in scenario.flows])
    pd = np.array([f.propagation_rtt if f.is_tcp else 0.0 for f in scenario.flows])
    A0 = np.array([f.initial_rate if f.is_tcp else bits_to_packets(f.rate, scenario.packet_size)
                   for f in scenario.flows], dtype=float)
    Q0 = np.array([f.initial_queue for f in scenario.flows], dtype=float)

    t_out = np.zeros(n_rec)
    A_out = np.zeros((n_rec, n))
    Q_out = np.zeros((n_rec, n))
    D_out = np.zeros((n_rec, n))
    L_out = np.zeros((n_rec, n))
    cum_out = np.zeros((n_rec, 4 * n))
    sw_t = np.zeros(MAX_SWITCHES)
    sw_k = np.zeros(MAX_SWITCHES, dtype=np.int64)

    status, got, n_sw = _integrate(
        A0, Q0, is_tcp, pd, C, B, scenario.discipline.code,
        scenario.rtt_mode is RttMode.QUEUE_AUGMENTED,
        scenario.detection_mode is DetectionMode.DELAYED,
        dt, n_steps, sample_every, MAX_REL_JUMP,
        t_out, A_out, Q_out, D_out, L_out, cum_out, sw_t, sw_k,
    )
    if status < 0:
        step = -status - 1
        raise StepSizeError(
            f"step dt={dt:g}s cut a sending rate by more than "
            f"{MAX_REL_JUMP:.0%} at t={step * dt:.6g}s; use a smaller dt"
        )
    return Trajectory(
        scenario=scenario, dt=dt, sample_period=sample_every * dt,
        t=t_out[:got], A=A_out[:got], Q=Q_out[:got], D=D_out[:got], L=L_out[:got],
        cumulative=cum_out[:got], switch_times=sw_t[:n_sw].copy(),
        switch_flows=sw_k[:n_sw].copy(),
    )


def cycle_period(times: np.ndarray, flows: np.ndarray) -> float | None:
    """Mean time between successive starts of the same flow's service phase."""
    gaps = []
    for k in np.unique(flows):
        starts = times[flows == k]
        if starts.size >= 2:
            gaps.extend(np.diff(starts))
    if not gaps:
        return None
    return float(np.mean(gaps))


def summarize(traj: Trajectory, warmup: float) -> SteadyStateSummary:
    """Time averages of A, D, Q, L over ``[warmup, horizon]``."""
    t_end = float(traj.t[-1])
    if not t_end > warmup:
        raise ValueError(f"horizon {t_end:g}s must exceed warmup {warmup:g}s")
    i0 = int(np.searchsorted(traj.t, warmup - 1e-12))
    span = t_end - float(traj.t[i0])
    mean = (traj.cumulative[-1] - traj.cumulative[i0]) / span
    n = traj.n_flows
    s = traj.scenario
    period = None
    if s.discipline is Discipline.SQF:
        keep = traj.switch_times >= warmup
        period = cycle_period(traj.switch_times[keep], traj.switch_flows[keep])
    return SteadyStateSummary(
        discipline=s.discipline,
        capacity=s.capacity_pkts,
        buffer=float(s.buffer_pkts),
        sending_rate=mean[:n].tolist(),
        throughput=mean[n:2 * n].tolist(),
        mean_queue=mean[2 * n:3 * n].tolist(),
        loss_rate=mean[3 * n:].tolist(),
        source="fluid",
        cycle_period=period,
        packet_size=s.packet_size,
        notes=[f"rtt_mode={s.rtt_mode.value}", f"detection_mode={s.detection_mode.value}",
               f"dt={traj.dt:g}s", f"warmup={warmup:g}s"],
    )
