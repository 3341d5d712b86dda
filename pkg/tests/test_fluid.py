import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowsched import fluid
from flowsched.core import Discipline, FlowSpec, RttMode, Scenario
from flowsched.fluid import (FluidState, StepSizeError, departure_rates, loss_rates, rhs,
                             simulate, summarize)


def waterfill(A, Q, C):
    """Reference GPS allocation: backlogged queues demand without bound."""
    n = len(A)
    out = [0.0] * n
    open_ = set(range(n))
    residual = C
    while open_:
        share = residual / len(open_)
        small = [k for k in open_ if Q[k] == 0 and A[k] < share]
        if not small:
            for k in open_:
                out[k] = share
            break
        for k in small:
            out[k] = A[k]
            residual -= A[k]
            open_.discard(k)
    return out


def priority(A, Q, C, longest):
    """Reference LQF/SQF: tie groups in priority order, empty groups pass what arrives."""
    out = [0.0] * len(A)
    residual = C
    for level in sorted(set(Q), reverse=longest):
        group = [k for k in range(len(A)) if Q[k] == level]
        a = sum(A[k] for k in group)
        give = min(residual, a) if level == 0 else residual
        for k in group:
            out[k] = give * A[k] / a if a > 0 else give / len(group)
        residual -= give
        if residual <= 0:
            break
    return out


def test_departure_examples():
    assert departure_rates([8, 8], [1, 1], 10, "fq") == pytest.approx([5, 5])
    assert departure_rates([3, 9], [0, 4], 10, "fq") == pytest.approx([3, 7])
    assert departure_rates([2, 7], [5, 3], 10, "lqf") == pytest.approx([10, 0])
    assert departure_rates([2, 7], [5, 3], 10, "sqf") == pytest.approx([0, 10])
    assert departure_rates([4, 6], [4, 4], 10, "sqf") == pytest.approx([4, 6])


def test_departure_dimension_mismatch():
    with pytest.raises(ValueError):
        departure_rates([1, 2], [1], 10, "fq")


rates = st.lists(st.floats(0, 50), min_size=1, max_size=5)


@st.composite
def states(draw):
    A = draw(rates)
    Q = draw(st.lists(st.sampled_from([0.0, 1.0, 2.0, 5.0, 7.5]), min_size=len(A), max_size=len(A)))
    return A, Q


@given(states(), st.sampled_from(list(Discipline)), st.floats(1, 60))
def test_work_conservation(state, disc, C):
    A, Q = state
    D = departure_rates(A, Q, C, disc, B=10.0)
    assert np.all(D >= -1e-12)
    if sum(Q) > 0 or sum(A) >= C:
        assert D.sum() == pytest.approx(C, rel=1e-9)
    else:
        assert D.sum() == pytest.approx(sum(A), rel=1e-9, abs=1e-12)
    for k in range(len(A)):
        if Q[k] == 0:
            assert D[k] <= A[k] + 1e-9


@given(states(), st.floats(1, 60))
def test_fq_matches_waterfilling_oracle(state, C):
    A, Q = state
    assert departure_rates(A, Q, C, "fq", B=10.0) == pytest.approx(waterfill(A, Q, C), abs=1e-9)


@given(states(), st.floats(1, 60), st.booleans())
def test_priority_matches_oracle(state, C, longest):
    A, Q = state
    got = departure_rates(A, Q, C, "lqf" if longest else "sqf", B=10.0)
    assert got == pytest.approx(priority(A, Q, C, longest), abs=1e-9)


@given(rates.filter(lambda a: len(a) >= 2), st.floats(1, 40))
def test_sqf_lqf_duality(A, C):
    """Reversing queue order swaps the roles of LQF and SQF."""
    Q = [float(i + 1) for i in range(len(A))]
    a = departure_rates(A, Q, C, "lqf", B=100.0)
    b = departure_rates(A, Q[::-1], C, "sqf", B=100.0)
    assert a == pytest.approx(b)


def test_loss_examples():
    B, C = 100.0, 10.0
    assert loss_rates([8, 6], [70, 30], [10, 0], B, C) == pytest.approx([4, 0])
    D = departure_rates([8, 6], [50, 50], C, "fq", B)
    assert loss_rates([8, 6], [50, 50], D, B, C) == pytest.approx([3, 1])
    assert loss_rates([8, 6], [25, 25], [5, 5], B, C) == pytest.approx([0, 0])


@given(states(), st.floats(1, 60))
def test_losses_only_when_full(state, C):
    A, Q = state
    B = sum(Q) + 1.0
    D = departure_rates(A, Q, C, "fq", B)
    assert np.all(loss_rates(A, Q, D, B, C) == 0)


def _two(disc="fq", r=(0.02, 0.05), B=150e3, H=60, **kw):
    return Scenario(capacity=10e6, buffer=B, flows=tuple(FlowSpec.tcp(x) for x in r),
                    discipline=disc, horizon=H, **kw)


def test_rhs_examples():
    s = _two()
    dA, dQ = rhs(FluidState(0.0, np.zeros(2), np.zeros(2)), s)
    assert dA == pytest.approx([2500.0, 400.0])
    assert dQ == pytest.approx([0.0, 0.0])
    C = s.capacity_pkts
    B = s.buffer_pkts
    # SQF, flow 1 alone in service, buffer full, flow 2 longest and losing
    s = _two("sqf")
    A = np.array([300.0, 900.0])
    dA, _ = rhs(FluidState(1.0, A, np.array([30.0, B - 30.0])), s)
    assert dA[0] == pytest.approx(2500.0)
    assert dA[1] == pytest.approx(-0.5 * 900.0 * (A.sum() - C))


def test_rhs_udp_constant():
    s = Scenario(capacity=10e6, buffer=150e3, flows=(FlowSpec.tcp(0.02), FlowSpec.udp(3e6)))
    dA, _ = rhs(FluidState(0.0, np.array([0.0, 250.0]), np.zeros(2)), s)
    assert dA[1] == 0.0


def test_invariants_along_trajectory():
    for disc in Discipline:
        tr = simulate(_two(disc, H=20))
        B = tr.scenario.buffer_pkts
        C = tr.scenario.capacity_pkts
        assert np.all(np.diff(tr.t) > 0)
        assert np.all(tr.A >= 0) and np.all(tr.Q >= 0)
        assert np.all(tr.Q.sum(axis=1) <= B * (1 + 1e-9))
        busy = tr.Q.max(axis=1) > fluid.TIE_RTOL * B  # below that a queue counts as empty
        assert np.allclose(tr.D[busy].sum(axis=1), C, rtol=1e-9)
        i0 = tr.first_saturation_index()
        assert i0 is not None
        assert np.all(np.abs(tr.Q[i0:].sum(axis=1) - B) <= 1e-6 * B)


def test_determinism():
    a = simulate(_two("sqf", H=5))
    b = simulate(_two("sqf", H=5))
    assert np.array_equal(a.A, b.A) and np.array_equal(a.Q, b.Q)
    assert a.to_csv() == b.to_csv()


@pytest.mark.parametrize("disc", ["fq", "lqf"])
def test_step_halving_converges(disc):
    s = _two(disc, H=30)
    coarse = summarize(simulate(s), 10)
    fine = summarize(simulate(s, dt=fluid.default_step(s) / 2), 10)
    for attr in ("sending_rate", "throughput", "mean_queue"):
        a, b = np.array(getattr(coarse, attr)), np.array(getattr(fine, attr))
        assert np.all(np.abs(a - b) <= 0.005 * np.maximum(np.abs(b), 1e-9) + 1e-9), attr


def test_step_halving_sqf_cycle():
    s = Scenario(capacity=2e6, buffer=150e3, flows=(FlowSpec.tcp(0.02), FlowSpec.tcp(0.05)),
                 discipline="sqf", horizon=20)
    coarse = summarize(simulate(s), 5)
    fine = summarize(simulate(s, dt=fluid.default_step(s) / 2), 5)
    assert coarse.throughput == pytest.approx(fine.throughput, rel=0.005)
    assert coarse.cycle_period == pytest.approx(fine.cycle_period, rel=0.005)


def test_single_flow_fills_link():
    s = Scenario(capacity=10e6, buffer=150e3, flows=(FlowSpec.tcp(0.02),), horizon=30)
    summary = summarize(simulate(s), 10)
    assert summary.utilization == pytest.approx(1.0, abs=1e-3)
    # instantaneous detection settles on 1/R^2 = (A/2)(A - C)
    C = s.capacity_pkts
    assert summary.sending_rate[0] == pytest.approx(C / 2 + np.sqrt(C * C / 4 + 2 * 2500.0), rel=1e-6)


def test_single_flow_delayed_detection_oscillates():
    s = Scenario(capacity=10e6, buffer=150e3, flows=(FlowSpec.tcp(0.02),), horizon=30,
                 detection_mode="delayed")
    tr = simulate(s)
    late = tr.A[tr.t > 10, 0]
    assert late.max() > 2 * late.min()
    assert summarize(tr, 10).utilization > 0.85


def test_identical_flows_fq_split_evenly():
    summary = summarize(simulate(_two("fq", r=(0.03, 0.03), H=30)), 10)
    C, B = summary.capacity, summary.buffer
    assert summary.throughput == pytest.approx([C / 2, C / 2], rel=1e-6)
    assert summary.mean_queue == pytest.approx([B / 2, B / 2], rel=1e-3)


def test_sqf_symmetric_period():
    # a small initial queue breaks the symmetry; identical starts stay tied forever
    s = Scenario(capacity=10e6, buffer=3e6, discipline="sqf", horizon=20,
                 flows=(FlowSpec.tcp(0.02, initial_queue=1.0), FlowSpec.tcp(0.02)))
    summary = summarize(simulate(s), 5)
    alpha = 2500.0
    assert summary.cycle_period == pytest.approx(4 * s.capacity_pkts / alpha, rel=0.02)


def test_sqf_phases_alternate():
    tr = simulate(Scenario(capacity=10e6, buffer=150e3, discipline="sqf", horizon=10,
                           flows=(FlowSpec.tcp(0.002), FlowSpec.tcp(0.006))))
    late = tr.switch_flows[tr.switch_times > 2]
    assert late.size > 10 and set(late.tolist()) == {0, 1}
    assert np.all(late[1:] != late[:-1])
    B = tr.scenario.buffer_pkts
    i0 = tr.first_saturation_index()
    assert np.allclose(tr.Q[i0:, 0] - B / 2, -(tr.Q[i0:, 1] - B / 2), atol=1e-6 * B)


def test_queue_augmented_runs():
    summary = summarize(simulate(_two("lqf", H=20, rtt_mode=RttMode.QUEUE_AUGMENTED)), 5)
    assert summary.utilization == pytest.approx(1.0, abs=1e-3)


def test_summarize_rejects_short_horizon():
    tr = simulate(_two(H=2))
    with pytest.raises(ValueError):
        summarize(tr, 5)


def test_step_size_guard():
    with pytest.raises(StepSizeError):
        simulate(_two("fq", H=5), dt=5e-3)


def test_trajectory_csv_header():
    text = simulate(_two(H=0.01)).to_csv()
    assert text.splitlines()[0] == "t,A1,A2,Q1,Q2,D1,D2,L1,L2"
