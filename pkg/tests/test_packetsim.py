import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowsched.core import FlowSpec, Scenario
from flowsched.metrics import jain_index
from flowsched.packetsim import (DeficitRoundRobin, TcpSource, lqd_admit, run_packet_sim,
                                 scheduler_select, tcp_on_ack, tcp_on_loss)


def test_sqf_picks_shortest_nonempty():
    assert scheduler_select([5, 3, 0], "sqf") == 1


def test_lqf_ties_go_to_lowest_index():
    assert scheduler_select([4, 4], "lqf") == 0
    assert scheduler_select([1, 4, 4], "lqf") == 1


def test_sqf_ties_rotate_with_state():
    rr = DeficitRoundRobin(2)
    assert [scheduler_select([3, 3], "sqf", rr) for _ in range(4)] == [0, 1, 0, 1]
    assert scheduler_select([3, 3], "sqf") == 0


def test_fq_alternates_between_backlogged_queues():
    rr = DeficitRoundRobin(3)
    picks = [scheduler_select([5, 0, 5], "fq", rr) for _ in range(6)]
    assert picks == [0, 2, 0, 2, 0, 2]


def test_fq_requires_state_and_empty_raises():
    with pytest.raises(ValueError):
        scheduler_select([1, 1], "fq")
    with pytest.raises(RuntimeError):
        scheduler_select([0, 0], "lqf")


def test_lqd_examples():
    qs = [[1, 2, 3], [4]]
    assert lqd_admit(qs, 5, 1, 5).outcome == "enqueued"
    adm = lqd_admit(qs, 5, 1, 6)
    assert adm.outcome == "pushed_out" and adm.victim == 0 and adm.victim_packet == 3
    assert qs == [[1, 2], [4, 5, 6]]
    # arrival to the (now) longest queue is dropped
    adm = lqd_admit(qs, 5, 1, 7)
    assert adm.outcome == "dropped" and qs == [[1, 2], [4, 5, 6]]


@given(st.integers(1, 20), st.lists(st.integers(0, 3), max_size=200))
def test_lqd_never_overfills(capacity, arrivals):
    qs = [[] for _ in range(4)]
    for i, k in enumerate(arrivals):
        before = [len(q) for q in qs]
        adm = lqd_admit(qs, capacity, k, i)
        assert sum(len(q) for q in qs) <= capacity
        if adm.outcome == "pushed_out":
            # the victim was a strictly longer queue than the arrival's
            assert before[adm.victim] > before[k]


def test_tcp_additive_increase():
    s = TcpSource(rtt=0.02, cwnd=10.0)
    tcp_on_ack(s)
    assert s.cwnd == pytest.approx(10.1)


def test_tcp_one_halving_per_rtt():
    s = TcpSource(rtt=0.02, cwnd=10.0)
    assert tcp_on_loss(s, 1.000)
    assert not tcp_on_loss(s, 1.001)
    assert s.cwnd == 5.0
    assert tcp_on_loss(s, 1.021) and s.cwnd == 2.5


def test_tcp_window_floor():
    s = TcpSource(rtt=0.02, cwnd=1.5)
    s.on_loss(0.0)
    assert s.cwnd == 1.0


def _scenario(disc="fq", flows=None, horizon=6.0, seed=1, **kw):
    flows = flows or (FlowSpec.tcp(0.02), FlowSpec.tcp(0.05))
    return Scenario(capacity=10e6, buffer=150e3, flows=tuple(flows), discipline=disc,
                    horizon=horizon, seed=seed, **kw)


@pytest.mark.parametrize("disc", ["fq", "lqf", "sqf"])
def test_packet_conservation(disc):
    r = run_packet_sim(_scenario(disc, flows=(FlowSpec.tcp(0.02), FlowSpec.udp(7e6))))
    assert np.array_equal(r.sent, r.delivered + r.dropped + r.in_queue + r.in_flight)
    assert np.all(r.delivered_measured <= r.sent_measured + r.in_queue.sum() + 1)
    assert r.throughput.sum() <= r.scenario.capacity_pkts * (1 + 1e-9) + 1 / r.interval


def test_packet_runs_are_deterministic():
    s = _scenario("sqf", flows=(FlowSpec.tcp(0.02), FlowSpec.udp(3e6)), seed=7)
    assert run_packet_sim(s).to_json() == run_packet_sim(s).to_json()


def test_lone_udp_below_capacity_is_lossless():
    s = _scenario(flows=(FlowSpec.udp(5e6),), horizon=4.0)
    r = run_packet_sim(s, warmup=1.0)
    assert r.dropped.sum() == 0
    assert r.throughput[0] == pytest.approx(s.capacity_pkts / 2, rel=0.01)


def test_fq_shares_equally():
    r = run_packet_sim(_scenario("fq", horizon=20.0))
    assert jain_index(r.throughput) > 0.98
    assert r.utilization > 0.97


def test_report_exports():
    r = run_packet_sim(_scenario(horizon=3.0), warmup=1.0, sample_period=0.1)
    doc = r.to_dict()
    assert doc["flows"][0]["packets"]["sent"] == int(r.sent[0])
    assert 0 < doc["flows"][0]["goodput_ratio"] <= 1
    lines = r.trace_csv().splitlines()
    assert lines[0] == "t,flow,rate_pkts"
    assert len(lines) == 1 + 2 * r.trace.n_windows


def test_bad_warmup():
    with pytest.raises(ValueError):
        run_packet_sim(_scenario(horizon=2.0), warmup=2.0)
