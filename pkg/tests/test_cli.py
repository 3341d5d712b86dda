import csv
import io
import json
from pathlib import Path

import pytest

from flowsched.cli import SWEEP_HEADER, main, relative_deviation, sweep_values

SCEN = Path(__file__).resolve().parents[1] / "scenarios"


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_analytic_table(capsys, tmp_path):
    assert main(["analytic", "--scenario", str(SCEN / "tcp_udp_fq_7.cfg"), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    loss_row = next(l for l in out.splitlines() if l.startswith("L"))
    assert "2.00" in loss_row
    doc = json.loads((tmp_path / "analytic.json").read_text())
    assert doc["flows"][1]["loss_rate_mbps"] == pytest.approx(2.0)


def test_bad_scenario_exits_nonzero(tmp_path, capsys):
    cfg = tmp_path / "empty.cfg"
    cfg.write_text("capacity_mbps = 10\nbuffer_kb = 150\n")
    assert main(["analytic", "--scenario", str(cfg)]) == 2
    assert main(["analytic", "--scenario", str(tmp_path / "missing.cfg")]) == 2
    assert capsys.readouterr().err


def test_packet_seed_is_reproducible(tmp_path):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        argv = ["packet", "--scenario", str(SCEN / "tcp_udp_sqf_3.cfg"), "--seed", "1",
                "--set", "horizon_s=4", "--out", str(d)]
        assert main(argv) == 0
        outs.append(((d / "packet.json").read_bytes(), (d / "trace.csv").read_bytes()))
    assert outs[0] == outs[1]


def test_compare_fq_passes_and_zero_tolerance_fails(tmp_path, capsys):
    base = ["compare", "--scenario", str(SCEN / "two_flow_fq.cfg"), "--set", "horizon_s=30"]
    assert main(base + ["--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "compare.json").read_text())
    assert doc["passed"] is True
    assert main(base + ["--tol", "0"]) == 1
    capsys.readouterr()


def test_sweep_empty_range(capsys):
    argv = ["sweep", "--scenario", str(SCEN / "two_flow_lqf.cfg"), "--param", "flow2.rtt_ms",
            "--from", "50", "--to", "100", "--steps", "0"]
    assert main(argv) == 0
    assert capsys.readouterr().out == ",".join(SWEEP_HEADER) + "\n"


def test_sweep_lqf_favours_short_flow_more_as_other_lengthens(capsys):
    argv = ["sweep", "--scenario", str(SCEN / "two_flow_lqf.cfg"), "--param", "flow2.rtt_ms",
            "--from", "30", "--to", "120", "--steps", "4"]
    assert main(argv) == 0
    x1 = [float(r["throughput_mbps"]) for r in _rows(capsys.readouterr().out) if r["flow"] == "1"]
    assert len(x1) == 4 and x1 == sorted(x1) and x1[0] < x1[-1]


def test_sweep_fq_udp_loss_piecewise_linear(tmp_path):
    argv = ["sweep", "--scenario", str(SCEN / "tcp_udp_fq_3.cfg"), "--param", "flow2.rate_mbps",
            "--from", "1", "--to", "9", "--steps", "9", "--out", str(tmp_path)]
    assert main(argv) == 0
    rows = [r for r in _rows((tmp_path / "sweep.csv").read_text()) if r["flow"] == "2"]
    for r in rows:
        x = float(r["value"])
        assert float(r["loss_rate_mbps"]) == pytest.approx(max(0.0, x - 5.0), abs=1e-9)


def test_set_override_applies(capsys):
    argv = ["analytic", "--scenario", str(SCEN / "tcp_udp_fq_7.cfg"), "--set", "flow2.rate_mbps=8"]
    assert main(argv) == 0
    loss_row = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("L"))
    assert "3.00" in loss_row


def test_sweep_values_and_deviation():
    assert sweep_values(1, 2, 0) == []
    assert sweep_values(1, 2, 1) == [1]
    assert sweep_values(0, 1, 3) == [0.0, 0.5, 1.0]
    assert relative_deviation(10.0, 10.0, 1.0) == 0.0
    assert relative_deviation(0.0, 0.0, 1.0) == 0.0


def test_fluid_on_empty_flows_fails(tmp_path, capsys):
    cfg = tmp_path / "empty.cfg"
    cfg.write_text("capacity_mbps = 10\nbuffer_kb = 150\n")
    assert main(["fluid", "--scenario", str(cfg)]) != 0
    assert "error" in capsys.readouterr().err


def test_manifest_checks(tmp_path):
    from types import SimpleNamespace
    from flowsched.cli import CliError, RunManifest
    args = SimpleNamespace(scenario=str(SCEN / "two_flow_fq.cfg"), command="fluid",
                           out=str(tmp_path / "new" / "dir"), set=["flow1.rtt_ms=30"], seed=4)
    m = RunManifest.from_args(args)
    assert m.overrides == {"flow1.rtt_ms": "30", "seed": "4"}
    s = m.load()
    assert (tmp_path / "new" / "dir").is_dir()
    assert s.seed == 4 and s.flows[0].propagation_rtt == pytest.approx(0.03)
    with pytest.raises(CliError):
        RunManifest(tmp_path / "nope.cfg", "fluid").validate()


def test_compare_sqf_udp_has_no_udp_loss(tmp_path):
    argv = ["compare", "--scenario", str(SCEN / "tcp_udp_sqf_3.cfg"), "--set", "horizon_s=20",
            "--out", str(tmp_path)]
    main(argv)
    doc = json.loads((tmp_path / "compare.json").read_text())
    for engine in ("analytic", "fluid", "packet"):
        assert doc["engines"][engine]["flows"][1]["loss_rate_mbps"] == pytest.approx(0.0, abs=0.05)


def test_sweep_lqf_rtt2_wide_range(capsys):
    argv = ["sweep", "--scenario", str(SCEN / "two_flow_lqf.cfg"), "--param", "flow2.rtt_ms",
            "--from", "10", "--to", "200", "--steps", "6", "--jobs", "2"]
    assert main(argv) == 0
    rows = _rows(capsys.readouterr().out)
    x1 = [float(r["throughput_mbps"]) for r in rows if r["flow"] == "1"]
    assert [float(r["value"]) for r in rows if r["flow"] == "1"] == [10, 48, 86, 124, 162, 200]
    assert all(b > a for a, b in zip(x1, x1[1:]))
