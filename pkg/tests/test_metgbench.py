import csv
import json
import math
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tasktrio import kernels
from tasktrio.metgbench import (
    CurvePoint,
    PhaseBreakdown,
    RunResult,
    SweepConfig,
    Unbracketed,
    UnstableCalibration,
    calibrate_spin,
    compute_metg,
    curve,
    emit_report,
    fit_through_origin,
    read_rows,
    run_bsp,
    run_filemake,
    run_graph,
    run_sweep,
    scaling_report,
)
from tasktrio.metgbench import calibrate as calmod
from tasktrio.metgbench import cli


def fake_run(sched="graph", w=1, d=1e-3, eff=0.5, rep=0, sync=0.0, error=""):
    """A run whose efficiency is exactly ``eff`` (ideal = d, one task)."""
    wall = d / eff if eff > 0 else 1.0
    return RunResult(sched, w, d, 1, w, rep, d, PhaseBreakdown(wall=wall, compute=d, sync=sync), error=error)


class TestCalibration:
    def test_requests_are_accurate(self):
        cal = calibrate_spin((0.0, 1e-3, 2e-3))
        assert 0.9e-3 <= cal.samples["0.001"] <= 1.1e-3
        assert cal.samples["0.002"] > cal.samples["0.001"] > cal.samples["0"]
        assert cal.overhead < 1e-4 and cal.stable
        assert json.loads(json.dumps(cal.to_dict()))["backend"] == kernels.BACKEND

    def test_wall_clock_oracle(self):
        t0 = time.monotonic()
        kernels.spin(1e-3, 10)
        assert 9e-3 <= time.monotonic() - t0 <= 11e-3

    def test_unstable_warns(self, monkeypatch):
        runs = iter([[1e-6] * 3, [1e-3, 2e-3, 4e-3]])
        monkeypatch.setattr(calmod, "measure_spin", lambda s, i, r: next(runs))
        with pytest.warns(UnstableCalibration):
            cal = calibrate_spin((0.0, 1e-3), repeats=3)
        assert not cal.stable and cal.overhead == 1e-6


class TestConfig:
    def test_defaults(self):
        assert SweepConfig("graph", [1], [0.0]).iterations_per_task == 256
        assert SweepConfig("bsp", [1], [0.0]).iterations_per_task == 1
        assert SweepConfig("filemake", [1], [0.0]).tasks_per_worker == 1024

    @pytest.mark.parametrize("kw", [
        dict(durations=[2e-3, 1e-3]), dict(durations=[1e-3, 1e-3]), dict(repeats=0),
        dict(workers=[]), dict(workers=[0]), dict(durations=[-1.0]),
    ])
    def test_invalid(self, kw):
        args = dict(scheduler="graph", workers=[1], durations=[1e-3])
        args.update(kw)
        with pytest.raises(ValueError):
            SweepConfig(**args)


class TestMetg:
    def test_interpolation(self):
        r = compute_metg([CurvePoint(1e-3, 0.4), CurvePoint(2e-3, 0.6)])
        assert math.isclose(r.metg_seconds, 1.5e-3) and not r.below and len(r.bracket) == 2

    def test_all_above_is_flagged(self):
        r = compute_metg([CurvePoint(1e-3, 0.7), CurvePoint(2e-3, 0.9)])
        assert r.below and r.metg_seconds == 1e-3

    def test_unbracketed(self):
        with pytest.raises(Unbracketed):
            compute_metg([CurvePoint(1e-3, 0.1), CurvePoint(2e-3, 0.3)])
        with pytest.raises(Unbracketed):
            compute_metg([CurvePoint(1e-3, 0.9)])

    @given(st.floats(1e-5, 1e-1))
    def test_closed_form_crossing(self, latency):
        """eff(d) = d / (d + l) crosses one half at d = l."""
        ds = [latency * 2 ** (k / 8) for k in range(-40, 41)]
        r = compute_metg([CurvePoint(d, d / (d + latency)) for d in ds])
        assert abs(r.metg_seconds - latency) <= 0.01 * latency

    def test_curve_averages_repeats_and_flags_super_ideal(self):
        pts = curve([fake_run(d=1e-3, eff=0.4), fake_run(d=1e-3, eff=0.6, rep=1), fake_run(d=2e-3, eff=1.2)])
        assert [round(p.efficiency, 9) for p in pts] == [0.5, 1.2]
        assert [p.super_ideal for p in pts] == [False, True]

    def test_failed_run_counts_as_zero(self):
        assert fake_run(error="boom").efficiency == 0.0


class TestScaling:
    def test_perfect_line(self):
        fit = fit_through_origin([1, 2, 4, 8], [0.1, 0.2, 0.4, 0.8])
        assert math.isclose(fit.slope, 0.1) and math.isclose(fit.r2, 1.0) and fit.monotonic

    def test_flat_series_scores_low(self):
        fit = fit_through_origin([1, 2, 4, 8], [1.0, 1.01, 0.99, 1.0])
        assert fit.r2 < 0.5

    def test_graph_slope_recovers_latency(self):
        """Synthetic law: a server issuing one task per l keeps W workers busy at d >= W l."""
        latency = 50e-6
        runs = []
        for w in (1, 2, 4, 8):
            for k in range(30):
                d = 5e-6 * 1.25**k
                runs.append(fake_run(w=w, d=d, eff=min(1.0, d / (w * latency * 2))))
        rep = scaling_report(runs)
        assert abs(rep.fit.slope - latency) < 0.05 * latency and rep.fit.r2 > 0.99 and rep.fit.monotonic

    def test_filemake_constant_and_bsp_sync(self):
        fm = [fake_run("filemake", w, d, eff=min(1.0, d / 0.1)) for w in (1, 2, 3) for d in (0.01, 0.04, 0.2)]
        rep = scaling_report(fm)
        assert rep.fit is None and rep.spread < 1e-9 and math.isclose(rep.mean, 0.04 + 0.16 / 6)
        bsp = [fake_run("bsp", w, 1e-3, 0.9, rep=i, sync=0.01 * (i + 1)) for w in (2, 4) for i in range(3)]
        rep = scaling_report(bsp)
        assert rep.sync[2] == {"mean": 0.02, "min": 0.01, "max": 0.03}

    def test_unbracketed_is_reported(self):
        rep = scaling_report([fake_run(d=d, eff=0.1) for d in (1e-3, 2e-3)])
        assert rep.metg[1] is None and "never reaches" in rep.notes[1]


class TestReport:
    def test_empty_is_header_only(self, tmp_path):
        emit_report([], str(tmp_path))
        with open(tmp_path / "results.csv") as f:
            assert len(list(csv.reader(f))) == 1
        assert json.loads((tmp_path / "metg.json").read_text())["schedulers"] == {}

    def test_round_trip(self, tmp_path):
        run = fake_run(w=3, d=2e-3, eff=0.25, sync=0.003)
        run.comm_per_task = 1.5e-4
        emit_report([run], str(tmp_path))
        (back,) = read_rows(str(tmp_path / "results.csv"))
        assert back == run
        assert math.isclose(back.efficiency, 0.25)

    def test_sweep_row_count(self, tmp_path):
        cfg = SweepConfig("bsp", [1, 2], [0.0, 1e-4, 2e-4], tasks_per_worker=2, repeats=2)
        results = run_sweep(cfg)
        meta = emit_report(results, str(tmp_path), config=cfg)
        with open(tmp_path / "results.csv") as f:
            assert len(list(csv.DictReader(f))) == 2 * 3 * 2
        assert meta["config"]["scheduler"] == "bsp"
        assert "sync W=2" in (tmp_path / "summary.txt").read_text()

    def test_failing_run_becomes_error_row(self, monkeypatch):
        from tasktrio.metgbench import report

        def boom(*a, **k):
            raise RuntimeError("no hub")

        monkeypatch.setattr(report, "run_graph", boom)
        (r,) = run_sweep(SweepConfig("graph", [1], [0.0], tasks_per_worker=1))
        assert "no hub" in r.error and r.efficiency == 0.0


class TestRunners:
    def test_graph_zero_work_is_all_overhead(self):
        r = run_graph(1, 0.0, 1, 32)
        assert not r.error and r.efficiency < 0.05
        assert r.phases.comm > r.phases.compute

    def test_graph_long_tasks_are_efficient(self):
        r = run_graph(1, 5e-3, 1, 20)
        assert not r.error and r.efficiency > 0.9
        ph = r.phases
        assert ph.attributed <= ph.wall * (1 + 1e-9) and ph.attributed >= 0.9 * ph.wall
        assert min(ph.spawn, ph.comm, ph.compute, ph.sync) >= 0 and ph.compute <= ph.wall

    def test_bsp_sync_tracks_injected_delay(self):
        r = run_bsp(3, 1e-3, 1, 4, delay=0.03)
        assert 0.027 <= r.phases.sync <= 0.036 and r.phases.comm == 0

    def test_filemake_spawn_is_per_task(self, tmp_path):
        r = run_filemake(2, 1e-3, 1, 2, root=str(tmp_path))
        assert not r.error and r.tasks == 4
        assert r.comm_per_task > 1e-3  # a shell and an interpreter per task
        assert r.phases.launch == 0 and r.efficiency < 0.5


def test_cli(tmp_path, capsys):
    rc = cli.main(["run", "--scheduler", "bsp", "--workers", "2", "--durations", "0,100us",
                   "--tasks-per-worker", "2", "--out", str(tmp_path)])
    assert rc == 0
    assert "bsp" in capsys.readouterr().out
    assert {p.name for p in tmp_path.iterdir()} == {"results.csv", "summary.txt", "metg.json"}
    assert cli.main(["run", "--scheduler", "bsp", "--workers", "2", "--durations", "1ms,0",
                     "--out", str(tmp_path)]) == 2
    assert cli.main(["calibrate"]) == 0
