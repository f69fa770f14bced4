"""Acceptance gate: nine criteria at their stated tolerances.

Each test records one ``PASS``/``FAIL`` line in ``RESULTS``; ``conftest.py``
prints them at the end of the session.  Running this file as a script prints
the same lines without pytest.
"""

import json
import time

import numpy as np
import pytest
from scipy.optimize import linprog

from gridsleuth.cli import main as cli_main
from gridsleuth.events import DetectorState, calibrate_threshold, detect, localize, residual, turning_point_test
from gridsleuth.feeder import FIXTURE_TRIP_LINE, apply_line_trip, assemble_ybus, ieee13
from gridsleuth.ident import identify, relative_errors
from gridsleuth.loads import HouseholdModel, aggregate, demand_matrix, table1_allocation
from gridsleuth.numerics import BasisPursuitProblem, basis_pursuit, l1_norm
from gridsleuth.simulator import ScenarioEvent, power_mismatch_pu, run_scenario, window
from support import fixture_snapshots, full_rank_window, random_radial_feeder

RESULTS: dict = {}


def record(n: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


@pytest.fixture(scope="module")
def fixture_estimate():
    """Noiseless K=500 fixture identification, shared by criteria 2 and 3."""
    w = window(fixture_snapshots(500), 1, 500)
    t0 = time.perf_counter()
    model = identify(w)
    elapsed = time.perf_counter() - t0
    Y = assemble_ybus(ieee13()).Y
    ind = list(model.partition.ind_rows)
    Y22 = Y[np.ix_(ind, ind)]
    return model, Y22, elapsed


def test_criterion_1_full_rank_round_trip():
    worst, t0 = 0.0, time.perf_counter()
    for seed in range(20):
        f, alloc = random_radial_feeder(seed)
        w = full_rank_window(f, alloc, K=4 * f.D, seed=seed)
        m = identify(w)
        assert m.partition.full_rank, f"seed {seed}: window is not full rank"
        worst = max(worst, float(relative_errors(m.full_matrix(), assemble_ybus(f).Y).max()))
    elapsed = time.perf_counter() - t0
    record(1, "noiseless full-rank round trip", worst <= 1e-6 and elapsed <= 10.0,
           f"20 feeders, max relative error {worst:.2e} (limit 1e-6), {elapsed:.1f} s (limit 10 s)")


def test_criterion_2_low_rank_accuracy(fixture_estimate):
    model, Y22, elapsed = fixture_estimate
    rel = relative_errors(model.Y22, Y22)
    within = float(np.mean(rel <= 0.015))
    i, j = np.unravel_index(np.argmax(rel), rel.shape)
    record(2, "low-rank Y22 accuracy", rel.max() <= 0.015 and elapsed <= 60.0,
           f"rank {model.partition.R}/{model.partition.D}, max relative error {rel.max():.3g} "
           f"at ({i},{j}) (limit 0.015), {100 * within:.1f}% of entries within, {elapsed:.1f} s")


def test_criterion_3_error_grid(fixture_estimate):
    model, Y22, _ = fixture_estimate
    grid = np.abs(Y22 - model.Y22)
    ratio = relative_errors(model.Y22, Y22)
    worst = float(ratio.max())
    # 0.004 is the target; 0.015 is the documented relaxation
    record(3, "absolute error grid vs |Y22|", worst <= 0.015,
           f"max |dY22|/|Y22| {worst:.3g} (target 0.004, relaxed limit 0.015), "
           f"max |dY22| {grid.max():.3g} S")


def test_criterion_4_same_slot_detection():
    f, alloc = ieee13(), table1_allocation()
    Y0 = assemble_ybus(f).Y
    ev = [ScenarioEvent(50, "line_trip", FIXTURE_TRIP_LINE)]
    slots = []
    for seed in range(10):
        hh = HouseholdModel(seed=seed)
        state = DetectorState(Y0, 1.0)
        calib = [residual(state, s)[1]
                 for s in run_scenario(f, alloc, K=1000, household=HouseholdModel(seed=1000 + seed))]
        state = DetectorState(Y0, calibrate_threshold(calib, 0.01))
        alarms = [a.slot for s in run_scenario(f, alloc, events=ev, K=60, household=hh)
                  if (a := detect(state, s))]
        slots.append(alarms)
    hits = sum(a == [50] for a in slots)
    state = DetectorState(Y0, calibrate_threshold(np.zeros(1000), 0.01))
    false = sum(detect(state, s) is not None
                for s in run_scenario(f, alloc, K=10_000, household=HouseholdModel(seed=77)))
    record(4, "same-slot detection", hits == 10 and false == 0,
           f"alarmed exactly at slot 50 in {hits}/10 runs, {false} false alarms over 10000 slots")


def test_criterion_5_localization():
    f, alloc = ieee13(), table1_allocation()
    yb = assemble_ybus(f)
    true = assemble_ybus(apply_line_trip(f, FIXTURE_TRIP_LINE)).Y - yb.Y
    ev = [ScenarioEvent(50, "line_trip", FIXTURE_TRIP_LINE)]
    ok_runs, worst, worst_raw, slowest = 0, 0.0, 0.0, 0.0
    for seed in range(10):
        snaps = list(run_scenario(f, alloc, events=ev, K=59, household=HouseholdModel(seed=seed)))
        w = window(snaps, 50, 10)
        t0 = time.perf_counter()
        rec = localize(yb, w, yb.block_index, feeder=f)
        slowest = max(slowest, time.perf_counter() - t0)
        raw = localize(yb, w, yb.block_index, feeder=f, complete=False)
        err = np.linalg.norm(rec.delta_Y - true) / np.linalg.norm(true)
        worst = max(worst, err)
        worst_raw = max(worst_raw, np.linalg.norm(raw.delta_Y - true) / np.linalg.norm(true))
        top = rec.changed_blocks[0]
        ok_runs += ({top.bus_m, top.bus_n} <= {"684", "611"} and rec.classification == "line_trip"
                    and rec.line_ids == (FIXTURE_TRIP_LINE,) and err <= 0.05)
    record(5, "localization", ok_runs == 10 and slowest <= 30.0,
           f"{ok_runs}/10 runs correct, worst relative Frobenius error {worst:.2e} (limit 0.05; "
           f"{worst_raw:.2e} before filling unobservable dead-node entries), "
           f"slowest {slowest:.1f} s (limit 30 s)")


def test_criterion_6_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        m = int(rng.integers(4, 13))
        n = int(rng.integers(m + 1, 41))
        k = int(rng.integers(1, 5))
        A = rng.standard_normal((m, n))
        x0 = np.zeros(n)
        x0[rng.choice(n, k, replace=False)] = rng.standard_normal(k)
        b = A @ x0
        lp = linprog(np.ones(2 * n), A_eq=np.hstack([A, -A]), b_eq=b, bounds=(0, None),
                     method="highs")
        assert lp.status == 0
        worst = max(worst, abs(l1_norm(basis_pursuit(BasisPursuitProblem(A, b))) - lp.fun))
    record(6, "basis pursuit vs linear-program oracle", worst <= 1e-6,
           f"50 instances (m<=12, n<=40, sparsity<=4), max l1 objective gap {worst:.2e} (limit 1e-6)")


def test_criterion_7_turning_point_calibration():
    passes = sum(turning_point_test(np.random.default_rng(s).standard_normal(1000), 0.05).passed
                 for s in range(100))
    degenerate = [np.arange(n, dtype=float) for n in (20, 100, 1000)]
    degenerate += [-np.arange(1000.0), np.tile([0.0, 1.0], 500), np.tile([1.0, -1.0], 10)]
    all_fail = not any(turning_point_test(x, 0.05).passed for x in degenerate)
    record(7, "turning-point calibration", passes >= 90 and all_fail,
           f"white-noise pass rate {passes}/100 (limit >= 90), "
           f"monotone and alternating series {'all fail' if all_fail else 'NOT all fail'}")


def test_criterion_8_power_flow_fidelity():
    f, alloc = ieee13(), table1_allocation()
    hh = HouseholdModel(seed=8)
    Y = assemble_ybus(f).Y
    S = demand_matrix(aggregate(alloc, hh, K=1000), alloc, f)
    i_base = f.base_power / f.base_voltage
    ohm, mis = 0.0, 0.0
    for k, s in enumerate(run_scenario(f, alloc, K=1000, household=hh)):
        ohm = max(ohm, float(np.max(np.abs(s.I - Y @ s.V))) / i_base)
        mis = max(mis, power_mismatch_pu(f, s, S[:, k]))
    record(8, "power-flow fidelity", ohm <= 1e-8 and mis <= 1e-6,
           f"1000 slots, max |I - YV| {ohm:.2e} pu (limit 1e-8), max power mismatch {mis:.2e} pu "
           "(limit 1e-6)")


DETERMINISM_CONFIGS = {
    "noiseless_trip": {"K_total": 70, "events": [{"slot": 50, "kind": "line_trip",
                                                  "target": FIXTURE_TRIP_LINE}]},
    "noisy_trip": {"K_total": 70, "noise": {"magnitude_std": 1e-3, "angle_std": 1e-3},
                   "seeds": {"households": 5, "noise": 6, "slack": 7},
                   "events": [{"slot": 40, "kind": "line_trip", "target": "L632_645"}]},
    "slack_variation": {"K_total": 40, "slack_variation": 0.01,
                        "noise": {"magnitude_std": 1e-4, "angle_std": 0.0}},
}


def test_criterion_9_determinism(tmp_path):
    differing = []
    for name, doc in DETERMINISM_CONFIGS.items():
        cfg = tmp_path / f"{name}.json"
        cfg.write_text(json.dumps({"version": 1, **doc}))
        outs = []
        for run in ("a", "b"):
            out = tmp_path / name / run
            assert cli_main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
            cli_main(["monitor", "--config", str(cfg), "--out", str(out)])
            outs.append(out)
        for fname in ("stream.gsph", "stream.csv", "alarms.csv"):
            if (outs[0] / fname).read_bytes() != (outs[1] / fname).read_bytes():
                differing.append(f"{name}/{fname}")
    record(9, "determinism", not differing,
           f"{len(DETERMINISM_CONFIGS)} configs run twice; "
           + ("replay files and alarm logs byte-identical" if not differing
              else f"differing: {', '.join(differing)}"))


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
