"""Residual detection, threshold calibration, whiteness, localization, classification."""

import dataclasses
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from gridsleuth.errors import InsufficientDataError, InvalidArgumentError
from gridsleuth.events import (
    ChangedBlock,
    DetectorState,
    EventRecord,
    HistoryEntry,
    calibrate_threshold,
    changed_blocks,
    classify,
    detect,
    localize,
    read_alarm_log,
    residual,
    turning_point_test,
    write_alarm_log,
)
from gridsleuth.feeder import (
    FIXTURE_TRIP_LINE,
    LineSegment,
    apply_line_trip,
    assemble_ybus,
    ieee13,
    restore_line,
    set_shunt,
)
from gridsleuth.loads import HouseholdModel, table1_allocation
from gridsleuth.simulator import PhasorSnapshot, ScenarioEvent, run_scenario, window
from support import fixture_snapshots

TRIP_EVENT = ((50, "line_trip", FIXTURE_TRIP_LINE),)


def snap(slot, V, I):
    return PhasorSnapshot(slot, np.asarray(V, complex), np.asarray(I, complex))


@pytest.fixture(scope="module")
def fixture_ybus():
    return assemble_ybus(ieee13())


class TestResidual:
    Y0 = np.array([[2.0, -1.0], [-1.0, 2.0]])

    def test_consistent_snapshot(self):
        e, n = residual(DetectorState(self.Y0, 1.0), snap(1, [1, 1], [1, 1]))
        np.testing.assert_array_equal(e, 0)
        assert n == 0.0

    def test_known_error(self):
        e, n = residual(DetectorState(self.Y0, 1.0), snap(1, [1, 1], [2, 1]))
        np.testing.assert_array_equal(e, [1, 0])
        assert n == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            residual(DetectorState(self.Y0, 1.0), snap(1, [1, 1, 1], [1, 1, 1]))

    def test_bad_gamma(self):
        with pytest.raises(InvalidArgumentError):
            DetectorState(self.Y0, 0.0)


class TestDetect:
    def test_alarm_disarms_then_rebase(self):
        st_ = DetectorState(np.eye(2), 0.5)
        bad = snap(3, [1, 0], [2, 0])
        a = detect(st_, bad)
        assert a is not None and a.slot == 3 and a.residual_norm == 1.0
        assert detect(st_, snap(4, [1, 0], [2, 0])) is None
        assert [h.alarmed for h in st_.history] == [True, False]
        dY = np.diag([1.0, 0.0])
        st_.rebase(EventRecord(3, dY, [], "unknown", 10))
        assert st_.armed
        assert detect(st_, snap(5, [1, 0], [2, 0])) is None

    def test_history_bounded(self):
        st_ = DetectorState(np.eye(1), 1.0, history_window=5)
        for k in range(12):
            detect(st_, snap(k + 1, [1], [1]))
        assert [h.slot for h in st_.history] == list(range(8, 13))

    def test_no_false_alarms_noiseless(self, fixture_ybus):
        st_ = DetectorState(fixture_ybus, calibrate_threshold(np.zeros(1000), 0.01))
        for s in run_scenario(ieee13(), table1_allocation(), K=2000,
                              household=HouseholdModel(seed=21)):
            assert detect(st_, s) is None

    def test_trip_alarms_same_slot(self, fixture_ybus):
        st_ = DetectorState(fixture_ybus, calibrate_threshold(np.zeros(1000), 0.01))
        alarms = [a for s in fixture_snapshots(60, 1, TRIP_EVENT) if (a := detect(st_, s))]
        assert [a.slot for a in alarms] == [50]

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=1, max_size=40),
           st.floats(0.01, 10), st.floats(0.01, 10))
    def test_first_alarm_monotone_in_gamma(self, norms, g1, g2):
        lo, hi = sorted((g1, g2))

        def first(gamma):
            st_ = DetectorState(np.eye(1), gamma)
            for k, n in enumerate(norms):
                if detect(st_, snap(k + 1, [1], [1 + n])):
                    return k
            return math.inf

        assert first(lo) <= first(hi)


class TestCalibrate:
    def test_constant(self):
        assert calibrate_threshold(np.full(1000, 2.0), 0.01) == pytest.approx(3.0)

    def test_floor_on_zero_residuals(self):
        assert calibrate_threshold(np.zeros(1000), 0.05, floor=1e-6) == 1e-6

    def test_half_normal_quantile(self):
        x = np.abs(np.random.default_rng(0).standard_normal(200_000))
        q = stats.norm.ppf(0.995)
        assert abs(calibrate_threshold(x, 0.01, safety_factor=1.0) - q) <= 0.05 * q

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1])
    def test_alpha_range(self, alpha):
        with pytest.raises(InvalidArgumentError):
            calibrate_threshold(np.ones(1000), alpha)

    def test_too_few(self):
        with pytest.raises(InsufficientDataError):
            calibrate_threshold(np.ones(999), 0.01)


class TestTurningPoints:
    def test_monotone_fails(self):
        r = turning_point_test(np.arange(100.0))
        assert r.turning_points == 0 and not r.passed

    def test_alternating_fails(self):
        r = turning_point_test(np.tile([0.0, 1.0], 50))
        assert r.turning_points == 98 and not r.passed

    def test_ties_not_counted(self):
        assert turning_point_test(np.ones(30)).turning_points == 0

    def test_counts_example(self):
        x = [0, 2, 1, 3, 3, 4, 0] + [0] * 13
        # 2 (peak), 1 (trough), 4 (peak); the 3,3 tie is not an extremum
        assert turning_point_test(x).turning_points == 3

    def test_white_noise_size(self):
        rng = np.random.default_rng(3)
        rejections = sum(not turning_point_test(rng.standard_normal(200)).passed for _ in range(1000))
        # nominal level 0.05; allow 3 binomial standard deviations
        assert abs(rejections / 1000 - 0.05) <= 3 * math.sqrt(0.05 * 0.95 / 1000)

    def test_too_short(self):
        with pytest.raises(InsufficientDataError):
            turning_point_test(np.zeros(19))


class TestBlocksAndClassify:
    def trip_dy(self, f, line_id):
        return assemble_ybus(apply_line_trip(f, line_id)).Y - assemble_ybus(f).Y

    def test_leaf_trip(self, fixture_ybus):
        f = ieee13()
        dY = self.trip_dy(f, FIXTURE_TRIP_LINE)
        blocks = changed_blocks(dY, fixture_ybus.block_index)
        assert {(b.bus_m, b.bus_n) for b in blocks} == {("684", "684"), ("611", "611"), ("684", "611")}
        assert classify(dY, fixture_ybus.block_index, f) == ("line_trip", (FIXTURE_TRIP_LINE,))
        assert classify(dY, fixture_ybus.block_index) == ("line_trip", ("684-611",))

    def test_close(self, fixture_ybus):
        f = apply_line_trip(ieee13(), "L632_633")
        dY = assemble_ybus(restore_line(f, "L632_633")).Y - assemble_ybus(f).Y
        assert classify(dY, fixture_ybus.block_index, f) == ("line_close", ("L632_633",))

    def test_shunt_change(self, fixture_ybus):
        f = ieee13()
        dY = assemble_ybus(set_shunt(f, "675", ("a", "b", "c"), 0.02j * np.eye(3))).Y - fixture_ybus.Y
        assert classify(dY, fixture_ybus.block_index, f)[0] == "shunt_change"

    def test_dense_is_unknown(self, fixture_ybus):
        rng = np.random.default_rng(0)
        M = rng.standard_normal((38, 38))
        assert classify(M + M.T, fixture_ybus.block_index)[0] == "unknown"

    def test_zero_is_unknown(self, fixture_ybus):
        assert changed_blocks(np.zeros((38, 38)), fixture_ybus.block_index) == []
        assert classify(np.zeros((38, 38)), fixture_ybus.block_index) == ("unknown", ())

    def test_block_floor(self, fixture_ybus):
        f = ieee13()
        dY = self.trip_dy(f, FIXTURE_TRIP_LINE)
        i = f.index_of("632", "a")
        dY[i, i] = 1e-6 * np.abs(dY).max()
        bi = fixture_ybus.block_index
        assert ("632", "632") not in {(b.bus_m, b.bus_n) for b in changed_blocks(dY, bi)}
        assert ("632", "632") in {(b.bus_m, b.bus_n) for b in changed_blocks(dY, bi, block_floor=1e-9)}

    def test_sorted_descending(self, fixture_ybus):
        blocks = changed_blocks(self.trip_dy(ieee13(), "L632_670"), fixture_ybus.block_index)
        mags = [b.magnitude for b in blocks]
        assert mags == sorted(mags, reverse=True)


class TestLocalize:
    def test_no_event_gives_zero(self, fixture_ybus):
        w = window(fixture_snapshots(60), 20, 10)
        rec = localize(fixture_ybus, w, fixture_ybus.block_index, feeder=ieee13())
        assert not np.any(rec.delta_Y)
        assert rec.classification == "unknown" and rec.changed_blocks == []

    def test_trip(self, fixture_ybus):
        f = ieee13()
        w = window(fixture_snapshots(60, 1, TRIP_EVENT), 50, 10)
        rec = localize(fixture_ybus, w, fixture_ybus.block_index, feeder=f)
        assert rec.t == 50 and rec.samples_used == 10
        top = rec.changed_blocks[0]
        assert {top.bus_m, top.bus_n} <= {"684", "611"}
        assert rec.classification == "line_trip" and rec.line_ids == (FIXTURE_TRIP_LINE,)
        true = assemble_ybus(apply_line_trip(f, FIXTURE_TRIP_LINE)).Y - fixture_ybus.Y
        assert np.linalg.norm(rec.delta_Y - true) <= 1e-4 * np.linalg.norm(true)
        assert rec.completed_entries == 1

    def test_switch_pair(self):
        f = ieee13()
        ref = f.line("L692_675")
        tie = LineSegment("T680_675", "680", "675", ref.phases, ref.Z, ref.Ys, in_service=False)
        f = dataclasses.replace(f, lines=f.lines + (tie,))
        ev = (ScenarioEvent(30, "line_close", "T680_675"), ScenarioEvent(30, "line_trip", "L692_675"))
        snaps = list(run_scenario(f, table1_allocation(), events=ev, K=49,
                                  household=HouseholdModel(seed=1)))
        yb = assemble_ybus(f)
        rec = localize(yb, window(snaps, 30, 20), yb.block_index, feeder=f)
        assert rec.classification == "switch_pair"
        assert set(rec.line_ids) == {"T680_675", "L692_675"}

    def test_too_few_samples(self, fixture_ybus):
        with pytest.raises(InsufficientDataError):
            localize(fixture_ybus, window(fixture_snapshots(60), 1, 5), fixture_ybus.block_index)


class TestPersistence:
    def test_alarm_log_round_trip(self):
        hist = [HistoryEntry(1, 0.0, 1e-6, False), HistoryEntry(2, 0.123456789012345, 1e-6, True)]
        buf = io.StringIO()
        write_alarm_log(hist, buf, "aa" * 32)
        buf.seek(0)
        h, back = read_alarm_log(buf)
        assert h == "aa" * 32 and back == hist

    def test_alarm_log_header_required(self):
        with pytest.raises(InvalidArgumentError):
            read_alarm_log(io.StringIO("slot,residual_norm,gamma,alarmed\n"))

    def test_event_record_round_trip(self, fixture_ybus):
        dY = TestBlocksAndClassify().trip_dy(ieee13(), FIXTURE_TRIP_LINE)
        rec = EventRecord(50, dY, [ChangedBlock("684", "611", 3.5)], "line_trip", 10,
                          (FIXTURE_TRIP_LINE,), 1e-9, 1)
        back = EventRecord.from_json(rec.to_json(ieee13().labels, "bb" * 32))
        np.testing.assert_array_equal(back.delta_Y, rec.delta_Y)
        assert back == dataclasses.replace(rec, delta_Y=back.delta_Y)
