"""Flux/density reconstruction from detector event logs.

Worked oracle values, computed by hand from the piecewise-linear count
construction: crossings [5, 10, 20] give knots (5,1), (10,2), (20,3), a
left-limit slope of 1/5 = 0.2 at t = 7, and crossings [0, 10, 12] give a
slope of 1/(12-10) = 0.5 at t = 11.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdlearn.errors import CoverageError, DataError
from fdlearn.fd_models import GreenshieldsParams, eval_greenshields
from fdlearn.sensing import (
    DEFAULT_U_FLOOR,
    colocate,
    cumulative_count,
    estimate_density_along,
    estimate_flux,
)
from fdlearn.traffic_sim import (
    DetectorLog,
    InflowProfile,
    ScenarioConfig,
    Trajectory,
    run_scenario,
)

RHO_J_REF = 0.05


def constant_flux_log(position, rate, t_start=0.0, n=400):
    """Detector log whose cumulative count has constant slope `rate`."""
    return DetectorLog(
        position=position,
        crossing_times=t_start + (1.0 + np.arange(n)) / rate,
    )


def straight_trajectory(x0, speed, n, dt=1.0, t0=0.0, vehicle_id="probe"):
    positions = x0 + speed * dt * np.arange(n)
    return Trajectory(
        vehicle_id=vehicle_id,
        t0=t0,
        dt=dt,
        positions=positions,
        speeds=np.full(n, float(speed)),
    )


class TestCumulativeCount:
    def test_worked_example_knots(self):
        log = DetectorLog(position=0.0, crossing_times=np.array([5.0, 10.0, 20.0]))
        count = cumulative_count(log)
        np.testing.assert_array_equal(count.times, [5.0, 10.0, 20.0])
        np.testing.assert_array_equal(count.counts, [1.0, 2.0, 3.0])

    def test_empty_log_has_zero_flux_everywhere(self):
        count = cumulative_count(DetectorLog(position=0.0, crossing_times=np.array([])))
        for t in (-5.0, 0.0, 100.0):
            assert estimate_flux(count, t) == 0.0

    def test_single_crossing_has_no_slope(self):
        count = cumulative_count(
            DetectorLog(position=0.0, crossing_times=np.array([7.0]))
        )
        for t in (6.0, 7.0, 8.0):
            assert estimate_flux(count, t) == 0.0

    def test_unsorted_log_rejected(self):
        with pytest.raises(DataError):
            DetectorLog(position=0.0, crossing_times=np.array([5.0, 4.0]))


class TestEstimateFlux:
    def test_worked_example_slope(self):
        count = cumulative_count(
            DetectorLog(position=0.0, crossing_times=np.array([5.0, 10.0, 20.0]))
        )
        assert estimate_flux(count, 7.0) == 0.2

    def test_uneven_segment_slope(self):
        count = cumulative_count(
            DetectorLog(position=0.0, crossing_times=np.array([0.0, 10.0, 12.0]))
        )
        assert estimate_flux(count, 11.0) == 0.5

    def test_uniform_crossings_constant_slope(self):
        count = cumulative_count(
            DetectorLog(position=0.0, crossing_times=np.array([10.0, 20.0, 30.0, 40.0]))
        )
        for t in (10.5, 15.0, 29.0, 39.9):
            assert estimate_flux(count, t) == pytest.approx(0.1, rel=1e-15)

    def test_zero_outside_span(self):
        count = cumulative_count(
            DetectorLog(position=0.0, crossing_times=np.array([5.0, 10.0]))
        )
        assert estimate_flux(count, 4.9) == 0.0
        assert estimate_flux(count, 5.0) == 0.0
        assert estimate_flux(count, 10.1) == 0.0

    def test_left_limit_at_knot(self):
        count = cumulative_count(
            DetectorLog(position=0.0, crossing_times=np.array([5.0, 10.0, 20.0]))
        )
        assert estimate_flux(count, 10.0) == 0.2

    def test_vector_query_matches_scalars(self):
        count = cumulative_count(
            DetectorLog(position=0.0, crossing_times=np.array([0.0, 10.0, 12.0]))
        )
        ts = np.array([-1.0, 5.0, 11.0, 30.0])
        batch = estimate_flux(count, ts)
        np.testing.assert_array_equal(batch, [estimate_flux(count, t) for t in ts])

    @given(
        raw=st.lists(
            st.floats(min_value=0.0, max_value=1e4),
            min_size=2,
            max_size=12,
            unique=True,
        )
    )
    @settings(max_examples=60)
    def test_flux_integral_recovers_count_increment(self, raw):
        times = np.sort(np.asarray(raw))
        if np.diff(times).min() < 1e-3:
            return
        count = cumulative_count(DetectorLog(position=0.0, crossing_times=times))
        # Flux is constant on each segment, so the exact integral across
        # knots i..j is sum(slope * width) and must equal j - i.
        slopes = count.segment_slopes
        widths = np.diff(times)
        integral = np.cumsum(slopes * widths)
        np.testing.assert_allclose(integral, np.arange(1, times.size), rtol=1e-9)


class TestEstimateDensityAlong:
    def test_density_is_flux_over_speed(self):
        logs = [constant_flux_log(0.0, 0.1), constant_flux_log(100.0, 0.1)]
        traj = straight_trajectory(x0=40.0, speed=20.0, n=3, t0=2000.0)
        series = estimate_density_along(traj, logs, RHO_J_REF)
        np.testing.assert_allclose(series.values, 0.1 / 20.0, rtol=1e-12)
        assert series.t0 == traj.t0 and series.dt == traj.dt
        assert len(series) == len(traj)

    def test_bracketing_detectors_blend_linearly(self):
        logs = [constant_flux_log(0.0, 0.1), constant_flux_log(100.0, 0.3)]
        traj = straight_trajectory(x0=25.0, speed=20.0, n=2, t0=1000.0)
        series = estimate_density_along(traj, logs, RHO_J_REF)
        expected = (0.75 * 0.1 + 0.25 * 0.3) / 20.0
        assert series.values[0] == pytest.approx(expected, rel=1e-12)

    def test_detector_order_does_not_matter(self):
        logs = [constant_flux_log(100.0, 0.3), constant_flux_log(0.0, 0.1)]
        traj = straight_trajectory(x0=25.0, speed=20.0, n=2, t0=1000.0)
        series = estimate_density_along(traj, logs, RHO_J_REF)
        assert series.values[0] == pytest.approx(0.15 / 20.0, rel=1e-12)

    def test_stopped_vehicle_reads_jam_density(self):
        logs = [constant_flux_log(0.0, 0.1), constant_flux_log(100.0, 0.1)]
        traj = straight_trajectory(x0=50.0, speed=0.0, n=4, t0=500.0)
        series = estimate_density_along(traj, logs, RHO_J_REF)
        np.testing.assert_array_equal(series.values, RHO_J_REF)

    def test_crawling_below_floor_reads_jam_density(self):
        logs = [constant_flux_log(0.0, 0.1), constant_flux_log(100.0, 0.1)]
        traj = straight_trajectory(x0=50.0, speed=0.5 * DEFAULT_U_FLOOR, n=4, t0=500.0)
        series = estimate_density_along(traj, logs, RHO_J_REF)
        np.testing.assert_array_equal(series.values, RHO_J_REF)

    def test_estimate_capped_at_jam_reference(self):
        # Flux 2 veh/s at speed 1 ft/s would read rho = 2, far above jam.
        logs = [constant_flux_log(0.0, 2.0), constant_flux_log(100.0, 2.0)]
        traj = straight_trajectory(x0=50.0, speed=1.0, n=3, t0=100.0)
        series = estimate_density_along(traj, logs, RHO_J_REF)
        np.testing.assert_array_equal(series.values, RHO_J_REF)

    def test_uncovered_trajectory_raises(self):
        logs = [constant_flux_log(0.0, 0.1), constant_flux_log(100.0, 0.1)]
        traj = straight_trajectory(x0=150.0, speed=20.0, n=8, t0=100.0)
        with pytest.raises(CoverageError):
            estimate_density_along(traj, logs, RHO_J_REF)

    def test_clamps_within_one_detector_gap(self):
        logs = [constant_flux_log(0.0, 0.1), constant_flux_log(100.0, 0.1)]
        traj = straight_trajectory(x0=-50.0, speed=0.0, n=2, t0=1000.0)
        traj = Trajectory(
            vehicle_id="edge",
            t0=traj.t0,
            dt=traj.dt,
            positions=traj.positions,
            speeds=np.full(2, 20.0),
        )
        series = estimate_density_along(traj, logs, RHO_J_REF)
        np.testing.assert_allclose(series.values, 0.1 / 20.0, rtol=1e-12)

    def test_requires_logs(self):
        traj = straight_trajectory(x0=0.0, speed=10.0, n=3)
        with pytest.raises(DataError):
            estimate_density_along(traj, [], RHO_J_REF)

    def test_misaligned_counts_rejected(self):
        logs = [constant_flux_log(0.0, 0.1), constant_flux_log(100.0, 0.1)]
        traj = straight_trajectory(x0=50.0, speed=20.0, n=2, t0=100.0)
        with pytest.raises(DataError):
            estimate_density_along(
                traj, logs, RHO_J_REF, counts=[cumulative_count(logs[0])]
            )

    def test_colocate_matches_per_trajectory_calls(self):
        logs = [constant_flux_log(0.0, 0.1), constant_flux_log(100.0, 0.25)]
        trajs = [
            straight_trajectory(x0=10.0, speed=15.0, n=5, t0=800.0, vehicle_id="a"),
            straight_trajectory(x0=30.0, speed=10.0, n=6, t0=900.0, vehicle_id="b"),
        ]
        paired = colocate(trajs, logs, RHO_J_REF)
        assert [t.vehicle_id for t, _ in paired] == ["a", "b"]
        for traj, series in paired:
            solo = estimate_density_along(traj, logs, RHO_J_REF)
            np.testing.assert_array_equal(series.values, solo.values)


@pytest.fixture(scope="module")
def steady():
    fd = GreenshieldsParams(u0=44.0, rho_j=0.05)
    cfg = ScenarioConfig(
        roadway_length=500.0,
        cell_width=10.0,
        sim_dt=0.1,
        horizon=900.0,
        true_fd=fd,
        inflow=InflowProfile.constant(0.15),
        signal=None,
        detector_spacing=25.0,
        probe_count=60,
        seed=5,
    )
    return fd, cfg, run_scenario(cfg)


class TestSimulatorRoundTrip:
    def test_steady_density_round_trip_within_10_percent(self, steady):
        fd, cfg, result = steady
        q = 0.15
        rho_star = 0.5 * fd.rho_j * (1.0 - np.sqrt(1.0 - 4.0 * q / (fd.u0 * fd.rho_j)))
        late = [t for t in result.trajectories if t.t0 >= 300.0]
        assert len(late) >= 10
        for traj in late[:15]:
            series = estimate_density_along(traj, result.detector_logs, fd.rho_j)
            np.testing.assert_allclose(series.values, rho_star, rtol=0.10)

    def test_round_trip_speed_consistency(self, steady):
        fd, cfg, result = steady
        late = [t for t in result.trajectories if t.t0 >= 300.0]
        for traj in late[:5]:
            series = estimate_density_along(traj, result.detector_logs, fd.rho_j)
            predicted = eval_greenshields(fd, np.asarray(series.values))
            np.testing.assert_allclose(predicted, traj.speeds, rtol=0.10)
