"""Density estimation along vehicle paths from fixed-detector event logs.

A detector's event log is turned into a cumulative vehicle count, piecewise
linear through the knots (crossing_time[i], i + 1).  Flux is the left-limit
slope of that count; between two crossings dt apart it is 1/dt veh/s, and it
is zero outside the observed span.  Worked example: crossings at t = 5, 10,
20 give knots (5,1), (10,2), (20,3); the flux at t = 7 is 1/5 = 0.2 veh/s,
and the flux integral across any pair of knots equals the count increment
exactly.

Density along a moving vehicle combines the flux interpolated from the two
detectors bracketing the vehicle's position with the vehicle's own speed:
rho = Q/u, capped at rho_j_ref.  The formula degenerates for stopped
vehicles (u -> 0), so speeds at or below u_floor read as jam density.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoverageError, DataError
from .ode import ControlSeries
from .traffic_sim import DetectorLog, Trajectory

# A crawling vehicle below this speed (ft/s) counts as stopped.
DEFAULT_U_FLOOR = 0.1

# DensitySeries shares the control-series grid contract.
DensitySeries = ControlSeries


@dataclass(frozen=True)
class CumulativeCount:
    """Piecewise-linear cumulative count at one detector."""

    position: float
    times: np.ndarray   # knot times, strictly increasing
    counts: np.ndarray  # knot values 1..n

    @property
    def segment_slopes(self) -> np.ndarray:
        return 1.0 / np.diff(self.times) if self.times.size > 1 else np.empty(0)


def cumulative_count(log: DetectorLog) -> CumulativeCount:
    """Knots (crossing_time[i], i + 1) for a detector's event log."""
    n = log.crossing_times.size
    return CumulativeCount(
        position=log.position,
        times=log.crossing_times,
        counts=np.arange(1, n + 1, dtype=float),
    )


def estimate_flux(count: CumulativeCount, t) -> float | np.ndarray:
    """Left-limit slope of the cumulative count; zero outside the span."""
    t_arr = np.asarray(t, dtype=float)
    scalar = t_arr.ndim == 0
    t_arr = np.atleast_1d(t_arr)
    if count.times.size < 2:
        out = np.zeros_like(t_arr)
        return float(out[0]) if scalar else out
    idx = np.searchsorted(count.times, t_arr, side="left")
    slopes = count.segment_slopes
    out = np.zeros_like(t_arr)
    inside = (idx >= 1) & (idx <= count.times.size - 1)
    out[inside] = slopes[idx[inside] - 1]
    return float(out[0]) if scalar else out


def estimate_density_along(
    traj: Trajectory,
    logs: list[DetectorLog],
    rho_j_ref: float,
    u_floor: float = DEFAULT_U_FLOOR,
    counts: list[CumulativeCount] | None = None,
) -> DensitySeries:
    """Estimated density at each trajectory sample, on the trajectory grid.

    The flux seen by the vehicle is a linear blend of the fluxes at the two
    bracketing detectors.  Samples slightly outside the instrumented span
    clamp to the nearest detector, up to one median detector gap; beyond
    that the trajectory is uncovered and the call fails.
    """
    if not logs:
        raise DataError("no detector logs supplied")
    if counts is None:
        counts = [cumulative_count(log) for log in logs]
    elif len(counts) != len(logs):
        raise DataError("counts must align with logs")
    order = np.argsort([log.position for log in logs])
    det_x = np.array([logs[i].position for i in order])
    if det_x.size > 1 and np.any(np.diff(det_x) <= 0):
        raise DataError("detector positions must be distinct")
    slack = float(np.median(np.diff(det_x))) if det_x.size > 1 else 0.0

    xs = traj.positions
    if np.any(xs < det_x[0] - slack) or np.any(xs > det_x[-1] + slack):
        raise CoverageError(
            f"trajectory spans [{xs.min():.1f}, {xs.max():.1f}] ft but detectors "
            f"cover [{det_x[0]:.1f}, {det_x[-1]:.1f}] ft"
        )
    xs = np.clip(xs, det_x[0], det_x[-1])
    times = traj.times()

    right = np.clip(np.searchsorted(det_x, xs, side="left"), 1, det_x.size - 1)
    left = right - 1
    gap = det_x[right] - det_x[left]
    frac = (xs - det_x[left]) / gap

    flux = np.empty(xs.size)
    for k in range(xs.size):
        f_left = estimate_flux(counts[order[left[k]]], times[k])
        f_right = estimate_flux(counts[order[right[k]]], times[k])
        flux[k] = (1.0 - frac[k]) * f_left + frac[k] * f_right

    u = traj.speeds
    rho = np.where(
        u <= u_floor, rho_j_ref, np.minimum(flux / np.maximum(u, u_floor), rho_j_ref)
    )
    return DensitySeries(t0=traj.t0, dt=traj.dt, values=rho)


def colocate(
    trajectories: list[Trajectory],
    logs: list[DetectorLog],
    rho_j_ref: float,
    u_floor: float = DEFAULT_U_FLOOR,
) -> list[tuple[Trajectory, DensitySeries]]:
    """Co-locate densities for many trajectories, reusing the count curves."""
    counts = [cumulative_count(log) for log in logs]
    return [
        (traj, estimate_density_along(traj, logs, rho_j_ref, u_floor, counts))
        for traj in trajectories
    ]
