"""Scenario orchestration: capacity/distance heatmaps, session series, per-user estimates."""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ._io import atomic_write, fmt as _fmt
from .keyrate import KeyRateReport, analytic_session_rate
from .montecarlo import run_session, tally_to_reports
from .params import (
    DWDM_LOSS_DB,
    LinkModel,
    NetworkScenario,
    homogeneous_scenario,
    session_seconds_for_capacity,
    splitter_loss_for_ratio,
)

MEASURED_CAPACITIES = (8, 16, 32, 64)
DEFAULT_DISTANCES_KM = tuple(float(d) for d in range(31))

# fibre lengths matching the measured 13.6 / 14 dB totals behind the 9.7 dB 1x8 splitter
EXPERIMENT_FIBRE_KM = (19.5, 21.5)


@dataclass
class SweepGrid:
    capacity: int
    distances_km: list[float]
    active_users: list[int]
    rates_bps: np.ndarray  # shape (len(distances_km), len(active_users))
    session_s: float

    def __post_init__(self) -> None:
        self.rates_bps = np.asarray(self.rates_bps, dtype=float)
        if self.rates_bps.shape != (len(self.distances_km), len(self.active_users)):
            raise ValueError("grid shape does not match its axes")
        if (self.rates_bps < 0).any():
            raise ValueError("rates must be nonnegative")

    def rate(self, distance_km: float, users: int) -> float:
        return float(self.rates_bps[self.distances_km.index(distance_km), self.active_users.index(users)])


def _cell(args: tuple) -> float:
    capacity, users, distance, session_s, kwargs = args
    scenario = homogeneous_scenario(capacity, users, distance, session_s=session_s, **kwargs)
    return analytic_session_rate(scenario, 0).rate_bps


def sweep_fig4b(
    capacities: Sequence[int] = MEASURED_CAPACITIES,
    distances_km: Sequence[float] = DEFAULT_DISTANCES_KM,
    session_schedule: Callable[[int], float] = session_seconds_for_capacity,
    jobs: int = 1,
    extended: bool = False,
    **scenario_kwargs,
) -> list[SweepGrid]:
    """Per-user secure rate against fibre distance and number of active users, one grid per capacity.

    Every active user sits at the same distance and runs at gate_rate / N.
    Outside ``extended`` mode only the four measured splitter ratios are allowed.
    """
    if not capacities:
        raise ValueError("no capacities given")
    if not extended and not set(capacities) <= set(MEASURED_CAPACITIES):
        raise ValueError(f"capacities must be a subset of {MEASURED_CAPACITIES} unless extended=True")
    distances = [float(d) for d in distances_km]
    grids = []
    for capacity in capacities:
        session_s = session_schedule(capacity)
        users = list(range(1, capacity + 1))
        tasks = [(capacity, n, d, session_s, scenario_kwargs) for d in distances for n in users]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                flat = list(pool.map(_cell, tasks, chunksize=64))
        else:
            flat = [_cell(t) for t in tasks]
        grids.append(SweepGrid(capacity, distances, users,
                               np.array(flat).reshape(len(distances), len(users)), session_s))
    return grids


def max_distance_km(
    capacity: int,
    active_users: int,
    session_s: float | None = None,
    upper_km: float = 300.0,
    tol_km: float = 1e-3,
    **scenario_kwargs,
) -> float:
    """Longest common fibre distance with a positive key rate (bisection)."""
    def positive(d: float) -> bool:
        s = homogeneous_scenario(capacity, active_users, d, session_s=session_s, **scenario_kwargs)
        return analytic_session_rate(s, 0).rate_bps > 0

    if not positive(0.0):
        return 0.0
    lo, hi = 0.0, upper_km
    if positive(hi):
        return hi
    while hi - lo > tol_km:
        mid = 0.5 * (lo + hi)
        if positive(mid):
            lo = mid
        else:
            hi = mid
    return lo


# --- per-session series ------------------------------------------------

@dataclass(frozen=True)
class SessionPoint:
    session: int
    user: int
    qber: float
    rate_bps: float


def dwdm_variant(scenario: NetworkScenario, dwdm_loss_db: float = DWDM_LOSS_DB) -> NetworkScenario:
    """Replace each user's splitter by a DWDM multiplexer of lower insertion loss."""
    users = []
    for link in scenario.users:
        total = None if link.total_loss_db is None else link.total_loss_db - link.splitter_db + dwdm_loss_db
        users.append(LinkModel(link.fibre_km, dwdm_loss_db, link.e_opt, link.fibre_loss_db_per_km, total))
    return scenario.with_updates(users=tuple(users))


def replicate_fig3(
    scenario: NetworkScenario,
    n_sessions: int = 36,
    mode: str = "analytic",
    seed: int = 0,
    gates_per_session: int | None = None,
    jobs: int = 1,
) -> list[SessionPoint]:
    """Per-session signal QBER and secure rate for each active transmitter.

    Analytic sessions are expectation values over ``scenario.session_s``.
    Monte Carlo sessions simulate ``gates_per_session`` gates (default: a full
    session, which is slow) with seed ``seed + session``; their rates reflect
    the simulated duration.
    """
    if mode not in ("analytic", "mc"):
        raise ValueError(f"mode must be 'analytic' or 'mc', got {mode!r}")
    points = []
    if mode == "analytic":
        reports = [analytic_session_rate(scenario, u) for u in range(scenario.active_users)]
        for k in range(n_sessions):
            points += [SessionPoint(k, u, r.e, r.rate_bps) for u, r in enumerate(reports)]
        return points
    n_bins = scenario.bins
    if gates_per_session is None:
        gates_per_session = round(scenario.session_s * scenario.detector.gate_rate_hz)
    gates_per_session = n_bins * max(1, gates_per_session // n_bins)
    for k in range(n_sessions):
        tally = run_session(scenario, seed + k, gates_per_session, jobs=jobs)
        for u, r in enumerate(tally_to_reports(tally, scenario)):
            points.append(SessionPoint(k, u, tally.levels[u][0].qber, r.rate_bps))
    return points


def count_rate_ratio(reference_loss_db: float, replacement_loss_db: float) -> float:
    """Detected-photon rate gain from swapping a component of one loss for another."""
    return 10 ** ((reference_loss_db - replacement_loss_db) / 10)


# --- two-transmitter capacity estimate -----------------------------------

def estimate_fig4c(reports: Sequence[KeyRateReport] | Sequence[float], capacity: int) -> float:
    """Per-user rate of a full network estimated from a two-transmitter run: (R1 + R2) / N."""
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    total = sum(r.rate_bps if isinstance(r, KeyRateReport) else float(r) for r in reports)
    return total / capacity


def fig4c_scenario(
    capacity: int,
    fibre_km: Sequence[float] = EXPERIMENT_FIBRE_KM,
    transmitter_rate_hz: float = 500e6,
    session_s: float | None = None,
    e_opt: float = 0.005,
) -> NetworkScenario:
    """Two transmitters at unequal distances behind a 1xN splitter, each clocked at ``transmitter_rate_hz``."""
    splitter = splitter_loss_for_ratio(capacity).loss_db
    users = tuple(LinkModel(d, splitter, e_opt) for d in fibre_km)
    base = NetworkScenario(capacity=capacity, active_users=len(users), users=users)
    bins = round(base.detector.gate_rate_hz / transmitter_rate_hz)
    if abs(base.detector.gate_rate_hz / bins - transmitter_rate_hz) > 1e-6 * transmitter_rate_hz:
        raise ValueError("transmitter clock must divide the gate rate")
    return base.with_updates(
        time_bins=bins,
        session_s=session_seconds_for_capacity(capacity) if session_s is None else session_s,
    )


def run_fig4c(capacities: Sequence[int] = MEASURED_CAPACITIES, **kwargs) -> dict[int, float]:
    """Analytic (R1 + R2) / N for the two-transmitter 500 MHz emulation at each capacity."""
    out = {}
    for n in capacities:
        s = fig4c_scenario(n, **kwargs)
        out[n] = estimate_fig4c([analytic_session_rate(s, u) for u in range(s.active_users)], n)
    return out


# --- output files ------------------------------------------------------

def write_grid(grid: SweepGrid, out_dir: str | Path) -> list[Path]:
    """``fig4b_N<capacity>.csv`` plus a gnuplot ``matrix nonuniform`` file ``fig4b_N<capacity>.dat``."""
    out_dir = Path(out_dir)
    csv_path = out_dir / f"fig4b_N{grid.capacity}.csv"
    dat_path = out_dir / f"fig4b_N{grid.capacity}.dat"

    def write_csv(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["distance_km"] + [str(u) for u in grid.active_users])
        for d, row in zip(grid.distances_km, grid.rates_bps):
            w.writerow([_fmt(d)] + [_fmt(x) for x in row])

    def write_dat(fh):
        fh.write(" ".join([str(len(grid.active_users))] + [str(u) for u in grid.active_users]) + "\n")
        for d, row in zip(grid.distances_km, grid.rates_bps):
            fh.write(" ".join([_fmt(d)] + [_fmt(x) for x in row]) + "\n")

    atomic_write(csv_path, write_csv)
    atomic_write(dat_path, write_dat)
    return [csv_path, dat_path]


def read_grid_csv(path: str | Path, capacity: int, session_s: float = float("nan")) -> SweepGrid:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    users = [int(u) for u in rows[0][1:]]
    distances = [float(r[0]) for r in rows[1:]]
    rates = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    return SweepGrid(capacity, distances, users, rates, session_s)


def write_fig3(points: Iterable[SessionPoint], path: str | Path) -> Path:
    path = Path(path)

    def write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["session", "user", "qber", "rate_bps"])
        for p in points:
            w.writerow([p.session, p.user, _fmt(p.qber), _fmt(p.rate_bps)])

    atomic_write(path, write)
    return path
