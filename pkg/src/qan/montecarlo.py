"""Pulse-level Monte Carlo of N transmitters sharing one gated receiver.

Gate ``g`` belongs to user ``g mod N``. Per gate the owner (if active)
emits a pulse with a random decoy level, basis and bit. Clicks come from
four sources, kept with priority photon > crosstalk > afterpulse > dark
when several land in the same gate:

* photon: the owner's pulse is detected with its level's detection probability;
* crosstalk: a photon click spills into the gate ``s`` later with the
  cross-talk profile probability for separation ``s`` (1 .. N-1);
* afterpulse: every non-afterpulse click schedules, with probability p_A,
  one afterpulse uniformly over the next N gates (no chains);
* dark: independent per gate with probability p_D.

A photon click lands in the correct detector with probability 1 - e_opt when
the bases match; every other click picks a detector at random.

Clicks are rare, so gates are never enumerated. Event positions are drawn
as sparse Bernoulli processes per fixed-size gate block, and pulse counts
for click-free gates are drawn from the matching multinomial. Blocks get
counter-derived random streams, so results depend only on
``(scenario, seed, total_gates)`` and not on how many workers generated them.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from ._io import atomic_write, fmt as _fmt
from .keyrate import KeyRateReport, LevelTally, expected_tallies, report_from_tallies
from .link import crosstalk_excess, detection_probability, level_statistics, mean_detection_probability
from .params import LEVELS, NetworkScenario

CAUSES = ("photon", "crosstalk", "afterpulse", "dark")
PHOTON, CROSSTALK, AFTERPULSE, DARK = range(4)

BLOCK_TARGET_GATES = 1 << 24
MAX_GATES = 1 << 62

_GEN, _MERGE = 0, 1


def assign_gate(gate_index: int, n_bins: int) -> int:
    """Owner of a detector gate under round-robin time-division multiplexing."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    return gate_index % n_bins


class PulseRecord(NamedTuple):
    gate_index: int
    user_id: int
    level: str
    basis: str  # "Z" = phases {0, pi}, "X" = {pi/2, 3pi/2}
    bit: int


class DetectionEvent(NamedTuple):
    gate_index: int
    detector: str  # "D0" / "D1"
    cause: str


@dataclass
class SessionTally:
    capacity: int
    bins: int
    active_users: int
    total_gates: int
    gate_rate_hz: float
    seed: int | None
    levels: list[tuple[LevelTally, LevelTally, LevelTally]]
    causes: dict[str, float]
    empty_gate_clicks: float
    stochastic: bool = True
    events: list[tuple[DetectionEvent, PulseRecord | None]] | None = field(default=None, repr=False)

    @property
    def duration_s(self) -> float:
        return self.total_gates / self.gate_rate_hz

    @property
    def total_clicks(self) -> float:
        return sum(self.causes.values())

    def user_detections(self, user: int) -> float:
        return sum(t.detections for t in self.levels[user])

    def user_pulses(self, user: int) -> float:
        return sum(t.pulses_sent for t in self.levels[user])


def _rng(seed: int, block: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed % (1 << 64), block, stream])))


def _positions(rng: np.random.Generator, population: int, p: float) -> np.ndarray:
    """Sorted indices of successes in ``population`` independent Bernoulli(p) trials."""
    if p <= 0 or population == 0:
        return np.empty(0, dtype=np.int64)
    k = rng.binomial(population, min(p, 1.0))
    idx = rng.choice(population, size=k, replace=False)
    idx.sort()
    return idx.astype(np.int64)


def _level_tables(scenario: NetworkScenario) -> tuple[np.ndarray, np.ndarray]:
    """Per active user: P(level, photon click) and P(level | no photon click)."""
    probs = np.array(scenario.decoy.probabilities)
    joint = np.zeros((scenario.active_users, 3))
    cond = np.zeros((scenario.active_users, 3))
    for u, link in enumerate(scenario.users):
        eta = np.array([detection_probability(m, link, scenario.detector.eta_bob)
                        for m in scenario.decoy.intensities])
        joint[u] = probs * eta
        miss = probs * (1 - eta)
        cond[u] = miss / miss.sum() if miss.sum() > 0 else probs
    return joint, cond


def _block_bounds(scenario: NetworkScenario, total_gates: int) -> list[tuple[int, int]]:
    n_bins = scenario.bins
    size = n_bins * max(1, BLOCK_TARGET_GATES // n_bins)
    return [(s, min(s + size, total_gates)) for s in range(0, total_gates, size)]


def _generate_block(task: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Primary event positions in one gate block: photon clicks (with level), dark clicks, cross-talk spills."""
    scenario, seed, block, start, stop = task
    rng = _rng(seed, block, _GEN)
    n_bins = scenario.bins
    frames = (stop - start) // n_bins
    joint, _ = _level_tables(scenario)

    ph_gates, ph_levels = [], []
    for u in range(scenario.active_users):
        q = joint[u].sum()
        idx = _positions(rng, frames, q)
        ph_gates.append(start + u + n_bins * idx)
        ph_levels.append(rng.choice(3, size=len(idx), p=joint[u] / q) if len(idx) else np.empty(0, np.int64))
    photon = np.concatenate(ph_gates) if ph_gates else np.empty(0, np.int64)
    levels = np.concatenate(ph_levels).astype(np.int64) if ph_levels else np.empty(0, np.int64)

    dark = start + _positions(rng, stop - start, scenario.detector.p_dark)

    spill = np.asarray(scenario.crosstalk.spill(n_bins))
    if len(spill) and spill.sum() > 0 and len(photon):
        hit = rng.random((len(photon), len(spill))) < spill
        rows, cols = np.nonzero(hit)
        xt = photon[rows] + cols + 1
    else:
        xt = np.empty(0, np.int64)
    return photon, levels, dark, xt.astype(np.int64)


class _Accumulator:
    def __init__(self, scenario: NetworkScenario, record: bool):
        n = scenario.active_users
        self.pulses = np.zeros((n, 3), np.int64)
        self.detections = np.zeros((n, 3), np.int64)
        self.sifted = np.zeros((n, 3), np.int64)
        self.errors = np.zeros((n, 3), np.int64)
        self.causes = np.zeros(4, np.int64)
        self.empty = 0
        self.events: list | None = [] if record else None


def _merge_block(
    scenario: NetworkScenario,
    seed: int,
    block: int,
    start: int,
    stop: int,
    primary: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    carry_xt: np.ndarray,
    carry_ap: np.ndarray,
    acc: _Accumulator,
    tables: tuple[np.ndarray, np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    rng = _rng(seed, block, _MERGE)
    n_bins = scenario.bins
    n_users = scenario.active_users
    photon, ph_levels, dark, xt = primary

    xt_all = np.concatenate([carry_xt, xt])
    xt_in, xt_next = xt_all[xt_all < stop], xt_all[xt_all >= stop]

    gates = np.concatenate([photon, xt_in, dark])
    cause = np.concatenate([np.full(len(photon), PHOTON), np.full(len(xt_in), CROSSTALK),
                            np.full(len(dark), DARK)]).astype(np.int64)
    level = np.concatenate([ph_levels, np.full(len(xt_in) + len(dark), -1)]).astype(np.int64)
    order = np.lexsort((cause, gates))
    gates, cause, level = gates[order], cause[order], level[order]
    keep = np.ones(len(gates), bool)
    keep[1:] = gates[1:] != gates[:-1]
    gates, cause, level = gates[keep], cause[keep], level[keep]

    # afterpulses from this block's non-afterpulse clicks
    trig = rng.random(len(gates)) < scenario.detector.p_afterpulse
    ap = gates[trig] + rng.integers(1, n_bins + 1, size=int(trig.sum()))
    ap_all = np.concatenate([carry_ap, ap])
    ap_in, ap_next = ap_all[ap_all < stop], ap_all[ap_all >= stop]
    ap_only = np.setdiff1d(ap_in, gates)

    gates = np.concatenate([gates, ap_only])
    cause = np.concatenate([cause, np.full(len(ap_only), AFTERPULSE)])
    level = np.concatenate([level, np.full(len(ap_only), -1)])
    order = np.argsort(gates, kind="stable")
    gates, cause, level = gates[order], cause[order], level[order]

    acc.causes += np.bincount(cause, minlength=4)
    owner = gates % n_bins
    active = owner < n_users
    acc.empty += int((~active).sum())

    joint, cond = tables
    g, c, lv, u = gates[active], cause[active], level[active], owner[active]
    m = len(g)
    # level of the owner's pulse for clicks not caused by that pulse
    missing = lv < 0
    cdf = np.cumsum(cond[u[missing]], axis=1)
    r = rng.random(int(missing.sum()))
    lv = lv.copy()
    lv[missing] = np.minimum((r[:, None] >= cdf[:, :2]).sum(axis=1), 2)

    a_basis = rng.integers(0, 2, size=m)
    b_basis = rng.integers(0, 2, size=m)
    bit = rng.integers(0, 2, size=m)
    e_opt = np.array([link.e_opt for link in scenario.users])
    p_err = np.where(c == PHOTON, e_opt[u], 0.5)
    err = rng.random(m) < p_err
    sift = a_basis == b_basis

    key = u * 3 + lv
    nbins = n_users * 3
    acc.detections += np.bincount(key, minlength=nbins).reshape(n_users, 3)
    acc.sifted += np.bincount(key[sift], minlength=nbins).reshape(n_users, 3)
    acc.errors += np.bincount(key[sift & err], minlength=nbins).reshape(n_users, 3)

    # pulse counts: clicked gates are known individually, the rest are multinomial
    frames = (stop - start) // n_bins
    clicked = np.bincount(key, minlength=nbins).reshape(n_users, 3)
    for user in range(n_users):
        rest = frames - int(clicked[user].sum())
        acc.pulses[user] += clicked[user] + rng.multinomial(rest, cond[user])

    if acc.events is not None:
        rand_det = rng.integers(0, 2, size=m)
        det = np.where(sift, bit ^ err, rand_det)
        for i in range(m):
            pulse = PulseRecord(int(g[i]), int(u[i]), LEVELS[lv[i]], "ZX"[a_basis[i]], int(bit[i]))
            acc.events.append((DetectionEvent(int(g[i]), f"D{det[i]}", CAUSES[c[i]]), pulse))
        for gi, ci in zip(gates[~active], cause[~active]):
            acc.events.append((DetectionEvent(int(gi), f"D{rng.integers(0, 2)}", CAUSES[ci]), None))
    return xt_next, ap_next


def _primary_stream(tasks: list[tuple], jobs: int) -> Iterator[tuple]:
    if jobs <= 1 or len(tasks) == 1:
        for task in tasks:
            yield _generate_block(task)
        return
    window = 4 * jobs
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for i in range(0, len(tasks), window):
            yield from pool.map(_generate_block, tasks[i:i + window])


def run_session(
    scenario: NetworkScenario,
    seed: int,
    total_gates: int,
    jobs: int = 1,
    record_events: bool = False,
) -> SessionTally:
    """Simulate ``total_gates`` detector gates and tally each active user's counts.

    ``total_gates`` must be a whole number of TDM frames. Output is
    bit-identical for fixed ``(scenario, seed, total_gates)`` whatever ``jobs`` is.
    """
    n_bins = scenario.bins
    total_gates = int(total_gates)
    if total_gates < n_bins:
        raise ValueError(f"total_gates ({total_gates}) must be at least one frame of {n_bins} gates")
    if total_gates % n_bins:
        raise ValueError(f"total_gates ({total_gates}) must be a multiple of N={n_bins}")
    if total_gates > MAX_GATES:
        raise OverflowError(f"total_gates above {MAX_GATES} would overflow 64-bit counters")

    bounds = _block_bounds(scenario, total_gates)
    tasks = [(scenario, seed, b, start, stop) for b, (start, stop) in enumerate(bounds)]
    tables = _level_tables(scenario)
    acc = _Accumulator(scenario, record_events)
    carry_xt = carry_ap = np.empty(0, np.int64)
    for (_, _, b, start, stop), primary in zip(tasks, _primary_stream(tasks, jobs)):
        carry_xt, carry_ap = _merge_block(scenario, seed, b, start, stop, primary,
                                          carry_xt, carry_ap, acc, tables)

    levels = [
        tuple(LevelTally(int(acc.pulses[u, k]), int(acc.sifted[u, k]), int(acc.errors[u, k]),
                         int(acc.detections[u, k])) for k in range(3))
        for u in range(scenario.active_users)
    ]
    return SessionTally(
        capacity=scenario.capacity,
        bins=n_bins,
        active_users=scenario.active_users,
        total_gates=total_gates,
        gate_rate_hz=scenario.detector.gate_rate_hz,
        seed=seed,
        levels=levels,
        causes={name: int(v) for name, v in zip(CAUSES, acc.causes)},
        empty_gate_clicks=acc.empty,
        events=acc.events,
    )


def expected_session(scenario: NetworkScenario, total_gates: int) -> SessionTally:
    """Expectation-value tallies in place of sampling. Not stochastic; flagged as such."""
    n_bins = scenario.bins
    if total_gates % n_bins or total_gates < n_bins:
        raise ValueError(f"total_gates must be a positive multiple of N={n_bins}")
    seconds = total_gates / scenario.detector.gate_rate_hz
    levels = [expected_tallies(scenario, u, seconds) for u in range(scenario.active_users)]
    frames = total_gates // n_bins
    det = scenario.detector
    causes = dict.fromkeys(CAUSES, 0.0)
    causes["dark"] = det.p_dark * total_gates
    spill = scenario.crosstalk.spill(n_bins)
    etas = [mean_detection_probability(scenario, v) for v in range(scenario.active_users)]
    for v, eta in enumerate(etas):
        causes["photon"] += eta * frames
        causes["crosstalk"] += sum(spill) * eta * frames
    primaries = causes["photon"] + causes["crosstalk"] + causes["dark"]
    causes["afterpulse"] = det.p_afterpulse * primaries
    empty = 0.0
    for b in range(scenario.active_users, n_bins):
        x = sum((spill[(b - v) % n_bins - 1] + det.p_afterpulse / n_bins) * eta for v, eta in enumerate(etas))
        empty += (det.p_dark + x) * frames
    return SessionTally(
        capacity=scenario.capacity,
        bins=n_bins,
        active_users=scenario.active_users,
        total_gates=total_gates,
        gate_rate_hz=det.gate_rate_hz,
        seed=None,
        levels=levels,
        causes=causes,
        empty_gate_clicks=empty,
        stochastic=False,
    )


def tally_to_reports(tally: SessionTally, scenario: NetworkScenario) -> list[KeyRateReport]:
    """Run every user's tallies through the same key-rate routine used for measured data."""
    t = tally.duration_s
    return [report_from_tallies(levels, scenario.decoy, t, f_ec=scenario.f_ec,
                                epsilon=scenario.epsilon, c=scenario.finite_size_c)
            for levels in tally.levels]


# --- comparison against the closed-form model --------------------------

class Agreement(NamedTuple):
    simulated: float
    predicted: float
    stderr: float

    @property
    def z(self) -> float:
        if self.stderr == 0:
            return 0.0 if self.simulated == self.predicted else math.inf
        return (self.simulated - self.predicted) / self.stderr


def gain_agreement(tally: SessionTally, scenario: NetworkScenario, level: int | None = None) -> Agreement:
    """Pooled per-gate click probability of all active users vs the analytic gain."""
    users = range(tally.active_users)
    ks = range(3) if level is None else (level,)
    clicks = sum(tally.levels[u][k].detections for u in users for k in ks)
    pulses = sum(tally.levels[u][k].pulses_sent for u in users for k in ks)
    predicted = 0.0
    for u in users:
        stats = level_statistics(scenario, u)
        predicted += sum(tally.levels[u][k].pulses_sent * stats[k].gain_per_gate for k in ks)
    p = predicted / pulses
    return Agreement(clicks / pulses, p, math.sqrt(p * (1 - p) / pulses))


def qber_agreement(tally: SessionTally, scenario: NetworkScenario, level: int = 0) -> Agreement:
    """Pooled sifted QBER at one intensity level vs the analytic QBER."""
    sifted = errors = 0
    weighted_err = weighted_gain = 0.0
    for u in range(tally.active_users):
        t = tally.levels[u][level]
        sifted += t.sifted_bits
        errors += t.sifted_errors
        stats = level_statistics(scenario, u)[level]
        weighted_err += t.pulses_sent * stats.error_per_gate
        weighted_gain += t.pulses_sent * stats.gain_per_gate
    e = weighted_err / weighted_gain
    return Agreement(errors / sifted, e, math.sqrt(e * (1 - e) / sifted))


def relative_count_increase(
    scenario: NetworkScenario,
    seed: int,
    total_gates: int,
    victim: int = 0,
    jobs: int = 1,
) -> Agreement:
    """Simulated (C_on - C_off) / C_off for one victim, with the other active users on vs off.

    C_on / C_off are the victim's click probabilities per gate with the
    aggressors transmitting or silent. Prediction: cross-talk excess over the
    victim's stand-alone gain.
    """
    if scenario.active_users < 2:
        raise ValueError("need at least one aggressor")
    alone = scenario.with_updates(active_users=1, users=(scenario.users[victim],))
    on = run_session(scenario, seed, total_gates, jobs=jobs)
    off = run_session(alone, seed + 1, total_gates, jobs=jobs)
    m_on, m_off = on.user_pulses(victim), off.user_pulses(0)
    c_on = on.user_detections(victim) / m_on
    c_off = off.user_detections(0) / m_off
    ratio = c_on / c_off
    var = ratio ** 2 * ((1 - c_on) / (c_on * m_on) + (1 - c_off) / (c_off * m_off))

    base = level_statistics(alone, 0)
    probs = scenario.decoy.probabilities
    gain_off = sum(p * s.gain_per_gate for p, s in zip(probs, base))
    predicted = crosstalk_excess(scenario, victim) / gain_off
    return Agreement(ratio - 1, predicted, math.sqrt(var))


# --- CSV ---------------------------------------------------------------

def write_tally_csv(tally: SessionTally, path: str | Path) -> Path:
    """One row per (user, level), then a per-cause diagnostics section and run metadata."""
    def write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "level", "pulses_sent", "detections", "sifted", "errors"])
        for u, levels in enumerate(tally.levels):
            for name, t in zip(LEVELS, levels):
                w.writerow([u, name, _fmt(t.pulses_sent), _fmt(t.detections),
                            _fmt(t.sifted_bits), _fmt(t.sifted_errors)])
        w.writerow([])
        w.writerow(["cause", "count"])
        for name in CAUSES:
            w.writerow([name, _fmt(tally.causes[name])])
        w.writerow(["empty_gate", _fmt(tally.empty_gate_clicks)])
        w.writerow([])
        w.writerow(["key", "value"])
        for key in ("capacity", "bins", "active_users", "total_gates", "gate_rate_hz", "seed", "stochastic"):
            value = getattr(tally, key)
            w.writerow([key, "" if value is None else _fmt(value)])

    return atomic_write(path, write)


def _num(s: str) -> float:
    return int(s) if s.lstrip("-").isdigit() else float(s)


def read_tally_csv(path: str | Path) -> SessionTally:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    sections: list[list[list[str]]] = [[]]
    for row in rows:
        if not row:
            sections.append([])
        else:
            sections[-1].append(row)
    users, causes, meta = sections[0][1:], sections[1][1:], dict(sections[2][1:])
    per_user: dict[int, list] = {}
    for u, name, pulses, det, sifted, errs in users:
        per_user.setdefault(int(u), [None] * 3)[LEVELS.index(name)] = LevelTally(
            _num(pulses), _num(sifted), _num(errs), _num(det))
    cause_map = {k: _num(v) for k, v in causes}
    empty = cause_map.pop("empty_gate")
    return SessionTally(
        capacity=int(meta["capacity"]),
        bins=int(meta["bins"]),
        active_users=int(meta["active_users"]),
        total_gates=int(meta["total_gates"]),
        gate_rate_hz=float(meta["gate_rate_hz"]),
        seed=int(meta["seed"]) if meta["seed"] else None,
        levels=[tuple(per_user[u]) for u in sorted(per_user)],
        causes=cause_map,
        empty_gate_clicks=empty,
        stochastic=meta["stochastic"] == "True",
    )
