"""Domain types for an upstream TDM quantum access network.

Every quantity used by the rate models lives here: the shared gated
detector, the decoy-state intensity plan, per-user links, cross-talk and
the full network scenario. Scenarios are immutable once built and are
validated on construction, so any instance that exists is usable by the
analytic and Monte Carlo paths without further checks.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, NamedTuple, Sequence

DEFAULT_FIBRE_LOSS_DB_PER_KM = 0.2

# measured 1xN splitter insertion loss (dB)
SPLITTER_LOSS_DB = {8: 9.7, 16: 13.0, 32: 16.1, 64: 19.5}
SPLITTER_EXCESS_DB = 0.6

DWDM_LOSS_DB = 2.5


class ScenarioError(ValueError):
    """A scenario violates one of its invariants or cannot be parsed."""


def _check_prob(name: str, value: float) -> None:
    if not (isinstance(value, (int, float)) and 0.0 <= value <= 1.0) or math.isnan(value):
        raise ScenarioError(f"{name} must be a probability in [0, 1], got {value!r}")


@dataclass(frozen=True)
class DetectorModel:
    """Shared gated single-photon receiver.

    ``eta_bob`` is the overall receiver detection probability used in the
    rate model (9.04 %), which folds receiver-interferometer loss into the
    raw 15 % APD efficiency. ``p_dark`` is the per-gate dark count
    probability of both detectors combined.
    """

    eta_bob: float = 0.0904
    p_dark: float = 2 * 8e-6
    p_afterpulse: float = 0.045
    gate_rate_hz: float = 1e9

    # raw APD efficiency, kept for reference only
    APD_EFFICIENCY = 0.15

    def __post_init__(self) -> None:
        _check_prob("detector.eta_bob", self.eta_bob)
        _check_prob("detector.p_dark", self.p_dark)
        _check_prob("detector.p_afterpulse", self.p_afterpulse)
        if not self.gate_rate_hz > 0:
            raise ScenarioError(f"detector.gate_rate_hz must be > 0, got {self.gate_rate_hz!r}")


@dataclass(frozen=True)
class DecoyProtocol:
    """Signal / decoy / vacuum intensities (photons per pulse) and send probabilities."""

    mu: float = 0.5
    nu: float = 0.1
    vacuum: float = 0.0002
    p_signal: float = 0.9883
    p_decoy: float = 0.0078
    p_vacuum: float = 0.0039

    def __post_init__(self) -> None:
        if not (self.mu > self.nu > self.vacuum >= 0):
            raise ScenarioError(
                f"decoy intensities must satisfy mu > nu > vacuum >= 0, "
                f"got mu={self.mu}, nu={self.nu}, vacuum={self.vacuum}"
            )
        for name in ("p_signal", "p_decoy", "p_vacuum"):
            _check_prob(f"decoy.{name}", getattr(self, name))
        total = self.p_signal + self.p_decoy + self.p_vacuum
        if abs(total - 1.0) > 1e-12:
            raise ScenarioError(f"decoy probabilities must sum to 1, got {total!r}")

    @property
    def intensities(self) -> tuple[float, float, float]:
        return (self.mu, self.nu, self.vacuum)

    @property
    def probabilities(self) -> tuple[float, float, float]:
        return (self.p_signal, self.p_decoy, self.p_vacuum)


# intensity level order used throughout
LEVELS = ("signal", "decoy", "vacuum")


@dataclass(frozen=True)
class LinkModel:
    """One transmitter's path to the node.

    ``total_loss_db`` overrides fibre + splitter when the end-to-end loss was
    measured directly.
    """

    fibre_km: float
    splitter_db: float
    e_opt: float = 0.005
    fibre_loss_db_per_km: float = DEFAULT_FIBRE_LOSS_DB_PER_KM
    total_loss_db: float | None = None

    def __post_init__(self) -> None:
        for name in ("fibre_km", "splitter_db", "fibre_loss_db_per_km"):
            value = getattr(self, name)
            if not value >= 0:
                raise ScenarioError(f"link.{name} must be nonnegative, got {value!r}")
        if self.total_loss_db is not None and not self.total_loss_db >= 0:
            raise ScenarioError(f"link.total_loss_db must be nonnegative, got {self.total_loss_db!r}")
        _check_prob("link.e_opt", self.e_opt)
        if self.e_opt > 0.5:
            raise ScenarioError(f"link.e_opt must be <= 0.5, got {self.e_opt!r}")

    @property
    def loss_db(self) -> float:
        if self.total_loss_db is not None:
            return self.total_loss_db
        return self.fibre_km * self.fibre_loss_db_per_km + self.splitter_db

    @property
    def transmittance(self) -> float:
        return 10 ** (-self.loss_db / 10)


@dataclass(frozen=True)
class CrossTalkModel:
    """Excess counts an aggressor's photon detection spills into other gates.

    ``base_excess`` is the total spill probability summed over all gate
    separations. ``profile``, when given, resolves it per separation
    (entry ``s - 1`` for separation ``s``) and must sum to ``base_excess``.
    """

    base_excess: float = 0.019
    profile: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not self.base_excess >= 0:
            raise ScenarioError(f"crosstalk.base_excess must be >= 0, got {self.base_excess!r}")
        if self.profile is not None:
            object.__setattr__(self, "profile", tuple(float(p) for p in self.profile))
            for p in self.profile:
                _check_prob("crosstalk.profile entry", p)
            if abs(sum(self.profile) - self.base_excess) > 1e-9:
                raise ScenarioError(
                    f"crosstalk.profile must sum to base_excess={self.base_excess}, got {sum(self.profile)!r}"
                )

    def spill(self, time_bins: int) -> list[float]:
        """Spill probability for separations 1 .. time_bins-1."""
        if time_bins < 2:
            return []
        if self.profile is None:
            return [self.base_excess / (time_bins - 1)] * (time_bins - 1)
        if len(self.profile) != time_bins - 1:
            raise ScenarioError(
                f"crosstalk.profile has {len(self.profile)} entries, expected {time_bins - 1}"
            )
        return list(self.profile)


@dataclass(frozen=True)
class NetworkScenario:
    """Full parameter set for one network configuration.

    ``capacity`` is the splitter fan-out. ``time_bins`` is the TDM frame
    length (defaults to ``capacity``); it only differs when fewer, faster
    transmitters emulate a full network, as in the 500 MHz two-user runs.
    Active users occupy time bins ``0 .. active_users - 1``.
    """

    capacity: int
    active_users: int
    users: tuple[LinkModel, ...]
    detector: DetectorModel = field(default_factory=DetectorModel)
    decoy: DecoyProtocol = field(default_factory=DecoyProtocol)
    session_s: float = 1200.0
    epsilon: float = 1e-10
    f_ec: float = 1.1
    finite_size_c: float = 1.0
    crosstalk: CrossTalkModel = field(default_factory=CrossTalkModel)
    time_bins: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "users", tuple(self.users))
        if not (isinstance(self.capacity, int) and self.capacity >= 1):
            raise ScenarioError(f"capacity must be an integer >= 1, got {self.capacity!r}")
        if not (isinstance(self.active_users, int) and self.active_users >= 1):
            raise ScenarioError(f"active_users must be an integer >= 1, got {self.active_users!r}")
        if self.time_bins is not None:
            if not (isinstance(self.time_bins, int) and 1 <= self.time_bins <= self.capacity):
                raise ScenarioError(
                    f"time_bins must be an integer in [1, capacity], got {self.time_bins!r}"
                )
        if self.active_users > self.bins:
            raise ScenarioError(
                f"active_users ({self.active_users}) must not exceed the number of time bins ({self.bins})"
            )
        if len(self.users) != self.active_users:
            raise ScenarioError(
                f"users must list one link per active user: {len(self.users)} links for {self.active_users} users"
            )
        if not self.session_s > 0:
            raise ScenarioError(f"session_s must be > 0, got {self.session_s!r}")
        if not 0 < self.epsilon < 1:
            raise ScenarioError(f"epsilon must be in (0, 1), got {self.epsilon!r}")
        if not self.f_ec >= 1:
            raise ScenarioError(f"f_ec must be >= 1, got {self.f_ec!r}")
        if not self.finite_size_c >= 0:
            raise ScenarioError(f"finite_size_c must be >= 0, got {self.finite_size_c!r}")
        # raises if a profile does not fit the frame
        self.crosstalk.spill(self.bins)

    @property
    def bins(self) -> int:
        return self.time_bins if self.time_bins is not None else self.capacity

    @property
    def transmitter_rate_hz(self) -> float:
        return self.detector.gate_rate_hz / self.bins

    def with_updates(self, **changes: Any) -> "NetworkScenario":
        return replace(self, **changes)


class SplitterLoss(NamedTuple):
    loss_db: float
    extrapolated: bool


def splitter_loss_for_ratio(ratio: int) -> SplitterLoss:
    """Insertion loss of a 1x``ratio`` passive splitter.

    Measured values are returned for 8, 16, 32 and 64 ports. Other powers of
    two use the ideal split loss plus a 0.6 dB excess and are flagged as
    extrapolated.
    """
    if isinstance(ratio, bool) or not isinstance(ratio, int) or ratio < 2 or ratio & (ratio - 1):
        raise ValueError(f"splitter ratio must be a power of two >= 2, got {ratio!r}")
    if ratio in SPLITTER_LOSS_DB:
        return SplitterLoss(SPLITTER_LOSS_DB[ratio], False)
    return SplitterLoss(10 * math.log10(ratio) + SPLITTER_EXCESS_DB, True)


def session_seconds_for_capacity(capacity: int) -> float:
    """Key session length schedule: 20 min up to 16 users, 2 h at 32, 12 h at 64 and beyond."""
    if capacity <= 16:
        return 20 * 60.0
    if capacity <= 32:
        return 2 * 3600.0
    return 12 * 3600.0


def homogeneous_scenario(
    capacity: int,
    active_users: int,
    fibre_km: float,
    splitter_db: float | None = None,
    e_opt: float = 0.005,
    session_s: float | None = None,
    **kwargs: Any,
) -> NetworkScenario:
    """All active users at the same fibre distance behind a 1x``capacity`` splitter."""
    if splitter_db is None:
        splitter_db = splitter_loss_for_ratio(capacity).loss_db
    if session_s is None:
        session_s = session_seconds_for_capacity(capacity)
    link = LinkModel(fibre_km=fibre_km, splitter_db=splitter_db, e_opt=e_opt)
    return NetworkScenario(
        capacity=capacity,
        active_users=active_users,
        users=(link,) * active_users,
        session_s=session_s,
        **kwargs,
    )


# --- JSON serialization ---------------------------------------------------

def _require(d: dict, key: str, where: str) -> Any:
    if key not in d:
        raise ScenarioError(f"missing required key '{key}' in {where}")
    return d[key]


def _link_from_dict(d: dict, i: int) -> LinkModel:
    where = f"users[{i}]"
    if not isinstance(d, dict):
        raise ScenarioError(f"{where} must be an object")
    return LinkModel(
        fibre_km=float(_require(d, "fibre_km", where)),
        splitter_db=float(_require(d, "splitter_db", where)),
        e_opt=float(_require(d, "e_opt", where)),
        fibre_loss_db_per_km=float(d.get("fibre_loss_db_km", DEFAULT_FIBRE_LOSS_DB_PER_KM)),
        total_loss_db=None if d.get("total_loss_db") is None else float(d["total_loss_db"]),
    )


def scenario_from_dict(d: dict) -> NetworkScenario:
    if not isinstance(d, dict):
        raise ScenarioError("scenario must be a JSON object")
    users = _require(d, "users", "scenario")
    if not isinstance(users, list):
        raise ScenarioError("users must be an array")
    det = _require(d, "detector", "scenario")
    dec = _require(d, "decoy", "scenario")
    xt = d.get("crosstalk", {})
    try:
        detector = DetectorModel(
            eta_bob=float(_require(det, "eta_bob", "detector")),
            p_dark=float(_require(det, "p_dark", "detector")),
            p_afterpulse=float(_require(det, "p_afterpulse", "detector")),
            gate_rate_hz=float(_require(det, "gate_rate_hz", "detector")),
        )
        decoy = DecoyProtocol(**{k: float(_require(dec, k, "decoy")) for k in
                                 ("mu", "nu", "vacuum", "p_signal", "p_decoy", "p_vacuum")})
        crosstalk = CrossTalkModel(
            base_excess=float(xt.get("base_excess", 0.019)),
            profile=None if xt.get("profile") is None else tuple(xt["profile"]),
        )
    except (TypeError, AttributeError) as exc:
        raise ScenarioError(f"malformed scenario section: {exc}") from exc
    capacity = _require(d, "capacity", "scenario")
    active = _require(d, "active_users", "scenario")
    time_bins = d.get("time_bins")
    for name, value in (("capacity", capacity), ("active_users", active), ("time_bins", time_bins)):
        if value is not None and (isinstance(value, bool) or not float(value).is_integer()):
            raise ScenarioError(f"{name} must be an integer, got {value!r}")
    return NetworkScenario(
        capacity=int(capacity),
        active_users=int(active),
        users=tuple(_link_from_dict(u, i) for i, u in enumerate(users)),
        detector=detector,
        decoy=decoy,
        session_s=float(_require(d, "session_s", "scenario")),
        epsilon=float(_require(d, "epsilon", "scenario")),
        f_ec=float(_require(d, "f_ec", "scenario")),
        finite_size_c=float(d.get("finite_size_c", 1.0)),
        crosstalk=crosstalk,
        time_bins=None if time_bins is None else int(time_bins),
    )


def scenario_to_dict(s: NetworkScenario) -> dict:
    users = []
    for u in s.users:
        entry = {"fibre_km": u.fibre_km, "splitter_db": u.splitter_db, "e_opt": u.e_opt}
        if u.fibre_loss_db_per_km != DEFAULT_FIBRE_LOSS_DB_PER_KM:
            entry["fibre_loss_db_km"] = u.fibre_loss_db_per_km
        if u.total_loss_db is not None:
            entry["total_loss_db"] = u.total_loss_db
        users.append(entry)
    out = {
        "capacity": s.capacity,
        "active_users": s.active_users,
        "users": users,
        "detector": {
            "eta_bob": s.detector.eta_bob,
            "p_dark": s.detector.p_dark,
            "p_afterpulse": s.detector.p_afterpulse,
            "gate_rate_hz": s.detector.gate_rate_hz,
        },
        "decoy": {k: getattr(s.decoy, k) for k in ("mu", "nu", "vacuum", "p_signal", "p_decoy", "p_vacuum")},
        "session_s": s.session_s,
        "epsilon": s.epsilon,
        "f_ec": s.f_ec,
        "finite_size_c": s.finite_size_c,
        "crosstalk": {"base_excess": s.crosstalk.base_excess},
    }
    if s.crosstalk.profile is not None:
        out["crosstalk"]["profile"] = list(s.crosstalk.profile)
    if s.time_bins is not None:
        out["time_bins"] = s.time_bins
    return out


def read_scenario_dict(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"cannot parse {path}: {exc}") from exc


def load_scenario(path: str | Path) -> NetworkScenario:
    """Read and validate a scenario JSON file."""
    return scenario_from_dict(read_scenario_dict(path))


def dump_scenario(s: NetworkScenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=2) + "\n")


def bundled_scenario_path(name: str) -> Path:
    """Path of one of the packaged example scenarios (``exp1_1x8``, ``exp2_dwdm``, ``gpon64``, ...)."""
    p = Path(__file__).parent / "scenarios" / f"{name}.json"
    if not p.exists():
        raise FileNotFoundError(p)
    return p


def users_from_losses(total_losses_db: Sequence[float], e_opt: float = 0.005) -> tuple[LinkModel, ...]:
    """Links described only by their measured end-to-end loss."""
    return tuple(LinkModel(fibre_km=0.0, splitter_db=0.0, e_opt=e_opt, total_loss_db=loss)
                 for loss in total_losses_db)
