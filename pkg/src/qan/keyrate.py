"""Decoy-state estimation and finite-size secure key rate.

The same routine turns per-level tallies into a key rate whether the tallies
are expectation values from the analytic channel model or counts observed in
a Monte Carlo session.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

from .link import level_statistics
from .params import DecoyProtocol, NetworkScenario

SIFTING = 0.5


def binary_entropy(x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary entropy needs a probability, got {x}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


@dataclass(frozen=True)
class LevelTally:
    """Counts for one intensity level of one user.

    Values may be fractional when they are expectations rather than observed
    counts. ``detections`` (raw clicks before sifting) is diagnostic only.
    """

    pulses_sent: float
    sifted_bits: float
    sifted_errors: float
    detections: float | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.sifted_errors <= self.sifted_bits <= self.pulses_sent:
            raise ValueError(
                "LevelTally needs 0 <= sifted_errors <= sifted_bits <= pulses_sent, got "
                f"{self.sifted_errors}, {self.sifted_bits}, {self.pulses_sent}"
            )

    @property
    def gain(self) -> float:
        """Per-pulse detection probability inferred from the sifted bits."""
        if self.pulses_sent == 0:
            return 0.0
        return self.sifted_bits / (SIFTING * self.pulses_sent)

    @property
    def qber(self) -> float:
        return self.sifted_errors / self.sifted_bits if self.sifted_bits else 0.0


class SinglePhotonEstimate(NamedTuple):
    y1_lower: float
    e1_upper: float
    y0: float
    ok: bool


def estimate_single_photon(tallies: Sequence[LevelTally], decoy: DecoyProtocol) -> SinglePhotonEstimate:
    """Vacuum + weak decoy bounds on the single-photon yield and error rate.

    ``tallies`` are ordered signal, decoy, vacuum. ``ok`` is False when the
    yield bound is not positive, which means there is no usable single-photon
    contribution (too few counts, or a channel that looks attacked).

    The vacuum level may carry a small residual intensity ``w``. With
    ``w = 0`` the bounds reduce to

        Y0 = Q_w
        Y1 >= mu / (mu nu - nu^2) * (Q_nu e^nu - Q_mu e^mu nu^2/mu^2 - (mu^2 - nu^2)/mu^2 Y0)
        e1 <= (E_nu Q_nu e^nu - Y0 / 2) / (Y1 nu)

    and for ``w > 0`` the weak-vacuum generalisation keeps them valid
    (Y0 lower bound from the decoy and vacuum levels, vacuum-level error
    counts in place of Y0 / 2).
    """
    sig, dec, vac = tallies
    mu, nu, w = decoy.mu, decoy.nu, decoy.vacuum
    if mu == nu:
        raise ZeroDivisionError("signal and decoy intensities must differ")
    if min(sig.pulses_sent, dec.pulses_sent, vac.pulses_sent) <= 0:
        return SinglePhotonEstimate(0.0, 0.5, 0.0, False)

    q_mu, q_nu, q_w = sig.gain, dec.gain, vac.gain
    if w == 0:
        y0 = q_w
    else:
        y0 = max(0.0, (nu * q_w * math.exp(w) - w * q_nu * math.exp(nu)) / (nu - w))
    y1 = mu / (mu * nu - mu * w - nu * nu + w * w) * (
        q_nu * math.exp(nu)
        - q_w * math.exp(w)
        - (nu * nu - w * w) / (mu * mu) * (q_mu * math.exp(mu) - y0)
    )
    y0 = min(1.0, max(0.0, y0))
    if not y1 > 0:
        return SinglePhotonEstimate(0.0, 0.5, y0, False)
    y1 = min(1.0, y1)
    e1 = (dec.qber * q_nu * math.exp(nu) - vac.qber * q_w * math.exp(w)) / ((nu - w) * y1)
    e1 = min(1.0, max(0.0, e1))
    return SinglePhotonEstimate(y1, e1, y0, True)


def finite_size_penalty(q: float, epsilon: float, c: float = 1.0) -> int:
    """Key bits lost to finite statistics: c * sqrt(Q) * log2(1/epsilon), rounded up."""
    if q < 0:
        raise ValueError("Q must be nonnegative")
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must be in (0, 1)")
    return math.ceil(c * math.sqrt(q) * math.log2(1 / epsilon))


@dataclass(frozen=True)
class KeyRateReport:
    Q: float
    Q1: float
    Q0: float
    e: float
    e1: float
    delta: float
    secure_bits: float
    rate_bps: float
    session_s: float
    no_key: bool = False
    reason: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def secure_key_rate(
    Q: float,
    Q1: float,
    Q0: float,
    e: float,
    e1: float,
    f_ec: float,
    delta: float,
    t: float,
) -> KeyRateReport:
    """Secure bits left after error correction, privacy amplification and the finite-size cut.

    Negative results are clamped to zero and flagged ``no_key``.
    """
    if not t > 0:
        raise ValueError("session time must be positive")
    if e1 > 0.5:
        return KeyRateReport(Q, Q1, Q0, e, e1, delta, 0.0, 0.0, t, True, "single-photon error bound above 0.5")
    bits = Q1 * (1 - binary_entropy(e1)) - Q * f_ec * binary_entropy(min(e, 1.0)) + Q0 - delta
    if bits <= 0:
        return KeyRateReport(Q, Q1, Q0, e, e1, delta, 0.0, 0.0, t, True, "no positive key length")
    return KeyRateReport(Q, Q1, Q0, e, e1, delta, bits, bits / t, t)


def report_from_tallies(
    tallies: Sequence[LevelTally],
    decoy: DecoyProtocol,
    t: float,
    f_ec: float = 1.1,
    epsilon: float = 1e-10,
    c: float = 1.0,
) -> KeyRateReport:
    """Full post-processing chain for one user: decoy estimate, finite-size cut, key rate."""
    sig = tallies[0]
    Q = sig.sifted_bits
    e = sig.qber
    est = estimate_single_photon(tallies, decoy)
    if not est.ok or sig.gain <= 0:
        return KeyRateReport(Q, 0.0, 0.0, e, est.e1_upper, 0.0, 0.0, 0.0, t, True,
                             "single-photon estimation failed")
    mu = decoy.mu
    q_mu = sig.gain
    Q1 = min(Q, Q * mu * math.exp(-mu) * est.y1_lower / q_mu)
    Q0 = min(Q - Q1, Q * math.exp(-mu) * est.y0 / q_mu)
    delta = finite_size_penalty(Q, epsilon, c)
    return secure_key_rate(Q, Q1, Q0, e, est.e1_upper, f_ec, delta, t)


def expected_tallies(scenario: NetworkScenario, user_index: int, seconds: float | None = None) -> tuple[LevelTally, ...]:
    """Expectation-value tallies for one user over a session."""
    t = scenario.session_s if seconds is None else seconds
    pulses_total = scenario.transmitter_rate_hz * t
    out = []
    for p, stats in zip(scenario.decoy.probabilities, level_statistics(scenario, user_index)):
        pulses = pulses_total * p
        out.append(LevelTally(
            pulses_sent=pulses,
            sifted_bits=SIFTING * stats.gain_per_gate * pulses,
            sifted_errors=SIFTING * stats.error_per_gate * pulses,
            detections=stats.gain_per_gate * pulses,
        ))
    return tuple(out)


def analytic_session_rate(scenario: NetworkScenario, user_index: int = 0) -> KeyRateReport:
    """Expected key rate of one user over the scenario's session length."""
    tallies = expected_tallies(scenario, user_index)
    return report_from_tallies(tallies, scenario.decoy, scenario.session_s,
                               f_ec=scenario.f_ec, epsilon=scenario.epsilon, c=scenario.finite_size_c)
