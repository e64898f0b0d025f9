"""Closed-form per-gate channel model for the shared receiver.

Per-gate gain and error probabilities for one user's time bin, including
dark counts, the user's own afterpulses and the excess counts spilled by
the other active transmitters (cross-talk).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

from .params import LinkModel, NetworkScenario

log = logging.getLogger(__name__)


def _clamp(p: float, what: str) -> float:
    if p < 0.0 or p > 1.0:
        log.debug("clamping %s=%g into [0, 1]", what, p)
        return min(1.0, max(0.0, p))
    return p


def detection_probability(mu: float, link: LinkModel, eta_bob: float) -> float:
    """Probability that a pulse of mean photon number ``mu`` registers at the receiver.

    Linear in ``mu``: mean photons times channel transmittance times receiver
    efficiency, clamped to [0, 1].
    """
    if mu < 0:
        raise ValueError(f"mean photon number must be >= 0, got {mu}")
    return _clamp(mu * link.transmittance * eta_bob, "eta")


def single_user_error_probability(
    eta: float,
    e_opt: float,
    p_afterpulse: float,
    p_dark: float,
    n_bins: int,
    afterpulse_eta: float | None = None,
) -> float:
    """Error-count probability per gate for a transmitter alone on the network.

    Optical errors on detected photons, half of the user's own afterpulses
    (spread over ``n_bins`` gates) and half of the dark counts.
    ``afterpulse_eta`` is the detection probability of the pulse that caused
    the afterpulse; it defaults to ``eta``.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if afterpulse_eta is None:
        afterpulse_eta = eta
    return eta * e_opt + afterpulse_eta * p_afterpulse / (2 * n_bins) + p_dark / 2


def crosstalk_per_user(n_bins: int, p_afterpulse: float, base_excess: float = 0.019) -> float:
    """Average count-rate increase in a victim gate per added active user."""
    if n_bins < 2:
        raise ValueError("cross-talk is undefined for a single-bin network (N < 2)")
    return base_excess / (n_bins - 1) + p_afterpulse / n_bins


@dataclass(frozen=True)
class GateStatistics:
    gain_per_gate: float
    error_per_gate: float
    qber: float | None

    @property
    def degenerate(self) -> bool:
        return self.qber is None


def mean_detection_probability(scenario: NetworkScenario, user_index: int) -> float:
    """Detection probability averaged over the decoy intensity mix."""
    link = scenario.users[user_index]
    eta_bob = scenario.detector.eta_bob
    return sum(p * detection_probability(m, link, eta_bob)
               for m, p in zip(scenario.decoy.intensities, scenario.decoy.probabilities))


def crosstalk_excess(scenario: NetworkScenario, user_index: int) -> float:
    """Per-gate excess click probability in ``user_index``'s bin from all other active users.

    Each aggressor contributes its mean detection probability times the spill
    at its gate separation plus an afterpulse share of p_A/N. With the flat
    default profile this is p_X (n-1) eta for identical users.
    """
    n_bins = scenario.bins
    if scenario.active_users < 2:
        return 0.0
    spill = scenario.crosstalk.spill(n_bins)
    pa_share = scenario.detector.p_afterpulse / n_bins
    total = 0.0
    for v in range(scenario.active_users):
        if v == user_index:
            continue
        sep = (user_index - v) % n_bins
        total += (spill[sep - 1] + pa_share) * mean_detection_probability(scenario, v)
    return total


def network_gate_statistics(scenario: NetworkScenario, user_index: int, mu: float) -> GateStatistics:
    """Gain, error probability and QBER in one user's gate for pulses of intensity ``mu``.

    Photon and optical-error terms use the level's own detection probability.
    Afterpulse and cross-talk terms are driven by pulses in other gates, so
    they use mean detection probabilities over the decoy mix (the victim's
    own for its afterpulses, the aggressors' for cross-talk).
    """
    if not 0 <= user_index < scenario.active_users:
        raise IndexError(f"user_index {user_index} out of range for {scenario.active_users} active users")
    det = scenario.detector
    n_bins = scenario.bins
    link = scenario.users[user_index]
    eta = detection_probability(mu, link, det.eta_bob)
    eta_own = mean_detection_probability(scenario, user_index)
    x = crosstalk_excess(scenario, user_index)

    err = single_user_error_probability(eta, link.e_opt, det.p_afterpulse, det.p_dark, n_bins,
                                        afterpulse_eta=eta_own) + 0.5 * x
    gain = eta + eta_own * det.p_afterpulse / n_bins + det.p_dark + x
    gain = _clamp(gain, "gain")
    err = _clamp(err, "error")
    if gain <= 0:
        return GateStatistics(0.0, 0.0, None)
    return GateStatistics(gain, err, err / gain)


def level_statistics(scenario: NetworkScenario, user_index: int) -> tuple[GateStatistics, ...]:
    """Gate statistics for the signal, decoy and vacuum levels in that order."""
    return tuple(network_gate_statistics(scenario, user_index, m) for m in scenario.decoy.intensities)


def mean_gain(scenario: NetworkScenario, user_index: int) -> float:
    """Per-gate click probability averaged over the intensity mix."""
    stats = level_statistics(scenario, user_index)
    return sum(p * s.gain_per_gate for p, s in zip(scenario.decoy.probabilities, stats))


def session_counts(scenario: NetworkScenario, user_index: int, seconds: float | None = None) -> float:
    """Expected detector counts attributed to one transmitter over a session."""
    t = scenario.session_s if seconds is None else seconds
    return mean_gain(scenario, user_index) * scenario.transmitter_rate_hz * t
