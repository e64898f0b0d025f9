"""Closed-form gain plus the afterpulses that dark and cross-talk clicks trigger in the simulation."""
from qan.link import level_statistics, mean_detection_probability


def secondary_afterpulse_rate(scenario):
    """Per-gate afterpulse probability from non-photon primary clicks, averaged over gates."""
    det = scenario.detector
    photons = sum(mean_detection_probability(scenario, v) for v in range(scenario.active_users)) / scenario.bins
    return det.p_afterpulse * (det.p_dark + scenario.crosstalk.base_excess * photons)


def corrected_level(scenario, user, level=0):
    """(gain, qber) of one level including the secondary afterpulses (which carry random bits)."""
    stats = level_statistics(scenario, user)[level]
    extra = secondary_afterpulse_rate(scenario)
    gain = stats.gain_per_gate + extra
    return gain, (stats.error_per_gate + extra / 2) / gain
