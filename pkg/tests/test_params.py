import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qan.params import (
    CrossTalkModel,
    DecoyProtocol,
    DetectorModel,
    LinkModel,
    NetworkScenario,
    ScenarioError,
    bundled_scenario_path,
    dump_scenario,
    homogeneous_scenario,
    load_scenario,
    scenario_from_dict,
    scenario_to_dict,
    session_seconds_for_capacity,
    splitter_loss_for_ratio,
)


def _scenario_dict(**changes):
    d = json.loads(bundled_scenario_path("exp1_1x8").read_text())
    d.update(changes)
    return d


def _write(tmp_path, d, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return p


def test_experiment_one_scenario(exp1):
    assert exp1.capacity == 8
    assert exp1.active_users == 2
    assert [u.loss_db for u in exp1.users] == [13.6, 14.0]
    assert exp1.transmitter_rate_hz == 125e6
    assert exp1.detector.eta_bob == 0.0904
    assert exp1.detector.p_dark == 2 * 8e-6
    assert exp1.decoy == DecoyProtocol(0.5, 0.1, 0.0002, 0.9883, 0.0078, 0.0039)
    assert exp1.epsilon == 1e-10
    assert exp1.f_ec == 1.1


def test_probabilities_must_sum_to_one(tmp_path):
    d = _scenario_dict()
    d["decoy"]["p_signal"] = 0.9783
    with pytest.raises(ScenarioError, match="sum to 1"):
        load_scenario(_write(tmp_path, d))


def test_finite_size_c_defaults_to_one(tmp_path):
    d = _scenario_dict()
    del d["finite_size_c"]
    assert load_scenario(_write(tmp_path, d)).finite_size_c == 1.0


def test_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{ not json")
    with pytest.raises(ScenarioError, match="cannot parse"):
        load_scenario(p)


def test_missing_key_named(tmp_path):
    d = _scenario_dict()
    del d["epsilon"]
    with pytest.raises(ScenarioError, match="'epsilon'"):
        load_scenario(_write(tmp_path, d))


@pytest.mark.parametrize("changes, message", [
    ({"active_users": 9}, "active_users"),
    ({"capacity": 1}, "active_users"),
    ({"epsilon": 0.0}, "epsilon"),
    ({"f_ec": 0.9}, "f_ec"),
    ({"session_s": 0}, "session_s"),
])
def test_validation_rejects(changes, message):
    d = _scenario_dict(**changes)
    with pytest.raises(ScenarioError, match=message):
        scenario_from_dict(d)


def test_validation_rejects_negative_loss():
    d = _scenario_dict()
    d["users"][0]["splitter_db"] = -1.0
    with pytest.raises(ScenarioError, match="splitter_db"):
        scenario_from_dict(d)


@pytest.mark.parametrize("field", ["eta_bob", "p_dark", "p_afterpulse"])
def test_validation_rejects_bad_probability(field):
    d = _scenario_dict()
    d["detector"][field] = 1.5
    with pytest.raises(ScenarioError, match=field):
        scenario_from_dict(d)


def test_decoy_ordering():
    with pytest.raises(ScenarioError, match="mu > nu"):
        DecoyProtocol(mu=0.1, nu=0.5)


def test_user_count_must_match():
    with pytest.raises(ScenarioError, match="one link per active user"):
        NetworkScenario(capacity=8, active_users=2, users=(LinkModel(0, 9.7),))


def test_e_opt_at_most_half():
    with pytest.raises(ScenarioError, match="e_opt"):
        LinkModel(0, 0, e_opt=0.6)


def test_total_loss_overrides_fibre_and_splitter():
    assert LinkModel(20, 9.7).loss_db == pytest.approx(13.7)
    assert LinkModel(20, 9.7, total_loss_db=13.6).loss_db == 13.6


def test_crosstalk_profile_must_sum_to_base():
    CrossTalkModel(0.019, (0.01, 0.009))
    with pytest.raises(ScenarioError, match="sum to base_excess"):
        CrossTalkModel(0.019, (0.01, 0.01))


def test_crosstalk_profile_length_checked_against_frame():
    with pytest.raises(ScenarioError, match="entries"):
        homogeneous_scenario(8, 2, 0.0, crosstalk=CrossTalkModel(0.019, (0.019,)))


def test_flat_spill():
    spill = CrossTalkModel().spill(8)
    assert len(spill) == 7
    assert sum(spill) == pytest.approx(0.019, abs=1e-15)


@pytest.mark.parametrize("ratio, loss", [(8, 9.7), (16, 13.0), (32, 16.1), (64, 19.5)])
def test_tabulated_splitter_losses(ratio, loss):
    assert splitter_loss_for_ratio(ratio) == (loss, False)


def test_splitter_extrapolation():
    loss, flagged = splitter_loss_for_ratio(2)
    assert flagged
    assert loss == pytest.approx(3.61029995663981, abs=1e-12)
    assert splitter_loss_for_ratio(128).extrapolated


@pytest.mark.parametrize("ratio", [0, 1, 3, 12, 48, 2.0])
def test_splitter_rejects_non_power_of_two(ratio):
    with pytest.raises(ValueError):
        splitter_loss_for_ratio(ratio)


def test_session_schedule():
    assert session_seconds_for_capacity(8) == 1200
    assert session_seconds_for_capacity(16) == 1200
    assert session_seconds_for_capacity(32) == 7200
    assert session_seconds_for_capacity(64) == 43200


def test_detector_defaults():
    det = DetectorModel()
    assert det.p_dark == 1.6e-5
    assert DetectorModel.APD_EFFICIENCY == 0.15
    assert det.eta_bob == 0.0904


def test_time_bins_sets_transmitter_clock():
    s = homogeneous_scenario(64, 2, 20.0, time_bins=2)
    assert s.transmitter_rate_hz == 500e6
    with pytest.raises(ScenarioError, match="time bins"):
        homogeneous_scenario(64, 3, 20.0, time_bins=2)


@pytest.mark.parametrize("name", ["exp1_1x8", "exp2_dwdm", "gpon64"])
def test_bundled_round_trip(tmp_path, name):
    s = load_scenario(bundled_scenario_path(name))
    dump_scenario(s, tmp_path / "out.json")
    assert load_scenario(tmp_path / "out.json") == s


probs = st.floats(0, 1, allow_nan=False)


@st.composite
def scenarios(draw):
    capacity = draw(st.sampled_from([2, 4, 8, 16, 32, 64]))
    bins = draw(st.one_of(st.none(), st.integers(1, capacity)))
    frame = capacity if bins is None else bins
    n = draw(st.integers(1, frame))
    users = tuple(
        LinkModel(
            fibre_km=draw(st.floats(0, 100)),
            splitter_db=draw(st.floats(0, 30)),
            e_opt=draw(st.floats(0, 0.5)),
            fibre_loss_db_per_km=draw(st.sampled_from([0.2, 0.18, 0.35])),
            total_loss_db=draw(st.one_of(st.none(), st.floats(0, 60))),
        )
        for _ in range(n)
    )
    mu = draw(st.floats(0.2, 1.0))
    nu = draw(st.floats(0.01, 0.9)) * mu
    ps = draw(st.floats(0.5, 0.99))
    pd = draw(st.floats(0, 1 - ps))
    return NetworkScenario(
        capacity=capacity,
        active_users=n,
        users=users,
        detector=DetectorModel(draw(probs), draw(probs), draw(probs), draw(st.floats(1e6, 1e10))),
        decoy=DecoyProtocol(mu, nu, draw(st.floats(0, 0.9)) * nu, ps, pd, 1 - ps - pd),
        session_s=draw(st.floats(1, 1e6)),
        epsilon=draw(st.floats(1e-20, 0.5)),
        f_ec=draw(st.floats(1, 2)),
        finite_size_c=draw(st.floats(0, 10)),
        time_bins=bins,
    )


@settings(max_examples=200, deadline=None)
@given(scenarios())
def test_round_trip_property(s):
    text = json.dumps(scenario_to_dict(s))
    assert scenario_from_dict(json.loads(text)) == s


@given(st.integers(2, 64), st.integers(1, 80))
def test_active_users_bound_property(capacity, n):
    link = LinkModel(0, 0)
    if n <= capacity:
        assert NetworkScenario(capacity, n, (link,) * n).active_users == n
    else:
        with pytest.raises(ScenarioError):
            NetworkScenario(capacity, n, (link,) * n)
