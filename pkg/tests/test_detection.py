from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from platoonsec import presets
from platoonsec.comms import V2VPayload
from platoonsec.config import load_config
from platoonsec.detection import (
    CalibrationError,
    ContractError,
    DecisionState,
    DetectorState,
    GainError,
    IsolatorState,
    ObserverGains,
    ThresholdConfig,
    activate_isolator,
    calibrate_thresholds,
    decide,
    detector_step,
    ds_residual,
    is_residual,
    isolator_step,
)
from platoonsec.engine import run_scenario
from platoonsec.model import C_MATRIX, Measurement, build_matrices
from platoonsec.presets import HIGHWAY_PARAMS, URBAN_PARAMS
from platoonsec.supervisor import HIGHWAY, URBAN

GAINS = presets.default_gains()
THRESH = presets.default_thresholds()
PARAMS = {HIGHWAY: HIGHWAY_PARAMS, URBAN: URBAN_PARAMS}


def equilibrium(params, v=20.0):
    return np.array([params.desired_headway(v), v, 0.0, 0.0])


@pytest.mark.parametrize("mode", [HIGHWAY, URBAN])
def test_detector_at_truth_stays_at_truth(mode):
    p = PARAMS[mode]
    chi = equilibrium(p)
    leader = np.array([0.0, 20.0, 0.0, 0.0])
    state = DetectorState(chi.copy())
    for k in range(200):
        state = detector_step(state, leader, Measurement(chi[0], chi[1], k * 0.05), mode, GAINS[mode], p)
        assert state.innovation == 0.0
    np.testing.assert_allclose(state.chi_hat, chi, atol=1e-12)


@pytest.mark.parametrize("mode", [HIGHWAY, URBAN])
def test_detector_error_follows_error_dynamics(mode):
    p, g, dt = PARAMS[mode], GAINS[mode], 0.05
    chi = equilibrium(p)
    leader = np.array([0.0, 20.0, 0.0, 0.0])
    e0 = np.array([1.0, 1.0, 0.0, 0.0])
    state = DetectorState(chi + e0)
    A_err = build_matrices(p).A - g.L @ C_MATRIX
    # exact solution of the continuous error system; Euler stays close at this step size
    step = expm(A_err * dt)
    oracle = [e0]
    for _ in range(300):
        oracle.append(step @ oracle[-1])
    oracle_h = np.array([o[0] for o in oracle])
    for k in range(1, 301):
        state = detector_step(state, leader, Measurement(chi[0], chi[1], 0.0), mode, g, p, dt)
        assert abs(state.chi_hat[0] - chi[0] - oracle_h[k]) < 0.03
    above = np.flatnonzero(np.abs(oracle_h) >= 0.05)
    assert (above[-1] + 1) * dt < 10.0
    assert abs(state.chi_hat[0] - chi[0]) < 0.05


def test_detector_rejects_wrong_mode():
    with pytest.raises(ContractError):
        detector_step(DetectorState(np.zeros(4)), np.zeros(4), Measurement(0, 0, 0), URBAN, GAINS[HIGHWAY], URBAN_PARAMS)


def test_isolator_requires_activation():
    with pytest.raises(ContractError):
        isolator_step(IsolatorState(), np.zeros(4), Measurement(0, 0, 0), V2VPayload(0, 0, 0),
                      HIGHWAY, GAINS[HIGHWAY], HIGHWAY_PARAMS)


def test_activation_copies_detector_estimate():
    det = DetectorState(np.array([12.0, 20.0, 0.1, -0.2]))
    iso = activate_isolator(det, 3.5)
    assert iso.active and iso.activation_time == 3.5
    np.testing.assert_array_equal(iso.psi_hat, det.chi_hat)
    assert iso.psi_hat is not det.chi_hat


def test_spurious_activation_residual_decays():
    p, g = HIGHWAY_PARAMS, GAINS[HIGHWAY]
    chi = equilibrium(p)
    leader = np.array([0.0, 20.0, 0.0, 0.0])
    iso = IsolatorState(chi + np.array([0.5, 0.0, 0.0, 0.0]), True, 0.0)
    payload = V2VPayload(20.0, 0.0, 0.0)
    gammas = []
    for _ in range(2400):
        iso = isolator_step(iso, leader, Measurement(chi[0], chi[1], 0.0), payload, HIGHWAY, g, p)
        gammas.append(abs(iso.gamma))
    assert gammas[0] == pytest.approx(0.5)
    assert gammas[-1] < 0.05 * gammas[0]


def test_isolator_flags_executed_mode_mismatch(run_bundled):
    # a vehicle forced into urban gains on the highway drives the highway-model isolator past J_IS = 6
    log, report = run_bundled("case-study-2")
    act = report.isolation["activation_time"]
    after = log.t >= act
    assert np.abs(log.gamma[after, 8]).max() >= THRESH.j_is(HIGHWAY)


def test_v2v_attack_never_excites_isolator():
    config = replace(load_config("case-study-1"), noise_sigma=0.0)
    log, report = run_scenario(config)
    assert report.detection["vehicle"] == 8
    assert np.abs(log.gamma).max() < THRESH.j_is(URBAN)
    assert not log.v2i_flag.any()


def test_leader_estimate_is_leader_truth(run_bundled):
    log, _ = run_bundled("case-study-3")
    truth = np.column_stack([log.h[:, 0], log.v[:, 0], log.a[:, 0], log.u[:, 0]])
    np.testing.assert_array_equal(log.chi_hat[:, 0], truth)
    assert not log.herr[:, 0].any()


def test_ds_residual_examples():
    w = [0.1 * k for k in range(20)]
    assert ds_residual(w, w) == 0.0
    assert ds_residual([0.0] * 20, [1.0] * 20) == 0.0
    own = [0.5 ** 2] * 20
    assert ds_residual(own, [0.0] * 20) == pytest.approx(5.0)
    assert ds_residual(own, [0.0] * 20) >= THRESH.j_ds(HIGHWAY)


@settings(max_examples=60, deadline=None)
@given(own=st.lists(st.floats(0, 10), max_size=20), pred=st.lists(st.floats(0, 10), max_size=20))
def test_ds_residual_nonnegative(own, pred):
    assert ds_residual(own, pred) >= 0.0


def test_is_residual_examples():
    assert is_residual(Measurement(10.0, 5.0, 0.0), 10.0) == 0.0
    g = is_residual(Measurement(12.4, 0.0, 0.0), 6.1)
    assert g == pytest.approx(6.3) and abs(g) >= THRESH.j_is(HIGHWAY)
    g = is_residual(Measurement(8.0, 0.0, 0.0), 10.0)
    assert g == -2.0 and abs(g) < THRESH.j_is(URBAN)


def test_decide_flags_and_latches():
    d = decide({8: 4.2, 7: 0.1}, {}, THRESH, HIGHWAY, DecisionState(), 21.0)
    assert d.v2x == {8: 21.0} and d.newly_flagged == (8,)
    d = decide({8: 0.0, 7: 0.1}, {8: 0.2}, THRESH, HIGHWAY, d, 21.05)
    assert d.v2x == {8: 21.0} and d.newly_flagged == ()
    d = decide({8: 0.0}, {8: -6.5}, THRESH, HIGHWAY, d, 22.0)
    assert d.v2i_flag and d.v2i_time == 22.0 and d.v2i_vehicle == 8
    d2 = decide({8: 0.0}, {8: 0.0}, THRESH, HIGHWAY, d, 23.0)
    assert d2.v2i_time == 22.0


def test_decide_quiet_residuals_leave_state_unchanged():
    start = DecisionState()
    d = decide({i: 0.5 for i in range(1, 12)}, {}, THRESH, HIGHWAY, start, 1.0)
    assert d == start


def test_isolator_residual_needs_detection_first():
    d = decide({8: 0.0}, {8: 10.0}, THRESH, HIGHWAY, DecisionState(), 1.0)
    assert not d.v2i_flag


def test_gains_shape_and_stability_checks():
    with pytest.raises(GainError):
        ObserverGains(HIGHWAY, np.zeros((2, 4)), np.zeros((4, 2)))
    reference = presets.REFERENCE_GAIN_ROWS[HIGHWAY]
    with pytest.raises(GainError, match="A - LC"):
        ObserverGains.from_channel_rows(HIGHWAY, reference).require_stable(HIGHWAY_PARAMS)
    for mode, g in GAINS.items():
        g.require_stable(PARAMS[mode])


def test_threshold_config_validation():
    with pytest.raises(ValueError):
        ThresholdConfig({HIGHWAY: (0.0, 6.0)})
    with pytest.raises(ValueError):
        ThresholdConfig({HIGHWAY: (4.0, 6.0)}, window=0)


def _nominal(name, **kw):
    config = replace(load_config(name), diagnostic_isolators=True, **kw)
    return run_scenario(config)[0]


def test_calibration_margin_and_report():
    log = _nominal("nominal-highway")
    cal = calibrate_thresholds(log, margin=1.25)
    max_rc, max_gamma = cal.maxima[HIGHWAY]
    assert 0 < max_rc < 4.0 and 0 < max_gamma < 6.0
    assert cal.defaults_clear[HIGHWAY]
    assert cal.thresholds.j_is(HIGHWAY) == pytest.approx(max(1.25 * max_gamma, 1e-3))


def test_calibration_floor_for_silent_log():
    log = _nominal("nominal-urban", noise_sigma=0.0)
    cal = calibrate_thresholds(log, margin=1.25, floor=0.01)
    assert cal.maxima[URBAN] == (0.0, 0.0)
    assert cal.thresholds.levels[URBAN] == (0.01, 0.01)


def test_calibration_by_construction():
    log = _nominal("nominal-urban", duration=1.0)
    log.rc[:, 1:] = 0.0
    log.rc[5, 3] = 0.8
    assert calibrate_thresholds(log, margin=1.25).thresholds.j_ds(URBAN) == pytest.approx(1.0)


def test_calibration_rejects_flagged_log(run_bundled):
    log, _ = run_bundled("case-study-1")
    with pytest.raises(CalibrationError):
        calibrate_thresholds(log)
