import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from platoonsec.comms import (
    AttackConfigError,
    AttackSpec,
    ModeCommand,
    ReplayBuffer,
    transmit_v2i,
    transmit_v2v,
)
from platoonsec.model import VehicleState
from platoonsec.supervisor import HIGHWAY, URBAN

TRUTH = VehicleState(20.0, 25.0, 0.3, 0.4)


def test_identity_channel():
    p = transmit_v2v(TRUTH, [], 1.0)
    assert p.link_active and p.pred_velocity == 25.0
    assert (p.pred_acceleration, p.pred_control) == (0.3, 0.4)


def test_fdi_bias_on_velocity():
    atk = AttackSpec("V2V", "FDI", 8, start=0.0, bias=(5.0, 0.0, 0.0))
    p = transmit_v2v(TRUTH, [atk], 1.0, vehicle=8)
    assert p.pred_velocity == 30.0 and p.link_active
    assert p.pred_acceleration == 0.3


def test_fdi_sinusoid_starts_at_bias():
    atk = AttackSpec("V2V", "FDI", 8, start=10.0, amplitude=(1.0, 0.0, 0.0), period=4.0)
    assert transmit_v2v(TRUTH, [atk], 10.0).pred_velocity == pytest.approx(25.0)
    assert transmit_v2v(TRUTH, [atk], 11.0).pred_velocity == pytest.approx(26.0)


def test_dos_drops_link():
    atk = AttackSpec("V2V", "DoS", 3, start=0.0)
    p = transmit_v2v(TRUTH, [atk], 0.5, vehicle=3)
    assert not p.link_active and math.isnan(p.pred_velocity)


def test_blackhole_behaves_like_dos():
    atk = AttackSpec("V2V", "Blackhole", 3, start=0.0)
    assert not transmit_v2v(TRUTH, [atk], 0.5).link_active


def test_attack_on_other_receiver_is_ignored():
    atk = AttackSpec("V2V", "DoS", 3, start=0.0)
    assert transmit_v2v(TRUTH, [atk], 0.5, vehicle=4).link_active


def test_attack_window_is_half_open():
    atk = AttackSpec("V2V", "DoS", 3, start=1.0, end=2.0)
    assert transmit_v2v(TRUTH, [atk], 0.95).link_active
    assert not transmit_v2v(TRUTH, [atk], 1.0).link_active
    assert transmit_v2v(TRUTH, [atk], 2.0).link_active


def test_truth_is_not_mutated():
    before = TRUTH.chi.copy()
    atk = AttackSpec("V2V", "FDI", 1, start=0.0, bias=(1.0, 1.0, 1.0))
    transmit_v2v(TRUTH, [atk], 0.0)
    assert (TRUTH.chi == before).all()


def test_replay_returns_old_payload_and_degrades_before_history():
    dt = 0.05
    atk = AttackSpec("V2V", "Replay", 2, start=1.0, delay=0.5)
    buf = ReplayBuffer(0.5, dt)
    out = {}
    for k in range(41):
        t = round(k * dt, 10)
        out[t] = transmit_v2v(VehicleState(10.0, float(k), 0.0, 0.0), [atk], t, buf, vehicle=2)
    assert out[0.95].pred_velocity == 19.0
    assert out[1.0].pred_velocity == 10.0  # sample from t = 0.5
    assert out[2.0].pred_velocity == 30.0
    assert out[2.0].timestamp == 2.0

    early = AttackSpec("V2V", "Replay", 2, start=0.0, delay=0.5)
    buf = ReplayBuffer(0.5, dt)
    assert not transmit_v2v(TRUTH, [early], 0.0, buf).link_active


def test_attack_spec_validation():
    with pytest.raises(AttackConfigError):
        AttackSpec("V2V", "FDI", 1, start=5.0, end=5.0)
    with pytest.raises(AttackConfigError):
        AttackSpec("V2V", "FDI", 0, start=0.0)
    with pytest.raises(AttackConfigError):
        AttackSpec("V2I", "FDI", 1, start=0.0)
    with pytest.raises(AttackConfigError):
        AttackSpec("V2I", "Replay", 1, start=0.0, delay=1.0)
    with pytest.raises(AttackConfigError):
        AttackSpec("V2V", "Replay", 1, start=0.0)
    with pytest.raises(ValueError):
        AttackSpec("V2V", "Jamming", 1, start=0.0)


def test_v2i_identity():
    cmd = ModeCommand(HIGHWAY, 3.0)
    assert transmit_v2i(cmd, [], 8, 3.0) == cmd


def test_v2i_fdi_only_hits_target():
    atk = AttackSpec("V2I", "FDI", 8, start=20.0, mode_override=URBAN)
    cmd = ModeCommand(HIGHWAY, 20.0)
    assert transmit_v2i(cmd, [atk], 8, 20.0).commanded_mode == URBAN
    assert all(transmit_v2i(cmd, [atk], i, 20.0).commanded_mode == HIGHWAY for i in range(1, 12) if i != 8)
    assert transmit_v2i(cmd, [atk], 8, 19.95).commanded_mode == HIGHWAY


def test_v2i_dos_freezes_stale_mode():
    atk = AttackSpec("V2I", "DoS", 8, start=57.0)
    last = ModeCommand(HIGHWAY, 56.95)
    got = transmit_v2i(ModeCommand(URBAN, 57.0), [atk], 8, 57.0, last)
    assert got.commanded_mode == HIGHWAY
    assert transmit_v2i(ModeCommand(URBAN, 57.0), [atk], 7, 57.0, last).commanded_mode == URBAN


@settings(max_examples=50, deadline=None)
@given(
    start=st.floats(0.0, 50.0), length=st.floats(0.1, 50.0), t=st.floats(0.0, 120.0),
    bias=st.tuples(*[st.floats(-5, 5)] * 3),
)
def test_output_is_truth_outside_window(start, length, t, bias):
    atk = AttackSpec("V2V", "FDI", 4, start=start, end=start + length, bias=bias)
    p = transmit_v2v(TRUTH, [atk], t)
    if not atk.active(t):
        assert (p.pred_velocity, p.pred_acceleration, p.pred_control) == (25.0, 0.3, 0.4)
