import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from impedance_irl import envsim as E
from impedance_irl import experts as X
from impedance_irl.impedance import GainAction, GainSpace

SCHED = X.PhaseSchedule()


def test_phase_of_boundaries():
    assert X.phase_of(0.5, SCHED) == X.ACCELERATING
    assert X.phase_of(0.3, SCHED) == X.SWITCHING
    assert X.phase_of(0.1, SCHED) == X.REACHING
    assert X.phase_of(0.4, SCHED) == X.SWITCHING
    assert X.phase_of(0.2, SCHED) == X.REACHING
    with pytest.raises(ValueError):
        X.phase_of(-0.1, SCHED)


def test_schedule_validation():
    with pytest.raises(ValueError):
        X.PhaseSchedule(e1=0.2, e2=0.4)
    with pytest.raises(ValueError):
        X.PhaseSchedule(blend=0.3)


def test_phase_expert_action_examples():
    obs = np.array([0.5, 0.0, 0.0, 0.0, 0.0, 0.0])
    g = X.phase_expert_action(obs, SCHED)
    np.testing.assert_array_equal(g.k_diag, [1500.0] * 3)
    assert g.d == 1.0
    g = X.phase_expert_action(np.array([0.0, SCHED.e2 - 0.05, 0.0, 0, 0, 0]), SCHED)
    np.testing.assert_array_equal(g.k_diag, [100.0] * 3)
    assert g.d == 3.0


def test_phase_blend_midpoint():
    np.testing.assert_allclose(X.phase_gains(0.4, SCHED), [950.0] * 3 + [1.5])
    np.testing.assert_allclose(X.phase_gains(0.2, SCHED), [250.0] * 3 + [2.5])


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 1.0))
def test_phase_gains_continuous_and_piecewise_constant(e):
    h = 1e-7
    a, b = X.phase_gains(e, SCHED), X.phase_gains(e + h, SCHED)
    # blend slope is at most (1500 - 400) / 0.02 per metre
    assert np.max(np.abs(a - b)) <= 1100.0 / 0.02 * h * 1.0001
    in_band = abs(e - 0.4) <= 0.01 or abs(e - 0.2) <= 0.01
    if not in_band:
        assert any(np.array_equal(a, X._vec(g)) for g in (SCHED.gains_accel, SCHED.gains_switch, SCHED.gains_reach))


def test_tip_stiffness_vertical_by_hand():
    # theta = 0: J = [[1, 0, L], [0, 1, 0], [0, 0, 1]]; K_COM = [[a, 0, aL], [0, b, 0], [aL, 0, aL^2 + r]]
    a, b, r, L = 1800.0, 60.0, 30.0, 0.05
    e = np.array([0.002, 0.01, 0.01])
    k = X.tip_stiffness_gains(e, 0.0, [a, b, r], L)
    expected = np.array([(a * e[0] + a * L * e[2]) / e[0], b, (a * L * e[0] + (a * L * L + r) * e[2]) / e[2]])
    np.testing.assert_allclose(k, expected, rtol=1e-13)


def test_tip_stiffness_isotropic_orthonormal():
    k = X.tip_stiffness_gains(np.array([0.01, -0.02, 0.03]), 0.0, [7.0, 7.0, 7.0], 0.0)
    np.testing.assert_allclose(k, [7.0, 7.0, 7.0])


def test_tip_stiffness_depends_on_theta():
    e = np.array([0.003, 0.02, 0.01])
    k1 = X.tip_stiffness_gains(e, 0.0, [1800.0, 60.0, 30.0], 0.05)
    k2 = X.tip_stiffness_gains(e, 0.2, [1800.0, 60.0, 30.0], 0.05)
    assert not np.allclose(k1, k2)


def test_tip_stiffness_expert_action_valid(peg):
    s = E.reset(peg, peg.training, 0)
    obs = E.observe(peg, s)
    g = X.tip_stiffness_expert_action(obs, s, np.diag([1800.0, 60.0, 30.0]), 0.05, peg.k_min, peg.k_max)
    assert isinstance(g, GainAction) and np.all(g.k_diag >= peg.k_min) and np.all(g.k_diag <= peg.k_max)


@pytest.mark.parametrize("task", ["peg_in_hole", "cup_on_plate", "reach"])
def test_expert_succeeds_and_forces_consistent(task, request):
    spec = request.getfixturevalue({"peg_in_hole": "peg", "cup_on_plate": "cup", "reach": "reach"}[task])
    demos = X.collect_demos(spec, X.expert_for(spec), 50, seed=0)
    assert demos.count == 50
    space = GainSpace.from_env(spec)
    for tr in demos.trajectories:
        assert tr.success
        np.testing.assert_array_equal(space.force(tr.action, tr.e, tr.edot), tr.force)


def test_expert_success_rate_is_total(cup):
    space = GainSpace.from_env(cup)
    ex = X.expert_for(cup)
    data = E.rollout(cup, cup.training, range(50), lambda o, s, t: (None, ex(cup, o, s), None), space)
    assert data.success.mean() == 1.0


def test_collect_demos_deterministic(peg):
    a = X.collect_demos(peg, X.expert_for(peg), 1, seed=3)
    b = X.collect_demos(peg, X.expert_for(peg), 1, seed=3)
    assert a.trajectories[0].x.tobytes() == b.trajectories[0].x.tobytes()


def test_noisy_demos_fixed_start(cup):
    d = X.collect_demos(cup, X.expert_for(cup), 30, X.NoisePolicy(0.2), seed=1, fixed_start=True)
    assert d.count == 30 and "noise" in d.generator
    starts = np.stack([t.x[0] for t in d.trajectories])
    assert np.all(starts == starts[0])
    first_gains = np.stack([t.action[0] for t in d.trajectories])
    assert np.unique(first_gains[:, 0]).size > 1


def test_collect_demos_failure_names_expert(peg):
    class Bad(X.Expert):
        name = "limp"

        def __call__(self, spec, obs, state):
            return np.tile([10.0, 10.0, 1.0], obs.shape[:-1] + (1,))
    with pytest.raises(RuntimeError, match="limp.*peg_in_hole"):
        X.collect_demos(peg, Bad(), 2)


def test_collect_demos_rejects_zero(peg):
    with pytest.raises(ValueError):
        X.collect_demos(peg, X.expert_for(peg), 0)


def test_demo_round_trip_bit_exact(tmp_path, cup):
    d = X.collect_demos(cup, X.expert_for(cup), 3, seed=0, config_hash="abc")
    X.save_demos(d, tmp_path / "d.jsonl")
    back = X.load_demos(tmp_path / "d.jsonl")
    assert (back.count, back.task_id, back.generator, back.config_hash) == (3, "cup_on_plate", "phase", "abc")
    for a, b in zip(d.trajectories, back.trajectories):
        for name in ("e", "edot", "action", "force"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
        assert a.err.tobytes() == b.err.tobytes()


def test_load_demos_rejects_bad_files(tmp_path, reach):
    d = X.collect_demos(reach, X.expert_for(reach), 2, seed=0)
    X.save_demos(d, tmp_path / "d.jsonl")
    lines = (tmp_path / "d.jsonl").read_text().splitlines()
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(ValueError):
        X.load_demos(tmp_path / "empty.jsonl")
    nof = [lines[0]] + [l.replace('"force"', '"f0rce"') for l in lines[1:]]
    (tmp_path / "nof.jsonl").write_text("\n".join(nof))
    with pytest.raises(ValueError, match="force"):
        X.load_demos(tmp_path / "nof.jsonl")
    (tmp_path / "short.jsonl").write_text("\n".join(lines[: len(lines) // 2 + 1]))
    with pytest.raises(ValueError):
        X.load_demos(tmp_path / "short.jsonl")


def test_demo_history_observations(reach):
    d = X.collect_demos(reach, X.expert_for(reach), 1, seed=0)
    tr = d.trajectories[0]
    h = X.demo_observations(tr, history=True)
    assert h.shape == (len(tr), 10)
    np.testing.assert_array_equal(h[0, 2:], 0.0)
    np.testing.assert_array_equal(h[3, 2:4], np.concatenate([tr.e[2], tr.edot[2]]))
    # matches the online history buffer used in rollouts
    space = GainSpace.from_env(reach)
    data = E.rollout(reach, reach.training, [X.rollout_seed(0, 0)],
                     lambda o, s, t: (None, np.full((1, 1), 400.0), None), space, history=True)
    np.testing.assert_array_equal(data.obs[0], h)


def test_demoset_dimension_check(reach, peg):
    a = X.collect_demos(reach, X.expert_for(reach), 1).trajectories
    b = X.collect_demos(peg, X.expert_for(peg), 1).trajectories
    with pytest.raises(ValueError):
        X.DemoSet(a + b, "mixed", "x")
