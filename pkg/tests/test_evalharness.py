import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from impedance_irl import evalharness as H
from impedance_irl import experts as X
from impedance_irl.approx import GaussianPolicy, RewardNet
from impedance_irl.envsim import Trajectory, obs_dim
from impedance_irl.impedance import make_action_space


def _peg_traj(spec, xs):
    x = np.asarray(xs, float)
    n = len(x) - 1
    return Trajectory(x=x, xdot=np.zeros_like(x), obs=np.zeros((n, 6)), action=np.zeros((n, 3)),
                      force=np.zeros((n, 3)), goal=np.asarray(spec.goal))


def test_pih_score_examples(peg):
    g = np.asarray(peg.goal)
    held = _peg_traj(peg, np.tile(g, (11, 1)))
    assert H.pih_score(held, peg) == 0.0
    off = _peg_traj(peg, np.tile(g + [0.05, 0.0, 0.0], (11, 1)))
    assert H.pih_score(off, peg) == -0.1
    half = np.tile(g + [0.0, 0.02, 0.0], (11, 1))
    half[6:, 0] = 0.05
    assert H.pih_score(_peg_traj(peg, half), peg) == pytest.approx(-(0.5 * 0.1 + 0.5 * 0.02), abs=1e-15)


def test_pih_tolerance_is_clearance(peg):
    tol = (peg.contact.hole_width - peg.contact.peg_width) / 2
    g = np.asarray(peg.goal)
    inside = H.pih_step_scores(peg, g + [0.999 * tol, 0.0, 0.0])
    outside = H.pih_step_scores(peg, g + [1.001 * tol, 0.0, 0.0])
    assert inside == 0.0 and outside == -H.C_ALIGN


def test_cop_score_examples(cup):
    sched = X.schedule_for(cup)
    n = 20
    parked = Trajectory(x=np.zeros((n + 1, 3)), xdot=np.zeros((n + 1, 3)), obs=np.zeros((n, 6)),
                        action=np.zeros((n, 4)), force=np.zeros((n, 3)), goal=np.zeros(3))
    assert H.cop_score(parked, sched) == 0.0
    v = np.zeros((n + 1, 3))
    v[:, 0] = 0.1
    x = np.zeros((n + 1, 3))
    x[:, 1] = 0.1  # reaching phase, |e| < e2
    reaching = Trajectory(x=x, xdot=v, obs=np.zeros((n, 6)), action=np.zeros((n, 4)), force=np.zeros((n, 3)),
                          goal=np.zeros(3))
    assert H.cop_score(reaching, sched) == pytest.approx(-0.1, abs=1e-15)
    assert (sched.e1, sched.e2) == (0.4, 0.2)
    # accelerating and switching attribution
    assert H.cop_step_scores([0.5, 0, 0], [1.0, 0, 0], sched) == -0.5
    assert H.cop_step_scores([0.3, 0, 0], [1.0, 0, 0], sched) == pytest.approx(-1.3)


def test_relative_perf_diff():
    assert H.relative_perf_diff(-2.0, -2.0) == 0.0
    assert H.relative_perf_diff(-1.01 * 3.0, -3.0) == pytest.approx(0.01)
    assert H.relative_perf_diff(-4.0, -2.0) == 1.0
    with pytest.raises(ValueError):
        H.relative_perf_diff(-1.0, 0.0)


def test_deviation_metrics():
    t = np.linspace(0, 1, 50)
    line = np.stack([t, 2 * t], axis=1)
    assert H.deviation_metrics(line, line) == (0.0, 0.0)
    shifted = line + [0.0, 0.01]
    avg, fin = H.deviation_metrics(np.stack([t, np.zeros(50)], 1), np.stack([t, np.zeros(50)], 1) + [0, 0.01])
    assert avg == pytest.approx(0.01, abs=1e-15) and fin == pytest.approx(0.01, abs=1e-15)
    half = line[:25]
    ref = np.stack([np.linspace(0, 1, 49), 2 * np.linspace(0, 1, 49)], 1)
    half = ref[:25]  # same line, half speed: only gets halfway
    _, fin = H.deviation_metrics(half, ref)
    assert fin == pytest.approx(np.linalg.norm(ref[-1] - ref[0]) / 2, rel=1e-12)
    with pytest.raises(ValueError):
        H.deviation_metrics(np.zeros((0, 2)), line)
    assert H.deviation_metrics(shifted, line)[0] <= 0.01 + 1e-15


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.05, 0.05), st.floats(-0.05, 0.05), st.integers(0, 1000))
def test_rigid_shift_symmetric(dx, dy, seed):
    p = np.cumsum(np.random.default_rng(seed).normal(size=(30, 2)), axis=0)
    q = p + [dx, dy]
    assert H.deviation_metrics(p, q)[1] == pytest.approx(H.deviation_metrics(q, p)[1], abs=1e-15)
    assert H.deviation_metrics(p, q)[0] == pytest.approx(H.deviation_metrics(q, p)[0], abs=1e-12)


def test_performance_score_mean():
    s = H.PerformanceScore([-1.0, -2.0, -3.0], "reach")
    assert s.mean == -2.0


def test_report_invariants():
    with pytest.raises(ValueError):
        H.TransferReport("m", "s", 1.5, -1.0, 0.1, 60)
    with pytest.raises(ValueError):
        H.TransferReport("m", "s", 0.5, -1.0, -0.1, 60)
    r = H.unavailable("m", "s", 60, "missing")
    assert not r.available and r.success_rate != r.success_rate


@pytest.mark.parametrize("task", ["peg", "cup"])
def test_scores_non_positive_and_expert_best(task, request):
    spec = request.getfixturevalue(task)
    ref = H.expert_reference(spec, spec.training_scenario, 12, 0)
    assert np.all(ref["scores"] <= 0) and ref["success_rate"] == 1.0
    sp = make_action_space("gain", spec)
    pol = GaussianPolicy(obs_dim(spec), sp.dim, 32, rng=np.random.default_rng(0), obs_scale=spec.obs_scale)
    ev = H.evaluate_policy(spec, spec.training, pol, sp, 12, 0)
    assert np.all(ev["scores"] <= 0)
    if task == "peg":
        # on the cup task stiff midpoint gains outscore the phase expert
        assert ev["mean_score"] < ref["mean_score"]
    assert ev["success_rate"] * 12 == round(ev["success_rate"] * 12)


def test_sweep_layouts(peg, cup):
    assert peg.sweeps["tilt"] == ("tilt_-6", "tilt_-4", "tilt_-2", "tilt_0", "tilt_2")
    assert peg.training_scenario == "tilt_-2"
    assert peg.sweeps["mesh"] == ("mesh_0.3", "mesh_0.5", "mesh_0.7", "mesh_0.9", "mesh_1.0")
    assert peg.scenario("mesh_1.0").same_setting(peg.training)
    assert not peg.scenario("mesh_0.9").same_setting(peg.training)
    assert cup.sweeps["cup"] == ("training", "T1", "T2", "T3", "T4")
    assert H.N_EPISODES == 60


def test_transfer_suite_rows_table_and_missing(tmp_path, reach):
    sp = make_action_space("gain", reach)
    pol = GaussianPolicy(obs_dim(reach), sp.dim, 32, rng=np.random.default_rng(0), obs_scale=reach.obs_scale)
    arts = {
        "gain-airl": H.MethodArtifact("gain-airl", "airl", "gain", policy=pol,
                                      reward_net=RewardNet(2, 1, 32, rng=np.random.default_rng(1))),
        "gain-bc": H.MethodArtifact("gain-bc", "bc", "gain", policy=pol),
        "force-airl": None,
    }
    cfg = H.SuiteConfig(n_episodes=6, reopt_iterations=2, restarts=2, keep_best=1, batch_size=200, traj_len=100)
    reps = H.run_transfer_suite(reach, arts, ["training", "far"], cfg, tmp_path)
    assert [(r.method, r.scenario) for r in reps] == [
        (m, s) for s in ["training", "far"] for m in ["gain-airl", "gain-bc", "force-airl"]]
    assert [r.available for r in reps] == [True, True, False] * 2
    assert reps[0].training and not reps[3].training
    table = (tmp_path / "transfer_table.txt").read_text()
    assert "training(T)" in table and "n/a" in table
    rows = list(csv.DictReader(open(tmp_path / "transfer.csv")))
    assert len(rows) == 6 and list(rows[0]) == H.REPORT_FIELDS
    dump = (tmp_path / "traj_gain-bc_far.csv").read_text().splitlines()
    assert dump[0] == "episode,t,e0,edot0,gain0,force0"


def test_hash_name_stable():
    assert H.hash_name("tilt_2") == H.hash_name("tilt_2") != H.hash_name("tilt_-2")
    names = ["tilt_-6", "tilt_-4", "tilt_-2", "tilt_0", "tilt_2", "mesh_0.3", "mesh_0.5", "T1", "T2"]
    assert len({H.hash_name(n) for n in names}) == len(names)
    assert all(0 <= H.hash_name(n) < 2 ** 31 for n in names)
