"""Performance scores, expert-relative metrics and transfer sweeps."""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import envsim
from .envsim import EnvSpec, RolloutArrays, Trajectory
from .experts import PhaseSchedule, schedule_for

C_ALIGN = 0.1
W_E = 1.0
W_V = 1.0
N_EPISODES = 60


# ---------------------------------------------------------------------------
# per-step scores; x, xdot are the states reached after each control step

def pih_step_scores(spec: EnvSpec, x, c_align: float = C_ALIGN, tol: Optional[float] = None) -> np.ndarray:
    """``-c_align`` while the tip is laterally off the hole axis by more than
    the clearance, otherwise ``-|e_z|``."""
    x = np.asarray(x, float)
    if tol is None:
        tol = (spec.contact.hole_width - spec.contact.peg_width) / 2
    e_z = x[..., 1] - spec.goal[1]
    mis = envsim.lateral_misalignment(spec, x) > tol
    return np.where(mis, -c_align, -np.abs(e_z))


def cop_step_scores(e, edot, schedule: PhaseSchedule, w_e: float = W_E, w_v: float = W_V) -> np.ndarray:
    e, edot = np.asarray(e, float), np.asarray(edot, float)
    ne, nv = np.linalg.norm(e, axis=-1), np.linalg.norm(edot, axis=-1)
    return np.where(ne > schedule.e1, -w_e * ne,
                    np.where(ne > schedule.e2, -w_e * ne - w_v * nv, -w_v * nv))


def step_scores(spec: EnvSpec, x, xdot) -> np.ndarray:
    x, xdot = np.asarray(x, float), np.asarray(xdot, float)
    if spec.task == "peg_in_hole":
        return pih_step_scores(spec, x)
    e = x - np.asarray(spec.goal)
    if spec.task == "cup_on_plate":
        return cop_step_scores(e, xdot, schedule_for(spec))
    return -W_E * np.linalg.norm(e, axis=-1)


def step_rewards(spec: EnvSpec, data: RolloutArrays) -> np.ndarray:
    """Performance function as a per-step reward array ``(N, T)``."""
    env = _scenario_env(spec, data.scenario)
    return step_scores(env, data.x[:, 1:], data.xdot[:, 1:])


def episode_scores(spec: EnvSpec, data: RolloutArrays) -> np.ndarray:
    """Mean per-step score of every episode; a diverged episode scores its
    valid steps plus the worst per-step value for the remainder."""
    r = step_rewards(spec, data)
    worst = -C_ALIGN if spec.task == "peg_in_hole" else np.min(r[data.mask], initial=-1.0)
    return np.where(data.mask, r, worst).mean(axis=1)


def _scenario_env(spec: EnvSpec, name: str) -> EnvSpec:
    if name and name in spec.scenarios:
        return envsim.perturbed(spec, spec.scenarios[name])
    return spec


def pih_score(traj: Trajectory, spec: EnvSpec, c_align: float = C_ALIGN, tol: Optional[float] = None) -> float:
    return float(np.mean(pih_step_scores(spec, traj.x[1:], c_align, tol)))


def cop_score(traj: Trajectory, schedule: PhaseSchedule, w_e: float = W_E, w_v: float = W_V) -> float:
    return float(np.mean(cop_step_scores(traj.err[1:], traj.xdot[1:], schedule, w_e, w_v)))


def relative_perf_diff(policy_score: float, expert_score: float) -> float:
    if expert_score == 0:
        raise ValueError("expert score is zero; relative difference undefined")
    return abs(policy_score - expert_score) / abs(expert_score)


def deviation_metrics(traj, reference):
    """(mean distance of each point to the nearest reference point,
    distance between the final points)."""
    p, q = np.asarray(traj, float), np.asarray(reference, float)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("empty trajectory")
    if p.ndim == 1:
        p, q = p[:, None], q[:, None]
    d = np.linalg.norm(p[:, None, :] - q[None, :, :], axis=-1)
    return float(d.min(axis=1).mean()), float(np.linalg.norm(p[-1] - q[-1]))


@dataclass
class PerformanceScore:
    per_episode: List[float]
    task_id: str

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_episode))


# ---------------------------------------------------------------------------
# evaluation episodes

def evaluate_controller(spec: EnvSpec, pert, controller, space, n_episodes: int = N_EPISODES,
                        seed: int = 0, history: bool = False) -> dict:
    """Run ``n_episodes`` episodes; episode ``i`` starts from stream ``(seed, i)``."""
    seeds = [envsim.derive_seed(seed, i, 0) for i in range(n_episodes)]
    data = envsim.rollout(spec, pert, seeds, controller, space, history)
    scores = episode_scores(spec, data)
    return {"success_rate": float(data.success.mean()), "mean_score": float(scores.mean()),
            "scores": scores, "data": data}


def policy_controller(policy, space):
    """Deterministic (mean-action) execution of a Gaussian policy."""
    def controller(obs, state, t):
        raw = policy.mean(obs)
        return raw, space.squash(raw), None
    return controller


def expert_controller(spec: EnvSpec, expert, space):
    def controller(obs, state, t):
        return None, np.clip(expert(spec, obs, state), space.low, space.high), None
    return controller


def evaluate_policy(spec, pert, policy, space, n_episodes=N_EPISODES, seed=0, history=False) -> dict:
    return evaluate_controller(spec, pert, policy_controller(policy, space), space, n_episodes, seed, history)


# ---------------------------------------------------------------------------
# transfer sweeps

@dataclass
class MethodArtifact:
    """What the suite needs to evaluate one method: a trained policy (used
    directly for BC/constant-gain and for AIRL in the training scenario)
    and, for AIRL, the learned reward to re-optimise against."""

    name: str
    kind: str  # airl | bc | constant-gain
    action_space: str
    history: bool = False
    policy: Optional[object] = None
    reward_net: Optional[object] = None
    hidden: int = 32


@dataclass
class TransferReport:
    method: str
    scenario: str
    success_rate: float
    mean_score: float
    relative_perf_diff: float
    n_episodes: int
    training: bool = False
    available: bool = True
    note: str = ""

    def __post_init__(self):
        if self.available:
            if not 0.0 <= self.success_rate <= 1.0:
                raise ValueError("success rate outside [0, 1]")
            if not self.relative_perf_diff >= 0:
                raise ValueError("relative performance difference must be non-negative")


@dataclass
class SuiteConfig:
    n_episodes: int = N_EPISODES
    seed: int = 0
    reopt_iterations: int = 100
    restarts: int = 5
    keep_best: int = 3
    batch_size: int = 8000
    traj_len: int = 200
    reopt_init: str = "scratch"
    generator_reward: str = "plain"
    jobs: int = 1
    trpo: object = None


def unavailable(method: str, scenario: str, n: int, note: str, training: bool = False) -> TransferReport:
    return TransferReport(method, scenario, float("nan"), float("nan"), float("nan"), n, training, False, note)


def expert_reference(spec: EnvSpec, scenario: str, n_episodes: int, seed: int) -> dict:
    from .experts import expert_for
    from .impedance import GainSpace
    space = GainSpace.from_env(spec)
    return evaluate_controller(spec, spec.scenario(scenario), expert_controller(spec, expert_for(spec), space),
                               space, n_episodes, seed)


def run_cell(spec: EnvSpec, art: Optional[MethodArtifact], method: str, scenario: str,
             cfg: SuiteConfig, expert_score: float, dump_dir=None) -> TransferReport:
    from . import airl
    from .impedance import make_action_space
    from .trpo import TrustRegionConfig
    training = scenario == spec.training_scenario or spec.scenario(scenario).same_setting(spec.training)
    if art is None:
        return unavailable(method, scenario, cfg.n_episodes, "missing artifact", training)
    space = make_action_space(art.action_space, spec)
    pert = spec.scenario(scenario)
    eval_seed = envsim.derive_seed(cfg.seed, 7777)
    if art.kind != "airl" or training:
        if art.policy is None:
            return unavailable(method, scenario, cfg.n_episodes, "missing policy", training)
        ev = evaluate_policy(spec, pert, art.policy, space, cfg.n_episodes, eval_seed, art.history)
        sr, score, data = ev["success_rate"], ev["mean_score"], ev["data"]
    else:
        if art.reward_net is None:
            return unavailable(method, scenario, cfg.n_episodes, "missing reward", training)
        init = art.policy if cfg.reopt_init == "trained" else None
        res = airl.reoptimize(art.reward_net, spec, pert, space, cfg.reopt_iterations, cfg.batch_size,
                              cfg.traj_len, envsim.derive_seed(cfg.seed, hash_name(scenario)),
                              cfg.trpo or TrustRegionConfig(), cfg.restarts, art.history, art.hidden, init,
                              cfg.n_episodes, cfg.jobs, cfg.generator_reward)
        best = res[:cfg.keep_best]
        sr = float(np.mean([r.success_rate for r in best]))
        score = float(np.mean([r.mean_score for r in best]))
        data = evaluate_policy(spec, pert, best[0].policy, space, cfg.n_episodes, eval_seed, art.history)["data"]
    if dump_dir is not None:
        dump_trajectories(Path(dump_dir) / f"traj_{method}_{scenario}.csv", data, space, n=3)
    return TransferReport(method, scenario, sr, score, relative_perf_diff(score, expert_score),
                          cfg.n_episodes, training)


def hash_name(name: str) -> int:
    """Stable small integer for a scenario name (Python's hash() is salted)."""
    return zlib.crc32(name.encode()) & 0x7FFFFFFF


def run_transfer_suite(spec: EnvSpec, artifacts: Dict[str, Optional[MethodArtifact]],
                       scenarios: Sequence[str], cfg: SuiteConfig = SuiteConfig(),
                       out_dir=None) -> List[TransferReport]:
    """One report per (method, scenario).  AIRL methods re-optimise a policy
    against their frozen reward in every non-training scenario; BC and
    constant-gain policies transfer directly."""
    reports = []
    for scn in scenarios:
        ref = expert_reference(spec, scn, cfg.n_episodes, envsim.derive_seed(cfg.seed, 7777))
        for method, art in artifacts.items():
            reports.append(run_cell(spec, art, method, scn, cfg, ref["mean_score"], out_dir))
    if out_dir is not None:
        write_reports_csv(Path(out_dir) / "transfer.csv", reports)
        Path(out_dir, "transfer_table.txt").write_text(render_table(reports, spec.training_scenario))
    return reports


REPORT_FIELDS = ["method", "scenario", "success_rate", "mean_score", "rel_perf_diff", "n_episodes",
                 "training", "available", "note"]


def write_reports_csv(path, reports: Sequence[TransferReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in reports:
            w.writerow([r.method, r.scenario, _num(r.success_rate), _num(r.mean_score),
                        _num(r.relative_perf_diff), r.n_episodes, int(r.training), int(r.available), r.note])


def _num(v):
    return "" if v != v else repr(float(v))


def render_table(reports: Sequence[TransferReport], training_scenario: str = "") -> str:
    """Success rates (and relative score differences) as a method x scenario grid."""
    methods = list(dict.fromkeys(r.method for r in reports))
    scenarios = list(dict.fromkeys(r.scenario for r in reports))
    cell = {(r.method, r.scenario): r for r in reports}
    heads = []
    for s in scenarios:
        tr = any(cell[(m, s)].training for m in methods if (m, s) in cell)
        heads.append(s + ("(T)" if tr else ""))
    width = max([len(h) for h in heads] + [16])
    mw = max([len(m) for m in methods] + [6])
    lines = ["success rate".ljust(mw) + "".join(h.rjust(width + 2) for h in heads)]
    for m in methods:
        row = m.ljust(mw)
        for s in scenarios:
            r = cell.get((m, s))
            txt = "n/a" if r is None or not r.available else f"{100 * r.success_rate:.1f}% ({r.relative_perf_diff:.2f})"
            row += txt.rjust(width + 2)
        lines.append(row)
    lines.append("cells: success rate (relative score difference to the expert)")
    return "\n".join(lines) + "\n"


def dump_trajectories(path, data: RolloutArrays, space, n: int = 3) -> None:
    """Per-step CSV of the first ``n`` episodes: t, e, edot, gains, force."""
    dof = data.x.shape[-1]
    gain = space.kind == "gain"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "t"] + [f"e{i}" for i in range(dof)] + [f"edot{i}" for i in range(dof)]
                   + ([f"gain{i}" for i in range(space.dim)] if gain else []) + [f"force{i}" for i in range(dof)])
        for ep in range(min(n, len(data.length))):
            for t in range(int(data.length[ep])):
                e = data.x[ep, t] - data.goal
                row = [ep, t] + [repr(float(v)) for v in e] + [repr(float(v)) for v in data.xdot[ep, t]]
                if gain:
                    row += [repr(float(v)) for v in data.action[ep, t]]
                row += [repr(float(v)) for v in data.force[ep, t]]
                w.writerow(row)
