"""Scripted experts and demonstration sets.

* cup-on-plate: three-phase variable impedance, switching on the position
  error norm with short linear blends at the phase boundaries;
* peg-in-hole: a fixed stiffness at the peg tip, which becomes a
  configuration-dependent diagonal stiffness at the centre of mass;
* reach: constant gains.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from . import envsim
from .envsim import EnvSpec, EnvState, Trajectory
from .impedance import (GainAction, GainSpace, TipStiffnessSpec, diagonalize_stiffness,
                        peg_tip_jacobian, tip_to_com)

ACCELERATING, SWITCHING, REACHING = "accelerating", "switching", "reaching"


@dataclass(frozen=True)
class PhaseSchedule:
    e1: float = 0.4
    e2: float = 0.2
    gains_accel: GainAction = GainAction(np.full(3, 1500.0), 1.0)
    gains_switch: GainAction = GainAction(np.full(3, 400.0), 2.0)
    gains_reach: GainAction = GainAction(np.full(3, 100.0), 3.0)
    blend: float = 0.02

    def __post_init__(self):
        if not self.e1 > self.e2 > 0:
            raise ValueError("phase boundaries need e1 > e2 > 0")
        if not 0 <= self.blend < self.e1 - self.e2:
            raise ValueError("blend band must be narrower than the switching phase")

    @classmethod
    def from_dict(cls, d: dict, dof: int = 3) -> "PhaseSchedule":
        def ga(g):
            return GainAction(np.full(dof, float(g["k"])) if np.isscalar(g["k"]) else np.asarray(g["k"], float),
                              float(g["d"]))
        return cls(float(d.get("e1", 0.4)), float(d.get("e2", 0.2)),
                   ga(d["gains_accel"]), ga(d["gains_switch"]), ga(d["gains_reach"]),
                   float(d.get("blend", 0.02)))


def phase_of(e_pos, schedule: PhaseSchedule):
    e_pos = np.asarray(e_pos, float)
    if np.any(e_pos < 0):
        raise ValueError("e_pos must be non-negative")
    out = np.where(e_pos > schedule.e1, ACCELERATING,
                   np.where(e_pos > schedule.e2, SWITCHING, REACHING))
    return str(out) if out.ndim == 0 else out


def _vec(g: GainAction) -> np.ndarray:
    return np.append(g.k_diag, g.d)


def phase_gains(e_pos, schedule: PhaseSchedule) -> np.ndarray:
    """Gain vector ``[k..., d]`` for error norm(s) ``e_pos``, blended linearly
    across a band of width ``schedule.blend`` centred on each boundary."""
    e_pos = np.asarray(e_pos, float)[..., None]
    a, s, r = _vec(schedule.gains_accel), _vec(schedule.gains_switch), _vec(schedule.gains_reach)
    h = schedule.blend / 2
    if h > 0:
        w1 = np.clip((e_pos - (schedule.e1 - h)) / (2 * h), 0.0, 1.0)  # 1 -> accel
        w2 = np.clip((e_pos - (schedule.e2 - h)) / (2 * h), 0.0, 1.0)  # 1 -> switch
    else:
        w1 = (e_pos > schedule.e1).astype(float)
        w2 = (e_pos > schedule.e2).astype(float)
    # the two bands never overlap, so at most one weight is fractional
    return w1 * a + (1 - w1) * (w2 * s + (1 - w2) * r)


def phase_expert_action(obs, schedule: PhaseSchedule) -> GainAction:
    obs = np.asarray(obs, float)
    dof = len(schedule.gains_accel.k_diag)
    g = phase_gains(np.linalg.norm(obs[:dof]), schedule)
    return GainAction(g[:dof], float(g[dof]))


def tip_stiffness_expert_action(obs, state: EnvState, k_tip, half_length: float,
                                k_min=None, k_max=None) -> GainAction:
    """Diagonal COM gains reproducing a fixed tip stiffness at the current pose."""
    g = tip_stiffness_gains(np.asarray(obs, float)[:3], np.asarray(state.x, float)[2],
                            k_tip, half_length, k_min, k_max)
    return GainAction(g)


def tip_stiffness_gains(e, theta, k_tip, half_length, k_min=None, k_max=None) -> np.ndarray:
    J = peg_tip_jacobian(theta, half_length)
    K = np.asarray(k_tip, float)
    if K.ndim == 1:
        K = np.diag(K)
    K_com = tip_to_com(TipStiffnessSpec(np.broadcast_to(K, J.shape), J))
    return diagonalize_stiffness(K_com, e, k_min, k_max)


# ---------------------------------------------------------------------------
# expert controllers over batched states

class Expert:
    """Maps batched observations/states to bounded gain actions."""

    name = "expert"

    def __call__(self, spec: EnvSpec, obs: np.ndarray, state: EnvState) -> np.ndarray:
        raise NotImplementedError


@dataclass
class PhaseExpert(Expert):
    schedule: PhaseSchedule = field(default_factory=PhaseSchedule)
    name: str = "phase"

    def __call__(self, spec, obs, state):
        e = obs[..., :spec.dof]
        return phase_gains(np.linalg.norm(e, axis=-1), self.schedule)


@dataclass
class TipStiffnessExpert(Expert):
    k_tip: np.ndarray = field(default_factory=lambda: np.diag([1800.0, 60.0, 30.0]))
    name: str = "tip_stiffness"

    def __call__(self, spec, obs, state):
        return tip_stiffness_gains(obs[..., :3], state.x[..., 2], self.k_tip,
                                   spec.contact.peg_length / 2, spec.k_min, spec.k_max)


@dataclass
class ConstantExpert(Expert):
    k: np.ndarray = field(default_factory=lambda: np.array([400.0]))
    d: Optional[float] = None
    name: str = "constant"

    def __call__(self, spec, obs, state):
        g = np.asarray(self.k, float) if self.d is None else np.append(self.k, self.d)
        return np.broadcast_to(g, obs.shape[:-1] + g.shape).copy()


def expert_for(spec: EnvSpec) -> Expert:
    """The scripted expert configured for ``spec`` (``expert:`` section)."""
    d = dict(spec.expert)
    kind = d.get("kind", {"peg_in_hole": "tip_stiffness", "cup_on_plate": "phase"}.get(spec.task, "constant"))
    if kind == "tip_stiffness":
        k = np.asarray(d.get("k_tip", [1800.0, 60.0, 30.0]), float)
        return TipStiffnessExpert(np.diag(k) if k.ndim == 1 else k)
    if kind == "phase":
        return PhaseExpert(PhaseSchedule.from_dict(d, spec.dof) if d.get("gains_accel") else PhaseSchedule())
    if kind == "constant":
        return ConstantExpert(np.asarray(d.get("k", [400.0] * spec.dof), float), d.get("d"))
    raise ValueError(f"unknown expert kind {kind!r}")


def schedule_for(spec: EnvSpec) -> PhaseSchedule:
    d = dict(spec.expert)
    if d.get("kind") == "phase" and d.get("gains_accel"):
        return PhaseSchedule.from_dict(d, spec.dof)
    return PhaseSchedule()


# ---------------------------------------------------------------------------
# demonstrations

@dataclass
class NoisePolicy:
    """Multiplicative log-normal gain noise, one factor per episode and axis."""

    sigma: float = 0.0

    def factors(self, rng: np.random.Generator, dim: int) -> np.ndarray:
        if self.sigma <= 0:
            return np.ones(dim)
        return np.exp(self.sigma * rng.standard_normal(dim))


@dataclass
class DemoSet:
    trajectories: List[Trajectory]
    task_id: str
    generator: str
    dt: float = 0.01
    config_hash: str = ""

    def __post_init__(self):
        if self.trajectories:
            a = self.trajectories[0]
            for tr in self.trajectories:
                if tr.e.shape[-1] != a.e.shape[-1] or tr.action.shape[-1] != a.action.shape[-1]:
                    raise ValueError("all demos must share observation and action dimensions")

    @property
    def count(self) -> int:
        return len(self.trajectories)

    @property
    def dof(self) -> int:
        return self.trajectories[0].e.shape[-1]

    @property
    def act_dim(self) -> int:
        return self.trajectories[0].action.shape[-1]

    def arrays(self, history: bool = False, action: str = "gain"):
        """Stacked (observations, actions) over all demo steps; ``action`` picks
        recorded gains or recorded forces."""
        obs, act = [], []
        for tr in self.trajectories:
            obs.append(demo_observations(tr, history))
            act.append(tr.action if action == "gain" else tr.force)
        return np.concatenate(obs), np.concatenate(act)


def demo_observations(tr: Trajectory, history: bool = False) -> np.ndarray:
    pair = np.concatenate([tr.e, tr.edot], axis=-1)
    if not history:
        return pair
    n, d = pair.shape
    out = np.zeros((n, envsim.HISTORY_LEN, d))
    for lag in range(envsim.HISTORY_LEN):
        out[lag:, lag] = pair[:n - lag]
    return out.reshape(n, -1)


def rollout_seed(seed: int, index: int) -> int:
    """Private stream for rollout ``index`` of a run seeded with ``seed``."""
    return envsim.derive_seed(seed, index)


def collect_demos(spec: EnvSpec, expert: Expert, n: int, noise: Optional[NoisePolicy] = None,
                  seed: int = 0, scenario: Optional[str] = None, config_hash: str = "",
                  fixed_start: bool = False) -> DemoSet:
    """Roll out ``expert`` until ``n`` successful episodes are recorded.

    Failed episodes are discarded; at most ``5 n`` attempts are made.  Each
    attempt ``i`` draws its start jitter and gain noise from its own stream
    ``(seed, i)`` so results do not depend on batching.  ``fixed_start``
    drops the start jitter so every demo begins from the same point.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if fixed_start:
        spec = replace(spec, start_jitter=())
    noise = noise or NoisePolicy()
    pert = spec.scenario(scenario) if scenario else spec.training
    space = GainSpace.from_env(spec)
    keep: List[Trajectory] = []
    attempt = 0
    while len(keep) < n and attempt < 5 * n:
        batch = list(range(attempt, min(attempt + n - len(keep), 5 * n)))
        attempt = batch[-1] + 1
        seeds = [rollout_seed(seed, i) for i in batch]
        fac = np.stack([noise.factors(np.random.default_rng([s, 1]), space.dim) for s in seeds])

        def controller(obs, state, t, fac=fac):
            g = expert(spec, obs, state) * fac
            return None, np.clip(g, space.low, space.high), None

        res = envsim.rollout(spec, pert, seeds, controller, space)
        for tr in res.trajectories():
            if tr.success and len(keep) < n:
                keep.append(tr)
    if len(keep) < n:
        raise RuntimeError(f"expert {expert.name!r} produced only {len(keep)}/{n} successful "
                           f"demos on {spec.task}/{pert.name} within {5 * n} attempts")
    return DemoSet(keep, spec.task, expert.name + (f"+noise{noise.sigma:g}" if noise.sigma > 0 else ""),
                   spec.control_dt, config_hash)


# ---------------------------------------------------------------------------
# file format: one JSON header line, then one JSON record per step

def save_demos(demos: DemoSet, path: Union[str, Path]) -> None:
    header = {"task_id": demos.task_id, "generator": demos.generator, "dt": demos.dt,
              "config_hash": demos.config_hash, "count": demos.count,
              "dof": demos.dof, "act_dim": demos.act_dim,
              "goal": [float(v) for v in demos.trajectories[0].goal]}
    lines = [json.dumps(header)]
    for ep, tr in enumerate(demos.trajectories):
        e, edot = tr.e, tr.edot
        for t in range(len(tr)):
            lines.append(json.dumps({"episode": ep, "t": t, "e": e[t].tolist(), "edot": edot[t].tolist(),
                                     "action": tr.action[t].tolist(), "force": tr.force[t].tolist()}))
        # terminal state so the final pose survives the round trip
        lines.append(json.dumps({"episode": ep, "t": len(tr), "e": tr.err[-1].tolist(),
                                 "edot": tr.xdot[-1].tolist(), "scenario": tr.scenario}))
    Path(path).write_text("\n".join(lines) + "\n")


def load_demos(path: Union[str, Path]) -> DemoSet:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty demo file")
    header = json.loads(text[0])
    goal = np.asarray(header["goal"], float)
    eps: dict = {}
    for line in text[1:]:
        if line.strip():
            rec = json.loads(line)
            eps.setdefault(rec["episode"], []).append(rec)
    trajs = []
    for ep in sorted(eps):
        recs = sorted(eps[ep], key=lambda r: r["t"])
        steps, last = recs[:-1], recs[-1]
        if "action" in last:
            raise ValueError(f"{path}: episode {ep} lacks its terminal record")
        if any("force" not in r for r in steps):
            raise ValueError(f"{path}: episode {ep} has no force channel")
        e = np.array([r["e"] for r in recs], float)
        x = e + goal
        xdot = np.array([r["edot"] for r in recs], float)
        trajs.append(Trajectory(x, xdot, np.concatenate([e[:-1], xdot[:-1]], axis=-1),
                                np.array([r["action"] for r in steps], float),
                                np.array([r["force"] for r in steps], float), goal.copy(),
                                success=True, scenario=last.get("scenario", ""), err=e))
    if len(trajs) != header["count"]:
        raise ValueError(f"{path}: header says {header['count']} episodes, found {len(trajs)}")
    return DemoSet(trajs, header["task_id"], header["generator"], header["dt"], header["config_hash"])
