"""Adversarial inverse reinforcement learning over impedance actions.

The discriminator is ``D = exp(r) / (exp(r) + pi(a|o)) = sigmoid(r - log pi)``;
the generator is trained by TRPO on ``r - log pi`` and transfer re-optimises
fresh policies against the frozen ``r``.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import envsim, trpo
from .approx import Adam, GaussianPolicy, Momentum, RewardNet, save_checkpoint
from .envsim import EnvSpec, ScenarioPerturbation
from .experts import DemoSet
from .trpo import TrustRegionConfig, ValueFunction


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, float)))


def discriminator_prob(reward_net: RewardNet, policy: GaussianPolicy, o, a) -> np.ndarray:
    return _sigmoid(reward_net(o, a) - policy.log_prob(o, a))


def airl_reward(reward_net: RewardNet, policy: GaussianPolicy, o, a) -> np.ndarray:
    """``log D - log(1 - D)``, i.e. ``r(o, a) - log pi(a|o)``."""
    return reward_net(o, a) - policy.log_prob(o, a)


def discriminator_loss(z_demo, z_pol, form: str = "log1m") -> float:
    """Mean loss for logits ``z = r - log pi`` on demo and policy samples.

    ``log1m``: ``-E_demo[log D] - E_pol[log(1 - D)]``;
    ``printed``: ``-E_demo[log D] - E_pol[1 - log D]``.
    """
    z_demo, z_pol = np.asarray(z_demo, float), np.asarray(z_pol, float)
    demo = -np.mean(_log_sigmoid(z_demo))
    if form == "log1m":
        return float(demo - np.mean(_log_sigmoid(-z_pol)))
    if form == "printed":
        return float(demo - np.mean(1.0 - _log_sigmoid(z_pol)))
    raise ValueError(f"unknown loss form {form!r}")


def _dloss_dz(z_demo, z_pol, form):
    g_demo = -_sigmoid(-z_demo) / len(z_demo)
    if form == "log1m":
        g_pol = _sigmoid(z_pol) / len(z_pol)
    else:
        g_pol = _sigmoid(-z_pol) / len(z_pol)
    return g_demo, g_pol


@dataclass
class DiscConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    epochs: int = 2
    minibatch: int = 256
    optimizer: str = "adam"  # adam | sgd (with momentum)
    loss: str = "log1m"


@dataclass
class AirlState:
    reward_net: RewardNet
    policy: GaussianPolicy
    value_fn: ValueFunction
    demo_obs: np.ndarray
    demo_act: np.ndarray  # pre-squash
    disc: DiscConfig = field(default_factory=DiscConfig)
    iteration: int = 0
    optimizer: object = None
    nonfinite_streak: int = 0

    def __post_init__(self):
        if self.reward_net.obs_dim + self.reward_net.act_dim != self.policy.obs_dim + self.policy.act_dim:
            raise ValueError("reward net input must be obs dim + action dim of the policy")
        if self.demo_obs.shape[-1] != self.policy.obs_dim or self.demo_act.shape[-1] != self.policy.act_dim:
            raise ValueError(f"demo dims (obs {self.demo_obs.shape[-1]}, act {self.demo_act.shape[-1]}) "
                             f"do not match the policy (obs {self.policy.obs_dim}, act {self.policy.act_dim})")
        if len(self.demo_obs) == 0:
            raise ValueError("empty demo set")
        if self.optimizer is None:
            n = len(self.reward_net.get_flat())
            if self.disc.optimizer == "adam":
                self.optimizer = Adam(n, self.disc.lr)
            else:
                self.optimizer = Momentum(n, self.disc.lr, self.disc.momentum)


def demo_arrays(demos: DemoSet, space, history: bool = False):
    """Demo observations and pre-squash actions for ``space``: gains are mapped
    through the inverse sigmoid, forces through the inverse tanh."""
    obs, act = demos.arrays(history, "gain" if space.kind == "gain" else "force")
    if act.shape[-1] != space.dim:
        raise ValueError(f"demo action dim {act.shape[-1]} does not match the {space.kind} space ({space.dim})")
    return obs, space.unsquash(act)


def discriminator_update(state: AirlState, pol_obs, pol_act, rng: np.random.Generator) -> dict:
    """Minibatch steps on the discriminator loss with equal demo/policy counts.

    Returns the mean loss over the policy samples and a matched demo draw
    after the update."""
    rn, pol, cfg = state.reward_net, state.policy, state.disc
    pol_obs, pol_act = np.asarray(pol_obs, float), np.asarray(pol_act, float)
    logp_pol = pol.log_prob(pol_obs, pol_act)
    logp_demo = pol.log_prob(state.demo_obs, state.demo_act)
    n_pol, n_demo = len(pol_obs), len(state.demo_obs)
    skipped = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n_pol)
        for i in range(0, n_pol, cfg.minibatch):
            ip = order[i:i + cfg.minibatch]
            idm = rng.integers(0, n_demo, len(ip))
            z_d = rn(state.demo_obs[idm], state.demo_act[idm]) - logp_demo[idm]
            z_p = rn(pol_obs[ip], pol_act[ip]) - logp_pol[ip]
            g_d, g_p = _dloss_dz(z_d, z_p, cfg.loss)
            grad = rn.grad(state.demo_obs[idm], state.demo_act[idm], g_d) + rn.grad(pol_obs[ip], pol_act[ip], g_p)
            if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(z_d)) and np.all(np.isfinite(z_p))):
                skipped += 1
                continue
            rn.set_flat(rn.get_flat() + state.optimizer.step(grad))
    idm = rng.integers(0, n_demo, n_pol)
    loss = discriminator_loss(rn(state.demo_obs[idm], state.demo_act[idm]) - logp_demo[idm],
                              rn(pol_obs, pol_act) - logp_pol, cfg.loss)
    return {"loss": loss, "skipped": skipped,
            "d_demo": float(np.mean(_sigmoid(rn(state.demo_obs, state.demo_act) - logp_demo))),
            "d_pol": float(np.mean(_sigmoid(rn(pol_obs, pol_act) - logp_pol)))}


def initial_loss(state: AirlState, pol_obs, pol_act, rng: np.random.Generator) -> float:
    """Discriminator loss before any update, on matched sample counts."""
    idm = rng.integers(0, len(state.demo_obs), len(pol_obs))
    z_d = state.reward_net(state.demo_obs[idm], state.demo_act[idm]) - state.policy.log_prob(state.demo_obs[idm], state.demo_act[idm])
    z_p = state.reward_net(pol_obs, pol_act) - state.policy.log_prob(pol_obs, pol_act)
    return discriminator_loss(z_d, z_p, state.disc.loss)


# ---------------------------------------------------------------------------

AIRL_LOG_FIELDS = trpo.LOG_FIELDS + ["disc_loss", "d_demo", "d_pol", "accepted"]


def train(state: AirlState, spec: EnvSpec, space, iterations: int, batch_size: int, traj_len: int,
          seed: int, cfg: TrustRegionConfig = TrustRegionConfig(), history: bool = False,
          generator_reward: str = "entropy", pert: Optional[ScenarioPerturbation] = None,
          out_dir=None, checkpoint_every: int = 10) -> dict:
    """Alternate rollouts, discriminator update, reward relabelling, value
    fit and TRPO step for ``iterations`` rounds."""
    from .evalharness import episode_scores
    pert = pert or spec.training
    out = Path(out_dir) if out_dir else None
    log = trpo.CsvLog(out / "train_log.csv" if out else None, AIRL_LOG_FIELDS)
    zero = lambda d: np.zeros(d.action.shape[:2])
    for k in range(iterations):
        it = state.iteration
        batch = trpo.collect_rollouts(spec, pert, state.policy, space, zero, batch_size, traj_len,
                                      envsim.derive_seed(seed, it), history, snapshot_id=it)
        m = batch.mask
        obs, raw = batch.data.obs[m], batch.data.raw[m]
        dd = discriminator_update(state, obs, raw, np.random.default_rng(envsim.derive_seed(seed, it, 3)))
        r = state.reward_net(batch.data.obs, batch.data.raw)
        if generator_reward == "entropy":
            r = r - batch.logp
        batch.rewards = np.where(m, r, 0.0)
        if not np.all(np.isfinite(batch.rewards)) or not np.isfinite(dd["loss"]):
            state.nonfinite_streak += 1
            if state.nonfinite_streak >= 5:
                raise FloatingPointError("AIRL aborted after 5 consecutive non-finite updates")
            state.iteration += 1
            continue
        adv, ret = trpo.compute_advantages(batch, state.value_fn, cfg.gamma, cfg.gae_lambda)
        trpo.fit_value(state.value_fn, obs, ret, cfg, envsim.derive_seed(seed, it, 2))
        diag = trpo.policy_update(state.policy, obs, raw, adv, cfg, batch.logp[m])
        state.nonfinite_streak = 0 if diag["reason"] != "non-finite gradient" else state.nonfinite_streak + 1
        if state.nonfinite_streak >= 5:
            raise FloatingPointError("AIRL aborted after 5 consecutive non-finite updates")
        log.append({"iteration": it, "mean_return": float(batch.rewards.sum(1).mean()),
                    "mean_score": float(np.mean(episode_scores(spec, batch.data))),
                    "kl": diag["kl"], "improvement": diag["improvement"],
                    "success_rate": float(batch.data.success.mean()), "disc_loss": dd["loss"],
                    "d_demo": dd["d_demo"], "d_pol": dd["d_pol"], "accepted": int(diag["accepted"])})
        state.iteration += 1
        if out and checkpoint_every and state.iteration % checkpoint_every == 0:
            save_checkpoint(out / f"ckpt_{state.iteration:04d}.npz", policy=state.policy,
                            reward=state.reward_net, iteration=state.iteration)
    return {"state": state, "log": log.rows}


# ---------------------------------------------------------------------------

def learned_reward_source(reward_net: RewardNet, policy: Optional[GaussianPolicy] = None):
    """Per-step reward ``r(o, a)`` from a frozen reward net (minus ``log pi``
    when a policy is given)."""
    rn = reward_net.copy()

    def source(data):
        r = rn(data.obs, data.raw)
        return r - data.aux if policy is not None else r
    return source


@dataclass
class ReoptResult:
    policy: GaussianPolicy
    restart: int
    success_rate: float
    mean_score: float
    log: list


def _reopt_one(args):
    (reward_net, spec, pert, space, cfg, iterations, batch_size, traj_len, seed, restart,
     history, hidden, init_policy, n_eval, generator_reward) = args
    from .evalharness import evaluate_policy
    rs = envsim.derive_seed(seed, restart)
    if init_policy is not None:
        policy = init_policy.copy()
    else:
        policy = GaussianPolicy(envsim.obs_dim(spec, history), space.dim, hidden,
                                rng=np.random.default_rng(rs), obs_scale=_obs_scale(spec, history))
    src = learned_reward_source(reward_net)
    if generator_reward == "entropy":
        src = learned_reward_source(reward_net, policy)
    out = trpo.run_trpo(spec, pert, policy, space, src, iterations, batch_size, traj_len, rs, cfg, history)
    ev = evaluate_policy(spec, pert, out["policy"], space, n_eval, envsim.derive_seed(seed, 7777), history)
    return ReoptResult(out["policy"], restart, ev["success_rate"], ev["mean_score"], out["log"])


def reoptimize(reward_net: RewardNet, spec: EnvSpec, pert: ScenarioPerturbation, space,
               iterations: int, batch_size: int, traj_len: int, seed: int,
               cfg: TrustRegionConfig = TrustRegionConfig(), restarts: int = 5, history: bool = False,
               hidden: int = 32, init_policy: Optional[GaussianPolicy] = None, n_eval: int = 60,
               jobs: int = 1, generator_reward: str = "plain") -> List[ReoptResult]:
    """TRPO against the frozen learned reward from ``restarts`` random
    initialisations; results sorted best first by evaluation score."""
    args = [(reward_net, spec, pert, space, cfg, iterations, batch_size, traj_len, seed, j,
             history, hidden, init_policy, n_eval, generator_reward) for j in range(restarts)]
    if jobs > 1 and restarts > 1:
        with ProcessPoolExecutor(min(jobs, restarts)) as ex:
            results = list(ex.map(_reopt_one, args))
    else:
        results = [_reopt_one(a) for a in args]
    return sorted(results, key=lambda r: (-r.mean_score, r.restart))


def _obs_scale(spec: EnvSpec, history: bool):
    if not spec.obs_scale:
        return None
    return np.tile(spec.obs_scale, envsim.HISTORY_LEN if history else 1)


def new_state(spec: EnvSpec, space, demos: DemoSet, seed: int, history: bool = False, hidden: int = 32,
              reward_hidden: int = 32, disc: Optional[DiscConfig] = None) -> AirlState:
    rng = np.random.default_rng(envsim.derive_seed(seed, 99))
    od = envsim.obs_dim(spec, history)
    scale = _obs_scale(spec, history)
    policy = GaussianPolicy(od, space.dim, hidden, rng=rng, obs_scale=scale)
    reward = RewardNet(od, space.dim, reward_hidden, rng=rng, obs_scale=scale)
    value = ValueFunction(od, hidden, rng, scale)
    obs, act = demo_arrays(demos, space, history)
    return AirlState(reward, policy, value, obs, act, disc or DiscConfig())


def summary_record(path, **fields) -> None:
    Path(path).write_text(json.dumps(fields, indent=2, sort_keys=True, default=float) + "\n")
