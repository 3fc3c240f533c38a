"""Behaviour cloning and the constant-gain baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .approx import LOG_STD_MIN, Adam, GaussianPolicy
from .experts import DemoSet, demo_observations


@dataclass(frozen=True)
class BcConfig:
    epochs: int = 500
    minibatch: int = 128
    lr: float = 1e-3
    val_fraction: float = 0.1
    patience: int = 10

    def __post_init__(self):
        if not 0 <= self.val_fraction < 0.5:
            raise ValueError("validation fraction must lie in [0, 0.5)")


def split_demos(demos: DemoSet, val_fraction: float, rng: np.random.Generator):
    """Trajectory-level train/validation split; a single demo gets no validation set."""
    n = demos.count
    if n == 0:
        raise ValueError("empty demo set")
    order = rng.permutation(n)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    if val_fraction > 0 and n > 1:
        n_val = max(n_val, 1)
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def _stack(demos, idx, space, history):
    if not idx:
        return np.zeros((0, 0)), np.zeros((0, 0))
    obs = np.concatenate([demo_observations(demos.trajectories[i], history) for i in idx])
    act = np.concatenate([demos.trajectories[i].action if space.kind == "gain" else demos.trajectories[i].force
                          for i in idx])
    return obs, space.unsquash(act)


def mean_nll(policy: GaussianPolicy, obs, raw) -> float:
    return float(-np.mean(policy.log_prob(obs, raw)))


def bc_fit(demos: DemoSet, policy: GaussianPolicy, space, cfg: BcConfig = BcConfig(),
           rng: Optional[np.random.Generator] = None, history: bool = False) -> dict:
    """Maximum-likelihood fit of ``policy`` to demo (observation, action) pairs.

    Early stopping keeps the parameters with the best validation NLL.
    """
    if demos.count == 0:
        raise ValueError("empty demo set")
    if demos.act_dim != space.dim and space.kind == "gain":
        raise ValueError(f"demo action dim {demos.act_dim} != policy action dim {space.dim}")
    rng = rng if rng is not None else np.random.default_rng(0)
    tr_idx, va_idx = split_demos(demos, cfg.val_fraction, rng)
    obs, raw = _stack(demos, tr_idx, space, history)
    vobs, vraw = _stack(demos, va_idx, space, history)
    if raw.shape[-1] != policy.act_dim:
        raise ValueError(f"demo action dim {raw.shape[-1]} != policy action dim {policy.act_dim}")
    has_val = len(vobs) > 0
    opt = Adam(policy.n_params, cfg.lr)
    best = policy.get_flat()
    best_val = mean_nll(policy, vobs, vraw) if has_val else np.inf
    train_curve, val_curve = [], []
    stall = 0
    n = len(obs)
    for ep in range(cfg.epochs):
        order = rng.permutation(n)
        tot = 0.0
        for i in range(0, n, cfg.minibatch):
            idx = order[i:i + cfg.minibatch]
            tot += -np.sum(policy.log_prob(obs[idx], raw[idx]))
            g = -policy.log_prob_grad(obs[idx], raw[idx], np.full(len(idx), 1.0 / len(idx)))
            policy.set_flat(policy.get_flat() + opt.step(g))
        train_curve.append(tot / n)
        if has_val:
            v = mean_nll(policy, vobs, vraw)
            val_curve.append(v)
            if v < best_val - 1e-6:
                best_val, best, stall = v, policy.get_flat(), 0
            else:
                stall += 1
                if stall >= cfg.patience:
                    break
        else:
            best = policy.get_flat()
    policy.set_flat(best)
    return {"policy": policy, "train_nll": mean_nll(policy, obs, raw),
            "val_nll": mean_nll(policy, vobs, vraw) if has_val else float("nan"),
            "train_curve": train_curve, "val_curve": val_curve,
            "train_idx": tr_idx, "val_idx": va_idx}


def action_error(policy: GaussianPolicy, space, obs, action) -> float:
    """Mean norm-relative error between the policy's mean action (squashed)
    and reference actions."""
    pred = space.squash(policy.mean(obs))
    action = np.asarray(action, float)
    return float(np.mean(np.linalg.norm(pred - action, axis=-1) / np.linalg.norm(action, axis=-1)))


def constant_gain_policy(demos: DemoSet, space, obs_dim: int, obs_scale=None) -> GaussianPolicy:
    """Zero-capacity policy whose mean is the least-squares constant fit to the
    demo gains (their mean)."""
    if space.kind != "gain":
        raise ValueError("the constant-gain baseline lives in the gain space")
    acts = np.concatenate([t.action for t in demos.trajectories])
    mean_gain = acts.mean(axis=0)
    policy = GaussianPolicy(obs_dim, space.dim, 1, n_hidden=1, obs_scale=obs_scale)
    policy.set_flat(np.zeros(policy.n_params))
    policy.mean_net.b[-1] = space.unsquash(mean_gain)
    policy.log_std = np.full(space.dim, LOG_STD_MIN)
    return policy


def bc_evaluate(policy: GaussianPolicy, spec, pert, space, n_episodes: int = 60, seed: int = 0,
                history: bool = False) -> dict:
    """Success rate and mean score of deterministic (mean-action) episodes."""
    from .evalharness import evaluate_policy
    ev = evaluate_policy(spec, pert, policy, space, n_episodes, seed, history)
    return {"success_rate": ev["success_rate"], "mean_score": ev["mean_score"], "n_episodes": n_episodes}
