"""Trust-region policy optimisation over batched rollouts."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import envsim
from .approx import MLP, Adam, GaussianPolicy, gaussian_kl
from .envsim import EnvSpec, RolloutArrays, ScenarioPerturbation


@dataclass(frozen=True)
class TrustRegionConfig:
    max_kl: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_steps: int = 10
    backtrack_ratio: float = 0.8
    gamma: float = 0.99
    gae_lambda: float = 0.97
    vf_epochs: int = 5
    vf_lr: float = 1e-3
    vf_minibatch: int = 256

    def __post_init__(self):
        if not self.max_kl > 0:
            raise ValueError("max_kl must be positive")
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and lambda must lie in (0, 1]")


@dataclass
class RolloutBatch:
    data: RolloutArrays
    rewards: np.ndarray  # (N, T)
    logp: np.ndarray  # (N, T) under the collecting policy
    policy_snapshot_id: int = 0

    @property
    def mask(self) -> np.ndarray:
        return self.data.mask

    @property
    def total_steps(self) -> int:
        return int(self.data.length.sum())

    @property
    def n_episodes(self) -> int:
        return len(self.data.length)

    def flat(self, arr: np.ndarray) -> np.ndarray:
        return arr[self.mask]


class ValueFunction:
    """MLP value estimate with an output affine map re-fitted to the return
    scale before every regression (network outputs are preserved)."""

    def __init__(self, obs_dim: int, hidden: int = 32, rng=None, obs_scale=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.net = MLP([obs_dim, hidden, hidden, 1], "tanh", rng, out_scale=0.0, in_scale=obs_scale)
        self.mu, self.sigma = 0.0, 1.0

    def __call__(self, obs) -> np.ndarray:
        return self.mu + self.sigma * self.net(obs)[..., 0]

    def rescale(self, mu: float, sigma: float) -> None:
        W, b = self.net.W[-1], self.net.b[-1]
        self.net.W[-1] = W * (self.sigma / sigma)
        self.net.b[-1] = (self.sigma * b + self.mu - mu) / sigma
        self.mu, self.sigma = float(mu), float(sigma)

    def state(self) -> dict:
        return {"net": self.net.state(), "mu": self.mu, "sigma": self.sigma}

    @classmethod
    def from_state(cls, st: dict) -> "ValueFunction":
        new = cls.__new__(cls)
        new.net = MLP.from_state(st["net"])
        new.mu, new.sigma = float(st["mu"]), float(st["sigma"])
        return new


# ---------------------------------------------------------------------------

RewardSource = Callable[[RolloutArrays], np.ndarray]


def collect_rollouts(spec: EnvSpec, pert: ScenarioPerturbation, policy: GaussianPolicy, space,
                     reward_source: RewardSource, batch_size: int, traj_len: int, seed: int,
                     history: bool = False, deterministic: bool = False,
                     snapshot_id: int = 0) -> RolloutBatch:
    """``ceil(batch_size / traj_len)`` episodes of ``traj_len`` steps.

    Episode ``i`` takes its start jitter and action noise from streams derived
    from ``(seed, i)``; rewards come from ``reward_source`` on the finished
    arrays.  Diverged episodes are truncated and count only their valid steps.
    """
    n = -(-int(batch_size) // int(traj_len))
    pol = policy.copy()  # frozen snapshot
    seeds = [envsim.derive_seed(seed, i, 0) for i in range(n)]
    noise = np.stack([np.random.default_rng(envsim.derive_seed(seed, i, 1)).standard_normal((traj_len, pol.act_dim))
                      for i in range(n)])
    std = pol.std()

    def controller(obs, state, t):
        mu = pol.mean(obs)
        raw = mu if deterministic else mu + std * noise[:, t]
        return raw, space.squash(raw), pol.log_prob(obs, raw)

    data = envsim.rollout(spec, pert, seeds, controller, space, history, traj_len)
    rewards = np.where(data.mask, reward_source(data), 0.0)
    return RolloutBatch(data, rewards, data.aux, snapshot_id)


def compute_advantages(batch: RolloutBatch, value_fn, gamma: float = 0.99, lam: float = 0.97,
                       normalize: bool = True):
    """GAE(gamma, lambda) advantages and value targets, flattened over valid steps.

    Timeouts bootstrap from the value of the final observation; diverged
    episodes are terminal.
    """
    d = batch.data
    N, T = batch.rewards.shape
    v = value_fn(d.obs) if value_fn is not None else np.zeros((N, T))
    v_last = value_fn(d.final_obs) if value_fn is not None else np.zeros(N)
    v_last = np.where(d.diverged, 0.0, v_last)
    adv = np.zeros((N, T))
    gae = np.zeros(N)
    for t in reversed(range(T)):
        valid = t < d.length
        nxt = v_last if t == T - 1 else np.where(t + 1 < d.length, v[:, t + 1], v_last)
        delta = batch.rewards[:, t] + gamma * nxt - v[:, t]
        gae = np.where(valid, delta + gamma * lam * gae, 0.0)
        # a diverged row ends at its last valid step: nothing to bootstrap from
        last_valid = valid & (t + 1 == d.length) & d.diverged
        if last_valid.any():
            gae = np.where(last_valid, batch.rewards[:, t] - v[:, t], gae)
        adv[:, t] = gae
    m = batch.mask
    adv_f, ret_f = adv[m], (adv + v)[m]
    if normalize:
        sd = adv_f.std()
        adv_f = (adv_f - adv_f.mean()) / sd if sd >= 1e-8 else np.zeros_like(adv_f)
    return adv_f, ret_f


# ---------------------------------------------------------------------------

def fisher_vector_product(policy: GaussianPolicy, obs, vec, damping: float = 0.0) -> np.ndarray:
    """Average Fisher information of the Gaussian policy times ``vec``."""
    n_mean = policy.mean_net.n_params
    _, cache = policy.mean_net.forward(obs, cache=True)
    jv = policy.mean_net.jvp(cache, vec[:n_mean])
    inv_var = np.exp(-2 * np.clip(policy.log_std, -5.0, 2.0))
    N = obs.shape[0]
    f_mean = policy.mean_net.backward(cache, jv * inv_var / N)
    f_std = 2.0 * vec[n_mean:]
    return np.concatenate([f_mean, f_std]) + damping * vec


def conjugate_gradient(Avp, b, iters: int = 10, tol: float = 1e-10) -> np.ndarray:
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rr = r @ r
    for _ in range(iters):
        if rr < tol:
            break
        Ap = Avp(p)
        alpha = rr / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def _surrogate(policy, obs, raw, logp_old, adv):
    return np.mean(np.exp(policy.log_prob(obs, raw) - logp_old) * adv)


def policy_update(policy: GaussianPolicy, obs, raw, adv, cfg: TrustRegionConfig,
                  logp_old=None) -> dict:
    """One natural-gradient step with backtracking, applied to ``policy`` in place.

    Returns diagnostics; on failure the parameters are left bitwise unchanged.
    """
    obs, raw, adv = np.asarray(obs, float), np.asarray(raw, float), np.asarray(adv, float)
    N = len(adv)
    old = policy.get_flat()
    mu_old, ls_old = policy.mean(obs), policy.log_std.copy()
    if logp_old is None:
        logp_old = policy.log_prob(obs, raw)
    g = policy.log_prob_grad(obs, raw, adv / N)
    diag = {"accepted": False, "kl": 0.0, "improvement": 0.0, "reason": ""}
    if not np.all(np.isfinite(g)):
        diag["reason"] = "non-finite gradient"
        return diag
    if not np.any(g):
        diag["reason"] = "zero gradient"
        return diag
    s = conjugate_gradient(lambda v: fisher_vector_product(policy, obs, v, cfg.cg_damping), g, cfg.cg_iters)
    shs = s @ fisher_vector_product(policy, obs, s, cfg.cg_damping)
    if not (np.isfinite(shs) and shs > 0):
        diag["reason"] = "degenerate step"
        return diag
    full = s * np.sqrt(2 * cfg.max_kl / shs)
    base = _surrogate(policy, obs, raw, logp_old, adv)
    frac = 1.0
    for _ in range(cfg.backtrack_steps):
        policy.set_flat(old + frac * full)
        improve = _surrogate(policy, obs, raw, logp_old, adv) - base
        kl = float(np.mean(gaussian_kl(mu_old, ls_old, policy.mean(obs), policy.log_std)))
        if np.isfinite(improve) and improve > 0 and kl <= cfg.max_kl:
            diag.update(accepted=True, kl=kl, improvement=float(improve))
            return diag
        frac *= cfg.backtrack_ratio
    policy.set_flat(old)
    diag["reason"] = "line search failed"
    return diag


def fit_value(value_fn: ValueFunction, obs, returns, cfg: TrustRegionConfig, seed: int = 0) -> list:
    """Minibatch Adam regression of ``value_fn`` onto ``returns``; per-epoch MSE."""
    obs, returns = np.asarray(obs, float), np.asarray(returns, float)
    value_fn.rescale(returns.mean(), max(returns.std(), 1e-6))
    target = (returns - value_fn.mu) / value_fn.sigma
    net = value_fn.net
    opt = Adam(net.n_params, cfg.vf_lr)
    rng = np.random.default_rng(seed)
    n = len(returns)
    losses = []
    for _ in range(cfg.vf_epochs):
        order = rng.permutation(n)
        for i in range(0, n, cfg.vf_minibatch):
            idx = order[i:i + cfg.vf_minibatch]
            pred, cache = net.forward(obs[idx], cache=True)
            err = pred[:, 0] - target[idx]
            if not np.any(err):
                continue
            g = net.backward(cache, (2.0 / len(idx)) * err[:, None])
            net.set_flat(net.get_flat() + opt.step(g))
        losses.append(float(np.mean((net(obs)[:, 0] - target) ** 2)) * value_fn.sigma ** 2)
    return losses


# ---------------------------------------------------------------------------

LOG_FIELDS = ["iteration", "mean_return", "mean_score", "kl", "improvement", "success_rate"]


class CsvLog:
    def __init__(self, path: Optional[Path], fields=LOG_FIELDS):
        self.path, self.fields = path, list(fields)
        self.rows = []
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.fields)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row.get(k, "")) for k in self.fields])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def run_trpo(spec: EnvSpec, pert: ScenarioPerturbation, policy: GaussianPolicy, space,
             reward_source: RewardSource, iterations: int, batch_size: int, traj_len: int,
             seed: int, cfg: TrustRegionConfig = TrustRegionConfig(), history: bool = False,
             value_fn: Optional[ValueFunction] = None, log_path=None, score_fn=None) -> dict:
    """Plain TRPO against a fixed reward; returns the policy, value function and log."""
    from .evalharness import episode_scores
    score_fn = score_fn or (lambda d: episode_scores(spec, d))
    if value_fn is None:
        value_fn = ValueFunction(policy.obs_dim, policy.mean_net.layer_sizes[1], np.random.default_rng(seed),
                                 policy.mean_net.in_scale)
    log = CsvLog(log_path)
    for it in range(iterations):
        batch = collect_rollouts(spec, pert, policy, space, reward_source, batch_size, traj_len,
                                 envsim.derive_seed(seed, it), history, snapshot_id=it)
        adv, ret = compute_advantages(batch, value_fn, cfg.gamma, cfg.gae_lambda)
        m = batch.mask
        fit_value(value_fn, batch.data.obs[m], ret, cfg, envsim.derive_seed(seed, it, 2))
        diag = policy_update(policy, batch.data.obs[m], batch.data.raw[m], adv, cfg, batch.logp[m])
        log.append({"iteration": it, "mean_return": float(batch.rewards.sum(1).mean()),
                    "mean_score": float(np.mean(score_fn(batch.data))), "kl": diag["kl"],
                    "improvement": diag["improvement"], "success_rate": float(batch.data.success.mean())})
    return {"policy": policy, "value_fn": value_fn, "log": log.rows}
