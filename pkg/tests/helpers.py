"""Shared numerical oracles for the test-suite."""

import numpy as np

from impedance_irl.approx import GaussianPolicy, RewardNet

FD_H = 1e-5


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


def fd_gradient(f, theta, coords, h=FD_H):
    """Central differences of scalar ``f`` at ``theta`` for selected coordinates."""
    out = np.empty(len(coords))
    for j, i in enumerate(coords):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        out[j] = (f(tp) - f(tm)) / (2 * h)
    return out


def fd_directional(f, theta, d, h=FD_H):
    return (f(theta + h * d) - f(theta - h * d)) / (2 * h)


# network shapes used by the package: plain policy, reward net, history policy
SHAPES = {
    "policy_2x32_tanh": dict(kind="policy", obs=6, act=3, hidden=32),
    "reward_2x32_relu": dict(kind="reward", obs=6, act=3, hidden=32),
    "history_policy_2x128_tanh": dict(kind="policy", obs=30, act=3, hidden=128),
}


def gradient_check(shape: dict, draw: int, n_coords: int = 60, n_dirs: int = 3, batch: int = 8):
    """Max relative error between analytic and central-difference gradients
    for one random parameter draw of a package network."""
    rng = np.random.default_rng(1000 + draw)
    o = rng.normal(0, 1, (batch, shape["obs"]))
    a = rng.normal(0, 1, (batch, shape["act"]))
    w = rng.normal(0, 1, batch)
    if shape["kind"] == "policy":
        net = GaussianPolicy(shape["obs"], shape["act"], shape["hidden"], rng=rng)
        theta = rng.normal(0, 0.3, net.n_params)
        theta[-shape["act"]:] = rng.uniform(-1, 0.5, shape["act"])
        analytic_fn = lambda: net.log_prob_grad(o, a, w)

        def loss(t):
            net.set_flat(t)
            return float(w @ net.log_prob(o, a))
    else:
        net = RewardNet(shape["obs"], shape["act"], shape["hidden"], rng=rng)
        theta = rng.normal(0, 0.3, len(net.get_flat()))
        analytic_fn = lambda: net.grad(o, a, w)

        def loss(t):
            net.set_flat(t)
            return float(w @ net(o, a))
    net.set_flat(theta)
    g = analytic_fn()
    coords = rng.choice(len(theta), min(n_coords, len(theta)), replace=False)
    err = rel_err(g[coords], fd_gradient(loss, theta, coords))
    for _ in range(n_dirs):
        d = rng.normal(0, 1, len(theta))
        d /= np.linalg.norm(d)
        err = max(err, rel_err(g @ d, fd_directional(loss, theta, d)))
    net.set_flat(theta)
    return err
