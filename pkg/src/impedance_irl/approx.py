"""Small numpy networks: MLPs with hand-written reverse/forward mode,
diagonal Gaussian policies and the AIRL reward network."""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2PI = np.log(2.0 * np.pi)

_ACT = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(float)),
}


class MLP:
    """Affine layers with ``activation`` between them and a linear output."""

    def __init__(self, layer_sizes: Sequence[int], activation: str = "tanh",
                 rng: Optional[np.random.Generator] = None, out_scale: float = 1.0,
                 in_scale: Optional[Sequence[float]] = None):
        if activation not in _ACT:
            raise ValueError(f"unknown activation {activation!r}")
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.layer_sizes = [int(n) for n in layer_sizes]
        self.activation = activation
        # fixed per-input divisor; part of the architecture, not trained
        self.in_scale = None if in_scale is None else np.asarray(in_scale, float)
        if self.in_scale is not None and self.in_scale.shape != (self.layer_sizes[0],):
            raise ValueError("in_scale must match the input size")
        self.W: List[np.ndarray] = []
        self.b: List[np.ndarray] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        gain = 1.0 if activation == "tanh" else np.sqrt(2.0)
        n_layers = len(self.layer_sizes) - 1
        for i, (n_in, n_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            W = _orthogonal(rng, n_in, n_out) * gain
            if i == n_layers - 1:
                W = W * out_scale
            self.W.append(W)
            self.b.append(np.zeros(n_out))

    # -- parameters ---------------------------------------------------------

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.W, self.b))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for W, b in zip(self.W, self.b) for p in (W, b)])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, float)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        i = 0
        for li in range(len(self.W)):
            for name in ("W", "b"):
                p = getattr(self, name)[li]
                getattr(self, name)[li] = flat[i:i + p.size].reshape(p.shape).copy()
                i += p.size

    def copy(self) -> "MLP":
        new = MLP.__new__(MLP)
        new.layer_sizes = list(self.layer_sizes)
        new.activation = self.activation
        new.in_scale = None if self.in_scale is None else self.in_scale.copy()
        new.W = [W.copy() for W in self.W]
        new.b = [b.copy() for b in self.b]
        return new

    # -- evaluation ---------------------------------------------------------

    def _check(self, x):
        x = np.asarray(x, float)
        if x.shape[-1] != self.layer_sizes[0]:
            raise ValueError(f"input dim {x.shape[-1]} != {self.layer_sizes[0]}")
        return x / self.in_scale if self.in_scale is not None else x

    def forward(self, x, cache: bool = False):
        act = _ACT[self.activation][0]
        h = self._check(x)
        hs, zs = [h], []
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            z = h @ W + b
            if i < len(self.W) - 1:
                h = act(z)
            else:
                h = z
            zs.append(z)
            hs.append(h)
        if cache:
            return h, (hs, zs)
        return h

    __call__ = forward

    def backward(self, cache, cotangent) -> np.ndarray:
        """Flattened gradient of ``sum <output, cotangent>`` over the batch."""
        dact = _ACT[self.activation][1]
        hs, zs = cache
        g = np.asarray(cotangent, float)
        grads = []
        for i in reversed(range(len(self.W))):
            h_in = hs[i]
            gW = h_in.reshape(-1, h_in.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
            grads.append((gW, gb))
            if i > 0:
                g = (g @ self.W[i].T) * dact(zs[i - 1], hs[i])
        return np.concatenate([p.ravel() for gW, gb in reversed(grads) for p in (gW, gb)])

    def jvp(self, cache, tangent: np.ndarray) -> np.ndarray:
        """Directional derivative of the outputs along a parameter tangent."""
        dact = _ACT[self.activation][1]
        hs, zs = cache
        tangent = np.asarray(tangent, float)
        dW, db, i = [], [], 0
        for W, b in zip(self.W, self.b):
            dW.append(tangent[i:i + W.size].reshape(W.shape)); i += W.size
            db.append(tangent[i:i + b.size]); i += b.size
        dh = np.zeros_like(hs[0])
        for li in range(len(self.W)):
            dz = hs[li] @ dW[li] + db[li] + dh @ self.W[li]
            dh = dz * dact(zs[li], hs[li + 1]) if li < len(self.W) - 1 else dz
        return dh

    def grad(self, x, cotangent) -> np.ndarray:
        _, cache = self.forward(x, cache=True)
        return self.backward(cache, cotangent)

    def input_grad(self, x, cotangent) -> np.ndarray:
        dact = _ACT[self.activation][1]
        _, (hs, zs) = self.forward(x, cache=True)
        g = np.asarray(cotangent, float)
        for i in reversed(range(len(self.W))):
            g = g @ self.W[i].T
            if i > 0:
                g = g * dact(zs[i - 1], hs[i])
        return g / self.in_scale if self.in_scale is not None else g

    # -- serialisation --------------------------------------------------------

    def state(self) -> dict:
        return {"layer_sizes": self.layer_sizes, "activation": self.activation,
                "in_scale": None if self.in_scale is None else self.in_scale,
                "params": self.get_flat()}

    @classmethod
    def from_state(cls, st: dict) -> "MLP":
        net = cls(st["layer_sizes"], st["activation"], in_scale=st.get("in_scale"))
        net.set_flat(st["params"])
        return net


def _orthogonal(rng, n_in, n_out):
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if n_in >= n_out else q.T


def mlp(sizes, activation, rng, out_scale=1.0, in_scale=None) -> MLP:
    return MLP(sizes, activation, rng, out_scale, in_scale)


# ---------------------------------------------------------------------------

class GaussianPolicy:
    """Diagonal Gaussian over the pre-squash action ``u``:
    ``u ~ N(mean_net(o), diag(exp(log_std))^2)``.  Squashing into gains or
    forces happens downstream in the action space."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: int = 32, n_hidden: int = 2,
                 rng: Optional[np.random.Generator] = None, obs_scale=None,
                 init_log_std: float = -0.5, init_mean=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mean_net = MLP([obs_dim] + [hidden] * n_hidden + [act_dim], "tanh", rng,
                            out_scale=0.01, in_scale=obs_scale)
        self.log_std = np.full(act_dim, float(init_log_std))
        if init_mean is not None:
            self.mean_net.b[-1] = np.asarray(init_mean, float).copy()

    @property
    def obs_dim(self) -> int:
        return self.mean_net.layer_sizes[0]

    @property
    def act_dim(self) -> int:
        return self.mean_net.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return self.mean_net.n_params + self.act_dim

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.mean_net.get_flat(), self.log_std])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, float)
        self.mean_net.set_flat(flat[:-self.act_dim])
        self.log_std = np.clip(flat[-self.act_dim:], LOG_STD_MIN, LOG_STD_MAX).copy()

    def copy(self) -> "GaussianPolicy":
        new = GaussianPolicy.__new__(GaussianPolicy)
        new.mean_net = self.mean_net.copy()
        new.log_std = self.log_std.copy()
        return new

    def mean(self, o) -> np.ndarray:
        return self.mean_net(o)

    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX))

    def log_prob(self, o, a) -> np.ndarray:
        return gaussian_log_prob(self.mean(o), self.log_std, a)

    def sample(self, o, rng: np.random.Generator) -> np.ndarray:
        mu = self.mean(o)
        return mu + self.std() * rng.standard_normal(mu.shape)

    def log_prob_grad(self, o, a, weights) -> np.ndarray:
        """Gradient of ``sum_i weights_i * log_prob(o_i, a_i)`` w.r.t. the flat parameters."""
        mu, cache = self.mean_net.forward(o, cache=True)
        log_std = np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)
        var = np.exp(2 * log_std)
        w = np.asarray(weights, float)[..., None]
        diff = np.asarray(a, float) - mu
        g_mean = self.mean_net.backward(cache, w * diff / var)
        g_log_std = np.sum(w * (diff * diff / var - 1.0), axis=tuple(range(diff.ndim - 1)))
        return np.concatenate([g_mean, g_log_std])

    def state(self) -> dict:
        return {"mean_net": self.mean_net.state(), "log_std": self.log_std}

    @classmethod
    def from_state(cls, st: dict) -> "GaussianPolicy":
        new = cls.__new__(cls)
        new.mean_net = MLP.from_state(st["mean_net"])
        new.log_std = np.asarray(st["log_std"], float).copy()
        return new


def gaussian_log_prob(mu, log_std, a) -> np.ndarray:
    log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    z = (np.asarray(a, float) - mu) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_kl(mu_old, log_std_old, mu_new, log_std_new) -> np.ndarray:
    """KL(old || new) for diagonal Gaussians, summed over action dims."""
    var_old, var_new = np.exp(2 * log_std_old), np.exp(2 * log_std_new)
    return np.sum(log_std_new - log_std_old
                  + (var_old + (mu_old - mu_new) ** 2) / (2 * var_new) - 0.5, axis=-1)


class RewardNet:
    """Scalar ``r(o, a)`` from an MLP over the concatenated observation and
    pre-squash action."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: int = 32, n_hidden: int = 2,
                 rng: Optional[np.random.Generator] = None, obs_scale=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        in_scale = None
        if obs_scale is not None:
            in_scale = np.concatenate([np.asarray(obs_scale, float), np.ones(act_dim)])
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.net = MLP([obs_dim + act_dim] + [hidden] * n_hidden + [1], "relu", rng,
                       out_scale=0.1, in_scale=in_scale)

    def __call__(self, o, a) -> np.ndarray:
        return self.net(np.concatenate([o, a], axis=-1))[..., 0]

    def grad(self, o, a, weights) -> np.ndarray:
        w = np.asarray(weights, float)[..., None]
        return self.net.grad(np.concatenate([o, a], axis=-1), w)

    def get_flat(self):
        return self.net.get_flat()

    def set_flat(self, flat):
        self.net.set_flat(flat)

    def copy(self) -> "RewardNet":
        new = RewardNet.__new__(RewardNet)
        new.obs_dim, new.act_dim = self.obs_dim, self.act_dim
        new.net = self.net.copy()
        return new

    def state(self) -> dict:
        return {"net": self.net.state(), "obs_dim": self.obs_dim, "act_dim": self.act_dim}

    @classmethod
    def from_state(cls, st: dict) -> "RewardNet":
        new = cls.__new__(cls)
        new.obs_dim, new.act_dim = int(st["obs_dim"]), int(st["act_dim"])
        new.net = MLP.from_state(st["net"])
        return new


class Adam:
    def __init__(self, n: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        """Update for a *descent* on the loss whose gradient is ``grad``."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        return -self.lr * mh / (np.sqrt(vh) + self.eps)


class Momentum:
    def __init__(self, n: int, lr: float = 3e-4, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.vel = np.zeros(n)

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.vel = self.momentum * self.vel - self.lr * grad
        return self.vel


# ---------------------------------------------------------------------------
# checkpoints: a single .npz holding JSON metadata plus float64 arrays

def _flatten_state(prefix, st, arrays, meta):
    for k, v in st.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            _flatten_state(key + "/", v, arrays, meta)
        elif isinstance(v, np.ndarray):
            arrays[key] = v.astype(np.float64)
        else:
            meta[key] = v


def _unflatten_state(arrays, meta):
    out: Dict = {}
    for key, v in list(meta.items()) + [(k, arrays[k]) for k in arrays.files if k != "__meta__"]:
        parts = key.split("/")
        d = out
        for p in parts[:-1]:
            d = d.setdefault(p, {})
        d[parts[-1]] = v
    return out


def save_checkpoint(path: Union[str, Path], **objects) -> None:
    """Save policies/reward/value nets plus plain metadata in one file."""
    arrays, meta = {}, {}
    for name, obj in objects.items():
        if hasattr(obj, "state"):
            meta[f"{name}/__type__"] = type(obj).__name__
            _flatten_state(f"{name}/", obj.state(), arrays, meta)
        else:
            meta[name] = obj
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8), **arrays)
    Path(path).write_bytes(buf.getvalue())


_TYPES = {"MLP": MLP, "GaussianPolicy": GaussianPolicy, "RewardNet": RewardNet}


def load_checkpoint(path: Union[str, Path]) -> dict:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        tree = _unflatten_state(data, meta)
    out = {}
    for name, v in tree.items():
        if isinstance(v, dict) and "__type__" in v:
            tname = v.pop("__type__")
            if tname == "ValueFunction":
                from .trpo import ValueFunction
                typ = ValueFunction
            else:
                typ = _TYPES[tname]
            out[name] = typ.from_state(v)
        else:
            out[name] = v
    return out
