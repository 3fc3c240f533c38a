"""Impedance control law, gain parameterisation and tip-to-COM stiffness maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

EPS_E = 1e-4  # m; below this an error component is treated as degenerate
# keeps un-squashed actions finite for gains/forces sitting on a bound
SQUASH_EPS = 1e-6


@dataclass(frozen=True)
class GainAction:
    k_diag: np.ndarray
    d: Optional[float] = None

    def __post_init__(self):
        k = np.asarray(self.k_diag, float)
        object.__setattr__(self, "k_diag", k)
        if not np.all(k > 0):
            raise ValueError("stiffness entries must be positive")
        if self.d is not None and not self.d > 0:
            raise ValueError("damping factor must be positive")


@dataclass(frozen=True)
class TipStiffnessSpec:
    k_tip: np.ndarray
    j_tip: np.ndarray


def clamp_force(f, f_max):
    if f_max is None or len(f_max) == 0:
        return f
    f_max = np.asarray(f_max, float)
    return np.clip(f, -f_max, f_max)


def feedback_force(k_diag, b_diag, e, edot, f_max=None) -> np.ndarray:
    """``-B edot - K e`` for diagonal gains, clamped per axis to ``f_max``."""
    k_diag, b_diag = np.asarray(k_diag, float), np.asarray(b_diag, float)
    e, edot = np.asarray(e, float), np.asarray(edot, float)
    if not (k_diag.shape[-1] == b_diag.shape[-1] == e.shape[-1] == edot.shape[-1]):
        raise ValueError("gains, error and velocity must share their last dimension")
    return clamp_force(-b_diag * edot - k_diag * e, f_max)


def damping_from_factor(k_diag, d) -> np.ndarray:
    k_diag = np.asarray(k_diag, float)
    d = np.asarray(d, float)
    if np.any(k_diag <= 0) or np.any(d <= 0):
        raise ValueError("stiffness and damping factor must be positive")
    return d[..., None] * np.sqrt(k_diag) if d.ndim else d * np.sqrt(k_diag)


def critical_damping(k_diag, masses) -> np.ndarray:
    return 2.0 * np.sqrt(np.asarray(k_diag, float) * np.asarray(masses, float))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def squash_unit(raw, lo, hi):
    return lo + (hi - lo) * _sigmoid(np.asarray(raw, float))


def unsquash_unit(v, lo, hi):
    frac = np.clip((np.asarray(v, float) - lo) / (hi - lo), SQUASH_EPS, 1.0 - SQUASH_EPS)
    return np.log(frac) - np.log1p(-frac)


def to_positive_gains(raw, bounds) -> GainAction:
    """Map an unconstrained vector into ``(k_min, k_max)`` with a sigmoid."""
    k_min, k_max = (np.asarray(b, float) for b in bounds)
    if np.any(k_min <= 0) or np.any(k_max <= k_min):
        raise ValueError("bounds need 0 < k_min < k_max")
    return GainAction(squash_unit(raw, k_min, k_max))


def tip_to_com(spec: TipStiffnessSpec) -> np.ndarray:
    K, J = np.asarray(spec.k_tip, float), np.asarray(spec.j_tip, float)
    if K.shape[-1] != K.shape[-2] or J.shape[-2] != K.shape[-1]:
        raise ValueError(f"cannot form J^T K J with K {K.shape} and J {J.shape}")
    Jt = np.swapaxes(J, -1, -2)
    out = Jt @ K @ J
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def diagonalize_stiffness(k_com, e, k_min=None, k_max=None, eps=EPS_E) -> np.ndarray:
    """Diagonal gains reproducing ``K_COM e`` on every well-excited axis.

    Axes with ``|e_i| <= eps`` fall back to the diagonal entry of ``K_COM``.
    """
    k_com, e = np.asarray(k_com, float), np.asarray(e, float)
    ke = np.einsum("...ij,...j->...i", k_com, e)
    diag = np.diagonal(k_com, axis1=-2, axis2=-1)
    ok = np.abs(e) > eps
    k = np.where(ok, ke / np.where(ok, e, 1.0), diag)
    if k_min is not None:
        k = np.clip(k, k_min, k_max)
    return k


def peg_tip_jacobian(theta, half_length) -> np.ndarray:
    """d(tip_x, tip_z, theta) / d(x, z, theta) for a peg whose tip sits
    ``half_length`` below the COM along the body axis."""
    theta = np.asarray(theta, float)
    J = np.zeros(theta.shape + (3, 3))
    J[..., 0, 0] = J[..., 1, 1] = J[..., 2, 2] = 1.0
    J[..., 0, 2] = half_length * np.cos(theta)
    J[..., 1, 2] = half_length * np.sin(theta)
    return J


# ---------------------------------------------------------------------------
# action spaces

class GainSpace:
    """Policy outputs diagonal stiffness (plus a damping factor when
    ``damping == "factor"``); forces come from the impedance law."""

    kind = "gain"

    def __init__(self, k_min: Sequence[float], k_max: Sequence[float], masses: Sequence[float],
                 f_max: Sequence[float] = (), damping: str = "critical",
                 d_bounds: Sequence[float] = (0.5, 4.0)):
        if damping not in ("critical", "factor"):
            raise ValueError(f"unknown damping rule {damping!r}")
        self.k_min = np.asarray(k_min, float)
        self.k_max = np.asarray(k_max, float)
        self.masses = np.asarray(masses, float)
        self.f_max = np.asarray(f_max, float) if len(f_max) else None
        self.damping = damping
        self.d_bounds = tuple(float(v) for v in d_bounds)
        self.dof = len(self.k_min)
        self.dim = self.dof + (1 if damping == "factor" else 0)
        lo, hi = self.k_min, self.k_max
        if damping == "factor":
            lo, hi = np.append(lo, self.d_bounds[0]), np.append(hi, self.d_bounds[1])
        self.low, self.high = lo, hi

    @classmethod
    def from_env(cls, spec) -> "GainSpace":
        return cls(spec.k_min, spec.k_max, spec.dynamics.masses, spec.f_max, spec.damping, spec.d_bounds)

    def squash(self, raw) -> np.ndarray:
        return squash_unit(raw, self.low, self.high)

    def unsquash(self, action) -> np.ndarray:
        return unsquash_unit(action, self.low, self.high)

    def split(self, action):
        action = np.asarray(action, float)
        k = action[..., :self.dof]
        if self.damping == "factor":
            b = damping_from_factor(k, action[..., self.dof])
        else:
            b = critical_damping(k, self.masses)
        return k, b

    def force_fn(self, action, goal):
        """Impedance law re-evaluated on every simulation substep."""
        k, b = self.split(action)
        goal = np.asarray(goal, float)
        return lambda state: feedback_force(k, b, state.x - goal, state.xdot, self.f_max)

    def force(self, action, e, edot):
        k, b = self.split(action)
        return feedback_force(k, b, e, edot, self.f_max)


class ForceSpace:
    """Policy outputs the Cartesian feedback force, ``tanh(raw) * f_max``."""

    kind = "force"

    def __init__(self, f_max: Sequence[float]):
        self.f_max = np.asarray(f_max, float)
        self.dof = self.dim = len(self.f_max)
        self.low, self.high = -self.f_max, self.f_max

    @classmethod
    def from_env(cls, spec) -> "ForceSpace":
        return cls(spec.f_max)

    def squash(self, raw) -> np.ndarray:
        return np.tanh(np.asarray(raw, float)) * self.f_max

    def unsquash(self, action) -> np.ndarray:
        u = np.clip(np.asarray(action, float) / self.f_max, -1.0 + 2 * SQUASH_EPS, 1.0 - 2 * SQUASH_EPS)
        return np.arctanh(u)

    def force_fn(self, action, goal):
        f = np.asarray(action, float)
        return lambda state: f

    def force(self, action, e, edot):
        return np.asarray(action, float)


def make_action_space(kind: str, spec):
    if kind == "gain":
        return GainSpace.from_env(spec)
    if kind == "force":
        return ForceSpace.from_env(spec)
    raise ValueError(f"unknown action space {kind!r}")
