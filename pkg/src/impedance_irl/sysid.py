"""Sliding-window least-squares estimation of stiffness and damping."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

COND_MAX = 1e8
WINDOW = 10


@dataclass
class GainEstimate:
    k_diag: np.ndarray
    b_diag: np.ndarray
    residual: float
    window_index: int = 0
    # per axis: "" identified, "k" / "b" that parameter not identifiable
    flags: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.residual >= 0:
            raise ValueError("residual must be non-negative")

    def clamped(self, k_bounds=None, b_bounds=None):
        k, b = self.k_diag, self.b_diag
        if k_bounds is not None:
            k = np.clip(k, *k_bounds)
        if b_bounds is not None:
            b = np.clip(b, *b_bounds)
        return k, b


def estimate_window(e, edot, force, window: int = WINDOW, prev: Optional[GainEstimate] = None,
                    cond_max: float = COND_MAX, index: int = 0) -> GainEstimate:
    """Per-axis least squares ``F_i = -k_i e_i - b_i edot_i`` over one window.

    When an axis' design matrix has condition number above ``cond_max`` only
    the better-excited parameter is fitted; the other keeps ``prev``'s value
    (NaN without a previous window) and is flagged.
    """
    e, edot, force = (np.atleast_2d(np.asarray(a, float)) for a in (e, edot, force))
    if e.shape[0] < window:
        raise ValueError(f"window needs {window} samples, got {e.shape[0]}")
    if not (e.shape == edot.shape == force.shape):
        raise ValueError("e, edot and force must share shape")
    dof = e.shape[1]
    k, b = np.zeros(dof), np.zeros(dof)
    flags = [""] * dof
    resid = np.zeros_like(force)
    for i in range(dof):
        A = np.stack([-e[:, i], -edot[:, i]], axis=1)
        y = force[:, i]
        sv = np.linalg.svd(A, compute_uv=False)
        cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
        if cond <= cond_max:
            sol, *_ = np.linalg.lstsq(A, y, rcond=None)
            k[i], b[i] = sol
        else:
            col = int(np.argmax(np.linalg.norm(A, axis=0)))
            a = A[:, col]
            aa = a @ a
            val = (a @ y) / aa if aa > 0 else np.nan
            other = np.nan
            if prev is not None:
                other = prev.b_diag[i] if col == 0 else prev.k_diag[i]
            if col == 0:
                k[i], b[i], flags[i] = val, other, "b"
            else:
                k[i], b[i], flags[i] = other, val, "k"
            sol = np.array([k[i], b[i]])
            sol = np.where(np.isfinite(sol), sol, 0.0)
        resid[:, i] = y - A @ sol
    return GainEstimate(k, b, float(np.sqrt(np.mean(resid ** 2))), index, flags)


def estimate_trajectory(traj, window: int = WINDOW, stride: int = 1,
                        cond_max: float = COND_MAX) -> List[GainEstimate]:
    """One estimate per window position (``steps - window + 1`` for stride 1)."""
    force = getattr(traj, "force", None)
    if force is None or len(force) == 0:
        raise ValueError("trajectory has no force channel")
    e, edot = traj.e, traj.edot
    n = len(force)
    if n < window:
        raise ValueError(f"trajectory shorter ({n}) than the window ({window})")
    out: List[GainEstimate] = []
    prev = None
    for j, s in enumerate(range(0, n - window + 1, stride)):
        est = estimate_window(e[s:s + window], edot[s:s + window], force[s:s + window], window,
                              prev, cond_max, j)
        out.append(est)
        prev = est
    return out


def median_smooth(values, width: int = 5) -> np.ndarray:
    """Centred running median along the first axis (edges use a truncated window)."""
    v = np.asarray(values, float)
    h = width // 2
    out = np.empty_like(v)
    for t in range(len(v)):
        out[t] = np.nanmedian(v[max(0, t - h):t + h + 1], axis=0)
    return out


def write_estimates_csv(path, estimates: Sequence[GainEstimate], dt: float = 1.0, episode: int = 0,
                        append: bool = False) -> None:
    dof = len(estimates[0].k_diag) if estimates else 0
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(["episode", "t"] + [f"k{i}" for i in range(dof)] + [f"b{i}" for i in range(dof)]
                       + ["residual", "flags"])
        for est in estimates:
            w.writerow([episode, repr(est.window_index * dt)] + [repr(float(v)) for v in est.k_diag]
                       + [repr(float(v)) for v in est.b_diag] + [repr(est.residual), "|".join(est.flags)])
