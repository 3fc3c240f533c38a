"""Desk-scale contact environments.

Three task families share one set of vectorised dynamics functions:

* ``peg_in_hole`` -- planar rigid peg with generalised coordinates (x, z, theta),
  constant diagonal mass matrix, penalty contact against a table with a hole.
* ``cup_on_plate`` -- 3-DOF point mass (x, y, z) above a plate whose mass matrix
  gains a y-z coupling away from the training approach path.
* ``reach`` -- constant-mass free-space reach used for smoke tests and control-law
  checks.

Every state function accepts a single state (arrays of shape ``(dof,)``) or a
batch (``(n, dof)``); batches are how rollouts run many episodes at once.

The robot is assumed to run the feed-forward ``F_ff = C(x, xdot) xdot + G(x)``
(static waypoints, so no ``M xdd_d`` term), which cancels the bias forces and
leaves ``M(x) xdd = F_fb + F_contact``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np



TASKS = ("peg_in_hole", "cup_on_plate", "reach")
HISTORY_LEN = 5
_SQRT2 = math.sqrt(2.0)


class SimulationDiverged(RuntimeError):
    """Raised when integration produces a non-finite state."""


@dataclass(frozen=True)
class DynamicsModel:
    """Cartesian rigid-body model ``M(x) xdd + C(x, xdot) xdot + G(x)``.

    With ``coupling == 0`` the mass matrix is ``diag(masses)``.  Otherwise a
    symmetric off-diagonal term couples ``coupled_axes`` with magnitude
    ``coupling * m * tanh(d^2 / length^2)``, ``d`` being the distance from the
    position to the segment ``path_start -> path_end``.  The coupling therefore
    vanishes along the training approach and grows away from it.
    """

    masses: Tuple[float, ...]
    gravity_axis: Optional[int] = None
    g: float = 9.81
    coupling: float = 0.0
    coupling_length: float = 0.2
    coupled_axes: Tuple[int, int] = (1, 2)
    path_start: Optional[Tuple[float, ...]] = None
    path_end: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if any(m <= 0 for m in self.masses):
            raise ValueError("masses must be positive")
        if not 0.0 <= self.coupling < 1.0:
            raise ValueError("coupling must lie in [0, 1) to keep M positive definite")
        if self.coupling > 0 and (self.path_start is None or self.path_end is None):
            raise ValueError("coupled model needs path_start and path_end")

    @property
    def dof(self) -> int:
        return len(self.masses)

    @property
    def is_constant(self) -> bool:
        return self.coupling == 0.0

    def _coupling_and_grad(self, x):
        a = np.asarray(self.path_start, float)
        b = np.asarray(self.path_end, float)
        ab = b - a
        s = np.clip(((x - a) @ ab) / (ab @ ab), 0.0, 1.0)
        diff = x - (a + s[..., None] * ab)
        q = np.sum(diff * diff, axis=-1) / self.coupling_length ** 2
        c = self.coupling * np.tanh(q)
        # gradient of the squared segment distance is 2 * diff, also at the ends
        dc = (self.coupling / np.cosh(q) ** 2 * 2.0 / self.coupling_length ** 2)[..., None] * diff
        return c, dc

    def _unit_coupling(self):
        i, j = self.coupled_axes
        E = np.zeros((self.dof, self.dof))
        E[i, j] = E[j, i] = 1.0
        return E, math.sqrt(self.masses[i] * self.masses[j])

    def mass_matrix(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        M = np.broadcast_to(np.diag(self.masses), x.shape[:-1] + (self.dof, self.dof)).copy()
        if not self.is_constant:
            c, _ = self._coupling_and_grad(x)
            E, m = self._unit_coupling()
            M = M + m * c[..., None, None] * E
        return M

    def coriolis(self, x, xdot) -> np.ndarray:
        """Christoffel-consistent ``C(x, xdot)``; zero for constant mass."""
        x = np.asarray(x, float)
        shape = x.shape[:-1] + (self.dof, self.dof)
        if self.is_constant:
            return np.zeros(shape)
        _, g = self._coupling_and_grad(x)
        E, m = self._unit_coupling()
        Ev = np.asarray(xdot, float) @ E.T
        gv = np.sum(g * xdot, axis=-1)
        return 0.5 * m * (gv[..., None, None] * E + Ev[..., :, None] * g[..., None, :]
                          - g[..., :, None] * Ev[..., None, :])

    def mass_matrix_rate(self, x, xdot) -> np.ndarray:
        x = np.asarray(x, float)
        if self.is_constant:
            return np.zeros(x.shape[:-1] + (self.dof, self.dof))
        _, g = self._coupling_and_grad(x)
        E, m = self._unit_coupling()
        return m * np.sum(g * xdot, axis=-1)[..., None, None] * E

    def gravity(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        G = np.zeros(x.shape)
        if self.gravity_axis is not None:
            G[..., self.gravity_axis] = self.masses[self.gravity_axis] * self.g
        return G


@dataclass(frozen=True)
class ContactSpec:
    """Penalty contact constants.

    ``surface`` selects the geometry: ``"hole"`` (table at z=0 with a hole of
    ``hole_width`` x ``hole_depth`` and an optional rim chamfer) or ``"plate"``
    (flat plate at z=0).  Mesh scaling multiplies peg width, hole width and
    chamfer.
    """

    surface: str = "hole"
    hole_width: float = 0.02540
    peg_width: float = 0.02537
    peg_length: float = 0.10
    hole_depth: float = 0.07
    chamfer: float = 0.0  # 45-degree rim chamfer width
    wall_stiffness: float = 1.0e5
    wall_damping: float = 100.0
    friction_coeff: float = 0.3
    friction_velocity: float = 1.0e-3

    def __post_init__(self):
        if self.surface not in ("hole", "plate"):
            raise ValueError(f"unknown contact surface {self.surface!r}")
        if self.surface == "hole" and not self.peg_width < self.hole_width:
            raise ValueError("peg_width must be smaller than hole_width")
        if self.chamfer < 0:
            raise ValueError("chamfer must be non-negative")
        if self.wall_stiffness <= 0 or self.wall_damping < 0 or self.friction_coeff < 0:
            raise ValueError("invalid contact constants")


@dataclass(frozen=True)
class ScenarioPerturbation:
    tilt_angle: Optional[float] = None  # degrees, peg-in-hole
    mesh_scale: float = 1.0
    initial_position: Optional[Tuple[float, ...]] = None  # cup-on-plate / reach
    name: str = ""

    def __post_init__(self):
        if not 0.0 < self.mesh_scale <= 1.5:
            raise ValueError(f"mesh_scale {self.mesh_scale} outside (0, 1.5]")

    def to_dict(self) -> dict:
        d = {"name": self.name, "mesh_scale": self.mesh_scale}
        if self.tilt_angle is not None:
            d["tilt_angle"] = self.tilt_angle
        if self.initial_position is not None:
            d["initial_position"] = list(self.initial_position)
        return d

    def same_setting(self, other: "ScenarioPerturbation") -> bool:
        """Equal up to the label."""
        return replace(self, name="") == replace(other, name="")

    @classmethod
    def from_dict(cls, d: dict, name: str = "") -> "ScenarioPerturbation":
        ip = d.get("initial_position")
        return cls(tilt_angle=d.get("tilt_angle"), mesh_scale=float(d.get("mesh_scale", 1.0)),
                   initial_position=None if ip is None else tuple(float(v) for v in ip),
                   name=d.get("name", name))


@dataclass(frozen=True)
class EnvSpec:
    task: str
    dynamics: DynamicsModel
    goal: Tuple[float, ...]
    start: Tuple[float, ...]
    dt: float = 0.002
    substeps: int = 5
    horizon: int = 200
    contact: Optional[ContactSpec] = None
    start_jitter: Tuple[float, ...] = ()
    approach_radius: float = 0.5
    insertion_depth: float = 0.06
    pos_tol: float = 0.01
    vel_tol: float = 0.05
    f_max: Tuple[float, ...] = ()
    k_min: Tuple[float, ...] = ()
    k_max: Tuple[float, ...] = ()
    damping: str = "critical"  # "critical" (fixed b = 2 sqrt(k m)) or "factor" (b = d sqrt(k))
    d_bounds: Tuple[float, float] = (0.5, 4.0)
    obs_scale: Tuple[float, ...] = ()
    scenarios: Dict[str, ScenarioPerturbation] = field(default_factory=dict)
    sweeps: Dict[str, Tuple[str, ...]] = field(default_factory=dict)
    training_scenario: str = "training"
    expert: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.dt <= 0 or self.horizon <= 0 or self.substeps <= 0:
            raise ValueError("dt, horizon and substeps must be positive")
        for name in ("goal", "start"):
            if len(getattr(self, name)) != self.dof:
                raise ValueError(f"{name} must have dim {self.dof}")
        for name in ("f_max", "k_min", "k_max", "start_jitter"):
            v = getattr(self, name)
            if v and len(v) != self.dof:
                raise ValueError(f"{name} must have dim {self.dof}")
        if self.k_min and any(lo <= 0 or hi <= lo for lo, hi in zip(self.k_min, self.k_max)):
            raise ValueError("gain bounds need 0 < k_min < k_max")
        if self.obs_scale and len(self.obs_scale) != 2 * self.dof:
            raise ValueError("obs_scale must have dim 2*dof")

    @property
    def dof(self) -> int:
        return self.dynamics.dof

    @property
    def control_dt(self) -> float:
        return self.dt * self.substeps

    def scenario(self, name: str) -> ScenarioPerturbation:
        try:
            return self.scenarios[name]
        except KeyError:
            raise KeyError(f"task {self.task} has no scenario {name!r}; "
                           f"known: {sorted(self.scenarios)}") from None

    @property
    def training(self) -> ScenarioPerturbation:
        return self.scenario(self.training_scenario)


@dataclass
class EnvState:
    x: np.ndarray
    xdot: np.ndarray
    t: float = 0.0
    in_contact: np.ndarray = field(default_factory=lambda: np.zeros((), bool))

    def __post_init__(self):
        self.x = np.asarray(self.x, float)
        self.xdot = np.asarray(self.xdot, float)
        if self.x.shape != self.xdot.shape:
            raise ValueError("x and xdot must share shape")
        self.in_contact = np.broadcast_to(np.asarray(self.in_contact, bool), self.x.shape[:-1]).copy()

    @property
    def batch_shape(self):
        return self.x.shape[:-1]

    def copy(self) -> "EnvState":
        return EnvState(self.x.copy(), self.xdot.copy(), self.t, self.in_contact.copy())


# ---------------------------------------------------------------------------
# scenario handling

def check_perturbation(spec: EnvSpec, pert: ScenarioPerturbation) -> None:
    if spec.task == "peg_in_hole":
        if pert.initial_position is not None:
            raise ValueError("peg_in_hole scenarios are set by tilt_angle/mesh_scale, "
                             "not initial_position")
        if pert.tilt_angle is not None and not abs(pert.tilt_angle) < 45.0:
            raise ValueError(f"tilt angle {pert.tilt_angle} deg is outside (-45, 45)")
    else:
        if pert.tilt_angle is not None:
            raise ValueError(f"tilt_angle is only defined for peg_in_hole, not {spec.task}")
        if pert.mesh_scale != 1.0:
            raise ValueError(f"mesh_scale is only defined for peg_in_hole, not {spec.task}")
        if pert.initial_position is not None and len(pert.initial_position) != spec.dof:
            raise ValueError(f"initial_position must have dim {spec.dof}")


def perturbed(spec: EnvSpec, pert: ScenarioPerturbation) -> EnvSpec:
    """Return ``spec`` with the scenario geometry applied (mesh scale)."""
    check_perturbation(spec, pert)
    if pert.mesh_scale == 1.0 or spec.contact is None:
        return spec
    c = spec.contact
    m = pert.mesh_scale
    return replace(spec, contact=replace(c, hole_width=c.hole_width * m, peg_width=c.peg_width * m,
                                         chamfer=c.chamfer * m))


def nominal_start(spec: EnvSpec, pert: ScenarioPerturbation) -> np.ndarray:
    """Initial pose before jitter.

    A peg tilt of ``phi`` swings the peg about a pivot ``approach_radius``
    above its nominal pose: lateral offset ``R sin(phi)``, lift
    ``R (1 - cos(phi))`` and orientation ``phi``.
    """
    check_perturbation(spec, pert)
    x0 = np.array(spec.start, float)
    if spec.task == "peg_in_hole":
        phi = math.radians(pert.tilt_angle or 0.0)
        R = spec.approach_radius
        x0[0] += R * math.sin(phi)
        x0[1] += R * (1.0 - math.cos(phi))
        x0[2] += phi
    elif pert.initial_position is not None:
        x0 = np.array(pert.initial_position, float)
    return x0


def reset(spec: EnvSpec, pert: ScenarioPerturbation, seed: int) -> EnvState:
    """Initial state for one episode; deterministic in ``seed``."""
    x0 = nominal_start(spec, pert)
    if spec.start_jitter:
        rng = np.random.default_rng(seed)
        x0 = x0 + rng.uniform(-1.0, 1.0, spec.dof) * np.asarray(spec.start_jitter)
    return EnvState(x0, np.zeros(spec.dof), 0.0, False)


def reset_batch(spec: EnvSpec, pert: ScenarioPerturbation, seeds: Sequence[int]) -> EnvState:
    states = [reset(spec, pert, int(s)) for s in seeds]
    return EnvState(np.stack([s.x for s in states]), np.stack([s.xdot for s in states]), 0.0,
                    np.zeros(len(states), bool))


# ---------------------------------------------------------------------------
# contact

def _point_force(k, b, mu, v_eps, vel, normal, depth, active):
    """Penalty + viscous normal force and regularised Coulomb friction.

    ``vel`` is the body point velocity, ``normal`` the outward unit normal of the
    penetrated surface (direction the body is pushed).  Returns force vectors.
    """
    vn = np.sum(vel * normal, axis=-1)
    fn = np.where(active, np.maximum(k * depth - b * vn, 0.0), 0.0)
    vt = vel - vn[..., None] * normal
    speed = np.linalg.norm(vt, axis=-1)
    ft = -(mu * fn / np.maximum(speed, v_eps))[..., None] * vt
    return fn[..., None] * normal + ft, fn


def _table_blocks(c: ContactSpec):
    """Convex pieces of the table (counter-clockwise): the two rims, with the
    optional 45-degree chamfer, and the hole bottom."""
    hw, ch, D = c.hole_width / 2, c.chamfer, c.hole_depth
    W, H = 1.0, D + 0.05
    if ch > 0:
        right = [(hw, -H), (W, -H), (W, 0.0), (hw + ch, 0.0), (hw, -ch)]
        left = [(-W, -H), (-hw, -H), (-hw, -ch), (-hw - ch, 0.0), (-W, 0.0)]
    else:
        right = [(hw, -H), (W, -H), (W, 0.0), (hw, 0.0)]
        left = [(-W, -H), (-hw, -H), (-hw, 0.0), (-W, 0.0)]
    bottom = [(-hw, -H), (hw, -H), (hw, -D), (-hw, -D)]
    return [np.array(b, float) for b in (right, left, bottom)]


def _outward_normals(verts):
    """Outward unit edge normals of counter-clockwise polygon(s)."""
    d = np.roll(verts, -1, axis=-2) - verts
    n = np.stack([d[..., 1], -d[..., 0]], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _inside(points, verts, normals):
    """Points (..., m, 2) strictly inside convex polygons (..., k, 2)."""
    off = np.sum(normals * verts, axis=-1)  # (..., k)
    proj = np.einsum("...mi,...ki->...mk", points, normals)
    return np.all(proj < off[..., None, :], axis=-1)


def _sat(peg, peg_normals, block, block_normals):
    """Minimum translation pushing ``peg`` out of ``block``: (depth, normal)."""
    axes = np.concatenate([np.broadcast_to(block_normals, peg.shape[:-2] + block_normals.shape),
                           peg_normals[..., :2, :]], axis=-2)  # (..., A, 2)
    pp = np.einsum("...vi,...ai->...va", peg, axes)
    bp = np.einsum("vi,...ai->...va", block, axes)
    out_pos = bp.max(-2) - pp.min(-2)  # move peg along +axis
    out_neg = pp.max(-2) - bp.min(-2)  # move peg along -axis
    depth = np.minimum(out_pos, out_neg)
    a = np.argmin(depth, axis=-1)
    d = np.take_along_axis(depth, a[..., None], -1)[..., 0]
    ax = np.take_along_axis(axes, a[..., None, None], -2)[..., 0, :]
    sign = np.where(np.take_along_axis(out_pos, a[..., None], -1)[..., 0]
                    <= np.take_along_axis(out_neg, a[..., None], -1)[..., 0], 1.0, -1.0)
    return d, ax * sign[..., None]


def _peg_contact(c: ContactSpec, x, v):
    """Penalty contact of the rectangular peg against each convex table piece.

    Each overlapping piece contributes one force along the minimum-translation
    normal with depth equal to the overlap, applied at the mean of the
    vertices of either polygon lying inside the other.
    """
    p = x[..., :2]
    th, om = x[..., 2], v[..., 2]
    s = np.stack([np.cos(th), np.sin(th)], axis=-1)
    u = np.stack([np.sin(th), -np.cos(th)], axis=-1)
    half_w, half_l = c.peg_width / 2, c.peg_length / 2
    corners = [half_l * u - half_w * s, half_l * u + half_w * s,
               -half_l * u + half_w * s, -half_l * u - half_w * s]
    peg = p[..., None, :] + np.stack(corners, axis=-2)  # (..., 4, 2) counter-clockwise
    peg_n = _outward_normals(peg)
    k, b, mu, ve = c.wall_stiffness, c.wall_damping, c.friction_coeff, c.friction_velocity

    F = np.zeros(x.shape)
    touching = np.zeros(x.shape[:-1], bool)
    for block in _table_blocks(c):
        bn = _outward_normals(block)
        depth, normal = _sat(peg, peg_n, block, bn)
        active = depth > 0
        if not np.any(active):
            continue
        pin = _inside(peg, np.broadcast_to(block, peg.shape[:-2] + block.shape), bn)  # (..., 4)
        bin_ = _inside(np.broadcast_to(block, peg.shape[:-2] + block.shape), peg, peg_n)  # (..., nb)
        cnt = pin.sum(-1) + bin_.sum(-1)
        acc = np.einsum("...v,...vi->...i", pin.astype(float), peg) + bin_.astype(float) @ block
        deepest = np.take_along_axis(peg, np.argmin(np.einsum("...vi,...i->...v", peg, normal), -1)[..., None, None],
                                     -2)[..., 0, :]
        point = np.where((cnt > 0)[..., None], acc / np.maximum(cnt, 1)[..., None], deepest)
        r = point - p
        vel = v[..., :2] + om[..., None] * np.stack([-r[..., 1], r[..., 0]], axis=-1)
        f, _ = _point_force(k, b, mu, ve, vel, normal, depth, active)
        F[..., 0] += f[..., 0]
        F[..., 1] += f[..., 1]
        F[..., 2] += r[..., 0] * f[..., 1] - r[..., 1] * f[..., 0]
        touching = touching | active
    return F, touching


def _plate_contact(c: ContactSpec, x, v):
    z = x[..., 2]
    active = z < 0.0
    normal = np.zeros(x.shape)
    normal[..., 2] = 1.0
    f, _ = _point_force(c.wall_stiffness, c.wall_damping, c.friction_coeff, c.friction_velocity,
                        v, normal, -z, active)
    return f, active


def contact(spec: EnvSpec, state: EnvState):
    """Contact force on the body (pointing out of penetrated surfaces) and contact flags."""
    x, v = state.x, state.xdot
    if spec.contact is None:
        return np.zeros(x.shape), np.zeros(x.shape[:-1], bool)
    if spec.contact.surface == "hole":
        return _peg_contact(spec.contact, x, v)
    return _plate_contact(spec.contact, x, v)


def external_force(spec: EnvSpec, state: EnvState) -> np.ndarray:
    return contact(spec, state)[0]


# ---------------------------------------------------------------------------
# integration

def step(spec: EnvSpec, state: EnvState, f_fb, strict: bool = True) -> EnvState:
    """One semi-implicit Euler step of length ``spec.dt`` under feedback force ``f_fb``.

    With ``strict=False`` non-finite states are returned instead of raising,
    so batched rollouts can mask diverged rows.
    """
    f_fb = np.asarray(f_fb, float)
    if f_fb.shape[-1:] != (spec.dof,):
        raise ValueError(f"feedback force must have dim {spec.dof}, got shape {f_fb.shape}")
    if strict and not np.all(np.isfinite(f_fb)):
        raise ValueError("non-finite feedback force")
    dyn = spec.dynamics
    x, v = state.x, state.xdot
    f_c, touching = contact(spec, state)
    bias = dyn.gravity(x)
    if not dyn.is_constant:
        bias = bias + np.einsum("...ij,...j->...i", dyn.coriolis(x, v), v)
    f_ff = bias  # desired acceleration is zero for static waypoints
    rhs = f_fb + (f_ff - bias) + f_c
    if dyn.is_constant:
        acc = rhs / np.asarray(dyn.masses)
    else:
        acc = np.linalg.solve(dyn.mass_matrix(x), rhs[..., None])[..., 0]
    v_new = v + spec.dt * acc
    x_new = x + spec.dt * v_new
    if strict and not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(v_new))):
        raise SimulationDiverged(f"{spec.task}: non-finite state at t={state.t + spec.dt:.4f}")
    return EnvState(x_new, v_new, state.t + spec.dt, touching)


def control_step(spec: EnvSpec, state: EnvState,
                 force_fn: Callable[[EnvState], np.ndarray], strict: bool = True):
    """Advance one control period (``substeps`` integration steps).

    ``force_fn`` is evaluated at every substep, so impedance laws run at the
    simulation rate while a constant function holds a force action.  Returns
    the new state and the force applied at the first substep.
    """
    applied = None
    for _ in range(spec.substeps):
        f = force_fn(state)
        if applied is None:
            applied = np.array(f, float)
        state = step(spec, state, f, strict)
    return state, applied


# ---------------------------------------------------------------------------
# observations and success

class HistoryBuffer:
    """Most recent (e, edot) pairs, newest first, zero-padded."""

    def __init__(self, batch_shape=(), dof: int = 3, length: int = HISTORY_LEN):
        self.length = length
        self.buf = np.zeros(tuple(batch_shape) + (length, 2 * dof))
        self.count = 0

    def push(self, pair: np.ndarray) -> None:
        self.buf = np.concatenate([pair[..., None, :], self.buf[..., :-1, :]], axis=-2)
        self.count = min(self.count + 1, self.length)

    def flat(self) -> np.ndarray:
        return self.buf.reshape(self.buf.shape[:-2] + (-1,))


def error(spec: EnvSpec, state: EnvState):
    return state.x - np.asarray(spec.goal), state.xdot.copy()


def observe(spec: EnvSpec, state: EnvState, history: Optional[HistoryBuffer] = None) -> np.ndarray:
    """Tracking error and velocity; with ``history`` the stacked last five pairs.

    The buffer is updated in place with the current pair.
    """
    e, edot = error(spec, state)
    pair = np.concatenate([e, edot], axis=-1)
    if history is None:
        return pair
    history.push(pair)
    return history.flat()


def obs_dim(spec: EnvSpec, history: bool = False) -> int:
    return 2 * spec.dof * (HISTORY_LEN if history else 1)


def peg_tip(spec: EnvSpec, x) -> np.ndarray:
    x = np.asarray(x, float)
    half_l = spec.contact.peg_length / 2
    return np.stack([x[..., 0] + half_l * np.sin(x[..., 2]),
                     x[..., 1] - half_l * np.cos(x[..., 2])], axis=-1)


def is_success(spec: EnvSpec, state: EnvState):
    if spec.task == "peg_in_hole":
        tip = peg_tip(spec, state.x)
        return (tip[..., 1] <= -spec.insertion_depth) & (np.abs(tip[..., 0]) < spec.contact.hole_width / 2)
    e, edot = error(spec, state)
    return (np.linalg.norm(e, axis=-1) < spec.pos_tol) & (np.linalg.norm(edot, axis=-1) < spec.vel_tol)


def lateral_misalignment(spec: EnvSpec, x) -> np.ndarray:
    """Horizontal distance of the peg tip from the hole axis."""
    return np.abs(peg_tip(spec, x)[..., 0] - spec.goal[0])


# ---------------------------------------------------------------------------
# batched rollouts

@dataclass
class Trajectory:
    """One recorded episode.  ``x``/``xdot`` hold ``T + 1`` states, the per-step
    arrays ``T`` entries (observation, bounded action, first-substep force)."""

    x: np.ndarray
    xdot: np.ndarray
    obs: np.ndarray
    action: np.ndarray
    force: np.ndarray
    goal: np.ndarray
    raw: Optional[np.ndarray] = None
    success: bool = False
    diverged: bool = False
    scenario: str = ""
    err: Optional[np.ndarray] = None  # x - goal as recorded, T + 1 entries

    def __post_init__(self):
        if self.err is None:
            self.err = self.x - self.goal

    @property
    def e(self) -> np.ndarray:
        return self.err[:-1].copy()

    @property
    def edot(self) -> np.ndarray:
        return self.xdot[:-1].copy()

    def __len__(self) -> int:
        return len(self.action)


@dataclass
class RolloutArrays:
    """Batched episodes of equal horizon; ``length[i]`` < T marks divergence."""

    x: np.ndarray  # (N, T+1, dof)
    xdot: np.ndarray
    obs: np.ndarray  # (N, T, obs_dim)
    action: np.ndarray  # (N, T, act_dim)
    force: np.ndarray  # (N, T, dof)
    raw: Optional[np.ndarray]
    aux: Optional[np.ndarray]
    success: np.ndarray  # (N,)
    length: np.ndarray  # (N,) valid steps
    goal: np.ndarray
    scenario: str = ""
    final_obs: Optional[np.ndarray] = None  # observation of the last state

    @property
    def diverged(self) -> np.ndarray:
        return self.length < self.action.shape[1]

    @property
    def mask(self) -> np.ndarray:
        T = self.action.shape[1]
        return np.arange(T)[None, :] < self.length[:, None]

    def trajectories(self) -> list:
        out = []
        for i in range(len(self.length)):
            n = int(self.length[i])
            out.append(Trajectory(self.x[i, :n + 1].copy(), self.xdot[i, :n + 1].copy(),
                                  self.obs[i, :n].copy(), self.action[i, :n].copy(),
                                  self.force[i, :n].copy(), self.goal.copy(),
                                  None if self.raw is None else self.raw[i, :n].copy(),
                                  bool(self.success[i]), bool(self.diverged[i]), self.scenario))
        return out


def rollout(spec: EnvSpec, pert: ScenarioPerturbation, seeds: Sequence[int], controller,
            space, history: bool = False, horizon: Optional[int] = None) -> RolloutArrays:
    """Run ``len(seeds)`` episodes side by side.

    ``controller(obs, state, t)`` returns ``(raw, action, aux)``: the optional
    pre-squash action, the bounded action handed to ``space.force_fn`` and an
    optional per-step scalar array to record (e.g. log-probabilities).  Rows
    whose state becomes non-finite are frozen and their episode truncated.
    """
    env = perturbed(spec, pert)
    T = horizon or spec.horizon
    state = reset_batch(spec, pert, seeds)
    n, dof = state.x.shape
    hist = HistoryBuffer((n,), dof) if history else None
    goal = np.asarray(env.goal, float)
    xs, vs = [state.x.copy()], [state.xdot.copy()]
    obs_l, act_l, f_l, raw_l, aux_l = [], [], [], [], []
    length = np.full(n, T)
    alive = np.ones(n, bool)
    for t in range(T):
        obs = observe(env, state, hist)
        raw, act, aux = controller(obs, state, t)
        act = np.asarray(act, float)
        with np.errstate(over="ignore", invalid="ignore"):
            new, f = control_step(env, state, space.force_fn(act, goal), strict=False)
        bad = alive & ~(np.all(np.isfinite(new.x), -1) & np.all(np.isfinite(new.xdot), -1)
                        & np.all(np.isfinite(f), -1))
        if bad.any():
            length[bad] = t
            alive &= ~bad
            new.x[bad], new.xdot[bad] = state.x[bad], 0.0
            f = np.where(bad[:, None], 0.0, f)
        obs_l.append(obs)
        act_l.append(act)
        f_l.append(f)
        raw_l.append(raw)
        aux_l.append(aux)
        state = new
        xs.append(state.x.copy())
        vs.append(state.xdot.copy())
    success = np.asarray(is_success(env, state)) & alive
    final_obs = observe(env, state, hist)
    stack = lambda l: np.stack(l, axis=1)
    return RolloutArrays(stack(xs), stack(vs), stack(obs_l), stack(act_l), stack(f_l),
                         None if raw_l[0] is None else stack(raw_l),
                         None if aux_l[0] is None else stack(aux_l),
                         success, length, goal, pert.name, final_obs)


def derive_seed(*keys: int) -> int:
    """Independent 32-bit seed for the stream named by integer ``keys``."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])
