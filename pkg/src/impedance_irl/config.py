"""Environment and experiment configuration files (YAML)."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml

from .envsim import ContactSpec, DynamicsModel, EnvSpec, ScenarioPerturbation

BUILTIN_TASKS = ("peg_in_hole", "cup_on_plate", "reach")


def _tuple(v):
    return None if v is None else tuple(float(a) for a in v)


def deep_update(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (overrides or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_env_dict(name_or_path: Union[str, Path]) -> dict:
    """Raw env config: a builtin task name or a YAML path."""
    if str(name_or_path) in BUILTIN_TASKS:
        text = resources.files("impedance_irl.configs").joinpath(f"{name_or_path}.yaml").read_text()
    else:
        text = Path(name_or_path).read_text()
    d = yaml.safe_load(text)
    if not isinstance(d, dict) or "task" not in d:
        raise ValueError(f"{name_or_path}: not an environment config")
    return d


def env_spec_from_dict(d: dict) -> EnvSpec:
    dyn = d["dynamics"]
    dynamics = DynamicsModel(
        masses=_tuple(dyn["masses"]),
        gravity_axis=dyn.get("gravity_axis"),
        g=float(dyn.get("g", 9.81)),
        coupling=float(dyn.get("coupling", 0.0)),
        coupling_length=float(dyn.get("coupling_length", 0.2)),
        coupled_axes=tuple(dyn.get("coupled_axes", (1, 2))),
        path_start=_tuple(dyn.get("path_start")),
        path_end=_tuple(dyn.get("path_end")),
    )
    contact = None
    if d.get("contact"):
        contact = ContactSpec(**{k: (v if k == "surface" else float(v)) for k, v in d["contact"].items()})
    success = d.get("success", {})
    control = d.get("control", {})
    scenarios = {name: ScenarioPerturbation.from_dict(s or {}, name)
                 for name, s in (d.get("scenarios") or {}).items()}
    return EnvSpec(
        task=d["task"],
        dynamics=dynamics,
        goal=_tuple(d["goal"]),
        start=_tuple(d["start"]),
        dt=float(d.get("dt", 0.002)),
        substeps=int(d.get("substeps", 5)),
        horizon=int(d.get("horizon", 200)),
        contact=contact,
        start_jitter=_tuple(d.get("start_jitter")) or (),
        approach_radius=float(d.get("approach_radius", 0.5)),
        insertion_depth=float(success.get("insertion_depth", 0.06)),
        pos_tol=float(success.get("pos_tol", 0.01)),
        vel_tol=float(success.get("vel_tol", 0.05)),
        f_max=_tuple(control.get("f_max")) or (),
        k_min=_tuple(control.get("k_min")) or (),
        k_max=_tuple(control.get("k_max")) or (),
        damping=control.get("damping", "critical"),
        d_bounds=_tuple(control.get("d_bounds", (0.5, 4.0))),
        obs_scale=_tuple(d.get("obs_scale")) or (),
        scenarios=scenarios,
        sweeps={k: tuple(v) for k, v in (d.get("sweeps") or {}).items()},
        training_scenario=d.get("training_scenario", "training"),
        expert=dict(d.get("expert") or {}),
    )


def load_env_spec(name_or_path: Union[str, Path], overrides: Optional[dict] = None) -> EnvSpec:
    return env_spec_from_dict(deep_update(load_env_dict(name_or_path), overrides or {}))


def config_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------

TASK_BATCH = {"peg_in_hole": (8000, 200), "cup_on_plate": (10000, 500), "reach": (2000, 100)}


@dataclass
class ExperimentConfig:
    """Everything needed to rerun one experiment.

    ``batch_size``/``traj_len`` left at ``None`` resolve to the task's defaults
    (8000/200 peg-in-hole, 10000/500 cup-on-plate).
    """

    task: str = "peg_in_hole"
    action_space: str = "gain"  # gain | force
    observation: str = "plain"  # plain | history5
    method: str = "airl"  # airl | bc | constant-gain
    demo_file: Optional[str] = None
    env_overrides: Dict[str, Any] = field(default_factory=dict)
    output_dir: str = "runs/default"
    seed: int = 0
    jobs: int = 1
    # demo generation
    n_demos: int = 50
    demo_noise: float = 0.0
    demo_scenario: Optional[str] = None
    demo_fixed_start: bool = False  # every demo from the same initial point
    # trpo / airl
    iterations: int = 200
    batch_size: Optional[int] = None
    traj_len: Optional[int] = None
    max_kl: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_steps: int = 10
    backtrack_ratio: float = 0.8
    gamma: float = 0.99
    gae_lambda: float = 0.97
    vf_epochs: int = 5
    vf_lr: float = 1e-3
    disc_lr: float = 1e-3
    disc_momentum: float = 0.9
    disc_epochs: int = 2
    disc_minibatch: int = 256
    disc_optimizer: str = "adam"  # adam | sgd (momentum)
    disc_loss: str = "log1m"  # log1m: log(1 - D); printed: 1 - log D
    generator_reward: str = "entropy"  # entropy: r - log pi ; plain: r
    checkpoint_every: int = 10
    hidden: Optional[int] = None  # 32 plain, 128 history
    reward_hidden: int = 32
    # transfer
    reopt_iterations: int = 100
    restarts: int = 5
    keep_best: int = 3
    reopt_init: str = "scratch"  # scratch | trained
    episodes: int = 60
    # bc
    bc_epochs: int = 500
    bc_minibatch: int = 128
    bc_lr: float = 1e-3
    bc_val_fraction: float = 0.1
    bc_patience: int = 10

    def __post_init__(self):
        if self.task not in BUILTIN_TASKS and not Path(self.task).exists():
            raise ValueError(f"unknown task {self.task!r}")
        if self.action_space not in ("gain", "force"):
            raise ValueError(f"action_space must be gain or force, got {self.action_space!r}")
        if self.observation not in ("plain", "history5"):
            raise ValueError(f"observation must be plain or history5, got {self.observation!r}")
        if self.method not in ("airl", "bc", "constant-gain"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.disc_optimizer not in ("adam", "sgd"):
            raise ValueError("disc_optimizer must be adam or sgd")
        if self.disc_loss not in ("log1m", "printed"):
            raise ValueError("disc_loss must be log1m or printed")
        if self.generator_reward not in ("entropy", "plain"):
            raise ValueError("generator_reward must be entropy or plain")
        if self.reopt_init not in ("scratch", "trained"):
            raise ValueError("reopt_init must be scratch or trained")

    @property
    def history(self) -> bool:
        return self.observation == "history5"

    def resolved(self) -> "ExperimentConfig":
        c = copy.deepcopy(self)
        batch, tl = TASK_BATCH.get(c.task, (8000, 200))
        if c.batch_size is None:
            c.batch_size = batch
        if c.traj_len is None:
            c.traj_len = tl
        if c.hidden is None:
            c.hidden = 128 if c.history else 32
        return c

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        d = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(d)

    def dump(self, path: Union[str, Path]) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def env_spec(self) -> EnvSpec:
        return load_env_spec(self.task, self.env_overrides)

    def hash(self) -> str:
        return config_hash(self.to_dict())
