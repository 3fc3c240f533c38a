"""``impedance-irl`` command line: gen-demos, train, transfer, estimate, eval."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from . import __version__, airl, bc, envsim, evalharness, experts, sysid
from .approx import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .impedance import make_action_space
from .trpo import TrustRegionConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_value(text: str):
    return yaml.safe_load(text)


def build_config(args) -> ExperimentConfig:
    """Config file (if any), then ``--set key=value`` overrides, then explicit flags."""
    d = {}
    if getattr(args, "config", None):
        p = Path(args.config)
        if not p.exists():
            raise UsageError(f"config file {p} not found")
        d = yaml.safe_load(p.read_text()) or {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        if k.startswith("env."):
            d.setdefault("env_overrides", {})
            cur = d["env_overrides"]
            parts = k[4:].split(".")
            for part in parts[:-1]:
                cur = cur.setdefault(part, {})
            cur[parts[-1]] = _parse_value(v)
        else:
            d[k] = _parse_value(v)
    for name in ("task", "action_space", "observation", "method", "demo_file", "output_dir", "seed",
                 "jobs", "iterations", "n_demos", "demo_noise", "demo_scenario", "demo_fixed_start", "episodes",
                 "reopt_iterations", "restarts", "batch_size", "traj_len"):
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    try:
        return ExperimentConfig.from_dict(d).resolved()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def prepare_output(path, force: bool, cfg: Optional[ExperimentConfig] = None) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        cfg.dump(out / "config.yaml")
        (out / "config_hash.txt").write_text(cfg.hash() + "\n")
    return out


def trpo_config(cfg: ExperimentConfig) -> TrustRegionConfig:
    return TrustRegionConfig(cfg.max_kl, cfg.cg_iters, cfg.cg_damping, cfg.backtrack_steps,
                             cfg.backtrack_ratio, cfg.gamma, cfg.gae_lambda, cfg.vf_epochs, cfg.vf_lr)


# ---------------------------------------------------------------------------

def cmd_gen_demos(args) -> int:
    cfg = build_config(args)
    spec = cfg.env_spec()
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    demos = experts.collect_demos(spec, experts.expert_for(spec), cfg.n_demos,
                                  experts.NoisePolicy(cfg.demo_noise), cfg.seed, cfg.demo_scenario,
                                  cfg.hash(), cfg.demo_fixed_start)
    experts.save_demos(demos, out)
    print(f"wrote {demos.count} successful {demos.generator} demos for {demos.task_id} to {out}")
    return EXIT_OK


def _load_demos(cfg: ExperimentConfig, spec):
    if not cfg.demo_file:
        raise UsageError("demo_file is required")
    p = Path(cfg.demo_file)
    if not p.exists():
        raise UsageError(f"demo file {p} not found")
    try:
        demos = experts.load_demos(p)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"unreadable demo file {p}: {exc}") from None
    if demos.task_id != spec.task:
        raise UsageError(f"demo file is for {demos.task_id}, config task is {spec.task}")
    if demos.dof != spec.dof:
        raise UsageError(f"demo dof {demos.dof} does not match the environment ({spec.dof})")
    return demos


def cmd_train(args) -> int:
    cfg = build_config(args)
    spec = cfg.env_spec()
    space = make_action_space(cfg.action_space, spec)
    demos = _load_demos(cfg, spec)
    if space.kind == "gain" and demos.act_dim != space.dim:
        raise UsageError(f"demo action dim {demos.act_dim} does not match the gain space ({space.dim})")
    out = prepare_output(cfg.output_dir, args.force, cfg)
    od = envsim.obs_dim(spec, cfg.history)
    scale = airl._obs_scale(spec, cfg.history)
    summary = {"method": cfg.method, "task": cfg.task, "action_space": cfg.action_space,
               "observation": cfg.observation, "config_hash": cfg.hash(), "version": __version__}
    if cfg.method == "airl":
        disc = airl.DiscConfig(cfg.disc_lr, cfg.disc_momentum, cfg.disc_epochs, cfg.disc_minibatch,
                               cfg.disc_optimizer, cfg.disc_loss)
        state = airl.new_state(spec, space, demos, cfg.seed, cfg.history, cfg.hidden, cfg.reward_hidden, disc)
        airl.train(state, spec, space, cfg.iterations, cfg.batch_size, cfg.traj_len, cfg.seed,
                   trpo_config(cfg), cfg.history, cfg.generator_reward, out_dir=out,
                   checkpoint_every=cfg.checkpoint_every)
        policy = state.policy
        save_checkpoint(out / "final.npz", policy=policy, reward=state.reward_net, kind="airl",
                        action_space=cfg.action_space, history=cfg.history, hidden=cfg.hidden,
                        obs_dim=od, act_dim=space.dim, iteration=state.iteration)
    elif cfg.method == "bc":
        from .approx import GaussianPolicy
        policy = GaussianPolicy(od, space.dim, cfg.hidden, rng=np.random.default_rng(envsim.derive_seed(cfg.seed, 99)),
                                obs_scale=scale)
        res = bc.bc_fit(demos, policy, space, bc.BcConfig(cfg.bc_epochs, cfg.bc_minibatch, cfg.bc_lr,
                                                          cfg.bc_val_fraction, cfg.bc_patience),
                        np.random.default_rng(envsim.derive_seed(cfg.seed, 5)), cfg.history)
        summary.update(train_nll=res["train_nll"], val_nll=res["val_nll"], epochs=len(res["train_curve"]))
        save_checkpoint(out / "final.npz", policy=policy, kind="bc", action_space=cfg.action_space,
                        history=cfg.history, hidden=cfg.hidden, obs_dim=od, act_dim=space.dim)
    else:
        if cfg.action_space != "gain":
            raise UsageError("constant-gain needs action_space gain")
        policy = bc.constant_gain_policy(demos, space, od, scale)
        save_checkpoint(out / "final.npz", policy=policy, kind="constant-gain", action_space="gain",
                        history=cfg.history, hidden=1, obs_dim=od, act_dim=space.dim)
    ev = evalharness.evaluate_policy(spec, spec.training, policy, space, cfg.episodes,
                                     envsim.derive_seed(cfg.seed, 7777), cfg.history)
    ref = evalharness.expert_reference(spec, spec.training_scenario, cfg.episodes, envsim.derive_seed(cfg.seed, 7777))
    summary.update(success_rate=ev["success_rate"], mean_score=ev["mean_score"],
                   expert_score=ref["mean_score"],
                   relative_perf_diff=evalharness.relative_perf_diff(ev["mean_score"], ref["mean_score"]))
    airl.summary_record(out / "summary.json", **summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def load_artifact(run_dir, name: Optional[str] = None) -> evalharness.MethodArtifact:
    ck = load_checkpoint(Path(run_dir) / "final.npz")
    kind, space = ck["kind"], ck["action_space"]
    name = name or default_method_name(kind, space, bool(ck["history"]))
    return evalharness.MethodArtifact(name, kind, space, bool(ck["history"]), ck.get("policy"),
                                      ck.get("reward"), int(ck.get("hidden", 32)))


def default_method_name(kind: str, space: str, history: bool) -> str:
    base = "constant-gain" if kind == "constant-gain" else f"{space}-{kind}"
    return base + ("-his" if history else "")


def cmd_transfer(args) -> int:
    cfg = build_config(args)
    spec = cfg.env_spec()
    if args.sweep and args.scenarios:
        raise UsageError("give either --sweep or --scenarios")
    if args.sweep:
        if args.sweep not in spec.sweeps:
            raise UsageError(f"unknown sweep {args.sweep!r}; known: {sorted(spec.sweeps)}")
        scenarios = list(spec.sweeps[args.sweep])
    else:
        scenarios = args.scenarios or [spec.training_scenario]
    for s in scenarios:
        if s not in spec.scenarios:
            raise UsageError(f"unknown scenario {s!r}; known: {sorted(spec.scenarios)}")
    artifacts = {}
    missing = False
    for item in args.run or []:
        name, _, path = item.rpartition("=")
        try:
            art = load_artifact(path, name or None)
            artifacts[art.name] = art
        except (OSError, KeyError, ValueError):
            artifacts[name or Path(path).name] = None
            missing = True
    if not artifacts:
        raise UsageError("no --run given")
    out = prepare_output(args.out or cfg.output_dir, args.force, cfg)
    suite = evalharness.SuiteConfig(cfg.episodes, cfg.seed, cfg.reopt_iterations, cfg.restarts, cfg.keep_best,
                                    cfg.batch_size, cfg.traj_len, cfg.reopt_init,
                                    "plain" if args.reopt_reward == "plain" else "entropy", cfg.jobs,
                                    trpo_config(cfg))
    reports = evalharness.run_transfer_suite(spec, artifacts, scenarios, suite, out)
    print(evalharness.render_table(reports, spec.training_scenario), end="")
    return EXIT_RUNTIME if missing else EXIT_OK


def cmd_estimate(args) -> int:
    p = Path(args.demos)
    if not p.exists():
        raise UsageError(f"demo file {p} not found")
    try:
        demos = experts.load_demos(p)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    worst = 0.0
    n_est = 0
    for ep, tr in enumerate(demos.trajectories):
        est = sysid.estimate_trajectory(tr, args.window, args.stride)
        sysid.write_estimates_csv(out, est, demos.dt * args.stride, ep, append=ep > 0)
        n_est += len(est)
        if demos.task_id == "cup_on_plate" and not args.no_check:
            worst = max(worst, _recorded_gain_error(tr, est, args.window, args.stride))
    msg = f"wrote {n_est} window estimates for {demos.count} demos to {out}"
    if demos.task_id == "cup_on_plate" and not args.no_check:
        msg += f"; max relative error vs recorded gains away from blend bands: {worst:.3g}"
    print(msg)
    return EXIT_OK


def _recorded_gain_error(tr, est, window, stride) -> float:
    """Largest relative error against the recorded phase gains over windows
    whose samples all share one gain setting."""
    from .impedance import damping_from_factor
    k = tr.action[:, :-1]
    b = damping_from_factor(k, tr.action[:, -1])
    worst = 0.0
    for j, g in enumerate(est):
        s = j * stride
        kw, bw = k[s:s + window], b[s:s + window]
        if not (np.all(kw == kw[0]) and np.all(bw == bw[0])) or any(g.flags):
            continue
        worst = max(worst, np.max(np.abs(g.k_diag - kw[0]) / kw[0]), np.max(np.abs(g.b_diag - bw[0]) / bw[0]))
    return float(worst)


def cmd_eval(args) -> int:
    cfg = build_config(args)
    spec = cfg.env_spec()
    art = load_artifact(args.run_dir)
    scenarios = args.scenarios or [spec.training_scenario]
    for s in scenarios:
        if s not in spec.scenarios:
            raise UsageError(f"unknown scenario {s!r}")
    space = make_action_space(art.action_space, spec)
    rows = []
    for s in scenarios:
        seed = envsim.derive_seed(cfg.seed, 7777)
        ev = evalharness.evaluate_policy(spec, spec.scenario(s), art.policy, space, cfg.episodes, seed, art.history)
        ref = evalharness.expert_reference(spec, s, cfg.episodes, seed)
        rows.append(evalharness.TransferReport(art.name, s, ev["success_rate"], ev["mean_score"],
                                               evalharness.relative_perf_diff(ev["mean_score"], ref["mean_score"]),
                                               cfg.episodes, s == spec.training_scenario))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        evalharness.write_reports_csv(args.out, rows)
    print(evalharness.render_table(rows, spec.training_scenario), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------

def _common(p, config=True):
    if config:
        p.add_argument("--config", help="experiment config YAML")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (env.<path>=v for environment fields)")
        p.add_argument("--task")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="impedance-irl", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="roll out the scripted expert and save demonstrations")
    _common(p)
    p.add_argument("--n", dest="n_demos", type=int)
    p.add_argument("--noise", dest="demo_noise", type=float, help="log-normal gain noise sigma")
    p.add_argument("--fixed-start", dest="demo_fixed_start", action="store_true", default=None,
                   help="start every demo from the same point (no start jitter)")
    p.add_argument("--scenario", dest="demo_scenario")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("train", help="AIRL, BC or constant-gain training from a demo file")
    _common(p)
    p.add_argument("--method", choices=["airl", "bc", "constant-gain"])
    p.add_argument("--action-space", dest="action_space", choices=["gain", "force"])
    p.add_argument("--observation", choices=["plain", "history5"])
    p.add_argument("--demos", dest="demo_file")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--traj-len", dest="traj_len", type=int)
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="evaluate trained runs across scenarios")
    _common(p)
    p.add_argument("--run", action="append", metavar="[NAME=]RUN_DIR", help="trained run directory")
    p.add_argument("--sweep")
    p.add_argument("--scenarios", nargs="+")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--reopt-iterations", dest="reopt_iterations", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--traj-len", dest="traj_len", type=int)
    p.add_argument("--reopt-reward", choices=["plain", "entropy"], default="plain")
    p.add_argument("--out")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("estimate", help="sliding-window gain estimation from a demo file")
    _common(p, config=False)
    p.add_argument("demos")
    p.add_argument("--window", type=int, default=sysid.WINDOW)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--no-check", action="store_true", help="skip comparison with recorded gains")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval", help="evaluate one trained policy without re-optimisation")
    _common(p)
    p.add_argument("run_dir")
    p.add_argument("--scenarios", nargs="+")
    p.add_argument("--episodes", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
