"""Command-line entry point: ``dlac {simulate,refs,train,evaluate,track,diagnose}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .agent import load_controllers, make_env, train
from .baselines import OpenLoopController
from .config import PRESETS, TrainConfig, load_config, read_config_file
from .diagnostics import (
    cost_chains,
    entropy_estimate,
    gelman_rubin,
    lyapunov_bound_fit,
    lyapunov_decrease_check,
    steady_state_errors,
)
from .exceptions import DLACError
from .mdp import Normalizer, Rollout, sample_initial_state, write_csv
from .process import (
    INPUT_NAMES,
    PAPER_S0,
    PAPER_S_REF,
    STATE_NAMES,
    DisturbanceSpec,
    load_params,
)
from .steady import (
    REF_GRID_HIGH,
    REF_GRID_LOW,
    evaluation_references,
    generate_reference_set,
    input_grid,
    load_reference_set,
    select_references,
)

log = logging.getLogger("dlac")

OUT_ENV = "DLAC_OUT_DIR"
MANIFEST_VERSION = 1
EXIT_OK, EXIT_ERROR, EXIT_CHECK_FAILED = 0, 2, 3

# config-file keys that are not training hyperparameters
RUN_KEYS = ("params_file", "references_file", "grid_n", "grid_low", "grid_high", "reference",
            "disturbance_eval", "n_trajectories", "n_rollouts", "horizon", "dwell_h", "burn_in",
            "steps", "init", "controller")


def default_out_root():
    return Path(os.environ.get(OUT_ENV, "runs"))


class Run:
    """Resolved settings for one command invocation plus its manifest."""

    def __init__(self, args):
        self.args = args
        file_data = {}
        if args.config:
            file_data = read_config_file(args.config)
            if "manifest_version" in file_data:
                file_data = {**file_data.get("config", {}), **file_data.get("options", {})}
        self.options = {k: file_data.pop(k) for k in list(file_data) if k in RUN_KEYS}
        overrides = {"seed": args.seed, "workers": args.workers}
        preset = args.preset or (None if file_data else "paper-scale")
        self.config = load_config(preset=preset, overrides=overrides, file_data=file_data)
        self.out_dir = Path(args.out_dir) if args.out_dir else default_out_root() / args.command
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.params = None
        self.outputs = []
        self.started = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def option(self, name, default=None):
        cli = getattr(self.args, name, None)
        if cli is not None:
            return cli
        return self.options.get(name, default)

    def references(self):
        return load_reference_set(self.option("references_file"))

    def path(self, name):
        p = self.out_dir / name
        self.outputs.append(name)
        return p

    def write_manifest(self, status):
        manifest = {
            "manifest_version": MANIFEST_VERSION,
            "command": self.args.command,
            "code_version": __version__,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "options": {k: _jsonable(v) for k, v in self.options.items()},
            "checkpoint": str(self.args.checkpoint) if getattr(self.args, "checkpoint", None) else None,
            "outputs": sorted(set(self.outputs)),
            "status": status,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        for k in ("reference", "disturbance_eval", "n_trajectories", "steps", "init", "controller",
                  "grid_n", "n_rollouts", "horizon", "dwell_h", "burn_in"):
            v = getattr(self.args, k, None)
            if v is not None:
                manifest["options"][k] = _jsonable(v)
        (self.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    return v


def _reference_state(run, ref_set, default=2):
    k = int(run.option("reference", default))
    if not 1 <= k <= 3:
        raise DLACError("--reference must be 1, 2 or 3")
    return select_references(ref_set)[k - 1]


def _policies(run, ref_set, normalizer):
    """Controllers named by --checkpoint, or the open-loop baseline."""
    if run.args.checkpoint:
        controllers, normalizer = load_controllers(run.args.checkpoint)
        return [c.local_policy() for c in controllers], controllers, normalizer
    baseline = OpenLoopController(normalizer).fit(ref_set.states, ref_set.inputs)
    return baseline.local_policies(), None, normalizer


def _initial_state(run, s_ref, rng):
    init = run.option("init", "sample")
    if init == "s0":
        return PAPER_S0.copy()
    if init == "ref":
        return np.array(s_ref, dtype=float)
    if init == "sample":
        return sample_initial_state(PAPER_S0, rng, run.config.init_spread)
    raise DLACError(f"unknown --init {init!r}")


# -- commands -----------------------------------------------------------------

def cmd_simulate(run: Run):
    ref_set = run.references()
    normalizer = Normalizer().fit(ref_set.states)
    policies, _, normalizer = _policies(run, ref_set, normalizer)
    env = make_env(run.config, run.params, normalizer)
    s_ref, _ = _reference_state(run, ref_set)
    rng = np.random.default_rng(run.config.seed)
    s_init = _initial_state(run, s_ref, rng)
    dist = DisturbanceSpec.preset(run.option("disturbance_eval", run.config.disturbance))
    n = int(run.option("steps", run.config.n_steps))
    ro = env.rollout(policies, n, s_ref, dist, rng, s_init, deterministic=True, record_transitions=False)
    ro.to_csv(run.path("trajectory.csv"))
    print(f"simulated {n} steps ({n * env.dt:g} h); final total cost {ro.total_cost[-1]:.6g}")
    return EXIT_OK


def cmd_refs(run: Run):
    n = int(run.option("grid_n", 11))
    low = np.asarray(run.option("grid_low", REF_GRID_LOW), dtype=float)
    high = np.asarray(run.option("grid_high", REF_GRID_HIGH), dtype=float)
    grid = input_grid(low, high, n)
    ref_set = generate_reference_set(run.params, grid, path=run.path("reference_set.csv"))
    sel = select_references(ref_set)
    sel.to_csv(run.path("selected_references.csv"))
    dev = sel.states - PAPER_S_REF
    header = ["reference"] + [f"regen_{s}" for s in STATE_NAMES] + [f"table_{s}" for s in STATE_NAMES] \
        + [f"diff_{s}" for s in STATE_NAMES]
    write_csv(run.path("reference_deviation.csv"), header,
              np.column_stack([np.arange(1, 4), sel.states, PAPER_S_REF, dev]))
    print(f"{len(ref_set)} steady states from {len(grid)} grid points")
    print("selected references (descending x_A1) vs. tabulated values:")
    for k in range(3):
        print(f"  s_ref{k + 1}: x_A1 {sel.states[k, 0]:.4f} (table {PAPER_S_REF[k, 0]:.4f}), "
              f"max |dx| {np.abs(dev[k, [0, 1, 3, 4, 6, 7]]).max():.4f}, "
              f"max |dT| {np.abs(dev[k, [2, 5, 8]]).max():.2f} K, "
              f"Q = {', '.join(f'{q:.4g}' for q in sel.inputs[k])}")
    return EXIT_OK


def cmd_train(run: Run):
    ref_set = run.references()
    res = train(run.config, ref_set, run.params, out_dir=run.out_dir)
    run.outputs += ["train_log.csv"] + [f"checkpoints/controller_{i + 1}.ckpt" for i in range(run.config.n_subsystems)]
    if res.log:
        last = res.log[-1]
        print(f"trained {run.config.n_eps_max} episodes; final mean cost {last['mean_cost']:.6g} "
              f"(untrained {res.initial_eval.get('mean_cost', float('nan')):.6g})")
    else:
        print("no update was triggered; checkpoints hold the initial controllers")
    return EXIT_OK


def _trajectory_stats(env, policies, s_ref, dist, n_traj, n_steps, seed, spread):
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_traj)]
    trajs, costs = [], []
    for rng in rngs:
        ro = env.rollout(policies, n_steps, s_ref, dist, rng, sample_initial_state(PAPER_S0, rng, spread),
                         deterministic=True, record_transitions=False)
        trajs.append(ro.states)
        costs.append(ro.total_cost)
    return np.array(trajs), np.array(costs)


def cmd_evaluate(run: Run):
    if not run.args.checkpoint:
        raise DLACError("evaluate needs --checkpoint")
    ref_set = run.references()
    controllers, normalizer = load_controllers(run.args.checkpoint)
    policies = [c.local_policy() for c in controllers]
    env = make_env(run.config, run.params, normalizer)
    dist = DisturbanceSpec.preset(run.option("disturbance_eval", run.config.disturbance))
    seeds = np.random.SeedSequence(run.config.seed).spawn(3)

    dwell = float(run.option("dwell_h", run.config.n_steps * run.config.dt))
    report = steady_state_errors(env, policies, evaluation_references(ref_set).states, dwell,
                                 np.random.default_rng(seeds[0]), dist, spread=run.config.init_spread)
    report.to_csv(run.path("tracking.csv"))

    s_ref, _ = _reference_state(run, ref_set)
    ly = lyapunov_decrease_check(env, controllers, s_ref, run.config.alpha3, int(run.option("n_rollouts", 20)),
                                 int(run.option("horizon", run.config.n_steps)), np.random.default_rng(seeds[1]),
                                 dist, burn_in=float(run.option("burn_in", 0.2)), spread=run.config.init_spread)
    ly.to_csv(run.path("lyapunov.csv"))

    n_traj = int(run.option("n_trajectories", 100))
    trajs, costs = _trajectory_stats(env, policies, s_ref, dist, n_traj, run.config.n_steps,
                                     seeds[2].generate_state(1)[0], run.config.init_spread)
    t = env.dt * np.arange(trajs.shape[1])
    header = ["step", "time_h"] + [f"mean_{s}" for s in STATE_NAMES] + [f"std_{s}" for s in STATE_NAMES] \
        + ["mean_cost", "std_cost"] + [f"ref_{s}" for s in STATE_NAMES]
    write_csv(run.path("trajectories_summary.csv"), header,
              np.column_stack([np.arange(len(t)), t, trajs.mean(0), trajs.std(0), costs.mean(0), costs.std(0),
                               np.broadcast_to(s_ref, (len(t), len(s_ref)))]))
    print(report.summary())
    print(ly.summary())
    return EXIT_OK


def piecewise_schedule(references, dwell_h, dt):
    """Reference per step for consecutive dwells at each reference."""
    per = int(round(dwell_h / dt))
    return np.repeat(np.atleast_2d(references), per, axis=0)


def cmd_track(run: Run):
    ref_set = run.references()
    sel = select_references(ref_set)
    if len(sel) < 3:
        raise DLACError("tracking needs three references")
    normalizer = Normalizer().fit(ref_set.states)
    if run.args.checkpoint:
        controllers, normalizer = load_controllers(run.args.checkpoint)
        policies = [c.local_policy() for c in controllers]
    else:
        policies = None
    env = make_env(run.config, run.params, normalizer)
    baseline = OpenLoopController(normalizer).fit(ref_set.states, ref_set.inputs)
    dwell = float(run.option("dwell_h", 1.5))
    schedule = piecewise_schedule(sel.states, dwell, env.dt)
    n = len(schedule)
    dist = DisturbanceSpec.preset(run.option("disturbance_eval", run.config.disturbance))
    seed_init, seed_cl, seed_ol = np.random.SeedSequence(run.config.seed).spawn(3)
    s_init = _initial_state(run, schedule[0], np.random.default_rng(seed_init))

    ol = env.rollout(baseline.local_policies(), n, schedule, dist, np.random.default_rng(seed_ol), s_init,
                     deterministic=True, record_transitions=False)
    cols = {"step": np.arange(n + 1), "time_h": env.dt * np.arange(n + 1)}
    full_refs = np.vstack([schedule, schedule[-1:]])
    for j, s in enumerate(STATE_NAMES):
        cols[f"ref_{s}"] = full_refs[:, j]
    runs = [("ol", ol)]
    if policies is not None:
        cl = env.rollout(policies, n, schedule, dist, np.random.default_rng(seed_cl), s_init,
                         deterministic=True, record_transitions=False)
        runs.insert(0, ("dlac", cl))
    for tag, ro in runs:
        for j, s in enumerate(STATE_NAMES):
            cols[f"{tag}_{s}"] = ro.states[:, j]
        acts = np.vstack([ro.actions, ro.actions[-1:]])
        for j, q in enumerate(INPUT_NAMES):
            cols[f"{tag}_{q}"] = acts[:, j]
        cols[f"{tag}_cost"] = ro.total_cost
    write_csv(run.path("tracking_piecewise.csv"), list(cols), np.column_stack(list(cols.values())))
    for tag, ro in runs:
        print(f"{tag}: integrated tracking cost {integrated_cost(ro):.6g}")
    return EXIT_OK


def integrated_cost(ro: Rollout):
    """Time integral of the total stage cost (rectangle rule over the applied steps)."""
    return float(ro.total_cost[:-1].sum() * ro.dt)


def cmd_diagnose(run: Run):
    if not run.args.checkpoint:
        raise DLACError("diagnose needs --checkpoint")
    ref_set = run.references()
    controllers, normalizer = load_controllers(run.args.checkpoint)
    env = make_env(run.config, run.params, normalizer)
    dist = DisturbanceSpec.preset(run.option("disturbance_eval", run.config.disturbance))
    s_ref, _ = _reference_state(run, ref_set)
    seeds = np.random.SeedSequence(run.config.seed).spawn(4)
    horizon = int(run.option("horizon", run.config.n_steps))
    ly = lyapunov_decrease_check(env, controllers, s_ref, run.config.alpha3, int(run.option("n_rollouts", 20)),
                                 horizon, np.random.default_rng(seeds[0]), dist,
                                 burn_in=float(run.option("burn_in", 0.2)), spread=run.config.init_spread)
    ly.to_csv(run.path("lyapunov.csv"))

    rng = np.random.default_rng(seeds[1])
    states = np.vstack([ref_set.states, np.array([sample_initial_state(PAPER_S0, rng, run.config.init_spread)
                                                  for _ in range(len(ref_set))])])
    fit = lyapunov_bound_fit(env, controllers, states, s_ref, np.random.default_rng(seeds[2]))

    obs = env.observe(ref_set.states, np.broadcast_to(s_ref, ref_set.states.shape))
    ent = [entropy_estimate(c.policy, o, np.random.default_rng(seeds[3]), n_samples=10)
           for c, o in zip(controllers, obs)]
    chains = cost_chains(env, [c.local_policy() for c in controllers], s_ref, 4, horizon, dist,
                         run.config.seed, spread=run.config.init_spread, deterministic=False)
    try:
        rhat = gelman_rubin(chains)
    except DLACError:
        rhat = float("nan")

    checks = {
        "lyapunov_decrease": ly.decreasing,
        "alpha1_positive": fit["pooled"][0] > 0,
        "entropy": all(h >= run.config.entropy_target for h in ent),
        "gelman_rubin": bool(rhat < 1.1),
    }
    header = ["lyapunov_estimate", "lyapunov_se", "alpha1", "alpha2"] + [f"entropy_{i + 1}" for i in range(len(ent))] \
        + ["gelman_rubin"] + [f"pass_{k}" for k in checks]
    row = [ly.estimate, ly.standard_error, *fit["pooled"], *ent, rhat, *[float(v) for v in checks.values()]]
    write_csv(run.path("diagnostics.csv"), header, np.array([row]))
    print(ly.summary())
    print(f"bound ratios over {len(states)} states: alpha1={fit['pooled'][0]:.4g}, alpha2={fit['pooled'][1]:.4g}")
    print("entropy estimates: " + ", ".join(f"{h:.3f}" for h in ent) + f" (threshold {run.config.entropy_target})")
    print(f"Gelman-Rubin R-hat of the total cost over 4 chains: {rhat:.4f}")
    for k, v in checks.items():
        print(f"  {k}: {'pass' if v else 'FAIL'}")
    return EXIT_OK if all(checks.values()) else EXIT_CHECK_FAILED


COMMANDS = {"simulate": cmd_simulate, "refs": cmd_refs, "train": cmd_train, "evaluate": cmd_evaluate,
            "track": cmd_track, "diagnose": cmd_diagnose}


def build_parser():
    parser = argparse.ArgumentParser(prog="dlac", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config or a manifest.json from an earlier run")
    common.add_argument("--preset", choices=PRESETS, help="hyperparameter preset (default paper-scale)")
    common.add_argument("--seed", type=int, help="global random seed")
    common.add_argument("--workers", type=int, help="threads for training (1 = reference mode)")
    common.add_argument("--out-dir", type=Path, help=f"output directory (default ${OUT_ENV}/<command>)")
    common.add_argument("--checkpoint", type=Path, help="directory holding controller_*.ckpt files")
    common.add_argument("--references-file", type=Path, help="reference-set CSV (default: bundled set)")
    common.add_argument("--params-file", type=Path, help="process parameter YAML (default: bundled)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="closed- or open-loop trajectory CSV")
    p.add_argument("--reference", type=int, choices=(1, 2, 3))
    p.add_argument("--steps", type=int)
    p.add_argument("--init", choices=("sample", "s0", "ref"))
    p.add_argument("--disturbance", dest="disturbance_eval", choices=("none", "w1", "w2"))

    p = sub.add_parser("refs", parents=[common], help="generate the steady-state reference set")
    p.add_argument("--grid-n", type=int, help="grid points per heat-input axis (default 11)")

    sub.add_parser("train", parents=[common], help="train the distributed controllers")

    p = sub.add_parser("evaluate", parents=[common], help="tracking and Lyapunov reports for a checkpoint")
    p.add_argument("--reference", type=int, choices=(1, 2, 3))
    p.add_argument("--disturbance", dest="disturbance_eval", choices=("none", "w1", "w2"))
    p.add_argument("--n-trajectories", type=int)
    p.add_argument("--n-rollouts", type=int)
    p.add_argument("--dwell-h", type=float)

    p = sub.add_parser("track", parents=[common], help="piecewise reference tracking against open loop")
    p.add_argument("--init", choices=("sample", "s0", "ref"))
    p.add_argument("--disturbance", dest="disturbance_eval", choices=("none", "w1", "w2"))
    p.add_argument("--dwell-h", type=float)

    p = sub.add_parser("diagnose", parents=[common], help="stability checks; exit status 3 on failure")
    p.add_argument("--reference", type=int, choices=(1, 2, 3))
    p.add_argument("--disturbance", dest="disturbance_eval", choices=("none", "w1", "w2"))
    p.add_argument("--n-rollouts", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--burn-in", type=float)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        run = Run(args)
        for key in ("references_file", "params_file"):
            if getattr(args, key, None) is not None:
                run.options[key] = str(getattr(args, key))
        run.params = load_params(run.options.get("params_file"))
        status = COMMANDS[args.command](run)
    except (DLACError, OSError) as exc:
        print(f"dlac {args.command}: error: {exc}", file=sys.stderr)
        if run is not None:
            run.write_manifest("error")
        return EXIT_ERROR
    run.write_manifest("ok" if status == EXIT_OK else "check-failed")
    return status


if __name__ == "__main__":
    sys.exit(main())
