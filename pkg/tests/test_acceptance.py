"""End-to-end acceptance checks, one test per criterion.

The desk-scale training run (about 15-20 minutes on one core) is done once
and cached under ``$DLAC_ACCEPTANCE_DIR`` (default ``.acceptance_cache`` in
the repository root); a cached run is reused only when its stored config
matches the desk-scale preset exactly.  Each test records a one-line
verdict that is printed in the terminal summary.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from dlac.agent import load_controllers, make_env, train
from dlac.cli import EXIT_CHECK_FAILED, EXIT_OK, integrated_cost, main, piecewise_schedule
from dlac.config import load_config
from dlac.diagnostics import entropy_estimate, episode_rngs, lyapunov_bound_fit, lyapunov_decrease_check
from dlac.mdp import Normalizer, read_csv, sample_initial_state
from dlac.baselines import OpenLoopController
from dlac.process import PAPER_S0, DisturbanceSpec, derivatives, project_feasible, rk4_step
from dlac.steady import select_references
from test_agent import check_loss_gradients
from test_agent import test_message_sum_is_exact as message_property

RESULTS = []
ROOT = Path(__file__).resolve().parents[1]
HORIZON = 500          # 2.5 h at dt = 0.005 h
N_ROLLOUTS = 20


def record(k, ok, detail):
    line = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def desk_run(ref_set, params):
    cfg = load_config(preset="desk-scale")
    cache = Path(os.environ.get("DLAC_ACCEPTANCE_DIR", ROOT / ".acceptance_cache")) / "desk-scale"
    ckpt = cache / "checkpoints"
    init_file = cache / "initial_eval.json"
    reuse = False
    if init_file.is_file() and (cache / "train_log.csv").is_file():
        try:
            ctls, _ = load_controllers(ckpt)
            reuse = ctls[0].cfg.to_dict() == cfg.to_dict()
        except Exception:
            reuse = False
    if not reuse:
        t0 = time.perf_counter()
        train(cfg, ref_set, params, out_dir=cache)
        print(f"desk-scale training took {time.perf_counter() - t0:.0f} s")
    controllers, normalizer = load_controllers(ckpt)
    header, data = read_csv(cache / "train_log.csv")
    log = {h: data[:, i] for i, h in enumerate(header)}
    return {"cfg": cfg, "dir": cache, "controllers": controllers, "normalizer": normalizer,
            "env": make_env(cfg, params, normalizer), "log": log,
            "initial": json.loads(init_file.read_text())}


@pytest.fixture(scope="module")
def mid_rollouts(desk_run, selected):
    env = desk_run["env"]
    policies = [c.local_policy() for c in desk_run["controllers"]]
    out = {}
    for name in ("w1", "w2"):
        runs = []
        for rng in episode_rngs(2024, N_ROLLOUTS):
            s_init = sample_initial_state(PAPER_S0, rng, desk_run["cfg"].init_spread)
            runs.append(env.rollout(policies, HORIZON, selected.states[1], DisturbanceSpec.preset(name), rng,
                                    s_init, deterministic=True, record_transitions=False))
        out[name] = runs
    return out


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    flags = np.array([check_loss_gradients(seed) for seed in range(100)])
    elapsed = time.perf_counter() - t0
    ok = bool(flags.all()) and elapsed < 60
    record(1, ok, f"critic/actor/multiplier gradients ok in {flags.all(axis=0).tolist()} "
                  f"of 100 random networks; {elapsed:.1f} s")


def test_criterion_02_integrator_order(params, selected):
    s_ref, a_ref = selected[1]
    s = s_ref * np.array([1.05, 0.97, 1.02, 0.98, 1.03, 0.99, 1.04, 0.96, 1.01])
    horizon = 0.05
    fine = s.copy()
    for _ in range(200):
        fine = rk4_step(fine, a_ref, horizon / 200, params, substeps=4)
    errs = []
    for n in (8, 16, 32):
        y = s.copy()
        for _ in range(n):
            y = rk4_step(y, a_ref, horizon / n, params, substeps=1)
        errs.append(np.max(np.abs(y - fine)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    record(2, bool(orders.min() >= 3.9), f"empirical RK4 order {np.round(orders, 3).tolist()} (need >= 3.9)")


def test_criterion_03_equilibrium(params, ref_set, selected):
    nm = Normalizer().fit(ref_set.states)
    resid = np.abs(nm.scale_derivative(derivatives(ref_set.states, ref_set.inputs, params))).max()
    drift = 0.0
    for s_ref, a_ref in zip(selected.states, selected.inputs):
        s = s_ref.copy()
        for _ in range(HORIZON):
            s = rk4_step(s, a_ref, 0.005, params)
        drift = max(drift, float(np.abs(nm.transform(s[None]) - nm.transform(s_ref[None])).max()))
    ok = resid < 1e-6 and drift < 1e-4
    record(3, ok, f"max normalized residual {resid:.2e} over {len(ref_set)} pairs; "
                  f"open-loop 2.5 h drift {drift:.2e}")


def test_criterion_04_message_algebra():
    failures = []
    try:
        message_property()
    except AssertionError as exc:
        failures.append(str(exc))
    record(4, not failures, "m_i + m_minus_i == board total exactly for nu in {1, 2, 3, 5} "
                            "(hypothesis-generated boards)")


def test_criterion_05_desk_training(desk_run):
    costs = desk_run["log"]["mean_cost"]
    initial = desk_run["initial"]["mean_cost"]
    ratio = costs[-1] / initial
    last = costs[-3:]
    monotone = bool(last[1] <= 1.1 * last[0] and last[2] <= 1.1 * last[1])
    record(5, bool(ratio < 0.2 and monotone),
           f"final/untrained mean cost {costs[-1]:.1f}/{initial:.1f} = {ratio:.3f} (need < 0.2); "
           f"last three evaluations {np.round(last, 1).tolist()} non-increasing within 10%: {monotone}")


def test_criterion_06_stability(desk_run, mid_rollouts, selected):
    nm = desk_run["normalizer"]
    ref = nm.transform(selected.states[1][None])[0]
    tail = int(round(0.2 * HORIZON))
    worst = max(float(np.abs(nm.transform(ro.states[-tail:]) - ref).max()) for ro in mid_rollouts["w1"])
    per_comp = np.max([np.abs(nm.transform(ro.states[-tail:]) - ref).max(axis=0) for ro in mid_rollouts["w1"]], axis=0)
    record(6, worst < 0.1, f"max normalized tracking error over the final 20% of {N_ROLLOUTS} rollouts "
                           f"{worst:.3f} (need < 0.1); per component {np.round(per_comp, 3).tolist()}")


def test_criterion_07_lyapunov(desk_run, ref_set, selected):
    env, ctls, cfg = desk_run["env"], desk_run["controllers"], desk_run["cfg"]
    rng = np.random.default_rng(7)
    rep = lyapunov_decrease_check(env, ctls, selected.states[1], cfg.alpha3, N_ROLLOUTS, HORIZON, rng,
                                  DisturbanceSpec.preset("w1"))
    samples = np.array([sample_initial_state(PAPER_S0, rng, cfg.init_spread) for _ in range(len(ref_set))])
    fit = lyapunov_bound_fit(env, ctls, np.vstack([ref_set.states, samples]), selected.states[1], rng)
    ok = rep.decreasing and fit["pooled"][0] > 0
    record(7, ok, f"decrease estimate {rep.estimate:.4g} + 2 SE ({rep.standard_error:.3g}) = "
                  f"{rep.estimate + 2 * rep.standard_error:.4g} (need <= 0); alpha1_hat {fit['pooled'][0]:.4g} "
                  f"(need > 0); per-subsystem {np.round(rep.per_subsystem, 4).tolist()}")


def test_criterion_08_entropy(desk_run, mid_rollouts):
    env, ctls, cfg = desk_run["env"], desk_run["controllers"], desk_run["cfg"]
    states = np.vstack([ro.states for ro in mid_rollouts["w1"]])
    refs = np.vstack([ro.references for ro in mid_rollouts["w1"]])
    obs = env.observe(states, refs)
    rng = np.random.default_rng(8)
    ent = [entropy_estimate(c.policy, o, rng, n_samples=4) for c, o in zip(ctls, obs)]
    threshold = cfg.entropy_target - 0.5
    record(8, all(h >= threshold for h in ent), f"entropy per subsystem {np.round(ent, 3).tolist()} "
                                                f"(need >= {threshold})")


def test_criterion_09_robustness(mid_rollouts):
    tail = int(round(0.2 * HORIZON))
    avg = {k: float(np.mean([ro.total_cost[-tail:].mean() for ro in v])) for k, v in mid_rollouts.items()}
    feasible = all(np.all(np.isfinite(ro.states)) and np.array_equal(project_feasible(ro.states), ro.states)
                   for ro in mid_rollouts["w2"])
    ratio = avg["w2"] / avg["w1"] if avg["w1"] > 0 else float("inf")
    record(9, bool(ratio <= 3 and feasible), f"final-20% time-averaged cost w2 {avg['w2']:.4g} vs w1 "
                                             f"{avg['w1']:.4g}: ratio {ratio:.3f} (need <= 3); "
                                             f"finite and feasible in all {N_ROLLOUTS} seeds: {feasible}")


def test_criterion_10_baseline(desk_run, ref_set, selected):
    env = desk_run["env"]
    policies = [c.local_policy() for c in desk_run["controllers"]]
    baseline = OpenLoopController(desk_run["normalizer"]).fit(ref_set.states, ref_set.inputs).local_policies()
    schedule = piecewise_schedule(selected.states, 1.5, env.dt)
    dist = DisturbanceSpec.preset("w1")
    rows = []
    for seed in range(5):
        s_init = sample_initial_state(PAPER_S0, np.random.default_rng([seed, 0]), desk_run["cfg"].init_spread)
        cl = env.rollout(policies, len(schedule), schedule, dist, np.random.default_rng([seed, 1]), s_init,
                         deterministic=True, record_transitions=False)
        ol = env.rollout(baseline, len(schedule), schedule, dist, np.random.default_rng([seed, 2]), s_init,
                         deterministic=True, record_transitions=False)
        rows.append((integrated_cost(cl), integrated_cost(ol)))
    rows = np.array(rows)
    record(10, bool(np.all(rows[:, 0] < rows[:, 1])),
           f"integrated cost DLAC {np.round(rows[:, 0], 2).tolist()} vs open loop "
           f"{np.round(rows[:, 1], 2).tolist()} over 5 seeds")


def _csvs(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(Path(d).rglob("*.csv"))}


def test_criterion_11_determinism(desk_run, tmp_path):
    ckpt = str(desk_run["dir"] / "checkpoints")
    small = {"n_trajectories": 3, "n_rollouts": 2, "horizon": 40, "dwell_h": 0.1, "steps": 40}
    cfg = tmp_path / "small.yaml"
    cfg.write_text("base: desk-scale\n" + "".join(f"{k}: {v}\n" for k, v in small.items()))
    tiny = tmp_path / "tiny.yaml"
    tiny.write_text("base: desk-scale\nn_eps_max: 4\nn_steps: 30\nn_eps_min: 2\nn_eps_interval: 2\n"
                    "n_update: 2\nbatch_size: 16\nhidden: [8, 8]\neval_episodes: 1\nss_dwell_h: 0.05\n")
    commands = {
        "simulate": ["--config", str(cfg), "--checkpoint", ckpt],
        "evaluate": ["--config", str(cfg), "--checkpoint", ckpt],
        "track": ["--config", str(cfg), "--checkpoint", ckpt],
        "diagnose": ["--config", str(cfg), "--checkpoint", ckpt],
        "refs": ["--grid-n", "3"],
        "train": ["--config", str(tiny)],
    }
    mismatched = []
    for name, args in commands.items():
        first, second = tmp_path / f"{name}-1", tmp_path / f"{name}-2"
        assert main([name, *args, "--seed", "3", "--workers", "1", "--out-dir", str(first)]) in (EXIT_OK, EXIT_CHECK_FAILED)
        rerun = [name, "--config", str(first / "manifest.json"), "--workers", "1", "--out-dir", str(second)]
        if "--checkpoint" in args:
            rerun += ["--checkpoint", ckpt]
        if name == "refs":
            rerun += ["--grid-n", "3"]
        assert main(rerun) in (EXIT_OK, EXIT_CHECK_FAILED)
        a, b = _csvs(first), _csvs(second)
        if not a or a != b:
            mismatched.append(name)
    record(11, not mismatched, f"byte-identical CSVs on manifest rerun for {sorted(set(commands) - set(mismatched))}"
                               + (f"; differing: {mismatched}" if mismatched else ""))
