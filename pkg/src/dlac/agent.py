"""Distributed Lyapunov actor-critic training.

Each subsystem owns a replay buffer, a squashed-Gaussian actor, a critic
(which doubles as the local Lyapunov function), a slowly tracking target
critic and two log-multipliers.  Controllers only ever exchange one scalar
per update round: the batch-mean Lyapunov decrease of their own critic.
"""
from __future__ import annotations

import csv
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig
from .diagnostics import entropy_estimate, evaluate_cost, steady_state_errors
from .exceptions import BufferUnderflowError, ConfigurationError, DLACError, SynchronizationError
from .mdp import BENCHMARK_LAYOUT, Normalizer, ProcessEnv, SubsystemLayout, sample_initial_state
from .neural import Adam, Critic, GaussianPolicy, load_checkpoint, save_checkpoint, soft_update
from .process import PAPER_S0, DisturbanceSpec, ProcessParams, load_params
from .steady import ReferenceSet, evaluation_references, select_references
from .validation import check_inputs, check_states

log = logging.getLogger(__name__)

LOG_COLUMNS = ("episode", "mean_cost", "critic_loss_1", "critic_loss_2", "critic_loss_3",
               "max_T_error", "max_x_error", "entropy_1", "entropy_2", "entropy_3",
               "exp_beta_1", "exp_beta_2", "exp_beta_3", "exp_lambda_1", "exp_lambda_2", "exp_lambda_3",
               "message_1", "message_2", "message_3")


class ReplayBuffer:
    """Fixed-capacity FIFO ring of local transitions."""

    def __init__(self, capacity, obs_dim, act_dim):
        if capacity < 1:
            raise ConfigurationError("buffer capacity must be positive")
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros((capacity, act_dim))
        self.cost = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self._next = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, cost, next_obs):
        obs, action, next_obs = np.atleast_2d(obs), np.atleast_2d(action), np.atleast_2d(next_obs)
        cost = np.atleast_1d(cost)
        n = len(cost)
        if n > self.capacity:
            obs, action, cost, next_obs = obs[-self.capacity:], action[-self.capacity:], cost[-self.capacity:], next_obs[-self.capacity:]
            n = self.capacity
        idx = (self._next + np.arange(n)) % self.capacity
        self.obs[idx] = obs
        self.action[idx] = action
        self.cost[idx] = cost
        self.next_obs[idx] = next_obs
        self._next = int((self._next + n) % self.capacity)
        self.size = min(self.capacity, self.size + n)

    def extend(self, transition):
        self.add(transition.obs, transition.action, transition.cost, transition.next_obs)

    def _ordered_index(self):
        """Storage indices from oldest to newest."""
        start = (self._next - self.size) % self.capacity
        return (start + np.arange(self.size)) % self.capacity

    def oldest(self):
        i = self._ordered_index()[0]
        return self.obs[i], self.action[i], self.cost[i], self.next_obs[i]

    def sample(self, batch_size, rng):
        if self.size < batch_size:
            raise BufferUnderflowError(f"buffer holds {self.size} transitions, batch needs {batch_size}")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.obs[idx], self.action[idx], self.cost[idx], self.next_obs[idx])


@dataclass
class Batch:
    obs: np.ndarray
    action: np.ndarray
    cost: np.ndarray
    next_obs: np.ndarray

    def __post_init__(self):
        if len(self.cost) == 0:
            raise ConfigurationError("empty batch")

    def __len__(self):
        return len(self.cost)


@dataclass
class LagrangeState:
    """Log-multipliers; the effective weights ``exp(beta)``, ``exp(lambda)`` are always positive."""

    beta: float = 0.0
    lam: float = 0.0
    clip: float = 20.0

    @property
    def exp_beta(self):
        return float(np.exp(self.beta))

    @property
    def exp_lambda(self):
        return float(np.exp(self.lam))

    def clamp(self):
        self.beta = float(np.clip(self.beta, -self.clip, self.clip))
        self.lam = float(np.clip(self.lam, -self.clip, self.clip))


class MessageBoard:
    """One scalar per controller per exchange round.

    Messages are rounded onto a dyadic grid fine enough to be harmless
    (``2**-24``) and bounded so that every partial sum of the board is
    exactly representable.  That makes ``m_i + m_minus_i`` equal the board
    total bit for bit, in any summation order and from any thread.
    """

    QUANTUM_BITS = 24

    def __init__(self, n):
        if n < 1:
            raise ConfigurationError("a message board needs at least one slot")
        self.n = int(n)
        headroom = 52 - int(np.ceil(np.log2(max(self.n, 2)))) - self.QUANTUM_BITS
        self.limit = float(2.0 ** headroom)
        self._values = np.zeros(self.n)
        self._published = np.zeros(self.n, dtype=bool)
        self._lock = threading.Lock()

    def quantize(self, m):
        m = float(np.clip(m, -self.limit, self.limit))
        return float(np.round(m * 2.0 ** self.QUANTUM_BITS)) / 2.0 ** self.QUANTUM_BITS

    def publish(self, i, m):
        if not np.isfinite(m):
            raise DLACError(f"controller {i} produced a non-finite message")
        with self._lock:
            self._values[i] = self.quantize(m)
            self._published[i] = True

    def reset(self):
        with self._lock:
            self._values[:] = 0.0
            self._published[:] = False

    @property
    def complete(self):
        return bool(self._published.all())

    def value(self, i):
        return float(self._values[i])

    def values(self):
        if not self.complete:
            missing = np.flatnonzero(~self._published).tolist()
            raise SynchronizationError(f"messages missing from controllers {missing}")
        return self._values.copy()

    def total(self):
        return float(sum(self.values().tolist()))


def aggregate_messages(board: MessageBoard, i) -> float:
    """Sum of every other controller's message."""
    vals = board.values()
    return float(sum(v for j, v in enumerate(vals.tolist()) if j != i))


# -- losses ---------------------------------------------------------------

def critic_loss(batch: Batch, critic: Critic, target_critic: Critic, policy: GaussianPolicy, gamma, eps_next):
    """Semi-gradient TD loss; returns ``(loss, param_grads)``.

    ``target_critic`` supplies the bootstrap value and is treated as a constant.
    """
    a_next, _, _ = policy.sample(batch.next_obs, eps_next)
    y = batch.cost + gamma * target_critic.value(batch.next_obs, a_next)
    q, cache = critic.value_cached(batch.obs, batch.action)
    td = q - y
    loss = 0.5 * float(np.mean(td * td))
    grads, _ = critic.backward(cache, td / len(td))
    return loss, grads


def lyapunov_value(obs, policy: GaussianPolicy, critic: Critic, rng=None, eps=None):
    """Single-sample estimate ``Q(s, a)``, ``a ~ pi(.|s)``."""
    obs = np.asarray(obs, dtype=float)
    if eps is None:
        eps = rng.standard_normal(obs.shape[:-1] + (policy.act_dim,))
    a, _, _ = policy.sample(obs, eps)
    return critic.value(obs, a)


def lyapunov_terms(batch: Batch, critic: Critic, policy: GaussianPolicy, alpha3, eps_next):
    """Per-sample ``Q(s', f(s')) - Q(s, a) + alpha3 c``."""
    a_next, _, _ = policy.sample(batch.next_obs, eps_next)
    return critic.value(batch.next_obs, a_next) - critic.value(batch.obs, batch.action) + alpha3 * batch.cost


def compute_message(batch: Batch, critic: Critic, policy: GaussianPolicy, alpha3, eps_next) -> float:
    return float(np.mean(lyapunov_terms(batch, critic, policy, alpha3, eps_next)))


def actor_loss(batch: Batch, policy: GaussianPolicy, critic: Critic, lagrange: LagrangeState, eps, eps_next):
    """``mean(e^beta log pi(f(s)|s) + e^lambda Q(s', f(s')))``; returns ``(loss, policy_grads)``.

    Critic parameters are held fixed; gradients reach the policy through
    both reparameterised actions.
    """
    n = len(batch)
    eb, el = lagrange.exp_beta, lagrange.exp_lambda
    _, logp, cache_s = policy.sample(batch.obs, eps)
    a_next, _, cache_n = policy.sample(batch.next_obs, eps_next)
    q_next, qcache = critic.value_cached(batch.next_obs, a_next)
    loss = float(np.mean(eb * logp + el * q_next))
    g1 = policy.backward(cache_s, grad_logp=np.full(n, eb / n))
    _, dq_da = critic.backward(qcache, np.full(n, el / n))
    g2 = policy.backward(cache_n, grad_action=dq_da)
    return loss, [a + b for a, b in zip(g1, g2)]


def multiplier_losses(batch: Batch, m_minus, policy: GaussianPolicy, critic: Critic, lagrange: LagrangeState,
                      alpha3, entropy_target, eps, eps_next):
    """Gradients of the two multiplier losses with respect to ``beta`` and ``lambda``.

    Both losses are linear in their multiplier, so the gradients are the
    negated constraint brackets.
    """
    _, logp, _ = policy.sample(batch.obs, eps)
    g_beta = -float(np.mean(logp + entropy_target))
    g_lam = -float(np.mean(m_minus + lyapunov_terms(batch, critic, policy, alpha3, eps_next)))
    return g_beta, g_lam


# -- controllers ----------------------------------------------------------

class LocalPolicy:
    """Execution-time view of a controller: local observation in, local action out."""

    def __init__(self, policy: GaussianPolicy):
        self._policy = policy

    def act(self, obs, rng=None, deterministic=False):
        return self._policy.act(obs, rng=rng, deterministic=deterministic)


class LocalController:
    def __init__(self, index, obs_dim, act_dim, cfg: TrainConfig, rng: np.random.Generator):
        self.index = index
        self.cfg = cfg
        self.rng = rng
        self.policy = GaussianPolicy(obs_dim, act_dim, cfg.hidden, rng)
        self.critic = Critic(obs_dim, act_dim, cfg.hidden, rng)
        self.target = self.critic.copy()
        self.lagrange = LagrangeState(cfg.beta_init, cfg.lambda_init, cfg.multiplier_clip)
        self.actor_opt = Adam(self.policy.params, cfg.lr_actor)
        self.critic_opt = Adam(self.critic.params, cfg.lr_critic)
        self._mult = [np.array([self.lagrange.beta]), np.array([self.lagrange.lam])]
        self.mult_opt = Adam(self._mult, cfg.lr_lagrange)
        self.last_critic_loss = float("nan")
        self.last_message = float("nan")

    def local_policy(self):
        return LocalPolicy(self.policy)

    def _noise(self, n):
        return self.rng.standard_normal((n, self.policy.act_dim))

    def critic_phase(self, buffer: ReplayBuffer, board: MessageBoard):
        batch = buffer.sample(self.cfg.batch_size, self.rng)
        boot = self.target if self.cfg.bootstrap == "target" else self.critic
        loss, grads = critic_loss(batch, self.critic, boot, self.policy, self.cfg.gamma, self._noise(len(batch)))
        self.critic_opt.step(grads)
        m = compute_message(batch, self.critic, self.policy, self.cfg.alpha3, self._noise(len(batch)))
        board.publish(self.index, m)
        self.last_critic_loss = loss
        self.last_message = board.value(self.index)
        return batch

    def actor_phase(self, batch: Batch, board: MessageBoard):
        m_minus = aggregate_messages(board, self.index)
        n = len(batch)
        _, grads = actor_loss(batch, self.policy, self.critic, self.lagrange, self._noise(n), self._noise(n))
        g_beta, g_lam = multiplier_losses(batch, m_minus, self.policy, self.critic, self.lagrange,
                                          self.cfg.alpha3, self.cfg.entropy_target, self._noise(n), self._noise(n))
        self.actor_opt.step(grads)
        self.mult_opt.step([np.array([g_beta]), np.array([g_lam])])
        np.clip(self._mult[0], -self.lagrange.clip, self.lagrange.clip, out=self._mult[0])
        np.clip(self._mult[1], -self.lagrange.clip, self.lagrange.clip, out=self._mult[1])
        self.lagrange.beta = float(self._mult[0][0])
        self.lagrange.lam = float(self._mult[1][0])
        soft_update(self.target.params, self.critic.params, self.cfg.tau)

    # -- persistence
    def state_tensors(self):
        t = {}
        for name, net in (("policy", self.policy.net), ("critic", self.critic.net), ("target", self.target.net)):
            for k, p in enumerate(net.params):
                t[f"{name}/{k:02d}"] = p
        t["lagrange/beta"] = np.array([self.lagrange.beta])
        t["lagrange/lambda"] = np.array([self.lagrange.lam])
        return t

    def load_tensors(self, tensors):
        for name, net in (("policy", self.policy.net), ("critic", self.critic.net), ("target", self.target.net)):
            for k, p in enumerate(net.params):
                key = f"{name}/{k:02d}"
                if key not in tensors or tensors[key].shape != p.shape:
                    raise ConfigurationError(f"checkpoint tensor {key} missing or misshapen")
                p[...] = tensors[key]
        self.lagrange.beta = float(tensors["lagrange/beta"][0])
        self.lagrange.lam = float(tensors["lagrange/lambda"][0])
        self._mult[0][0], self._mult[1][0] = self.lagrange.beta, self.lagrange.lam


def update_round(controllers, buffers, board: MessageBoard, executor=None):
    """One lockstep round: every critic updates and publishes, then every actor updates."""
    board.reset()
    if executor is not None:
        return executor.run_round()
    batches = [c.critic_phase(b, board) for c, b in zip(controllers, buffers)]
    for c, batch in zip(controllers, batches):
        c.actor_phase(batch, board)


class ThreadedExecutor:
    """One persistent worker thread per controller, synchronised by a barrier.

    Each worker runs the critic phase, waits at the barrier until every
    message is on the board, then runs its actor phase.  Because every
    controller draws from its own random stream and messages are
    order-independent, results match the serial mode.
    """

    def __init__(self, controllers, buffers, board):
        self.controllers = controllers
        self.buffers = buffers
        self.board = board
        n = len(controllers)
        self._exchange = threading.Barrier(n)
        self._start = threading.Barrier(n + 1)
        self._done = threading.Barrier(n + 1)
        self._stop = False
        self._errors = []
        self._threads = [threading.Thread(target=self._work, args=(i,), daemon=True) for i in range(n)]
        for t in self._threads:
            t.start()

    def _work(self, i):
        ctl, buf = self.controllers[i], self.buffers[i]
        while True:
            self._start.wait()
            if self._stop:
                return
            try:
                batch = ctl.critic_phase(buf, self.board)
                self._exchange.wait()
                ctl.actor_phase(batch, self.board)
            except threading.BrokenBarrierError:
                pass
            except Exception as exc:  # surfaced to the caller after the round
                self._errors.append(exc)
                self._exchange.abort()
            self._done.wait()

    def run_round(self):
        self._start.wait()
        self._done.wait()
        if self._errors:
            err = self._errors[0]
            self._errors.clear()
            self._exchange.reset()
            raise err

    def close(self):
        self._stop = True
        self._start.wait()
        for t in self._threads:
            t.join()


# -- training loop ----------------------------------------------------------

@dataclass
class TrainResult:
    controllers: list
    normalizer: Normalizer
    log: list = field(default_factory=list)
    initial_eval: dict = field(default_factory=dict)
    elapsed_s: float = 0.0

    def policies(self):
        return [c.local_policy() for c in self.controllers]


def build_controllers(cfg: TrainConfig, env: ProcessEnv):
    seeds = np.random.SeedSequence(cfg.seed).spawn(env.n_subsystems + 1)
    ctls = [LocalController(i, od, ad, cfg, np.random.default_rng(seeds[i]))
            for i, (od, ad) in enumerate(zip(env.obs_dims(), env.act_dims()))]
    return ctls, np.random.default_rng(seeds[-1])


def make_env(cfg: TrainConfig, params, normalizer, layout=BENCHMARK_LAYOUT):
    return ProcessEnv(params, normalizer, layout, dt=cfg.dt, substeps=cfg.substeps,
                      cost_on_next_state=cfg.cost_timing == "next")


def evaluate_controllers(cfg, env, controllers, ref_set: ReferenceSet, s0=PAPER_S0, tracking=True):
    """Training-time evaluation with deterministic policies and a fixed seed."""
    policies = [c.local_policy() for c in controllers]
    dist = DisturbanceSpec.preset(cfg.disturbance)
    selected = select_references(ref_set).states
    out = {"mean_cost": evaluate_cost(env, policies, selected, cfg.eval_episodes, cfg.n_steps, dist,
                                      cfg.eval_seed, s0, cfg.init_spread)}
    if tracking:
        report = steady_state_errors(env, policies, evaluation_references(ref_set).states, cfg.ss_dwell_h,
                                     np.random.default_rng(cfg.eval_seed + 1), dist, s0, spread=cfg.init_spread)
        out["max_T_error"] = report.max_temperature_error
        out["max_x_error"] = report.max_mass_fraction_error
    else:
        out["max_T_error"] = out["max_x_error"] = float("nan")
    return out


def save_controllers(out_dir, controllers, normalizer, cfg, extra_meta=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in controllers:
        meta = {"index": c.index, "obs_dim": c.policy.obs_dim, "act_dim": c.policy.act_dim,
                "normalizer": normalizer.to_dict(), "config": cfg.to_dict(), **(extra_meta or {})}
        p = out_dir / f"controller_{c.index + 1}.ckpt"
        save_checkpoint(p, c.state_tensors(), meta)
        paths.append(p)
    return paths


def load_controllers(ckpt_dir, cfg: TrainConfig = None):
    """Rebuild controllers and the normalizer from a checkpoint directory."""
    ckpt_dir = Path(ckpt_dir)
    files = sorted(ckpt_dir.glob("controller_*.ckpt")) if ckpt_dir.is_dir() else []
    if not files:
        raise ConfigurationError(f"no controller checkpoints found in {ckpt_dir}")
    controllers, normalizer = [], None
    for f in files:
        tensors, meta = load_checkpoint(f)
        c_cfg = cfg or TrainConfig.from_dict(meta["config"])
        ctl = LocalController(meta["index"], meta["obs_dim"], meta["act_dim"], c_cfg,
                              np.random.default_rng(0))
        ctl.load_tensors(tensors)
        controllers.append(ctl)
        nm = meta["normalizer"]
        normalizer = Normalizer.from_moments(nm["temperature_mean"], nm["temperature_std"])
    controllers.sort(key=lambda c: c.index)
    return controllers, normalizer


def _log_row(episode, ev, controllers, entropies):
    row = {"episode": episode, "mean_cost": ev["mean_cost"],
           "max_T_error": ev["max_T_error"], "max_x_error": ev["max_x_error"]}
    for c, h in zip(controllers, entropies):
        k = c.index + 1
        row[f"critic_loss_{k}"] = c.last_critic_loss
        row[f"entropy_{k}"] = h
        row[f"exp_beta_{k}"] = c.lagrange.exp_beta
        row[f"exp_lambda_{k}"] = c.lagrange.exp_lambda
        row[f"message_{k}"] = c.last_message
    return row


def write_log(path, rows, columns=LOG_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(r.get(c, float("nan")))) if c != "episode" else int(r[c]) for c in columns])


def train(cfg: TrainConfig, ref_set: ReferenceSet, params: ProcessParams = None, out_dir=None,
          s0=PAPER_S0, layout: SubsystemLayout = BENCHMARK_LAYOUT, evaluate_initial=True, tracking_eval=True,
          progress=None) -> TrainResult:
    """Run the episode loop: sample, store, and at every trigger run ``n_update`` lockstep rounds.

    With ``out_dir`` set, writes ``train_log.csv`` and one checkpoint per
    controller after every evaluation.
    """
    params = params or load_params()
    normalizer = Normalizer().fit(ref_set.states)
    env = make_env(cfg, params, normalizer, layout)
    if env.n_subsystems != cfg.n_subsystems:
        raise ConfigurationError("config n_subsystems does not match the subsystem layout")
    controllers, env_rng = build_controllers(cfg, env)
    buffers = [ReplayBuffer(cfg.buffer_size, od, ad) for od, ad in zip(env.obs_dims(), env.act_dims())]
    board = MessageBoard(env.n_subsystems)
    dist = DisturbanceSpec.preset(cfg.disturbance)
    train_refs = ref_set.states if cfg.reference_mode == "set" else select_references(ref_set).states
    result = TrainResult(controllers, normalizer)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if evaluate_initial and cfg.n_eps_max > 0:
        result.initial_eval = evaluate_controllers(cfg, env, controllers, ref_set, s0, tracking=False)
        if out_dir is not None:
            (out_dir / "initial_eval.json").write_text(json.dumps(result.initial_eval, sort_keys=True))

    executor = ThreadedExecutor(controllers, buffers, board) if cfg.workers > 1 else None
    try:
        for j in range(1, cfg.n_eps_max + 1):
            s_ref = train_refs[env_rng.integers(len(train_refs))]
            s_init = sample_initial_state(s0, env_rng, cfg.init_spread)
            try:
                ro = env.rollout([c.local_policy() for c in controllers], cfg.n_steps, s_ref, dist, env_rng, s_init)
            except DLACError as exc:
                raise DLACError(f"episode {j}: {exc}") from exc
            for buf, tr in zip(buffers, ro.transitions):
                buf.extend(tr)
            if not cfg.is_training_episode(j):
                continue
            try:
                for _ in range(cfg.n_update):
                    update_round(controllers, buffers, board, executor)
            except DLACError as exc:
                raise DLACError(f"update after episode {j}: {exc}") from exc
            ev = evaluate_controllers(cfg, env, controllers, ref_set, s0, tracking=tracking_eval)
            ent = [entropy_estimate(c.policy, b.obs[: len(b)], np.random.default_rng(cfg.eval_seed + 2))
                   for c, b in zip(controllers, buffers)]
            row = _log_row(j, ev, controllers, ent)
            result.log.append(row)
            log.info("episode %d: mean cost %.4g, max T err %.3g, max x err %.3g", j, row["mean_cost"],
                     row["max_T_error"], row["max_x_error"])
            if progress is not None:
                progress(row)
            if out_dir is not None:
                write_log(out_dir / "train_log.csv", result.log)
                if cfg.checkpoint_every_eval:
                    save_controllers(out_dir / "checkpoints", controllers, normalizer, cfg, {"episode": j})
    finally:
        if executor is not None:
            executor.close()
    if out_dir is not None:
        write_log(out_dir / "train_log.csv", result.log)
        save_controllers(out_dir / "checkpoints", controllers, normalizer, cfg, {"episode": cfg.n_eps_max})
    result.elapsed_s = time.perf_counter() - t0
    return result


class DLAC(BaseEstimator):
    """Estimator wrapper around :func:`train`.

    ``fit(X, y)`` takes the reference states ``X`` (n, 9) and their steady
    heat inputs ``y`` (n, 3).  ``predict(X, reference=None)`` returns the
    heat inputs the trained local controllers apply at raw states ``X``;
    the reference defaults to the median one of the training set.
    """

    def __init__(self, preset="desk-scale", seed=0, workers=1, params=None, config_overrides=None, out_dir=None):
        self.preset = preset
        self.seed = seed
        self.workers = workers
        self.params = params
        self.config_overrides = config_overrides
        self.out_dir = out_dir

    def _config(self):
        from .config import load_config
        return load_config(preset=self.preset, overrides={**(self.config_overrides or {}),
                                                          "seed": self.seed, "workers": self.workers})

    def fit(self, X, y):
        X = check_states(X)
        y = check_inputs(y)
        self.config_ = self._config()
        self.reference_set_ = ReferenceSet(X, y)
        res = train(self.config_, self.reference_set_, self.params, self.out_dir)
        self.controllers_ = res.controllers
        self.normalizer_ = res.normalizer
        self.training_log_ = res.log
        self.initial_eval_ = res.initial_eval
        self.env_ = make_env(self.config_, self.params or load_params(), self.normalizer_)
        return self

    def policies(self):
        check_is_fitted(self, "controllers_")
        return [c.local_policy() for c in self.controllers_]

    def predict(self, X, reference=None):
        check_is_fitted(self, "controllers_")
        X = check_states(X)
        if reference is None:
            reference = select_references(self.reference_set_).states[1]
        refs = np.broadcast_to(np.asarray(reference, dtype=float), X.shape)
        obs = self.env_.observe(X, refs)
        local = [p.act(o, deterministic=True) for p, o in zip(self.policies(), obs)]
        return self.env_.to_heat(local)
