"""Small fully-connected networks with hand-written reverse mode.

Everything is float64.  Networks keep their parameters as a flat list
``[W0, b0, W1, b1, ...]`` so optimisers, soft updates and checkpoints can
treat every model the same way.
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
CHECKPOINT_VERSION = "dlac-ckpt-1"
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class Mlp:
    """Tanh hidden layers, linear output.

    ``forward`` caches the activations of the last call; ``backward`` consumes
    that cache (or one passed explicitly) and returns parameter gradients in
    the same order as ``params`` together with the gradient w.r.t. the input.
    """

    def __init__(self, sizes, rng=None, output_scale=None):
        if len(sizes) < 2:
            raise ConfigurationError("an MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        rng = np.random.default_rng(rng)
        self.params = []
        n_layers = len(self.sizes) - 1
        for k, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if k == n_layers - 1 and output_scale is not None:
                limit = output_scale
            else:
                limit = math.sqrt(6.0 / (fan_in + fan_out))
            self.params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))
        self._cache = None

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.sizes = self.sizes
        clone.params = [p.copy() for p in self.params]
        clone._cache = None
        return clone

    def forward_cached(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ConfigurationError(f"input has {x.shape[-1]} features, network expects {self.sizes[0]}")
        acts = [x]
        h = x
        for k in range(self.n_layers):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            z = h @ W + b
            h = np.tanh(z) if k < self.n_layers - 1 else z
            acts.append(h)
        return h, acts

    def forward(self, x):
        y, self._cache = self.forward_cached(x)
        return y

    __call__ = forward

    def backward(self, grad_out, cache=None):
        acts = self._cache if cache is None else cache
        if acts is None:
            raise RuntimeError("backward called without a cached forward pass")
        g = np.asarray(grad_out, dtype=float)
        grads = [None] * len(self.params)
        for k in reversed(range(self.n_layers)):
            h_in, h_out = acts[k], acts[k + 1]
            if k < self.n_layers - 1:
                g = g * (1.0 - h_out * h_out)
            W = self.params[2 * k]
            h2 = h_in.reshape(-1, h_in.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            grads[2 * k] = h2.T @ g2
            grads[2 * k + 1] = g2.sum(axis=0)
            g = g @ W.T
        return grads, g


def squash_log_jacobian(u):
    """``log(1 - tanh(u)^2)`` evaluated without cancellation."""
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


class GaussianPolicy:
    """Diagonal Gaussian in pre-squash space, squashed into (-1, 1) by tanh."""

    def __init__(self, obs_dim, act_dim, hidden=(64, 64), rng=None):
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.net = Mlp((self.obs_dim, *hidden, 2 * self.act_dim), rng=rng, output_scale=1e-2)

    @property
    def params(self):
        return self.net.params

    def distribution(self, obs):
        out = self.net.forward(obs)
        mu = out[..., : self.act_dim]
        raw = out[..., self.act_dim:]
        return mu, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)

    def mean_action(self, obs):
        mu, _ = self.distribution(obs)
        return np.tanh(mu)

    def sample(self, obs, eps):
        """Reparameterised sample; returns ``(action, log_prob, cache)``."""
        out, net_cache = self.net.forward_cached(obs)
        mu = out[..., : self.act_dim]
        raw = out[..., self.act_dim:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        std = np.exp(log_std)
        eps = np.asarray(eps, dtype=float)
        u = mu + std * eps
        a = np.tanh(u)
        logp = np.sum(-0.5 * eps * eps - log_std - _HALF_LOG_2PI - squash_log_jacobian(u), axis=-1)
        cache = (net_cache, raw, std, eps, a)
        return a, logp, cache

    def backward(self, cache, grad_action=None, grad_logp=None):
        """Parameter gradients given dL/d(action) and dL/d(log_prob)."""
        net_cache, raw, std, eps, a = cache
        g_u = np.zeros_like(a)
        g_ls = np.zeros_like(a)
        if grad_action is not None:
            g_u += grad_action * (1.0 - a * a)
        if grad_logp is not None:
            gl = np.asarray(grad_logp, dtype=float)[..., None]
            g_u += gl * 2.0 * a
            g_ls -= gl
        g_ls += g_u * std * eps
        g_ls *= (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
        grads, _ = self.net.backward(np.concatenate([g_u, g_ls], axis=-1), cache=net_cache)
        return grads

    def act(self, obs, rng=None, deterministic=False):
        if deterministic or rng is None:
            return self.mean_action(obs)
        eps = rng.standard_normal(np.shape(obs)[:-1] + (self.act_dim,))
        a, _, _ = self.sample(obs, eps)
        return a


class Critic:
    """Q(obs, action) network; input is the concatenation ``[obs, action]``."""

    def __init__(self, obs_dim, act_dim, hidden=(64, 64), rng=None):
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.net = Mlp((self.obs_dim + self.act_dim, *hidden, 1), rng=rng, output_scale=1e-2)

    @property
    def params(self):
        return self.net.params

    def copy(self) -> "Critic":
        clone = Critic.__new__(Critic)
        clone.obs_dim, clone.act_dim = self.obs_dim, self.act_dim
        clone.net = self.net.copy()
        return clone

    def value(self, obs, action):
        x = np.concatenate([obs, action], axis=-1)
        return self.net.forward(x)[..., 0]

    def value_cached(self, obs, action):
        x = np.concatenate([obs, action], axis=-1)
        y, cache = self.net.forward_cached(x)
        return y[..., 0], cache

    def backward(self, cache, grad_q):
        """Returns ``(param_grads, grad_wrt_action)``."""
        grads, gx = self.net.backward(np.asarray(grad_q, dtype=float)[..., None], cache=cache)
        return grads, gx[..., self.obs_dim:]


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return {"t": np.array([float(self.t)]), "m": self.m, "v": self.v}


def soft_update(target_params, online_params, tau):
    """``target <- (1 - tau) * target + tau * online`` in place."""
    if len(target_params) != len(online_params):
        raise ConfigurationError("parameter lists differ in length")
    for t, o in zip(target_params, online_params):
        if t.shape != o.shape:
            raise ConfigurationError(f"shape mismatch {t.shape} vs {o.shape}")
    if tau == 0:
        return
    for t, o in zip(target_params, online_params):
        if tau == 1:
            t[...] = o
        else:
            t *= 1.0 - tau
            t += tau * o


def save_checkpoint(path, tensors: dict, meta=None) -> None:
    """Write named float64 tensors to a zip container with a JSON manifest."""
    entries = []
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
            fname = f"tensors/{len(entries):04d}.bin"
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float64-le", "file": fname})
            info = zipfile.ZipInfo(fname, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, arr.tobytes(order="C"))
        manifest = {"version": CHECKPOINT_VERSION, "tensors": entries, "meta": meta or {}}
        info = zipfile.ZipInfo("manifest.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(manifest, indent=1, sort_keys=True))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``; returns ``(tensors, meta)``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("version") != CHECKPOINT_VERSION:
                raise ConfigurationError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
            tensors = {}
            for entry in manifest["tensors"]:
                raw = zf.read(entry["file"])
                tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(float)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"{path} is not a valid checkpoint: {exc}") from exc
    return tensors, manifest.get("meta", {})
