"""A small MLP velocity model with hand-written backprop, AdamW, and the toy trainer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..config import TrainConfig
from ..io import load_archive, save_archive
from ..nn.layers import sinusoidal_pe
from .core import NumericalError, interpolate, sample_timestep

DIVERGENCE_LIMIT = 1e6


class DivergenceError(NumericalError):
    pass


def _silu(z):
    s = expit(z)
    return z * s, s


def time_features(t, n: int) -> np.ndarray:
    """[t, sin(pi k t), cos(pi k t)] for k = 1..n/2; smooth enough for toy fields."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))[:, None]
    k = np.arange(1, n // 2 + 1)
    return np.concatenate([t, np.sin(math.pi * k * t), np.cos(math.pi * k * t)], axis=1)


class TinyMLP:
    """Row-wise velocity MLP on ``[x, time features, condition, coord features]``.

    ``cond_dim > 0`` adds a learned null-condition vector used when the caller
    passes ``cond=None`` (and for condition dropout during training).
    ``coord_dim > 0`` appends a positional encoding of the voxel each row sits
    on; the caller supplies ``structure=`` at evaluation time.
    """

    def __init__(self, params: dict, dim: int, time_dim: int = 16, cond_dim: int = 0, coord_dim: int = 0):
        self.params = params
        self.dim = dim
        self.time_dim = time_dim
        self.cond_dim = cond_dim
        self.coord_dim = coord_dim
        self.n_layers = sum(1 for k in params if k.startswith("W"))

    @classmethod
    def init(cls, seed: int, dim: int, hidden=(128, 128, 128), time_dim: int = 16, cond_dim: int = 0,
             coord_dim: int = 0) -> "TinyMLP":
        if not 1 <= len(hidden) <= 8:
            raise ValueError("hidden must list 1..8 layer widths")
        rng = np.random.default_rng(seed)
        widths = [dim + time_dim + 1 + cond_dim + coord_dim, *hidden, dim]
        params = {}
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            params[f"W{i}"] = rng.normal(0.0, math.sqrt(2.0 / a), (a, b))
            params[f"b{i}"] = np.zeros(b)
        params[f"W{len(widths) - 2}"] *= 0.1
        if cond_dim:
            params["null_cond"] = np.zeros(cond_dim)
        return cls(params, dim, time_dim, cond_dim, coord_dim)

    # -- evaluation -----------------------------------------------------------------

    def _inputs(self, x, t, cond, drop, structure):
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        parts = [x, time_features(t, self.time_dim)]
        if self.cond_dim:
            if cond is None:
                c = np.broadcast_to(self.params["null_cond"], (b, self.cond_dim)).copy()
                dropped = np.ones(b, bool)
            else:
                c = np.broadcast_to(np.asarray(cond, dtype=np.float64), (b, self.cond_dim)).copy()
                dropped = np.zeros(b, bool) if drop is None else np.asarray(drop, bool)
                c[dropped] = self.params["null_cond"]
            parts.append(c)
        else:
            dropped = None
        if self.coord_dim:
            if structure is None:
                raise ValueError("this model needs structure= for its coordinate features")
            parts.append(sinusoidal_pe(structure.coords, self.coord_dim))
        return np.concatenate(parts, axis=1), dropped

    def forward(self, x, t, cond=None, drop=None, structure=None, keep=False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected rows of width {self.dim}, got {x.shape}")
        h, dropped = self._inputs(x, t, cond, drop, structure)
        cache = [h]
        for i in range(self.n_layers):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i + 1 < self.n_layers:
                h, s = _silu(z)
                cache.append((z, s, h))
            else:
                h = z
        return (h, cache, dropped) if keep else h

    def __call__(self, x, t, cond=None, structure=None, **_):
        shape = np.shape(x)
        out = self.forward(np.reshape(x, (-1, self.dim)), t, cond, structure=structure)
        return out.reshape(shape)

    # -- training -------------------------------------------------------------------

    def loss_and_grad(self, x0, eps, t, cond=None, drop=None, structure=None):
        """CFM loss (mean over all entries) and its gradient for every parameter."""
        xt = interpolate(x0, eps, t)
        out, cache, dropped = self.forward(xt, t, cond, drop, structure, keep=True)
        r = out - (eps - x0)
        loss = float(np.mean(r * r))
        g = 2.0 * r / r.size
        grads = {}
        for i in range(self.n_layers - 1, -1, -1):
            h_in = cache[i] if i == 0 else cache[i][2]
            grads[f"W{i}"] = h_in.T @ g
            grads[f"b{i}"] = g.sum(0)
            g = g @ self.params[f"W{i}"].T
            if i > 0:
                z, s, _ = cache[i]
                g = g * (s * (1.0 + z * (1.0 - s)))
        if self.cond_dim:
            lo = self.dim + self.time_dim + 1
            gc = g[:, lo:lo + self.cond_dim]
            grads["null_cond"] = gc[dropped].sum(0) if dropped is not None else np.zeros(self.cond_dim)
        return loss, grads

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])

    def set_flat(self, theta) -> None:
        i = 0
        for k in sorted(self.params):
            n = self.params[k].size
            self.params[k] = np.asarray(theta[i:i + n], dtype=np.float64).reshape(self.params[k].shape)
            i += n

    def flat_grad(self, grads: dict) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in sorted(self.params)])

    # -- archive --------------------------------------------------------------------

    def config(self) -> dict:
        return {"kind": "tiny_mlp", "dim": self.dim, "time_dim": self.time_dim, "cond_dim": self.cond_dim,
                "coord_dim": self.coord_dim}

    def save(self, directory, extra: dict | None = None) -> None:
        save_archive(directory, self.params, {"config": self.config(), **(extra or {})})

    @classmethod
    def load(cls, directory) -> "TinyMLP":
        tensors, meta = load_archive(directory)
        cfg = meta["config"]
        if cfg.get("kind") != "tiny_mlp":
            raise ValueError(f"archive holds a {cfg.get('kind')!r}, not a tiny_mlp")
        return cls(tensors, cfg["dim"], cfg["time_dim"], cfg["cond_dim"], cfg["coord_dim"])


@dataclass
class AdamW:
    lr: float
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        self.m, self.v, self.step_count = {}, {}, 0

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.step_count, 1 - b2**self.step_count
        for k in sorted(params):
            g = grads[k]
            m = self.m[k] = b1 * self.m.get(k, 0.0) + (1 - b1) * g
            v = self.v[k] = b2 * self.v.get(k, 0.0) + (1 - b2) * g * g
            p = params[k] * (1 - lr * self.weight_decay) if self.weight_decay and k.startswith("W") else params[k]
            params[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_toy_flow(dataset, model: TinyMLP, cfg: TrainConfig, conds=None, structure=None, log_every: int = 0):
    """Fit ``model`` with the CFM objective on a point set. Returns (model, loss trace).

    ``conds`` (n, cond_dim) pairs each point with a condition; a fraction
    ``cfg.cond_drop`` of each batch sees the null condition instead.
    With ``structure`` given, each data point is a full (L, C) latent grid
    and the batch is the concatenation of rows of ``cfg.batch`` grids.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.shape[0] == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(cfg.lr, tuple(cfg.betas), cfg.eps, cfg.weight_decay)
    trace = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        idx = rng.integers(0, data.shape[0], cfg.batch)
        x0 = data[idx]
        eps = rng.standard_normal(x0.shape)
        t = sample_timestep(cfg.timestep_mu, cfg.timestep_sigma, rng, cfg.batch)
        cond, drop = None, None
        if conds is not None:
            cond = np.asarray(conds, dtype=np.float64)[idx]
            drop = rng.random(cfg.batch) < cfg.cond_drop
        if structure is not None:
            n_rows = x0.shape[1]
            x0 = x0.reshape(-1, model.dim)
            eps = eps.reshape(-1, model.dim)
            t = np.repeat(t, n_rows // model.dim)
            loss, grads = model.loss_and_grad(x0, eps, t, structure=_Tiled(structure, cfg.batch))
        else:
            loss, grads = model.loss_and_grad(x0, eps, t, cond, drop)
        if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise DivergenceError(f"training diverged at iteration {it}: loss {loss:.3e}")
        trace[it] = loss
        lr = cfg.lr
        if cfg.lr_decay:
            lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * it / cfg.iterations))
        opt.step(model.params, grads, lr)
        if log_every and it % log_every == 0:
            print(f"iter {it:6d}  loss {loss:.5f}")
    return model, trace


class _Tiled:
    """A structure stand-in whose coords repeat once per grid in a batch."""

    def __init__(self, structure, reps):
        self.coords = np.tile(structure.coords, (reps, 1))


def moving_average(trace, window: int) -> np.ndarray:
    c = np.cumsum(np.insert(np.asarray(trace, dtype=np.float64), 0, 0.0))
    return (c[window:] - c[:-window]) / window


# -- toy datasets ------------------------------------------------------------------------


def two_moons(n: int, seed: int = 0, noise: float = 0.0) -> np.ndarray:
    """Two interleaved half circles of radius 1, centred for a roughly zero-mean cloud."""
    rng = np.random.default_rng(seed)
    upper = rng.random(n) < 0.5
    th = rng.uniform(0.0, math.pi, n)
    x = np.where(upper, np.cos(th), 1.0 - np.cos(th))
    y = np.where(upper, np.sin(th), 0.5 - np.sin(th))
    pts = np.stack([x - 0.5, y - 0.25], axis=1)
    return pts + noise * rng.standard_normal(pts.shape)


def two_moons_reference(n: int = 20000) -> np.ndarray:
    """Dense, evenly spaced points on the noiseless two-moons curves."""
    th = np.linspace(0.0, math.pi, n // 2)
    a = np.stack([np.cos(th), np.sin(th)], 1)
    b = np.stack([1.0 - np.cos(th), 0.5 - np.sin(th)], 1)
    return np.vstack([a, b]) - np.array([0.5, 0.25])
