"""Rectified-flow primitives: interpolation, CFM loss, timestep sampling, ODE samplers, Repaint."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..config import CFG_STRENGTH, SAMPLING_STEPS, TIMESTEP_MU, TIMESTEP_SIGMA

METHODS = ("euler", "heun")


class NumericalError(ArithmeticError):
    """A sampler or trainer produced a non-finite state."""


@dataclass(frozen=True)
class FlowState:
    values: np.ndarray = field(repr=False)
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {self.t}")
        if not np.all(np.isfinite(self.values)):
            raise NumericalError(f"non-finite state at t={self.t:.4f}")

    @property
    def shape(self):
        return self.values.shape


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes {a.shape} and {b.shape} differ")


def interpolate(x0, eps, t):
    """Forward process (1 - t) x0 + t eps; ``t`` may be a scalar or one value per leading row."""
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    _same_shape(x0, eps, "interpolate")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (1.0 - t) * x0 + t * eps


def cfm_loss(model, x0, eps, t, cond=None, **ctx) -> float:
    """Mean squared error between the model velocity at x(t) and eps - x0."""
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    _same_shape(x0, eps, "cfm_loss")
    v = np.asarray(model(interpolate(x0, eps, t), t, cond, **ctx))
    _same_shape(v, x0, "model output")
    return float(np.mean((v - (eps - x0)) ** 2))


def sample_timestep(mu: float = TIMESTEP_MU, sigma: float = TIMESTEP_SIGMA, seed=None, size=None):
    """Logit-normal draw: sigmoid(mu + sigma z)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = rng.standard_normal(size)
    # clip keeps float64 sigmoid strictly inside (0, 1)
    return 1.0 / (1.0 + np.exp(-np.clip(mu + sigma * z, -36.0, 36.0)))


def cfg_velocity(v_cond, v_uncond, strength: float = CFG_STRENGTH):
    v_cond, v_uncond = np.asarray(v_cond, dtype=np.float64), np.asarray(v_uncond, dtype=np.float64)
    _same_shape(v_cond, v_uncond, "cfg_velocity")
    return v_uncond + strength * (v_cond - v_uncond)


def guided_velocity(model, x, t, cond, strength, ctx):
    """Model velocity with classifier-free guidance whenever a condition is given."""
    if cond is None:
        return np.asarray(model(x, t, None, **ctx), dtype=np.float64)
    vc = np.asarray(model(x, t, cond, **ctx), dtype=np.float64)
    if strength == 1.0:
        return vc
    return cfg_velocity(vc, model(x, t, None, **ctx), strength)


def _check_finite(x, t, k, what="state"):
    if not np.all(np.isfinite(x)):
        bad = int(np.sum(~np.isfinite(x)))
        raise NumericalError(f"{what} became non-finite at step {k} (t={t:.4f}); {bad} bad entries")


def ode_step(model, x, t, t_next, cond, strength, method, ctx, k=0):
    """One step of dx/dt = -v from t down to t_next."""
    h = t - t_next
    v = guided_velocity(model, x, t, cond, strength, ctx)
    _check_finite(v, t, k, "velocity")
    x_euler = x - h * v
    if method == "euler":
        return x_euler
    v2 = guided_velocity(model, x_euler, t_next, cond, strength, ctx)
    _check_finite(v2, t_next, k, "velocity")
    return x - 0.5 * h * (v + v2)


def time_grid(steps: int) -> np.ndarray:
    return 1.0 - np.arange(steps + 1) / steps


def ode_sample(
    model,
    x_init,
    steps: int = SAMPLING_STEPS,
    cond=None,
    strength: float = CFG_STRENGTH,
    method: str = "heun",
    ctx: dict | None = None,
    trajectory: bool = False,
):
    """Integrate from noise at t=1 to data at t=0 on a uniform grid.

    The CFM target eps - x0 points from data to noise, so the sampler moves
    against the velocity. Returns the endpoint, or the list of ``FlowState``
    visited when ``trajectory`` is set.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    ctx = ctx or {}
    x = np.array(x_init, dtype=np.float64)
    _check_finite(x, 1.0, 0, "initial noise")
    ts = time_grid(steps)
    states = [FlowState(x.copy(), 1.0)] if trajectory else None
    for k in range(steps):
        x = ode_step(model, x, ts[k], ts[k + 1], cond, strength, method, ctx, k)
        _check_finite(x, ts[k + 1], k)
        if trajectory:
            states.append(FlowState(x.copy(), float(ts[k + 1])))
    return states if trajectory else x


def renoise(x_s, s: float, t: float, rng: np.random.Generator):
    """Push a sample at time s forward to a later time t (s < t) under the linear process."""
    a = (1.0 - t) / (1.0 - s)
    var = max(t * t - a * a * s * s, 0.0)
    return a * x_s + np.sqrt(var) * rng.standard_normal(np.shape(x_s))


def repaint_sample(
    model,
    x0_known,
    mask,
    steps: int = SAMPLING_STEPS,
    resample_r: int = 1,
    cond=None,
    strength: float = CFG_STRENGTH,
    method: str = "heun",
    seed=0,
    ctx: dict | None = None,
    eps=None,
):
    """Regenerate the entries where ``mask`` is True, keeping the rest pinned to x0_known.

    Unmasked entries ride the forward path ``interpolate(x0_known, eps, t)`` for
    one fixed noise draw ``eps``. With ``resample_r > 1`` each step is undone by
    re-noising and repeated, letting the generated region harmonize with the
    known one.
    """
    x0 = np.asarray(x0_known, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if m.shape != x0.shape:
        raise ValueError(f"mask shape {m.shape} does not match state {x0.shape}")
    if steps < 1 or resample_r < 1:
        raise ValueError("steps and resample_r must be >= 1")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if not m.any():
        return x0.copy()
    ctx = ctx or {}
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(x0.shape) if eps is None else np.asarray(eps, dtype=np.float64)
    _same_shape(eps, x0, "eps")
    ts = time_grid(steps)
    x = np.where(m, eps, interpolate(x0, eps, 1.0))
    for k in range(steps):
        t, t_next = ts[k], ts[k + 1]
        for u in range(resample_r):
            x_next = ode_step(model, x, t, t_next, cond, strength, method, ctx, k)
            _check_finite(x_next, t_next, k)
            x_next = np.where(m, x_next, interpolate(x0, eps, t_next))
            if u + 1 < resample_r:
                x = np.where(m, renoise(x_next, t_next, t, rng), interpolate(x0, eps, t))
            else:
                x = x_next
    return np.where(m, x, x0)


def default_sampler_kwargs(cfg) -> dict:
    return {"steps": cfg.steps, "strength": cfg.strength, "method": cfg.method}
