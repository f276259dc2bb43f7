"""DDPM noise schedules, forward noising, training objective, and sampling."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NumericalError, ValidationError


@dataclass(frozen=True)
class Schedule:
    """Variance schedule with cached per-step quantities.

    Arrays are indexed by step-1 (step t lives at index t-1). ``timestep_map``
    is set on respaced schedules and holds the original 1-indexed step values
    the denoiser should be queried with.
    """

    betas: np.ndarray
    timestep_map: np.ndarray | None = None

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ValidationError("betas must be a non-empty vector")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValidationError("every beta must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alphas", 1.0 - b)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - b))
        object.__setattr__(self, "sigmas", np.sqrt(b))
        if self.timestep_map is not None:
            m = np.asarray(self.timestep_map, dtype=np.int64)
            if m.shape != (b.size,) or np.any(np.diff(m) <= 0) or m[0] < 1:
                raise ValidationError("timestep_map must be strictly increasing 1-indexed steps")
            object.__setattr__(self, "timestep_map", m)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def model_step(self, t: int) -> int:
        """Original 1-indexed step value to feed the denoiser at step t."""
        return int(self.timestep_map[t - 1]) if self.timestep_map is not None else t


def make_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear"
) -> Schedule:
    if T < 1:
        raise ValidationError("schedule needs at least one step")
    if kind == "linear":
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ValidationError(
                "beta range must satisfy 0 < beta_start <= beta_end < 1"
            )
        betas = np.linspace(beta_start, beta_end, T)
    elif kind == "cosine":
        # squared-cosine alpha_bar profile; betas derived from its ratios
        s = 0.008
        ts = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((ts + s) / (1 + s) * np.pi / 2) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-12, 0.999)
    else:
        raise ValidationError(f"unknown schedule kind {kind!r}")
    return Schedule(betas)


def respace_schedule(schedule: Schedule, steps: int) -> Schedule:
    """Sub-sample a schedule to ``steps`` steps preserving alpha_bar values.

    The returned schedule carries a timestep_map so samplers query the
    denoiser with the original step values it was trained on.
    """
    if schedule.timestep_map is not None:
        raise ValidationError("schedule is already respaced")
    if not (1 <= steps <= schedule.T):
        raise ValidationError(f"steps must lie in [1, {schedule.T}]")
    idx = np.unique(np.round(np.linspace(0, schedule.T - 1, steps)).astype(np.int64))
    abar = schedule.alpha_bars[idx]
    prev = np.concatenate([[1.0], abar[:-1]])
    betas = 1.0 - abar / prev
    return Schedule(betas, timestep_map=idx + 1)


def schedule_to_dict(s: Schedule) -> dict:
    d = {"T": s.T, "betas": [float(v) for v in s.betas]}
    if s.timestep_map is not None:
        d["timestep_map"] = [int(v) for v in s.timestep_map]
    return d


def schedule_from_dict(d: dict) -> Schedule:
    try:
        betas = np.array(d["betas"], dtype=np.float64)
        tmap = d.get("timestep_map")
    except (KeyError, TypeError) as e:
        raise ValidationError(f"malformed schedule record: {e}") from e
    return Schedule(betas, timestep_map=None if tmap is None else np.array(tmap))


def save_schedule(path: str, s: Schedule) -> None:
    text = json.dumps(schedule_to_dict(s)) + "\n"
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _check_t(t, T) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > T):
        raise ValidationError(f"step {t} outside [1, {T}]")
    return t


def forward_noise(x0, t, eps, schedule: Schedule):
    """Jump the forward process to step t: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.

    ``t`` may be a scalar or a per-sample vector broadcasting against leading
    axes of ``x0``.
    """
    t = _check_t(t, schedule.T)
    abar = schedule.alpha_bars[t - 1]
    c0 = np.sqrt(abar)
    c1 = np.sqrt(1.0 - abar)
    if np.ndim(t) > 0:
        c0 = c0[..., None]
        c1 = c1[..., None]
    return x0 * c0 + eps * c1


def eps_loss(denoiser, x0: np.ndarray, f: np.ndarray, t: np.ndarray, eps: np.ndarray, schedule: Schedule):
    """Noise-prediction objective for fixed (t, eps) draws.

    Per sample the squared error is summed over coordinates; the loss is the
    batch mean. Shapes: x0 (B, D), f (B, F), t (B,), eps (B, D).
    """
    x_t = forward_noise(x0, t, eps, schedule)
    eps_hat = denoiser.forward(x_t, t, f)
    r = ad.sub(eps, eps_hat)
    return ad.mean_(ad.sum_(r * r, axis=-1))


def training_step(denoiser, x0: np.ndarray, f: np.ndarray, rng: np.random.Generator, schedule: Schedule):
    """Single stochastic objective evaluation with gradients.

    Draws t uniform in {1..T} and eps ~ N(0, I) per sample, evaluates the
    noise-prediction loss, and backpropagates into the denoiser parameters.
    Returns (loss value, gradient dict keyed like the parameter store).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    b = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    denoiser.params.zero_grad()
    with ad.Tape() as tape:
        try:
            loss = eps_loss(denoiser, x0, f, t, eps, schedule)
            value = float(loss.data) if isinstance(loss, ad.Tensor) else float(loss)
            if not np.isfinite(value):
                raise NumericalError("non-finite diffusion loss")
        except NumericalError as e:
            x_t = forward_noise(x0, t, eps, schedule)
            raise NumericalError(
                f"{e} at t={t.tolist()}, |x_t|={np.linalg.norm(x_t):.3e}"
            ) from e
        if isinstance(loss, ad.Tensor):
            tape.backward(loss)
    return value, denoiser.params.gradients()


def sample(
    denoiser,
    f: np.ndarray,
    schedule: Schedule,
    rng: np.random.Generator,
    x_start: np.ndarray | None = None,
) -> np.ndarray:
    """Ancestral sampling from pure noise down to an x0 estimate.

    Walks t = T..1 with x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) eps_hat)/sqrt(alpha_t)
    + sigma_t z, injecting no noise on the final step. ``f`` may be (F,) or
    (B, F); the result matches the leading shape.
    """
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    f2 = np.atleast_2d(f)
    b = f2.shape[0]
    d = denoiser.data_dim
    x = rng.standard_normal((b, d)) if x_start is None else np.atleast_2d(np.asarray(x_start, dtype=np.float64)).copy()
    for t in range(schedule.T, 0, -1):
        beta = schedule.betas[t - 1]
        alpha = schedule.alphas[t - 1]
        abar = schedule.alpha_bars[t - 1]
        t_model = np.full(b, schedule.model_step(t), dtype=np.int64)
        eps_hat = denoiser.forward(x, t_model, f2)
        eps_hat = eps_hat.data if isinstance(eps_hat, ad.Tensor) else np.asarray(eps_hat)
        x = (x - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
        if t > 1:
            x = x + schedule.sigmas[t - 1] * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite sample state at step t={t}")
    return x[0] if single else x


class OracleDenoiser:
    """Denoiser that inverts forward_noise exactly for a known clean pose.

    Useful as a test double: eps(x_t, t) = (x_t - sqrt(abar_t) x0)/sqrt(1-abar_t).
    """

    def __init__(self, x0: np.ndarray, schedule: Schedule):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.schedule = schedule
        self.data_dim = int(self.x0.shape[-1])
        self.params = ad.ParamStore()

    def forward(self, x_t, t, f):
        abar = self.schedule.alpha_bars[np.asarray(t, dtype=np.int64) - 1][..., None]
        return (x_t - np.sqrt(abar) * self.x0) / np.sqrt(1.0 - abar)
