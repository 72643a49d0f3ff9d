"""Noise schedules, the forward process, DDPM/DDIM reverse steps and the training loss.

All step functions accept a :class:`~dbplab.tensorgrad.Tensor` for the image
and differentiate through it; noise arguments may be plain arrays. ``t`` is
an int, or an integer array with one timestep per batch row.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Union

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .tensorgrad import Tensor, tsum

Timestep = Union[int, np.ndarray]
MAX_DEFAULT_BETA = 0.5


@dataclass(frozen=True)
class Schedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.beta) != self.T or len(self.alpha_bar) != self.T:
            raise ConfigError("schedule arrays must have length T")

    def abar(self, t: Timestep):
        """Cumulative alpha at ``t`` with the convention abar(0) = 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ConfigError(f"timestep outside [0, {self.T}]")
        full = np.concatenate([[1.0], self.alpha_bar])
        out = full[t]
        return float(out) if out.ndim == 0 else out

    def beta_at(self, t: Timestep):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ConfigError(f"timestep outside [1, {self.T}]")
        out = self.beta[t - 1]
        return float(out) if out.ndim == 0 else out

    def to_json(self) -> str:
        return json.dumps({"T": self.T, "beta": [float(b) for b in self.beta]})

    @classmethod
    def from_json(cls, text: str) -> "Schedule":
        obj = json.loads(text)
        return schedule_from_betas(obj["beta"], T=obj["T"])


def schedule_from_betas(beta: Sequence[float], T: int = None) -> Schedule:
    beta = np.asarray(beta, dtype=np.float64)
    if T is not None and T != len(beta):
        raise ConfigError("T does not match beta length")
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ConfigError("betas must lie in (0, 1)")
    if np.any(np.diff(beta) < 0):
        raise ConfigError("betas must be non-decreasing")
    return Schedule(len(beta), beta, np.cumprod(1.0 - beta))


def make_linear_schedule(T: int, beta_start: float = None, beta_end: float = None) -> Schedule:
    """Linear betas. Defaults are the usual (1e-4, 0.02) pair rescaled by 1000/T,
    capped at ``MAX_DEFAULT_BETA`` for very short schedules."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    scale = 1000.0 / T
    beta_start = min(1e-4 * scale, MAX_DEFAULT_BETA) if beta_start is None else beta_start
    beta_end = min(0.02 * scale, MAX_DEFAULT_BETA) if beta_end is None else beta_end
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    return schedule_from_betas(beta)


class Sampler(enum.Enum):
    DDPM = "ddpm"
    DDIM = "ddim"


def nfe_subsequence(t_star: int, nfe: int) -> List[int]:
    """Evenly spaced descending timesteps from ``t_star`` to 0 with ``nfe`` evaluations."""
    if nfe < 1:
        raise ConfigError("nfe must be >= 1")
    if nfe > t_star:
        raise ConfigError(f"nfe={nfe} exceeds t_star={t_star}")
    # round-half-up in integer arithmetic keeps the list strictly decreasing
    return [(2 * t_star * (nfe - i) + nfe) // (2 * nfe) for i in range(nfe + 1)]


@dataclass(frozen=True)
class PurifyConfig:
    sampler: Sampler
    t_star: int
    step_list: tuple

    def __post_init__(self):
        steps = self.step_list
        if not steps or steps[0] != self.t_star or steps[-1] != 0:
            raise ConfigError("step_list must start at t_star and end at 0")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ConfigError("step_list must be strictly decreasing")

    @classmethod
    def make(cls, sampler, t_star: int, nfe: int = None) -> "PurifyConfig":
        sampler = Sampler(sampler) if not isinstance(sampler, Sampler) else sampler
        if t_star == 0:
            return cls(sampler, 0, (0,))
        return cls(sampler, t_star, tuple(nfe_subsequence(t_star, nfe or t_star)))

    @classmethod
    def default(cls, schedule: Schedule, sampler="ddpm", nfe: int = None) -> "PurifyConfig":
        return cls.make(sampler, int(round(0.1 * schedule.T)), nfe)

    @property
    def transitions(self):
        return list(zip(self.step_list, self.step_list[1:]))

    @property
    def nfe(self) -> int:
        return len(self.step_list) - 1

    @property
    def stochastic_steps(self) -> int:
        """Reverse draws consumed: DDPM adds noise on every transition that does not land on 0."""
        if self.sampler is Sampler.DDIM:
            return 0
        return sum(1 for _, prev in self.transitions if prev > 0)


# -- process steps -------------------------------------------------------------

def _coef(value):
    if np.ndim(value) == 0:
        return float(value)
    return np.asarray(value, dtype=np.float64).reshape(-1, 1)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _cast(c, like: Tensor):
    return c if isinstance(c, float) else c.astype(like.dtype)


def _check_same_shape(a, b, what):
    if tuple(np.shape(getattr(a, "data", a))) != tuple(np.shape(getattr(b, "data", b))):
        raise ShapeError(f"{what}: shapes {np.shape(getattr(a, 'data', a))} and "
                         f"{np.shape(getattr(b, 'data', b))} differ")


def _check_t(t, s: Schedule, lo: int = 1):
    if np.any(np.asarray(t) < lo) or np.any(np.asarray(t) > s.T):
        raise ConfigError(f"timestep outside [{lo}, {s.T}]")


def forward_diffuse(x0, t: Timestep, eps, s: Schedule) -> Tensor:
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.  ``t = 0`` returns x0."""
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    _check_same_shape(x0, eps, "forward_diffuse")
    _check_t(t, s, lo=0)
    ab = _coef(s.abar(t))
    return x0 * _cast(np.sqrt(ab), x0) + _const(eps, x0) * _cast(np.sqrt(1.0 - ab), x0)


def recover_onestep(xt, t: Timestep, eps_pred, s: Schedule) -> Tensor:
    """Single-step estimate of x0 from x_t and predicted noise."""
    xt = xt if isinstance(xt, Tensor) else Tensor(xt)
    _check_same_shape(xt, eps_pred, "recover_onestep")
    _check_t(t, s, lo=0)
    ab = _coef(s.abar(t))
    if np.any(np.asarray(ab) < 1e-12):
        raise NumericError("alpha_bar below 1e-12; one-step recovery is ill-conditioned")
    return (xt - _const(eps_pred, xt) * _cast(np.sqrt(1.0 - ab), xt)) * _cast(1.0 / np.sqrt(ab), xt)


def ddpm_reverse_step(xt, t: int, eps_pred, eps, s: Schedule, t_prev: int = None) -> Tensor:
    """One stochastic reverse step from ``t`` to ``t_prev`` (default ``t - 1``).

    For skipped steps the effective beta is ``1 - abar_t / abar_prev``. The
    additive noise term is dropped when landing on 0, and ``eps`` may then be None.
    """
    xt = xt if isinstance(xt, Tensor) else Tensor(xt)
    _check_same_shape(xt, eps_pred, "ddpm_reverse_step")
    _check_t(t, s)
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ConfigError("need 0 <= t_prev < t")
    if t_prev == t - 1:
        beta = s.beta_at(t)
    else:
        beta = 1.0 - s.abar(t) / s.abar(t_prev)
    ab = s.abar(t)
    mean = (xt - _const(eps_pred, xt) * (beta / np.sqrt(1.0 - ab))) * (1.0 / np.sqrt(1.0 - beta))
    if t_prev == 0:
        return mean
    if eps is None:
        raise ConfigError("ddpm_reverse_step needs reverse noise for t_prev > 0")
    _check_same_shape(xt, eps, "ddpm_reverse_step")
    return mean + _const(eps, xt) * np.sqrt(beta)


def ddim_reverse_step(xt, t: int, t_prev: int, eps_pred, s: Schedule) -> Tensor:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``."""
    if not 0 <= t_prev < t:
        raise ConfigError("need 0 <= t_prev < t")
    x0_hat = recover_onestep(xt, t, eps_pred, s)
    ab_prev = s.abar(t_prev)
    if ab_prev == 1.0:
        return x0_hat
    return x0_hat * np.sqrt(ab_prev) + _const(eps_pred, x0_hat) * np.sqrt(1.0 - ab_prev)


def diffusion_loss(model: Callable[[Tensor, Timestep], Tensor], x0, t: Timestep, eps, s: Schedule) -> Tensor:
    """Squared error between the true noise and ``model(x_t, t)``, summed over all elements."""
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    xt = forward_diffuse(x0, t, eps, s)
    diff = _const(eps, xt) - model(xt, t)
    return tsum(diff * diff)
