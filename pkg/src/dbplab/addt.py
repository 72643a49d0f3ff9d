"""Adversarial denoising diffusion training.

A perturbation ``delta`` is grown by gradient ascent on a frozen classifier's
loss at the one-step reconstruction, mapped to Gaussian-looking noise by rank
(RBGM), blended into the forward noise, and the denoiser is then trained to
remove the blend.

Images here live in the denoiser's [-1, 1] space; the classifier sees
``(x0_hat + 1) / 2`` without clamping so gradients are never cut.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import kernels, rngtape
from .diffusion import Schedule, forward_diffuse, recover_onestep
from .errors import ConfigError, NumericError, ShapeError
from .nets import Adam, ClassifierNet, DenoiserNet, classifier_forward, cross_entropy, denoiser_forward
from .tensorgrad import Tensor, backward, tsum

# stream steps inside ROLE_CGPO, per sample seed
_INIT_STEP = 0
_EPS_STEP = 100
_EPS_S_STEP = 200
_FINAL_EPS = 300
_FINAL_EPS_S = 301
MAX_CGPO_STEPS = 100


class PerturbationMode(enum.Enum):
    RBGM = "rbgm"
    L2_NORMALIZED = "l2_normalized"
    LINF_PROJECTED = "linf_projected"
    GAUSSIAN_REORDERED = "gaussian_reordered"


class Objective(enum.Enum):
    CLASSIFIER_CE = "classifier_ce"
    RECONSTRUCTION_MSE = "reconstruction_mse"


@dataclass(frozen=True)
class ADDTConfig:
    lambda_unit: float = 0.03
    lambda_min: float = 0.0
    lambda_max: float = 0.3
    cgpo_steps: int = 5
    perturbation_mode: PerturbationMode = PerturbationMode.RBGM
    objective: Objective = Objective.CLASSIFIER_CE
    init_std: float = 1e-2
    # sign-step budget in model space, used only by LINF_PROJECTED
    linf_radius: float = 16 / 255

    def __post_init__(self):
        if not isinstance(self.perturbation_mode, PerturbationMode):
            object.__setattr__(self, "perturbation_mode", PerturbationMode(self.perturbation_mode))
        if not isinstance(self.objective, Objective):
            object.__setattr__(self, "objective", Objective(self.objective))
        if not 0 <= self.lambda_min <= self.lambda_max:
            raise ConfigError("need 0 <= lambda_min <= lambda_max")
        if self.lambda_unit < 0:
            raise ConfigError("lambda_unit must be >= 0")
        if not 0 <= self.cgpo_steps <= MAX_CGPO_STEPS:
            raise ConfigError(f"cgpo_steps must lie in [0, {MAX_CGPO_STEPS}]")
        if self.perturbation_mode is not PerturbationMode.LINF_PROJECTED and self.lambda_max > 1:
            raise ConfigError("lambda_max > 1 is only meaningful for linf_projected")

    @classmethod
    def linf_ablation(cls, **kw) -> "ADDTConfig":
        """Sign-step variant with the wider lambda range it needs."""
        base = dict(lambda_unit=1.0, lambda_min=0.0, lambda_max=10.0,
                    perturbation_mode=PerturbationMode.LINF_PROJECTED)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["perturbation_mode"] = self.perturbation_mode.value
        d["objective"] = self.objective.value
        return d


@dataclass
class Perturbation:
    delta: np.ndarray       # accumulated raw gradient signal
    mapped: np.ndarray      # noise actually injected for training
    objective_trace: list = field(default_factory=list)   # summed objective per CGPO iteration


# -- mappings ------------------------------------------------------------------

def _rows(a: np.ndarray) -> np.ndarray:
    return a.reshape(1, -1) if a.ndim == 1 else a.reshape(a.shape[0], -1)


def rbgm(delta, eps_s) -> np.ndarray:
    """Replace each entry of ``delta`` by the ``eps_s`` order statistic of equal rank.

    Ranks are ascending with ties broken by flat index; a 2-D input is
    processed row by row. The result is a permutation of ``eps_s``.
    """
    delta = np.asarray(getattr(delta, "data", delta), dtype=np.float64)
    eps_s = np.asarray(getattr(eps_s, "data", eps_s), dtype=np.float64)
    if delta.shape != eps_s.shape:
        raise ShapeError(f"rbgm: shapes {delta.shape} and {eps_s.shape} differ")
    d, e = _rows(delta), _rows(eps_s)
    order = kernels.stable_argsort_rows(d)
    out = np.empty_like(e)
    np.put_along_axis(out, order, np.sort(e, axis=1), axis=1)
    return out.reshape(delta.shape)


def _standardize(d: np.ndarray) -> np.ndarray:
    centered = d - d.mean(axis=1, keepdims=True)
    std = centered.std(axis=1, keepdims=True)
    if np.any(std == 0):
        raise NumericError("cannot standardize a constant perturbation")
    return centered / std


def map_perturbation(delta, eps_s, mode: PerturbationMode) -> np.ndarray:
    """Turn accumulated gradients into injected noise according to ``mode``."""
    delta = np.asarray(delta, dtype=np.float64)
    eps_s = np.asarray(eps_s, dtype=np.float64)
    if delta.shape != eps_s.shape:
        raise ShapeError(f"shapes {delta.shape} and {eps_s.shape} differ")
    mode = PerturbationMode(mode)
    if mode is PerturbationMode.RBGM:
        return rbgm(delta, eps_s)
    d, e = _rows(delta), _rows(eps_s)
    if mode is PerturbationMode.L2_NORMALIZED:
        nd = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(nd == 0):
            raise NumericError("zero-norm perturbation cannot be rescaled")
        out = d * (np.linalg.norm(e, axis=1, keepdims=True) / nd)
    elif mode is PerturbationMode.GAUSSIAN_REORDERED:
        # standardized perturbation values, arranged in the rank order of eps_s
        out = rbgm(e, _standardize(d))
    else:
        out = d
    return out.reshape(delta.shape)


# -- schedule and mixing ---------------------------------------------------------

def gamma_t(s: Schedule, t):
    ab = s.abar(t)
    return np.sqrt(ab) / np.sqrt(1.0 - ab)


def lambda_t(s: Schedule, t, cfg: ADDTConfig):
    """clip(gamma_t * lambda_unit, lambda_min, lambda_max) for scalar or per-row ``t``."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > s.T):
        raise ConfigError(f"timestep outside [1, {s.T}]")
    lam = np.clip(gamma_t(s, t) * cfg.lambda_unit, cfg.lambda_min, cfg.lambda_max)
    return float(lam) if np.ndim(lam) == 0 else lam


def _col(v):
    return float(v) if np.ndim(v) == 0 else np.asarray(v, dtype=np.float64).reshape(-1, 1)


def mix_perturbed_input(x0, t, eps, eps_delta, lam, s: Schedule) -> Tensor:
    """sqrt(abar) x0 + sqrt(1 - lam^2) sqrt(1 - abar) eps + lam sqrt(1 - abar) eps_delta.

    ``lam`` may be a scalar or one value per row; ``eps_delta`` may be a
    Tensor so gradients can flow into it.
    """
    lam_arr = np.asarray(lam, dtype=np.float64)
    if np.any(lam_arr < 0) or np.any(lam_arr > 1):
        raise ConfigError("lambda must lie in [0, 1]")
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    ed = eps_delta if isinstance(eps_delta, Tensor) else Tensor(np.asarray(eps_delta, dtype=x0.dtype))
    if ed.shape != x0.shape or np.shape(eps) != x0.shape:
        raise ShapeError("x0, eps and eps_delta must share a shape")
    lam_c = _col(lam_arr)
    noise_scale = np.sqrt(1.0 - lam_c * lam_c)
    base = forward_diffuse(x0, t, np.asarray(eps) * noise_scale, s)
    return base + ed * (lam_c * _col(np.sqrt(1.0 - s.abar(t))))


def mix_additive(x0, t, eps, perturbation, lam, s: Schedule) -> Tensor:
    """Forward noise plus a scaled additive perturbation (sign-step ablation)."""
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    p = perturbation if isinstance(perturbation, Tensor) else Tensor(np.asarray(perturbation, dtype=x0.dtype))
    return forward_diffuse(x0, t, eps, s) + p * (_col(lam) * _col(np.sqrt(1.0 - s.abar(t))))


def _mix(cfg: ADDTConfig, x0, t, eps, eps_delta, lam, s):
    if cfg.perturbation_mode is PerturbationMode.LINF_PROJECTED:
        return mix_additive(x0, t, eps, eps_delta, lam, s)
    return mix_perturbed_input(x0, t, eps, eps_delta, lam, s)


# -- CGPO ----------------------------------------------------------------------------

def _row_seeds(seed, batch: int) -> list:
    if np.ndim(seed) == 0:
        return [rngtape.derive_seed(int(seed), i) for i in range(batch)]
    seeds = [int(v) for v in seed]
    if len(seeds) != batch:
        raise ShapeError("need one seed per row")
    return seeds


def _draw(seeds, step: int, dim: int) -> np.ndarray:
    return rngtape.gaussian_rows(seeds, rngtape.ROLE_CGPO, step, (dim,))


def cgpo_objective(x0, y, t, xt: Tensor, denoiser: DenoiserNet, classifier: Optional[ClassifierNet],
                   cfg: ADDTConfig, s: Schedule) -> Tensor:
    """Summed objective on the one-step reconstruction of ``xt``."""
    x0_hat = recover_onestep(xt, t, denoiser_forward(denoiser, xt, t), s)
    if cfg.objective is Objective.RECONSTRUCTION_MSE:
        diff = x0_hat - Tensor(np.asarray(x0, dtype=xt.dtype))
        return tsum(diff * diff)
    if classifier is None:
        raise ConfigError("classifier-guided objective needs a classifier")
    return cross_entropy(classifier_forward(classifier, (x0_hat + 1.0) * 0.5), y).sum()


def cgpo(x0, y, t, denoiser: DenoiserNet, classifier: Optional[ClassifierNet], cfg: ADDTConfig,
         tape_seed: Union[int, Sequence[int]], s: Schedule) -> Perturbation:
    """Grow an adversarial perturbation for a batch of model-space images.

    Each iteration draws fresh noise, maps ``delta``, builds the mixed input
    and adds the objective's gradient with respect to the mapped noise to
    ``delta`` (the mapping is treated as the identity on the way back).
    ``tape_seed`` is a base seed or one seed per row. The networks' own
    gradients are left untouched.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    b, dim = x0.shape
    seeds = _row_seeds(tape_seed, b)
    lam = lambda_t(s, t, cfg)
    saved = [(p, p.requires_grad) for net in (denoiser, classifier) if net is not None for p in net.parameters()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        if cfg.perturbation_mode is PerturbationMode.LINF_PROJECTED:
            delta = np.zeros((b, dim))
        else:
            delta = cfg.init_std * _draw(seeds, _INIT_STEP, dim)
        trace = []
        for k in range(cfg.cgpo_steps):
            eps = _draw(seeds, _EPS_STEP + k, dim)
            eps_s = _draw(seeds, _EPS_S_STEP + k, dim)
            ed = Tensor(map_perturbation(delta, eps_s, cfg.perturbation_mode), requires_grad=True)
            xt = _mix(cfg, Tensor(x0), t, eps, ed, lam, s)
            objective = cgpo_objective(x0, y, t, xt, denoiser, classifier, cfg, s)
            trace.append(objective.item())
            backward(objective)
            g = ed.grad if ed.grad is not None else np.zeros_like(delta)
            if cfg.perturbation_mode is PerturbationMode.LINF_PROJECTED:
                step = cfg.linf_radius / 4
                delta = np.clip(delta + step * np.sign(g), -cfg.linf_radius, cfg.linf_radius)
            else:
                delta = delta + g
    finally:
        for p, flag in saved:
            p.requires_grad = flag
    eps_s = _draw(seeds, _FINAL_EPS_S, dim)
    return Perturbation(delta, map_perturbation(delta, eps_s, cfg.perturbation_mode), trace)


# -- training ----------------------------------------------------------------------

def addt_loss(denoiser: DenoiserNet, x0, t, eps, eps_delta, lam, s: Schedule,
              cfg: Optional[ADDTConfig] = None) -> Tensor:
    """Summed ||gamma_t (x0 - P(x'_t))||^2, with P the one-step reconstruction.

    The factor sits inside the norm, so at ``lam = 0`` this equals the
    summed noise-prediction loss.
    """
    x0 = x0 if isinstance(x0, Tensor) else Tensor(np.asarray(x0, dtype=denoiser.dtype))
    if cfg is not None and cfg.perturbation_mode is PerturbationMode.LINF_PROJECTED:
        xt = mix_additive(x0, t, eps, eps_delta, lam, s)
    else:
        xt = mix_perturbed_input(x0, t, eps, eps_delta, lam, s)
    x0_hat = recover_onestep(xt, t, denoiser_forward(denoiser, xt, t), s)
    diff = (x0 - x0_hat) * _cast_col(gamma_t(s, t), x0)
    return tsum(diff * diff)


def _cast_col(v, like: Tensor):
    c = _col(v)
    return c if isinstance(c, float) else c.astype(like.dtype)


def addt_train_step(denoiser: DenoiserNet, x0, y, t, classifier: Optional[ClassifierNet], cfg: ADDTConfig,
                    optimizer: Adam, s: Schedule, seed: Union[int, Sequence[int]] = 0) -> float:
    """CGPO followed by one optimizer step on the mean per-sample ADDT loss."""
    return addt_update(denoiser, x0, y, t, classifier, cfg, optimizer, s, seed)[0]


def addt_update(denoiser: DenoiserNet, x0, y, t, classifier: Optional[ClassifierNet], cfg: ADDTConfig,
                optimizer: Adam, s: Schedule, seed: Union[int, Sequence[int]] = 0):
    """Like :func:`addt_train_step` but also returns the CGPO perturbation."""
    x0 = np.asarray(x0, dtype=np.float64)
    seeds = _row_seeds(seed, x0.shape[0])
    pert = cgpo(x0, y, t, denoiser, classifier, cfg, seeds, s)
    eps = _draw(seeds, _FINAL_EPS, x0.shape[1])
    lam = lambda_t(s, t, cfg)
    optimizer.zero_grad()
    loss = addt_loss(denoiser, x0, t, eps, pert.mapped, lam, s, cfg) * (1.0 / x0.shape[0])
    backward(loss)
    optimizer.step()
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError("ADDT loss is not finite")
    return value, pert
