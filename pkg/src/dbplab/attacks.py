"""Gradient attacks on purification pipelines.

Attacks talk to a *pipeline* through three members:

* ``loss_grad(x, y, tape, fresh_seeds) -> (per-sample losses, grad)``
* ``evaluate(x, y, tape) -> (predicted labels, per-sample losses)``
* ``dim`` and ``reverse_count`` (stochastic reverse draws per run)

:class:`~dbplab.purify.DBPPipeline` provides all of them; tests use small
mock pipelines with the same surface.

Every random draw made by an attack is keyed by ``(cfg.seed, step, copy,
sample index)``. Passing the global ``indices`` of a batch slice therefore
gives the same result whether the batch is attacked whole or in chunks.
"""
from __future__ import annotations

import csv
import enum
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import rngtape
from .errors import ConfigError, NumericError, ShapeError
from .rngtape import AttackerTape, Knowledge, KnowledgeSetting, NoiseTape, concat_tapes
from .tensorgrad import dbpt

ROLE_ATTACK = 6
_VICTIM_TAG = 1 << 20
_START_TAG = (1 << 20) + 1
_SEMI_TAG = (1 << 20) + 2


class Norm(enum.Enum):
    LINF = "linf"
    L2 = "l2"


@dataclass(frozen=True)
class AttackConfig:
    norm: Norm = Norm.LINF
    radius: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 20
    eot_samples: int = 1
    knowledge: KnowledgeSetting = rngtape.WHITE_BOX
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.norm, Norm):
            object.__setattr__(self, "norm", Norm(str(self.norm).lower()))
        if isinstance(self.knowledge, str):
            object.__setattr__(self, "knowledge", KnowledgeSetting.parse(self.knowledge))
        if not self.radius > 0:
            raise ConfigError("radius must be > 0")
        if not self.step_size > 0:
            raise ConfigError("step_size must be > 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.eot_samples < 1:
            raise ConfigError("eot_samples must be >= 1")

    def to_dict(self) -> dict:
        return {"norm": self.norm.value, "radius": self.radius, "step_size": self.step_size,
                "steps": self.steps, "eot_samples": self.eot_samples, "knowledge": str(self.knowledge),
                "random_start": self.random_start, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


@dataclass
class AttackReport:
    """Outcome of one attack run over a batch.

    ``trajectory`` holds ``steps + 1`` perturbation snapshots ``x_k - x_0``
    (index 0 is the start). ``losses[k]`` is the attacker-side loss per sample
    at iterate ``k``; ``final_losses`` and ``success`` come from the victim's
    evaluation of the adversarial batch, ``clean_losses`` from its evaluation
    of the clean batch.
    """

    clean: np.ndarray
    adversarial: np.ndarray
    trajectory: List[np.ndarray]
    losses: np.ndarray                 # [steps, B]
    success: np.ndarray                # [B] bool, misclassified by the victim
    final_losses: np.ndarray           # [B]
    grad_records: List[np.ndarray]     # per-step gradient estimates [B, D]
    config: AttackConfig
    setting: str = "white_box"
    clean_losses: Optional[np.ndarray] = None   # [B]

    @property
    def perturbation(self) -> np.ndarray:
        return self.trajectory[-1]

    @property
    def loss_curve(self) -> np.ndarray:
        return self.losses.mean(axis=1)

    @property
    def robust_accuracy(self) -> float:
        return float(1.0 - self.success.mean())

    @property
    def loss_increase(self) -> np.ndarray:
        """Victim loss on the adversarial batch minus victim loss on the clean batch."""
        if self.clean_losses is None:
            raise ConfigError("report has no clean victim losses")
        return self.final_losses - self.clean_losses

    def save(self, path) -> None:
        """``<path>`` holds DBPT records; ``<path>.json`` the metadata."""
        path = Path(path)
        records = [self.clean, self.adversarial, np.stack(self.trajectory), self.losses,
                   self.final_losses, self.success.astype(np.float64)]
        names = ["clean", "adversarial", "trajectory", "losses", "final_losses", "success"]
        if self.clean_losses is not None:
            records.append(self.clean_losses)
            names.append("clean_losses")
        if self.grad_records:
            records.append(np.stack(self.grad_records))
            names.append("grad_records")
        dbpt.save(path, records)
        meta = {"config": self.config.to_dict(), "setting": self.setting,
                "batch": int(self.adversarial.shape[0]), "dim": int(self.adversarial.shape[1]),
                "robust_accuracy": self.robust_accuracy,
                "loss_curve": [float(v) for v in self.loss_curve],
                "records": names}
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "AttackReport":
        meta = json.loads(Path(str(path) + ".json").read_text())
        recs = dict(zip(meta["records"], dbpt.load_all(path)))
        return cls(recs["clean"], recs["adversarial"], list(recs["trajectory"]), recs["losses"],
                   recs["success"].astype(bool), recs["final_losses"],
                   list(recs.get("grad_records", [])), AttackConfig.from_dict(meta["config"]),
                   meta["setting"], recs.get("clean_losses"))


def concat_reports(reports: Sequence[AttackReport]) -> AttackReport:
    """Join reports for consecutive batch slices of the same attack."""
    first = reports[0]
    cat = np.concatenate
    return AttackReport(
        clean=cat([r.clean for r in reports]),
        adversarial=cat([r.adversarial for r in reports]),
        trajectory=[cat([r.trajectory[k] for r in reports]) for k in range(len(first.trajectory))],
        losses=cat([r.losses for r in reports], axis=1),
        success=cat([r.success for r in reports]),
        final_losses=cat([r.final_losses for r in reports]),
        grad_records=[cat([r.grad_records[k] for r in reports]) for k in range(len(first.grad_records))],
        config=first.config,
        setting=first.setting,
        clean_losses=None if first.clean_losses is None else cat([r.clean_losses for r in reports]),
    )


# -- projection ----------------------------------------------------------------

def _row_norms(d: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(d * d, axis=1, keepdims=True))


def project(x: np.ndarray, x0: np.ndarray, norm: Norm, radius: float) -> np.ndarray:
    """Map ``x`` into the ``radius`` ball around ``x0`` and then the [0, 1] box.

    Clipping to the box only shrinks each coordinate of ``x - x0`` (``x0``
    lies in the box), so the result stays inside the ball.
    """
    d = x - x0
    if norm is Norm.LINF:
        d = np.clip(d, -radius, radius)
    else:
        n = _row_norms(d)
        scale = np.where(n > radius, radius / np.maximum(n, 1e-300), 1.0)
        d = d * scale
    return np.clip(x0 + d, 0.0, 1.0)


def step_direction(g: np.ndarray, norm: Norm) -> np.ndarray:
    if norm is Norm.LINF:
        return np.sign(g)
    n = _row_norms(g)
    return np.where(n > 0, g / np.where(n > 0, n, 1.0), 0.0)


def perturbation_norm(d: np.ndarray, norm: Norm) -> np.ndarray:
    if norm is Norm.LINF:
        return np.max(np.abs(d), axis=1)
    return _row_norms(d)[:, 0]


# -- gradient estimation -----------------------------------------------------------

def _indices(indices, batch: int) -> np.ndarray:
    return np.arange(batch) if indices is None else np.asarray(indices, dtype=np.int64)


def blind_tape(pipeline, batch: int) -> AttackerTape:
    """Attacker view with no known draws (the white-box setting)."""
    return AttackerTape((pipeline.dim,), batch, pipeline.reverse_count)


def estimate_gradient(pipeline, x: np.ndarray, y: np.ndarray, atape: AttackerTape, n: int,
                      seed: int, step: int, indices) -> Tuple[np.ndarray, np.ndarray]:
    """Mean loss and mean gradient over ``n`` realisations of ``atape``.

    The copies run as one stacked batch (copy-major). A fully known tape has
    a single realisation, so it is evaluated once whatever ``n`` is.
    """
    b = x.shape[0]
    idx = _indices(indices, b)
    if atape.fully_known:
        losses, g = pipeline.loss_grad(x, y, atape.realize())
        return losses, g
    seeds = [rngtape.derive_seed(seed, step, j, int(i)) for j in range(n) for i in idx]
    losses, g = pipeline.loss_grad(np.concatenate([x] * n), np.concatenate([y] * n), atape.repeat(n), seeds)
    return losses.reshape(n, b).sum(0) / n, g.reshape(n, b, -1).sum(0) / n


def eot_gradient(x, y, n: int, pipeline, seed: int = 0, tape: Optional[AttackerTape] = None,
                 indices=None, step: int = 0) -> np.ndarray:
    """Mean of ``n`` loss gradients, each under a fresh draw of every unknown entry.

    ``tape`` pins known entries (default: nothing known).
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    atape = tape if tape is not None else blind_tape(pipeline, x.shape[0])
    return estimate_gradient(pipeline, x, np.asarray(y), atape, n, seed, step, indices)[1]


def semi_gradient(pipeline, x: np.ndarray, y: np.ndarray, tapes: Sequence[NoiseTape]):
    """Exact average of the loss gradient over a finite tape set (shared by all rows)."""
    b, k = x.shape[0], len(tapes)
    stacked = concat_tapes([t.repeat(b) for t in tapes])
    losses, g = pipeline.loss_grad(np.concatenate([x] * k), np.concatenate([y] * k), stacked)
    return losses.reshape(k, b).sum(0) / k, g.reshape(k, b, -1).sum(0) / k


# -- PGD core ------------------------------------------------------------------------

def _check_budget(cfg: AttackConfig) -> None:
    if cfg.step_size > cfg.radius:
        warnings.warn("step_size exceeds radius; every step saturates the budget", stacklevel=3)
    if cfg.step_size * cfg.steps < cfg.radius:
        warnings.warn("steps * step_size cannot reach the radius", stacklevel=3)


def _random_start(x0: np.ndarray, cfg: AttackConfig, idx: np.ndarray) -> np.ndarray:
    d = x0.shape[1]
    rows = []
    for i in idx:
        s = rngtape.derive_seed(cfg.seed, _START_TAG, int(i))
        if cfg.norm is Norm.LINF:
            rows.append((2 * rngtape.uniform(s, ROLE_ATTACK, 0, d) - 1) * cfg.radius)
        else:
            g = rngtape.gaussian(s, ROLE_ATTACK, 1, d)
            r = cfg.radius * rngtape.uniform(s, ROLE_ATTACK, 2, 1)[0] ** (1.0 / d)
            rows.append(g / np.linalg.norm(g) * r)
    return project(x0 + np.stack(rows), x0, cfg.norm, cfg.radius)


def pgd_loop(x, y, cfg: AttackConfig, grad_fn, victim_eval, indices=None,
             setting: str = "white_box", record_grads: bool = True) -> AttackReport:
    """Projected gradient ascent with a pluggable gradient oracle.

    ``grad_fn(x_k, k) -> (losses, grad)`` and ``victim_eval(x) -> (pred, losses)``.
    """
    x0 = np.asarray(x, dtype=np.float64)
    if x0.ndim != 2:
        raise ShapeError(f"attacks expect [B, D] input, got {x0.shape}")
    if np.any(x0 < 0) or np.any(x0 > 1):
        raise ConfigError("clean inputs must lie in [0, 1]")
    y = np.asarray(y)
    _check_budget(cfg)
    idx = _indices(indices, x0.shape[0])
    _, clean_losses = victim_eval(x0)
    xk = _random_start(x0, cfg, idx) if cfg.random_start else x0.copy()
    trajectory = [xk - x0]
    losses, grads = [], []
    for k in range(cfg.steps):
        loss, g = grad_fn(xk, k)
        losses.append(loss)
        if record_grads:
            grads.append(g)
        xk = project(xk + cfg.step_size * step_direction(g, cfg.norm), x0, cfg.norm, cfg.radius)
        trajectory.append(xk - x0)
    pred, final = victim_eval(xk)
    return AttackReport(x0, xk, trajectory, np.stack(losses), pred != y, final, grads, cfg, setting,
                        clean_losses)


def default_victim_tape(pipeline, cfg: AttackConfig, indices) -> NoiseTape:
    return rngtape.record_tapes([rngtape.derive_seed(cfg.seed, _VICTIM_TAG, int(i)) for i in indices],
                                (pipeline.dim,), pipeline.reverse_count)


def pgd(x, y, cfg: AttackConfig, pipeline, victim_tape: Optional[NoiseTape] = None,
        indices=None, record_grads: bool = True) -> AttackReport:
    """White-box PGD(+EoT): every draw is unknown and resampled each step.

    Success is judged on ``victim_tape`` (drawn from ``cfg.seed`` when omitted).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    idx = _indices(indices, x.shape[0])
    atape = blind_tape(pipeline, x.shape[0])
    victim = victim_tape if victim_tape is not None else default_victim_tape(pipeline, cfg, idx)

    def grad_fn(xk, k):
        return estimate_gradient(pipeline, xk, y, atape, cfg.eot_samples, cfg.seed, k, idx)

    return pgd_loop(x, y, cfg, grad_fn, lambda xa: pipeline.evaluate(xa, y, victim), idx,
                    "white_box", record_grads)


def fgsm(x, y, cfg: AttackConfig, pipeline, victim_tape: Optional[NoiseTape] = None,
         indices=None, tape: Optional[AttackerTape] = None) -> AttackReport:
    """Single full-budget step: ``x + radius * dir``, projected."""
    one = AttackConfig(cfg.norm, cfg.radius, cfg.radius, 1, cfg.eot_samples, cfg.knowledge, False, cfg.seed)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    idx = _indices(indices, x.shape[0])
    atape = tape if tape is not None else blind_tape(pipeline, x.shape[0])
    victim = victim_tape if victim_tape is not None else default_victim_tape(pipeline, cfg, idx)

    def grad_fn(xk, k):
        return estimate_gradient(pipeline, xk, y, atape, one.eot_samples, one.seed, k, idx)

    return pgd_loop(x, y, one, grad_fn, lambda xa: pipeline.evaluate(xa, y, victim), idx, str(cfg.knowledge))


def dw_attack(x, y, victim_tape: NoiseTape, setting: KnowledgeSetting, cfg: AttackConfig, pipeline,
              indices=None, record_grads: bool = True) -> AttackReport:
    """PGD with the victim's draws partly or fully known.

    Known entries are pinned to ``victim_tape``; unknown ones are redrawn
    every step (averaged over ``cfg.eot_samples`` draws). Success is judged
    on the true ``victim_tape``.
    """
    if setting.kind is Knowledge.WHITE_BOX:
        raise ConfigError("white-box setting: use pgd")
    if setting.kind is Knowledge.DW_SEMI:
        raise ConfigError("DW_semi setting: use dw_semi_attack")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    idx = _indices(indices, x.shape[0])
    if victim_tape.batch != x.shape[0]:
        raise ShapeError("victim tape batch does not match input batch")
    atape = rngtape.knowledge_view(victim_tape, setting)

    def grad_fn(xk, k):
        return estimate_gradient(pipeline, xk, y, atape, cfg.eot_samples, cfg.seed, k, idx)

    return pgd_loop(x, y, cfg, grad_fn, lambda xa: pipeline.evaluate(xa, y, victim_tape), idx,
                    str(setting), record_grads)


def semi_victim_tape(tapes: Sequence[NoiseTape], seed: int, indices) -> NoiseTape:
    """Victim rows each pick one tape of the set uniformly, keyed by sample index."""
    k = len(tapes)
    picks = [min(int(rngtape.uniform(rngtape.derive_seed(seed, _SEMI_TAG, int(i)), ROLE_ATTACK, 0, 1)[0] * k),
                 k - 1) for i in indices]
    return concat_tapes([tapes[p] for p in picks])


def dw_semi_attack(x, y, tapes: Sequence[NoiseTape], cfg: AttackConfig, pipeline, indices=None,
                   victim_tape: Optional[NoiseTape] = None, record_grads: bool = True) -> AttackReport:
    """Attack a victim restricted to a finite tape set.

    The gradient is the exact average over all tapes in the set; the victim
    (unless ``victim_tape`` is given) uses one tape per sample drawn uniformly.
    """
    if not tapes:
        raise ConfigError("DW_semi needs a non-empty tape set")
    if any(t.batch != 1 for t in tapes):
        raise ShapeError("DW_semi tapes must be single-image tapes")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    idx = _indices(indices, x.shape[0])
    victim = victim_tape if victim_tape is not None else semi_victim_tape(tapes, cfg.seed, idx)

    def grad_fn(xk, k):
        return semi_gradient(pipeline, xk, y, tapes)

    return pgd_loop(x, y, cfg, grad_fn, lambda xa: pipeline.evaluate(xa, y, victim), idx,
                    f"dw_semi-{len(tapes)}", record_grads)


def run_attack(x, y, cfg: AttackConfig, pipeline, victim_tape: NoiseTape, indices=None,
               semi_tapes: Optional[Sequence[NoiseTape]] = None, record_grads: bool = True) -> AttackReport:
    """Dispatch on ``cfg.knowledge``."""
    kind = cfg.knowledge.kind
    if kind is Knowledge.WHITE_BOX:
        return pgd(x, y, cfg, pipeline, victim_tape, indices, record_grads)
    if kind is Knowledge.DW_SEMI:
        if semi_tapes is None:
            semi_tapes = rngtape.sample_semi_set(cfg.knowledge.k, rngtape.derive_seed(cfg.seed, _SEMI_TAG),
                                                 (pipeline.dim,), pipeline.reverse_count)
        return dw_semi_attack(x, y, semi_tapes, cfg, pipeline, indices, record_grads=record_grads)
    return dw_attack(x, y, victim_tape, cfg.knowledge, cfg, pipeline, indices, record_grads)


# -- analysis ------------------------------------------------------------------------

def gradient_similarity(g1, g2, per_sample: bool = False):
    """Cosine similarity of two directions (flattened), or per batch row."""
    a = np.asarray(getattr(g1, "data", g1), dtype=np.float64)
    b = np.asarray(getattr(g2, "data", g2), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes {a.shape} and {b.shape} differ")
    if per_sample:
        a2, b2 = a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)
        na, nb = np.linalg.norm(a2, axis=1), np.linalg.norm(b2, axis=1)
        if np.any(na == 0) or np.any(nb == 0):
            raise NumericError("cosine similarity of a zero vector")
        return np.clip(np.sum(a2 * b2, axis=1) / (na * nb), -1.0, 1.0)
    a, b = a.ravel(), b.ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class Grid:
    """Loss over the plane ``x + a u1 + b u2`` with orthonormal ``u1, u2``."""

    coords: np.ndarray          # [resolution] values of a (and b)
    losses: np.ndarray          # [resolution (a), resolution (b)]
    origin: np.ndarray
    u1: np.ndarray
    u2: np.ndarray

    def base_loss(self) -> float:
        mid = len(self.coords) // 2
        return float(self.losses[mid, mid])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["a", "b", "loss"])
            for i, a in enumerate(self.coords):
                for j, b in enumerate(self.coords):
                    w.writerow([repr(float(a)), repr(float(b)), repr(float(self.losses[i, j]))])

    def project(self, deltas: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        """Plane coordinates of perturbations and their distance from the plane."""
        d = np.stack([np.asarray(v, dtype=np.float64).ravel() for v in deltas])
        ab = np.stack([d @ self.u1, d @ self.u2], axis=1)
        resid = np.linalg.norm(d - ab[:, :1] * self.u1 - ab[:, 1:] * self.u2, axis=1)
        return ab, resid


def orthonormal_plane(dir1, dir2, tol: float = 1e-9) -> Tuple[np.ndarray, np.ndarray]:
    """Unit ``dir1`` and the unit component of ``dir2`` orthogonal to it."""
    d1 = np.asarray(dir1, dtype=np.float64).ravel()
    d2 = np.asarray(dir2, dtype=np.float64).ravel()
    n1 = np.linalg.norm(d1)
    if n1 == 0:
        raise NumericError("first direction is zero")
    u1 = d1 / n1
    r = d2 - (d2 @ u1) * u1
    n2 = np.linalg.norm(r)
    if n2 <= tol * max(np.linalg.norm(d2), 1e-300):
        raise NumericError("directions are parallel; the plane is degenerate")
    u2 = r / n2
    # one re-orthogonalisation pass removes the residual dot product
    u2 = u2 - (u2 @ u1) * u1
    return u1, u2 / np.linalg.norm(u2)


def grid_coords(extent: float, resolution: int) -> np.ndarray:
    if resolution < 2:
        raise ConfigError("resolution must be >= 2")
    i = np.arange(resolution)
    return extent * (2 * i - (resolution - 1)) / (resolution - 1)


def landscape_grid(x, y, dir1, dir2, extent: float, resolution: int, pipeline, tape: NoiseTape,
                   batch: int = 256) -> Grid:
    """Per-point loss of one sample over a 2-D slice, under a fixed tape.

    Use an odd ``resolution`` so the centre point is the clean input itself.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    u1, u2 = orthonormal_plane(dir1, dir2)
    coords = grid_coords(extent, resolution)
    aa, bb = np.meshgrid(coords, coords, indexing="ij")
    pts = x[None, :] + aa.reshape(-1, 1) * u1[None, :] + bb.reshape(-1, 1) * u2[None, :]
    ys = np.full(len(pts), int(np.asarray(y).ravel()[0]))
    out = np.empty(len(pts))
    for s in range(0, len(pts), batch):
        rows = slice(s, s + batch)
        n = len(pts[rows])
        out[rows] = pipeline.evaluate(pts[rows], ys[rows], tape.repeat(n))[1]
    return Grid(coords, out.reshape(resolution, resolution), x, u1, u2)


def save_trajectories(path, grid: Grid, trajectories: dict) -> None:
    """JSON with plane coordinates (and off-plane residuals) for named trajectories."""
    payload = {}
    for name, deltas in trajectories.items():
        ab, resid = grid.project(deltas)
        payload[name] = {"a": [float(v) for v in ab[:, 0]], "b": [float(v) for v in ab[:, 1]],
                         "residual": [float(v) for v in resid]}
    Path(path).write_text(json.dumps(payload, indent=2))
