"""Diffusion-based purification: diffuse to t*, reverse-sample, clamp, classify."""
from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from . import rngtape
from .diffusion import PurifyConfig, Sampler, Schedule, ddim_reverse_step, ddpm_reverse_step, forward_diffuse
from .errors import ConfigError, DeterminismError, ShapeError
from .nets import ClassifierNet, DenoiserNet, classifier_forward, cross_entropy, denoiser_forward
from .parallel import concat, map_chunks
from .rngtape import AttackerTape, NoiseTape
from .tensorgrad import Tensor, backward, checkpoint_segment, no_grad

AnyTape = Union[NoiseTape, AttackerTape]


def to_model_space(x: Tensor) -> Tensor:
    return x * 2.0 - 1.0


def to_pixel_space(z: Tensor) -> Tensor:
    return (z + 1.0) * 0.5


def _resolve_tape(tape: AnyTape, cfg: PurifyConfig, batch: int, fresh_seeds) -> NoiseTape:
    if isinstance(tape, AttackerTape):
        tape = tape.realize(fresh_seeds)
    if tape.reverse_count != cfg.stochastic_steps:
        raise DeterminismError(
            f"tape holds {tape.reverse_count} reverse draws but the sampler needs {cfg.stochastic_steps}")
    if tape.batch != batch:
        raise DeterminismError(f"tape batch {tape.batch} does not match input batch {batch}")
    return tape


def purify(x, cfg: PurifyConfig, tape: AnyTape, s: Schedule, net: DenoiserNet,
           fresh_seeds: Optional[Sequence[int]] = None, checkpoint: bool = False) -> Tensor:
    """Purify a batch ``x`` of flattened images in [0, 1].

    ``tape`` supplies every Gaussian draw; an :class:`AttackerTape` with
    unknown entries additionally needs ``fresh_seeds`` (one per row). With
    ``checkpoint=True`` each reverse step is recomputed on backward instead
    of being stored.
    """
    x = x if isinstance(x, Tensor) else Tensor(x, dtype=net.dtype)
    if x.ndim != 2:
        raise ShapeError(f"purify expects [B, D] input, got {x.shape}")
    tape = _resolve_tape(tape, cfg, x.shape[0], fresh_seeds)
    if tape.forward_noise.shape != x.shape:
        raise ShapeError(f"tape image shape {tape.forward_noise.shape} differs from input {x.shape}")
    if cfg.t_star == 0:
        return x.clamp(0.0, 1.0)

    z = forward_diffuse(to_model_space(x), cfg.t_star, tape.forward_noise, s)
    k = 0
    for t, t_prev in cfg.transitions:
        if cfg.sampler is Sampler.DDPM:
            noise = None
            if t_prev > 0:
                noise = tape.reverse_noises[k]
                k += 1

            def step(zt, t=t, t_prev=t_prev, noise=noise):
                return ddpm_reverse_step(zt, t, denoiser_forward(net, zt, t), noise, s, t_prev=t_prev)
        else:
            def step(zt, t=t, t_prev=t_prev):
                return ddim_reverse_step(zt, t, t_prev, denoiser_forward(net, zt, t), s)

        z = checkpoint_segment(step, z) if checkpoint else step(z)
    return to_pixel_space(z).clamp(0.0, 1.0)


class DBPPipeline:
    """Purifier + classifier bundled with the schedule and sampler settings.

    This is the object attacks differentiate through. Frozen networks should
    have ``requires_grad`` switched off so that only the input collects
    gradients.
    """

    def __init__(self, schedule: Schedule, cfg: PurifyConfig, denoiser: DenoiserNet,
                 classifier: ClassifierNet, checkpoint: bool = False):
        if denoiser.dim != classifier.dim:
            raise ConfigError("denoiser and classifier disagree on image size")
        self.schedule, self.cfg = schedule, cfg
        self.denoiser, self.classifier = denoiser, classifier
        self.checkpoint = checkpoint

    @property
    def dim(self) -> int:
        return self.classifier.dim

    @property
    def dtype(self):
        return self.classifier.dtype

    @property
    def reverse_count(self) -> int:
        return self.cfg.stochastic_steps

    @property
    def stochastic(self) -> bool:
        return self.cfg.t_star > 0

    def victim_tape(self, seeds: Sequence[int]) -> NoiseTape:
        return rngtape.record_tapes(seeds, (self.dim,), self.cfg.stochastic_steps)

    def logits(self, x, tape: AnyTape, fresh_seeds=None) -> Tensor:
        xp = purify(x, self.cfg, tape, self.schedule, self.denoiser, fresh_seeds, self.checkpoint)
        return classifier_forward(self.classifier, xp)

    def losses(self, x: np.ndarray, y, tape: AnyTape, fresh_seeds=None) -> np.ndarray:
        with no_grad():
            return cross_entropy(self.logits(x, tape, fresh_seeds), y).data.copy()

    def predict(self, x: np.ndarray, tape: AnyTape, fresh_seeds=None) -> np.ndarray:
        with no_grad():
            return np.argmax(self.logits(x, tape, fresh_seeds).data, axis=1)

    def evaluate(self, x: np.ndarray, y, tape: AnyTape, fresh_seeds=None) -> Tuple[np.ndarray, np.ndarray]:
        """Predicted labels and per-sample losses in one pass."""
        with no_grad():
            logits = self.logits(x, tape, fresh_seeds)
            return np.argmax(logits.data, axis=1), cross_entropy(logits, y).data.copy()

    def loss_grad(self, x: np.ndarray, y, tape: AnyTape, fresh_seeds=None) -> Tuple[np.ndarray, np.ndarray]:
        """Per-sample losses and the gradient of their sum with respect to ``x``."""
        xt = Tensor(np.asarray(x, dtype=self.dtype), requires_grad=True)
        per_sample = cross_entropy(self.logits(xt, tape, fresh_seeds), y)
        backward(per_sample.sum())
        return per_sample.data.copy(), xt.grad


def classify_purified(x, cfg: PurifyConfig, tape: AnyTape, s: Schedule,
                      nets: Tuple[DenoiserNet, ClassifierNet], y=None, fresh_seeds=None):
    """Labels of the purified batch and, when ``y`` is given, per-sample cross-entropy."""
    pipe = DBPPipeline(s, cfg, nets[0], nets[1])
    x = np.asarray(getattr(x, "data", x))
    if y is None:
        return pipe.predict(x, tape, fresh_seeds), None
    return pipe.evaluate(x, y, tape, fresh_seeds)


def eval_seeds(seed: int, round_index: int, rows: np.ndarray) -> list:
    return [rngtape.derive_seed(seed, round_index, int(i)) for i in rows]


def repeated_eval_accuracy(x_adv: np.ndarray, labels, pipeline: DBPPipeline, k: int, seed: int = 0,
                           tape: Optional[NoiseTape] = None, chunk_size: int = 64, workers: int = 1) -> float:
    """Worst-of-k robust accuracy.

    A sample counts only if it is classified correctly in all ``k``
    evaluations. Each evaluation draws fresh tapes keyed by
    ``(seed, round, sample index)`` unless a fixed ``tape`` is given.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    x_adv = np.asarray(x_adv)
    labels = np.asarray(labels)

    def run(rows):
        ok = np.ones(len(rows), dtype=bool)
        for r in range(k):
            t = tape.select(rows) if tape is not None else pipeline.victim_tape(eval_seeds(seed, r, rows))
            ok &= pipeline.predict(x_adv[rows], t) == labels[rows]
        return ok

    robust = concat(map_chunks(run, len(labels), chunk_size, workers))
    return float(robust.mean())
