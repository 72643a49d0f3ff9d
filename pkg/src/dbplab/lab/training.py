"""Training loops for the toy classifier and the noise predictor."""
from __future__ import annotations

import logging
from typing import List, Tuple

import numpy as np

from .. import rngtape
from ..diffusion import Schedule, diffusion_loss
from ..errors import TrainingError
from ..nets import Adam, ClassifierNet, DenoiserNet, classifier_forward, cross_entropy, denoiser_forward
from ..tensorgrad import Tensor, backward, no_grad

log = logging.getLogger(__name__)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.argsort(rngtape.uniform(seed, rngtape.ROLE_TRAIN, 1000 + epoch, n), kind="stable")


def _check(loss: float, what: str) -> None:
    if not np.isfinite(loss):
        raise TrainingError(f"{what} diverged (loss={loss})")


def train_classifier(x: np.ndarray, y: np.ndarray, num_classes: int, epochs: int = 30,
                     batch_size: int = 64, lr: float = 1e-3, seed: int = 0,
                     net: ClassifierNet = None, noise_aug: float = 0.0) -> Tuple[ClassifierNet, List[float]]:
    """Minibatch Adam on cross-entropy. Returns the net and per-epoch mean loss.

    ``noise_aug > 0`` adds seeded Gaussian pixel noise of that std to each batch.
    """
    net = net or ClassifierNet(x.shape[1], num_classes, seed=seed)
    net.requires_grad_(True)
    opt = Adam(net.parameters(), lr=lr)
    curve = []
    for epoch in range(epochs):
        order = epoch_order(seed, epoch, len(x))
        total = 0.0
        for start in range(0, len(x), batch_size):
            rows = order[start:start + batch_size]
            xb = x[rows]
            if noise_aug > 0:
                xb = xb + noise_aug * rngtape.gaussian(rngtape.derive_seed(seed, epoch), rngtape.ROLE_TRAIN,
                                                       start, xb.shape)
            opt.zero_grad()
            loss = cross_entropy(classifier_forward(net, Tensor(xb)), y[rows]).mean()
            backward(loss)
            opt.step()
            total += loss.item() * len(rows)
        curve.append(total / len(x))
        _check(curve[-1], "classifier training")
        log.info("classifier epoch %d loss %.4f", epoch, curve[-1])
    return net, curve


def noise_batch(seed: int, epoch: int, step: int, rows: np.ndarray, T: int, dim: int):
    """Timesteps and Gaussian noise for one training batch, keyed by sample index."""
    ts = np.empty(len(rows), dtype=np.int64)
    eps = np.empty((len(rows), dim))
    for j, i in enumerate(rows):
        s = rngtape.derive_seed(seed, epoch, int(i))
        ts[j] = 1 + int(rngtape.uniform(s, rngtape.ROLE_TRAIN, 0, 1)[0] * T)
        eps[j] = rngtape.gaussian(s, rngtape.ROLE_TRAIN, 1, dim)
    return ts, eps


def cosine_lr(lr: float, epoch: int, epochs: int, floor: float = 0.05) -> float:
    return lr * (floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * epoch / max(epochs, 1))))


def train_denoiser(x_pixels: np.ndarray, schedule: Schedule, epochs: int = 40, batch_size: int = 64,
                   lr: float = 1e-3, seed: int = 0, net: DenoiserNet = None, decay: bool = True,
                   **net_kwargs) -> Tuple[DenoiserNet, List[float]]:
    """Standard noise-prediction training on images mapped to [-1, 1].

    The logged loss is the per-sample summed squared error averaged over the epoch.
    """
    x = x_pixels * 2.0 - 1.0
    net = net or DenoiserNet(x.shape[1], schedule.T, seed=seed, **net_kwargs)
    net.requires_grad_(True)
    opt = Adam(net.parameters(), lr=lr)
    curve = []
    for epoch in range(epochs):
        if decay:
            opt.lr = cosine_lr(lr, epoch, epochs)
        order = epoch_order(seed, epoch, len(x))
        total = 0.0
        for k, start in enumerate(range(0, len(x), batch_size)):
            rows = order[start:start + batch_size]
            ts, eps = noise_batch(seed, epoch, k, rows, schedule.T, x.shape[1])
            opt.zero_grad()
            loss = diffusion_loss(lambda xt, t: denoiser_forward(net, xt, t), Tensor(x[rows]), ts, eps,
                                  schedule) * (1.0 / len(rows))
            backward(loss)
            opt.step()
            total += loss.item() * len(rows)
        curve.append(total / len(x))
        _check(curve[-1], "diffusion training")
        log.info("denoiser epoch %d loss %.4f", epoch, curve[-1])
    return net, curve


def accuracy(net: ClassifierNet, x: np.ndarray, y: np.ndarray) -> float:
    with no_grad():
        return float((np.argmax(classifier_forward(net, Tensor(x)).data, axis=1) == y).mean())
