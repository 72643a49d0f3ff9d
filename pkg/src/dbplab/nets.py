"""Tiny dense networks: a time-conditioned noise predictor and an image classifier.

Both operate on flattened images ``[B, D]``. Weights persist as DBPT records
plus a JSON manifest describing the architecture.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import rngtape
from .errors import ConfigError, FormatError, ShapeError
from .tensorgrad import Tensor, dbpt, matmul, softmax_cross_entropy

MANIFEST_VERSION = 1
ACTIVATIONS = {"tanh": lambda h: h.tanh(), "relu": lambda h: h.relu()}


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """``[B, dim]`` sin/cos features of integer timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _init_weight(seed: int, index: int, fan_in: int, fan_out: int) -> np.ndarray:
    scale = math.sqrt(2.0 / (fan_in + fan_out))
    return rngtape.gaussian(seed, rngtape.ROLE_INIT, index, (fan_in, fan_out)) * scale


class _Net:
    kind = ""

    def __init__(self):
        self.params: Dict[str, Tensor] = {}

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "_Net":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def astype(self, dtype):
        for name, p in self.params.items():
            self.params[name] = Tensor(p.data.astype(dtype), requires_grad=p.requires_grad, dtype=dtype)
        return self

    def copy(self):
        clone = self.__class__.__new__(self.__class__)
        clone.__dict__.update(self.__dict__)
        clone.params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.dtype)
                        for k, v in self.params.items()}
        return clone

    def zero_(self):
        for p in self.params.values():
            p.data[...] = 0
        return self

    def config(self) -> dict:
        raise NotImplementedError

    def _cast_input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"{self.kind} expects [B, {self.dim}] input, got {x.shape}")
        return x


class DenoiserNet(_Net):
    """Noise predictor: ``depth`` hidden layers over the image and a sinusoidal time embedding."""

    kind = "denoiser"

    def __init__(self, dim: int, T: int, hidden: int = 128, depth: int = 3, time_dim: int = 16,
                 seed: int = 0, dtype=np.float64, activation: str = "tanh"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}")
        self.dim, self.T, self.hidden, self.depth, self.time_dim = dim, T, hidden, depth, time_dim
        self.activation = activation
        p = self.params
        p["w_in"] = Tensor(_init_weight(seed, 0, dim, hidden), requires_grad=True, dtype=dtype)
        p["w_time"] = Tensor(_init_weight(seed, 1, time_dim, hidden), requires_grad=True, dtype=dtype)
        p["b_in"] = Tensor(np.zeros(hidden), requires_grad=True, dtype=dtype)
        for i in range(1, depth):
            p[f"w{i}"] = Tensor(_init_weight(seed, 1 + i, hidden, hidden), requires_grad=True, dtype=dtype)
            p[f"b{i}"] = Tensor(np.zeros(hidden), requires_grad=True, dtype=dtype)
        # small output layer keeps the initial prediction near zero
        p["w_out"] = Tensor(_init_weight(seed, 100, hidden, dim) * 0.1, requires_grad=True, dtype=dtype)
        p["b_out"] = Tensor(np.zeros(dim), requires_grad=True, dtype=dtype)

    def config(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "T": self.T, "hidden": self.hidden,
                "depth": self.depth, "time_dim": self.time_dim, "activation": self.activation}

    def __call__(self, xt, t) -> Tensor:
        return denoiser_forward(self, xt, t)


class ClassifierNet(_Net):
    """Two ReLU hidden layers ending in class logits."""

    kind = "classifier"

    def __init__(self, dim: int, num_classes: int, hidden: int = 64, depth: int = 2,
                 seed: int = 0, dtype=np.float64):
        super().__init__()
        self.dim, self.num_classes, self.hidden, self.depth = dim, num_classes, hidden, depth
        p = self.params
        sizes = [dim] + [hidden] * depth
        for i in range(depth):
            p[f"w{i}"] = Tensor(_init_weight(seed, i, sizes[i], sizes[i + 1]) * math.sqrt(2.0),
                                requires_grad=True, dtype=dtype)
            p[f"b{i}"] = Tensor(np.zeros(sizes[i + 1]), requires_grad=True, dtype=dtype)
        p["w_out"] = Tensor(_init_weight(seed, 100, hidden, num_classes), requires_grad=True, dtype=dtype)
        p["b_out"] = Tensor(np.zeros(num_classes), requires_grad=True, dtype=dtype)

    def config(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "num_classes": self.num_classes,
                "hidden": self.hidden, "depth": self.depth, "activation": "relu"}

    def __call__(self, x) -> Tensor:
        return classifier_forward(self, x)


def denoiser_forward(net: DenoiserNet, xt, t) -> Tensor:
    xt = net._cast_input(xt)
    t_arr = np.atleast_1d(np.asarray(t))
    if np.any(t_arr < 1) or np.any(t_arr > net.T):
        raise ConfigError(f"timestep outside [1, {net.T}]")
    emb = sinusoidal_embedding(t_arr, net.time_dim).astype(net.dtype)
    p = net.params
    act = ACTIVATIONS[net.activation]
    h = act(matmul(xt, p["w_in"]) + matmul(Tensor(emb, dtype=net.dtype), p["w_time"]) + p["b_in"])
    for i in range(1, net.depth):
        h = act(matmul(h, p[f"w{i}"]) + p[f"b{i}"])
    return matmul(h, p["w_out"]) + p["b_out"]


def classifier_forward(net: ClassifierNet, x) -> Tensor:
    h = net._cast_input(x)
    p = net.params
    for i in range(net.depth):
        h = (matmul(h, p[f"w{i}"]) + p[f"b{i}"]).relu()
    return matmul(h, p["w_out"]) + p["b_out"]


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample cross-entropy ``[B]``."""
    return softmax_cross_entropy(logits, labels)


# -- optimisation ----------------------------------------------------------------

class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# -- persistence -----------------------------------------------------------------

def _manifest_path(path) -> Path:
    return Path(str(path) + ".json")


def save_weights(net: _Net, path) -> None:
    """Write parameters as DBPT records and a JSON manifest next to them."""
    names = [n for n, _ in net.named_parameters()]
    dbpt.save(path, [net.params[n].data for n in names])
    manifest = {"version": MANIFEST_VERSION, "config": net.config(), "params": names,
                "dtype": str(net.dtype)}
    _manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_weights(path, dtype=None, allow_downcast: bool = False) -> _Net:
    """Rebuild a net from ``path``.

    Loading 64-bit weights as 32-bit requires ``allow_downcast=True``; any
    other dtype change raises :class:`FormatError`.
    """
    try:
        manifest = json.loads(_manifest_path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"missing or unreadable weight manifest: {exc}") from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {manifest.get('version')}")
    records = dbpt.load_all(path)
    names = manifest["params"]
    if len(records) != len(names):
        raise FormatError("weight file does not match its manifest")
    stored = np.dtype(manifest["dtype"])
    target = np.dtype(dtype) if dtype is not None else stored
    if target != stored and not (stored == np.float64 and target == np.float32 and allow_downcast):
        raise FormatError(f"refusing to convert {stored} weights to {target}")
    cfg = dict(manifest["config"])
    kind = cfg.pop("kind")
    if kind == "denoiser":
        net = DenoiserNet(**cfg, dtype=target.type)
    elif kind == "classifier":
        cfg.pop("activation", None)
        net = ClassifierNet(**cfg, dtype=target.type)
    else:
        raise FormatError(f"unknown network kind {kind!r}")
    for name, arr in zip(names, records):
        if name not in net.params or net.params[name].shape != arr.shape:
            raise FormatError(f"parameter {name!r} does not fit the architecture")
        net.params[name] = Tensor(arr.astype(target), requires_grad=True, dtype=target.type)
    return net
