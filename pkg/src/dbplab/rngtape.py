"""Counter-based Gaussian noise tapes and attacker-knowledge views.

Every draw is a pure function of ``(seed, role, step, element index)``, so a
tape can be regenerated in any order, on any thread, and a batch row's noise
never depends on which other rows share the batch.

Roles: the forward draw ``eps_f`` uses role 0 and the reverse draws use role 1
with ``step`` equal to the position in the reverse sequence. Other roles are
free for callers (training noise, attack restarts, ...); see :data:`ROLE_*`.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .errors import ConfigError, DeterminismError, FormatError
from .tensorgrad import dbpt

MASK64 = (1 << 64) - 1

ROLE_FORWARD = 0
ROLE_REVERSE = 1
ROLE_TRAIN = 2
ROLE_CGPO = 3
ROLE_INIT = 4
ROLE_DERIVE = 5


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_key(seed: int, role: int, step: int = 0) -> int:
    key = mix64(seed ^ 0x9E3779B97F4A7C15)
    key = mix64(key ^ ((role * 0xD1B54A32D192ED03) & MASK64))
    return mix64(key ^ (((step + 1) * 0xABC98388FB8FAC03) & MASK64))


def derive_seed(seed: int, *path: int) -> int:
    """Child seed for a labelled sub-stream, e.g. ``derive_seed(base, sample_index)``."""
    out = seed & MASK64
    for i, p in enumerate(path):
        out = stream_key(out, ROLE_DERIVE, (int(p) & 0xFFFFFFFF) | (i << 32))
    return out


def gaussian(seed: int, role: int, step: int, shape) -> np.ndarray:
    """Standard-normal array of ``shape`` keyed by ``(seed, role, step)``."""
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    n = int(np.prod(shape, dtype=np.int64))
    return kernels.gaussian_fill(stream_key(seed, role, step), n).reshape(shape)


def uniform(seed: int, role: int, step: int, n: int) -> np.ndarray:
    return kernels.uniform_stream(stream_key(seed, role, step), n)


def gaussian_rows(seeds: Sequence[int], role: int, step: int, shape) -> np.ndarray:
    """Stack one independent draw per seed: result shape ``(len(seeds), *shape)``."""
    shape = tuple(shape)
    if not seeds:
        return np.zeros((0,) + shape)
    return np.stack([gaussian(s, role, step, shape) for s in seeds])


@dataclass(frozen=True)
class NoiseTape:
    """Recorded draws for a batch: one row per seed.

    ``forward_noise`` has shape ``(B, *image_shape)`` and ``reverse_noises``
    holds one array of the same shape per stochastic reverse step.
    """

    seeds: Tuple[int, ...]
    forward_noise: np.ndarray
    reverse_noises: Tuple[np.ndarray, ...] = ()

    @property
    def seed(self) -> int:
        return self.seeds[0]

    @property
    def batch(self) -> int:
        return len(self.seeds)

    @property
    def reverse_count(self) -> int:
        return len(self.reverse_noises)

    @property
    def image_shape(self):
        return self.forward_noise.shape[1:]

    def select(self, rows) -> "NoiseTape":
        rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
        return NoiseTape(
            tuple(self.seeds[i] for i in rows),
            self.forward_noise[rows],
            tuple(r[rows] for r in self.reverse_noises),
        )

    def repeat(self, n: int) -> "NoiseTape":
        """Tile the batch ``n`` times (rows ordered copy-major)."""
        return NoiseTape(
            self.seeds * n,
            np.concatenate([self.forward_noise] * n),
            tuple(np.concatenate([r] * n) for r in self.reverse_noises),
        )

    def digest(self) -> str:
        h = hashlib.sha256(self.forward_noise.tobytes())
        for r in self.reverse_noises:
            h.update(r.tobytes())
        return h.hexdigest()

    def equals(self, other: "NoiseTape") -> bool:
        return (
            self.seeds == other.seeds
            and self.forward_noise.tobytes() == other.forward_noise.tobytes()
            and len(self.reverse_noises) == len(other.reverse_noises)
            and all(a.tobytes() == b.tobytes() for a, b in zip(self.reverse_noises, other.reverse_noises))
        )


def concat_tapes(tapes: Sequence[NoiseTape]) -> NoiseTape:
    counts = {t.reverse_count for t in tapes}
    if len(counts) != 1:
        raise DeterminismError("cannot concatenate tapes with different reverse step counts")
    n = counts.pop()
    return NoiseTape(
        tuple(s for t in tapes for s in t.seeds),
        np.concatenate([t.forward_noise for t in tapes]),
        tuple(np.concatenate([t.reverse_noises[i] for t in tapes]) for i in range(n)),
    )


def record_tapes(seeds: Sequence[int], image_shape, reverse_step_count: int) -> NoiseTape:
    if reverse_step_count < 0:
        raise ConfigError("reverse_step_count must be >= 0")
    seeds = tuple(int(s) & MASK64 for s in seeds)
    image_shape = tuple(image_shape)
    fwd = gaussian_rows(seeds, ROLE_FORWARD, 0, image_shape)
    rev = tuple(gaussian_rows(seeds, ROLE_REVERSE, k, image_shape) for k in range(reverse_step_count))
    return NoiseTape(seeds, fwd, rev)


def record_tape(seed: int, image_shape, reverse_step_count: int) -> NoiseTape:
    """Single-image tape (batch of one)."""
    return record_tapes([seed], image_shape, reverse_step_count)


# -- knowledge -----------------------------------------------------------------

class Knowledge(enum.Enum):
    WHITE_BOX = "white_box"
    DW_FWD = "dw_fwd"
    DW_REV = "dw_rev"
    DW_BOTH = "dw_both"
    DW_SEMI = "dw_semi"


@dataclass(frozen=True)
class KnowledgeSetting:
    kind: Knowledge
    k: int = 0

    def __post_init__(self):
        if self.kind is Knowledge.DW_SEMI and self.k < 1:
            raise ConfigError("DW_semi-k needs k >= 1")

    @property
    def knows_forward(self) -> bool:
        return self.kind in (Knowledge.DW_FWD, Knowledge.DW_BOTH)

    @property
    def knows_reverse(self) -> bool:
        return self.kind in (Knowledge.DW_REV, Knowledge.DW_BOTH)

    @classmethod
    def parse(cls, text: str) -> "KnowledgeSetting":
        text = text.strip().lower()
        if text.startswith("dw_semi"):
            k = int(text.split("-")[1]) if "-" in text else 1
            return cls(Knowledge.DW_SEMI, k)
        return cls(Knowledge(text))

    def __str__(self):
        return f"dw_semi-{self.k}" if self.kind is Knowledge.DW_SEMI else self.kind.value


WHITE_BOX = KnowledgeSetting(Knowledge.WHITE_BOX)
DW_FWD = KnowledgeSetting(Knowledge.DW_FWD)
DW_REV = KnowledgeSetting(Knowledge.DW_REV)
DW_BOTH = KnowledgeSetting(Knowledge.DW_BOTH)


@dataclass(frozen=True)
class AttackerTape:
    """What an attacker can replay: known entries are copied, the rest resampled.

    ``forward_noise`` / ``reverse_noises`` are ``None`` where unknown.
    """

    image_shape: tuple
    batch: int
    reverse_count: int
    forward_noise: Optional[np.ndarray] = None
    reverse_noises: Optional[Tuple[np.ndarray, ...]] = None

    @property
    def fully_known(self) -> bool:
        return self.forward_noise is not None and (self.reverse_noises is not None or self.reverse_count == 0)

    @property
    def known_entries(self) -> frozenset:
        known = set()
        if self.forward_noise is not None:
            known.add("forward")
        if self.reverse_noises is not None:
            known.update(f"reverse:{i}" for i in range(self.reverse_count))
        return frozenset(known)

    def realize(self, fresh_seeds: Optional[Sequence[int]] = None) -> NoiseTape:
        """Concrete tape: known entries as recorded, unknown ones drawn from ``fresh_seeds``."""
        if self.fully_known:
            rev = self.reverse_noises if self.reverse_noises is not None else ()
            return NoiseTape(tuple(fresh_seeds or (0,) * self.batch), self.forward_noise, tuple(rev))
        if fresh_seeds is None:
            raise DeterminismError("tape has unknown entries and no fresh seeds were supplied")
        fresh_seeds = tuple(int(s) & MASK64 for s in fresh_seeds)
        if len(fresh_seeds) != self.batch:
            raise DeterminismError("need one fresh seed per batch row")
        fwd = self.forward_noise
        if fwd is None:
            fwd = gaussian_rows(fresh_seeds, ROLE_FORWARD, 0, self.image_shape)
        rev = self.reverse_noises
        if rev is None:
            rev = tuple(gaussian_rows(fresh_seeds, ROLE_REVERSE, k, self.image_shape)
                        for k in range(self.reverse_count))
        return NoiseTape(fresh_seeds, fwd, tuple(rev))

    def repeat(self, n: int) -> "AttackerTape":
        return AttackerTape(
            self.image_shape,
            self.batch * n,
            self.reverse_count,
            None if self.forward_noise is None else np.concatenate([self.forward_noise] * n),
            None if self.reverse_noises is None else tuple(np.concatenate([r] * n) for r in self.reverse_noises),
        )


def knowledge_view(tape: NoiseTape, setting: KnowledgeSetting) -> AttackerTape:
    if setting.kind is Knowledge.DW_SEMI:
        raise ConfigError("DW_semi views are built with sample_semi_set")
    return AttackerTape(
        image_shape=tuple(tape.image_shape),
        batch=tape.batch,
        reverse_count=tape.reverse_count,
        forward_noise=tape.forward_noise if setting.knows_forward else None,
        reverse_noises=tape.reverse_noises if setting.knows_reverse else None,
    )


def sample_semi_set(k: int, seed: int, image_shape, reverse_step_count: int) -> List[NoiseTape]:
    """``k`` distinct single-image tapes forming the restricted stochastic set."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    return [record_tape(derive_seed(seed, i), image_shape, reverse_step_count) for i in range(k)]


# -- persistence ------------------------------------------------------------------

def save_tape(tape: NoiseTape, path) -> None:
    """Write ``<path>`` (DBPT records: forward then reverse) and ``<path>.json``."""
    path = Path(path)
    dbpt.save(path, [tape.forward_noise, *tape.reverse_noises])
    header = {"seeds": [str(s) for s in tape.seeds], "reverse_count": tape.reverse_count,
              "image_shape": list(tape.image_shape)}
    Path(str(path) + ".json").write_text(json.dumps(header, indent=2))


def load_tape(path) -> NoiseTape:
    path = Path(path)
    try:
        header = json.loads(Path(str(path) + ".json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"missing or invalid tape header: {exc}") from None
    records = dbpt.load_all(path)
    if len(records) != 1 + header["reverse_count"]:
        raise FormatError("tape record count does not match header")
    return NoiseTape(tuple(int(s) for s in header["seeds"]), records[0], tuple(records[1:]))
