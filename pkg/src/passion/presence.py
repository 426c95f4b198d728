"""Modality presence matrices for imbalanced missing-rate training.

A presence matrix ``C`` is an ``N x M`` array of 0/1 entries where
``C[n, m] == 1`` means modality ``m`` of sample ``n`` is visible during
training. Masks are drawn once, before training, and persisted to a plain
text manifest so that an experiment can be replayed bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class PresenceError(ValueError):
    """Raised for invalid presence matrices or sampling arguments."""


@dataclass(frozen=True)
class PresenceMatrix:
    """Binary availability matrix plus the parameters that produced it.

    ``targets`` and ``seed`` are carried along for the manifest; ``repairs``
    counts all-zero rows whose fix could not be compensated elsewhere in the
    same column (the residual imbalance of the draw).
    """

    entries: np.ndarray
    targets: tuple[float, ...] | None = None
    seed: int | None = None
    repairs: int = 0

    def __post_init__(self):
        entries = np.ascontiguousarray(self.entries, dtype=np.uint8)
        object.__setattr__(self, "entries", entries)
        entries.setflags(write=False)
        validate(entries)

    @property
    def n_samples(self) -> int:
        return self.entries.shape[0]

    @property
    def n_modalities(self) -> int:
        return self.entries.shape[1]

    def row(self, n: int) -> np.ndarray:
        return self.entries[n]

    def __eq__(self, other):
        if not isinstance(other, PresenceMatrix):
            return NotImplemented
        return (
            np.array_equal(self.entries, other.entries)
            and self.targets == other.targets
            and self.seed == other.seed
        )

    __hash__ = None


def validate(entries) -> None:
    """Raise PresenceError unless ``entries`` is a valid presence matrix."""
    arr = np.asarray(entries)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise PresenceError(f"presence matrix must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise PresenceError("presence matrix entries must be 0 or 1")
    empty_cols = np.flatnonzero(arr.sum(axis=0) == 0)
    if empty_cols.size:
        raise PresenceError(f"modalities {empty_cols.tolist()} are never available (missing rate 1)")
    empty_rows = np.flatnonzero(arr.sum(axis=1) == 0)
    if empty_rows.size:
        raise PresenceError(f"samples {empty_rows[:10].tolist()} have no available modality")


def missing_rates(C) -> np.ndarray:
    """Per-modality missing rate ``(N - column_sum) / N``."""
    entries = C.entries if isinstance(C, PresenceMatrix) else np.asarray(C)
    validate(entries)
    n = entries.shape[0]
    return (n - entries.sum(axis=0)) / n


def _check_targets(targets: Sequence[float]) -> np.ndarray:
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim != 1 or t.size < 1:
        raise PresenceError("targets must be a non-empty vector of missing rates")
    if not np.all(np.isfinite(t)) or np.any(t < 0) or np.any(t >= 1):
        raise PresenceError(f"every missing rate must lie in [0, 1), got {t.tolist()}")
    return t


def quota(target: float, n: int) -> int:
    """Number of zeros for one column, rounded half up, leaving at least one 1."""
    zeros = math.floor(n * target + 0.5)
    return min(zeros, n - 1)


def draw_quota_mask(targets: Sequence[float], N: int, rng: np.random.Generator) -> np.ndarray:
    """Raw draw before repair: column ``m`` gets ``quota(targets[m], N)`` zeros."""
    t = _check_targets(targets)
    C = np.ones((N, t.size), dtype=np.uint8)
    for m in range(t.size):
        C[rng.permutation(N)[: quota(t[m], N)], m] = 0
    return C


def repair_rows(C: np.ndarray, rng: np.random.Generator) -> int:
    """Re-enable one modality in every all-zero row, in place.

    The modality is chosen uniformly; when possible the extra 1 is offset by
    removing the same modality from a donor row that keeps another modality,
    so the column stays on quota. Returns the number of uncompensated repairs.
    """
    M = C.shape[1]
    repairs = 0
    for n in np.flatnonzero(C.sum(axis=1) == 0):
        m = int(rng.integers(M))
        C[n, m] = 1
        donors = np.flatnonzero((C[:, m] == 1) & (C.sum(axis=1) >= 2))
        donors = donors[donors != n]
        if donors.size:
            C[int(rng.choice(donors)), m] = 0
        else:
            repairs += 1
    return repairs


def sample_presence(targets: Sequence[float], N: int, seed: int) -> PresenceMatrix:
    """Draw a presence matrix whose columns hit the target missing rates.

    Deterministic in ``(targets, N, seed)``. Rows left without any modality
    are repaired (see ``repair_rows``), so with a single modality every
    sample keeps it whatever the target.
    """
    t = _check_targets(targets)
    if int(N) != N or N < 1:
        raise PresenceError(f"N must be a positive integer, got {N}")
    N = int(N)
    rng = np.random.default_rng(seed)
    C = draw_quota_mask(t, N, rng)
    repairs = repair_rows(C, rng)
    return PresenceMatrix(C, targets=tuple(float(x) for x in t), seed=int(seed), repairs=repairs)


def available_modalities(C: PresenceMatrix, n: int) -> frozenset[int]:
    if not 0 <= n < C.n_samples:
        raise IndexError(f"sample index {n} out of range for {C.n_samples} samples")
    return frozenset(int(m) for m in np.flatnonzero(C.entries[n]))


def format_manifest(C: PresenceMatrix) -> str:
    seed = 0 if C.seed is None else C.seed
    targets = C.targets if C.targets is not None else tuple(missing_rates(C).tolist())
    lines = [f"{C.n_samples} {C.n_modalities} {seed}", " ".join(repr(float(x)) for x in targets)]
    lines += [" ".join(str(int(v)) for v in row) for row in C.entries]
    lines.append(f"# realized_missing_rates {' '.join(f'{x:.6f}' for x in missing_rates(C))}")
    lines.append(f"# uncompensated_repairs {C.repairs}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> PresenceMatrix:
    lines = [ln.strip() for ln in text.splitlines()]
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    repairs = 0
    for ln in lines:
        if ln.startswith("# uncompensated_repairs"):
            repairs = int(ln.split()[-1])
    try:
        n, m, seed = (int(x) for x in body[0].split())
        targets = tuple(float(x) for x in body[1].split())
        rows = [[int(x) for x in ln.split()] for ln in body[2:]]
    except (IndexError, ValueError) as exc:
        raise PresenceError(f"malformed presence manifest: {exc}") from None
    if len(targets) != m or len(rows) != n or any(len(r) != m for r in rows):
        raise PresenceError(f"presence manifest does not match its header ({n} x {m})")
    return PresenceMatrix(np.array(rows, dtype=np.uint8), targets=targets, seed=seed, repairs=repairs)


def save_manifest(C: PresenceMatrix, path) -> Path:
    path = Path(path)
    path.write_text(format_manifest(C))
    return path


def load_manifest(path) -> PresenceMatrix:
    return parse_manifest(Path(path).read_text())
