"""Relative preference tracking and the loss weights derived from it.

Per sample, each available modality's knowledge gap to the fused teacher is
turned into a relative preference ``RP = 1 - D / mean(D)``. Negative RP marks a
neglected modality, which switches on its prototype loss (the task mask). Per
epoch, the mean RP of each modality nudges its pixel-distillation weight
``beta`` down (preferred) or up (neglected).

Everything here is bookkeeping on plain floats: nothing is differentiated.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

BETA_FLOOR = 0.1


@dataclass(frozen=True)
class SamplePreference:
    d: dict[int, float]
    d_bar: float
    rp: dict[int, float]
    delta: dict[int, int]

    @property
    def available(self) -> frozenset[int]:
        return frozenset(self.d)


def relative_preference(d: Mapping[int, float], available, n_modalities: int | None = None) -> SamplePreference:
    """Relative preference of every modality for one sample.

    ``rp`` has an entry for each of ``range(n_modalities)`` (0 for unavailable
    modalities) when ``n_modalities`` is given, otherwise only for the
    available ones.
    """
    available = frozenset(int(m) for m in available)
    if not available:
        raise ValueError("at least one modality must be available")
    if set(d) != set(available):
        raise ValueError(f"gap keys {sorted(d)} do not match available modalities {sorted(available)}")
    gaps = {int(m): float(v) for m, v in d.items()}
    for m, v in gaps.items():
        if not math.isfinite(v) or v < 0:
            raise ValueError(f"knowledge gap of modality {m} must be finite and >= 0, got {v}")
    d_bar = math.fsum(gaps.values()) / len(available)
    keys = range(n_modalities) if n_modalities is not None else sorted(available)
    if d_bar > 0:
        # exact rationals: RP = 1 - n*d/sum(d) is then invariant to any exact rescaling of d
        total = sum(Fraction(v) for v in gaps.values())
        n = len(available)
        rp = {m: float(1 - n * Fraction(gaps[m]) / total) if m in available else 0.0 for m in keys}
    else:
        rp = {m: 0.0 for m in keys}
    delta = {m: int(v < 0) for m, v in rp.items()}
    return SamplePreference(gaps, d_bar, rp, delta)


def task_mask(pref: SamplePreference) -> dict[int, int]:
    return {m: int(v < 0) for m, v in pref.rp.items()}


def initial_beta(rates: Sequence[float]) -> np.ndarray:
    """``1 / (1 - MR)`` per modality, compensating for unequal data amounts."""
    r = np.asarray(rates, dtype=np.float64)
    if np.any(r < 0) or np.any(r >= 1):
        raise ValueError("missing rates must lie in [0, 1)")
    return 1.0 / (1.0 - r)


@dataclass
class PreferenceState:
    beta: np.ndarray
    gamma: float = 0.01
    floor: float = BETA_FLOOR
    epoch_rp_sum: np.ndarray = None
    epoch_count: np.ndarray = None
    epoch: int = 0
    samples_seen: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.beta = np.maximum(np.asarray(self.beta, dtype=np.float64).copy(), self.floor)
        M = self.beta.size
        if self.epoch_rp_sum is None:
            self.epoch_rp_sum = np.zeros(M)
        if self.epoch_count is None:
            self.epoch_count = np.zeros(M, dtype=np.int64)

    @classmethod
    def from_missing_rates(cls, rates, gamma=0.01, floor=BETA_FLOOR):
        return cls(initial_beta(rates), gamma=gamma, floor=floor)

    @property
    def n_modalities(self) -> int:
        return self.beta.size

    def mean_rp(self) -> np.ndarray:
        """Epoch-average RP so far; 0 for modalities not seen this epoch."""
        out = np.zeros(self.n_modalities)
        seen = self.epoch_count > 0
        out[seen] = self.epoch_rp_sum[seen] / self.epoch_count[seen]
        return out


def accumulate(state: PreferenceState, pref: SamplePreference) -> PreferenceState:
    for m in pref.available:
        state.epoch_rp_sum[m] += pref.rp[m]
        state.epoch_count[m] += 1
    state.samples_seen += 1
    return state


def update_beta(state: PreferenceState, frozen: bool = False) -> PreferenceState:
    """Close the epoch: step beta against the epoch-mean RP, clamp, reset.

    With ``frozen`` the epoch is logged and reset but beta is left unchanged.
    A modality unseen during the epoch has mean RP 0 and keeps its beta.
    """
    mean = state.mean_rp()
    if not frozen:
        state.beta = np.maximum(state.beta - state.gamma * mean, state.floor)
    state.history.append((state.epoch, mean.copy(), state.beta.copy()))
    state.epoch_rp_sum = np.zeros(state.n_modalities)
    state.epoch_count = np.zeros(state.n_modalities, dtype=np.int64)
    state.samples_seen = 0
    state.epoch += 1
    return state


def total_loss(seg, pixel_terms, proto_terms, pref: SamplePreference, beta, lambda1=0.5, lambda2=0.1):
    """Overall objective for one sample.

    ``seg + sum_m (lambda1 * beta[m] * pixel[m] + lambda2 * delta[m] * proto[m])``
    over the available modalities. ``beta`` is indexable by modality and
    enters, like ``delta``, as a constant. Entries of ``pixel_terms`` or
    ``proto_terms`` may be omitted only where their weight is zero.
    """
    available = pref.available
    extra = (set(pixel_terms) | set(proto_terms)) - available
    if extra:
        raise KeyError(f"loss terms given for unavailable modalities {sorted(extra)}")
    total = seg
    for m in sorted(available):
        if lambda1:
            if m not in pixel_terms:
                raise KeyError(f"missing pixel term for modality {m}")
            total = total + lambda1 * float(beta[m]) * pixel_terms[m]
        if lambda2 and pref.delta[m]:
            if m not in proto_terms:
                raise KeyError(f"missing prototype term for modality {m}")
            total = total + lambda2 * proto_terms[m]
    return total


def write_rp_log(history, path) -> Path:
    """CSV with one row per (epoch, modality): epoch, modality, mean_RP, beta."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "modality", "mean_RP", "beta"])
        for epoch, mean, beta in history:
            for m in range(len(mean)):
                w.writerow([epoch, m, repr(float(mean[m])), repr(float(beta[m]))])
    return path


def read_rp_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"epoch": int(r["epoch"]), "modality": int(r["modality"]), "mean_RP": float(r["mean_RP"]), "beta": float(r["beta"])}
            for r in csv.DictReader(fh)
        ]
