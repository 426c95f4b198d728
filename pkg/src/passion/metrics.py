"""Dice / Hausdorff metrics and the per-modality-combination evaluation harness."""

from __future__ import annotations

import csv
import io
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

log = logging.getLogger(__name__)

HD_VARIANTS = ("max", "percentile95")


def _masks(pred, true):
    a = np.asarray(pred).astype(bool)
    b = np.asarray(true).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice_score(pred_mask, true_mask) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    a, b = _masks(pred_mask, true_mask)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        log.debug("dice of two empty masks taken as 1")
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background face-neighbour.

    Pixels outside the array count as background.
    """
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def surface_distances(a: np.ndarray, b: np.ndarray, spacing=None) -> tuple[np.ndarray, np.ndarray]:
    """Distances from each boundary pixel of ``a`` to the boundary of ``b`` and back."""
    ba, bb = boundary(a), boundary(b)
    dt_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    dt_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    return dt_b[ba], dt_a[bb]


def hausdorff(pred_mask, true_mask, variant: str = "percentile95", spacing=None) -> float | None:
    """Symmetric Hausdorff distance between mask boundaries.

    ``max`` is the classic Hausdorff distance; ``percentile95`` takes the 95th
    percentile of each directed distance set and returns the larger one.
    Returns ``None`` when either mask is empty.
    """
    if variant not in HD_VARIANTS:
        raise ValueError(f"variant must be one of {HD_VARIANTS}")
    a, b = _masks(pred_mask, true_mask)
    if not a.any() or not b.any():
        return None
    d_ab, d_ba = surface_distances(a, b, spacing)
    if variant == "max":
        return float(max(d_ab.max(), d_ba.max()))
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


def nested_grouping(n_classes: int) -> dict[str, tuple[int, ...]]:
    """Merged evaluation regions for nested labels: region ``k`` is classes ``>= k``."""
    return {f"region{k}": tuple(range(k, n_classes)) for k in range(1, n_classes)}


def identity_grouping(n_classes: int) -> dict[str, tuple[int, ...]]:
    return {f"class{k}": (k,) for k in range(1, n_classes)}


def all_subsets(n_modalities: int) -> list[tuple[int, ...]]:
    """Nonempty modality subsets, ordered by size then lexicographically."""
    out = []
    for r in range(1, n_modalities + 1):
        out += list(itertools.combinations(range(n_modalities), r))
    return out


def subset_name(subset, n_modalities) -> str:
    return "".join("1" if m in subset else "0" for m in range(n_modalities))


@dataclass
class EvalReport:
    """Per (subset, region) mean Dice and mean HD over samples.

    ``hd`` entries are ``None`` when no sample produced a defined distance.
    """

    n_modalities: int
    regions: tuple[str, ...]
    subsets: list[tuple[int, ...]]
    dice: dict = field(default_factory=dict)
    hd: dict = field(default_factory=dict)
    hd_variant: str = "percentile95"

    def subset_avg_dice(self, subset) -> float:
        return float(np.mean([self.dice[(tuple(subset), r)] for r in self.regions]))

    def region_avg_dice(self, region) -> float:
        return float(np.mean([self.dice[(s, region)] for s in self.subsets]))

    def region_avg_hd(self, region):
        vals = [self.hd[(s, region)] for s in self.subsets if self.hd[(s, region)] is not None]
        return float(np.mean(vals)) if vals else None

    def grand_dice(self) -> float:
        return float(np.mean([self.dice[k] for k in self.dice]))

    def grand_hd(self):
        vals = [v for v in self.hd.values() if v is not None]
        return float(np.mean(vals)) if vals else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["# hd_variant", self.hd_variant])
        w.writerow(
            ["subset"] + [f"dice_{r}" for r in self.regions] + ["dice_avg"] + [f"hd_{r}" for r in self.regions] + ["hd_avg"]
        )

        def fmt(v):
            return "" if v is None else f"{v:.6f}"

        for s in self.subsets:
            hds = [self.hd[(s, r)] for r in self.regions]
            defined = [v for v in hds if v is not None]
            w.writerow(
                [subset_name(s, self.n_modalities)]
                + [fmt(self.dice[(s, r)]) for r in self.regions]
                + [fmt(self.subset_avg_dice(s))]
                + [fmt(v) for v in hds]
                + [fmt(float(np.mean(defined)) if defined else None)]
            )
        w.writerow(
            ["average"]
            + [fmt(self.region_avg_dice(r)) for r in self.regions]
            + [fmt(self.grand_dice())]
            + [fmt(self.region_avg_hd(r)) for r in self.regions]
            + [fmt(self.grand_hd())]
        )
        return buf.getvalue()

    def to_table(self) -> str:
        """Plain-text table with one indicator column per modality."""
        mods = [f"m{m}" for m in range(self.n_modalities)]
        head = mods + [f"{r:>9}" for r in self.regions] + ["  avg"]
        lines = [f"HD variant: {self.hd_variant}", "  ".join(head)]
        for s in self.subsets:
            marks = ["●" if m in s else "○" for m in range(self.n_modalities)]
            cells = [f"{100 * self.dice[(s, r)]:9.2f}" for r in self.regions]
            lines.append("  ".join([f"{c:>2}" for c in marks] + cells + [f"{100 * self.subset_avg_dice(s):5.2f}"]))
        cells = [f"{100 * self.region_avg_dice(r):9.2f}" for r in self.regions]
        lines.append("  ".join(["avg".rjust(3 * self.n_modalities - 1)] + cells + [f"{100 * self.grand_dice():5.2f}"]))
        return "\n".join(lines) + "\n"


def score_prediction(pred, label, grouping, hd_variant="percentile95", spacing=None):
    """Dice and HD of one predicted label map per merged region."""
    out = {}
    for name, classes in grouping.items():
        p = np.isin(pred, classes)
        t = np.isin(label, classes)
        out[name] = (dice_score(p, t), hausdorff(p, t, hd_variant, spacing))
    return out


@torch.no_grad()
def predict(model, images: np.ndarray, subset) -> np.ndarray:
    """Argmax label map of the fused pathway for a ``(B, M, *spatial)`` batch."""
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    pyramid = model(x, subset, uni=False)
    return pyramid.fused_logits[0].argmax(dim=1).numpy()


def evaluate_combinations(
    model, dataset, class_grouping=None, hd_variant="percentile95", spacing=None, subsets=None, batch_size=8
) -> EvalReport:
    """Score the model on every nonempty modality subset.

    Each sample is run with exactly that subset present; Dice and HD are
    computed per sample and averaged (HD over samples where it is defined).
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    M = dataset[0].n_modalities
    K = model.cfg.n_classes
    grouping = class_grouping if class_grouping is not None else nested_grouping(K)
    subsets = [tuple(s) for s in (subsets if subsets is not None else all_subsets(M))]
    was_training = model.training
    model.eval()
    images = np.stack([s.stacked() for s in dataset])
    labels = np.stack([s.label for s in dataset])
    report = EvalReport(M, tuple(grouping), subsets, hd_variant=hd_variant)
    for s in subsets:
        missing = [m for m in s for smp in dataset if m not in smp.images]
        if missing:
            raise ValueError(f"subset {s} needs modalities missing from the evaluation data")
        preds = np.concatenate(
            [predict(model, images[i : i + batch_size], s) for i in range(0, len(dataset), batch_size)]
        )
        per_sample = [score_prediction(p, y, grouping, hd_variant, spacing) for p, y in zip(preds, labels)]
        for r in grouping:
            report.dice[(s, r)] = float(np.mean([d[r][0] for d in per_sample]))
            hds = [d[r][1] for d in per_sample if d[r][1] is not None]
            report.hd[(s, r)] = float(np.mean(hds)) if hds else None
    model.train(was_training)
    return report
