"""Segmentation and self-distillation losses.

All tensors follow the ``(B, K, *spatial)`` convention for logits and
``(B, *spatial)`` for integer labels unless noted. Pixel sums are taken as
pixel means, which keeps magnitudes independent of resolution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .backbone import FeaturePyramid, upsample_logits

log = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5
CE_WEIGHT_CLIP = (0.05, 20.0)


def _check_pair(logits, label):
    if logits.dim() != label.dim() + 1 or logits.shape[0] != label.shape[0] or logits.shape[2:] != label.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match label {tuple(label.shape)}")


def class_weights(label: torch.Tensor, n_classes: int) -> torch.Tensor:
    """Inverse pixel frequency of each class in one label map, clipped."""
    counts = torch.bincount(label.reshape(-1), minlength=n_classes).to(torch.float64)
    freq = counts / label.numel()
    w = torch.where(counts > 0, 1.0 / freq.clamp_min(1e-12), torch.ones_like(freq))
    return w.clamp(*CE_WEIGHT_CLIP)


def soft_dice_loss(probs, onehot):
    """``1 -`` mean soft Dice over the classes present in the label."""
    dims = tuple(range(1, probs.dim()))
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    present = onehot.sum(dims) > 0
    return 1.0 - dice[present].mean()


def dice_plus_weighted_ce(logits: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Soft Dice loss plus class-weighted cross-entropy, averaged over the batch.

    The cross-entropy is a weighted mean, ``sum_i w[y_i] ce_i / sum_i w[y_i]``,
    so it equals the plain mean when all weights coincide.
    """
    _check_pair(logits, label)
    label = label.long()
    K = logits.shape[1]
    if label.numel() and (label.min() < 0 or label.max() >= K):
        raise ValueError(f"label values must lie in [0, {K})")
    total = logits.new_zeros(())
    for b in range(logits.shape[0]):
        z, y = logits[b], label[b]
        logp = F.log_softmax(z, dim=0)
        onehot = F.one_hot(y, K).movedim(-1, 0).to(z.dtype)
        w = class_weights(y, K).to(z.dtype)[y]
        nll = -logp.gather(0, y.unsqueeze(0)).squeeze(0)
        ce = (w * nll).sum() / w.sum()
        total = total + soft_dice_loss(logp.exp(), onehot) + ce
    return total / logits.shape[0]


def seg_loss(pyramid, label: torch.Tensor, mode: str = "nearest") -> torch.Tensor:
    """Deep-supervision loss: per-level loss of the upsampled fused logits, summed."""
    levels = pyramid.fused_logits if isinstance(pyramid, FeaturePyramid) else list(pyramid)
    if not levels:
        raise ValueError("pyramid has no levels")
    total = levels[0].new_zeros(())
    for l, z in enumerate(levels):
        up = upsample_logits(z, 2**l, mode)
        if up.shape[2:] != label.shape[1:]:
            raise ValueError(f"level {l} upsamples to {tuple(up.shape[2:])}, label is {tuple(label.shape[1:])}")
        total = total + dice_plus_weighted_ce(up, label)
    return total


def baseline_reg_loss(pyramid: FeaturePyramid, label: torch.Tensor, modalities=None) -> dict[int, torch.Tensor]:
    """Per-modality loss of each uni-modal pathway's output logits."""
    mods = sorted(pyramid.present if modalities is None else modalities)
    missing = [m for m in mods if m not in pyramid.uni_logits]
    if missing:
        raise KeyError(f"modalities {missing} have no uni-modal logits in this pyramid")
    return {m: dice_plus_weighted_ce(pyramid.uni_logits[m], label) for m in mods}


def pixel_distill(uni_pyramid, fused_pyramid, tau: float = 4.0) -> torch.Tensor:
    """Sum over levels of the pixel-mean ``KL(softmax(student/tau) || softmax(teacher/tau))``.

    The student (uni-modal) distribution is the first argument. Teacher logits
    are detached.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if len(uni_pyramid) != len(fused_pyramid):
        raise ValueError("student and teacher pyramids have different depths")
    total = uni_pyramid[0].new_zeros(())
    for zs, zt in zip(uni_pyramid, fused_pyramid):
        if zs.shape != zt.shape:
            raise ValueError(f"shape mismatch {tuple(zs.shape)} vs {tuple(zt.shape)}")
        log_ps = F.log_softmax(zs / tau, dim=1)
        log_pt = F.log_softmax(zt.detach() / tau, dim=1)
        kl = (log_ps.exp() * (log_ps - log_pt)).sum(dim=1)
        total = total + kl.mean()
    return total


@dataclass
class PrototypeSet:
    """Per-class mean feature vectors; row ``j`` of ``matrix`` is class ``classes[j]``."""

    classes: tuple[int, ...]
    matrix: torch.Tensor

    @property
    def present_classes(self) -> frozenset[int]:
        return frozenset(self.classes)

    def __getitem__(self, k: int) -> torch.Tensor:
        return self.matrix[self.classes.index(k)]


@dataclass
class SimilarityField:
    """Cosine similarity of every pixel's feature to each class prototype.

    ``values`` has shape ``(len(classes), *spatial)``.
    """

    classes: tuple[int, ...]
    values: torch.Tensor

    def totals(self) -> torch.Tensor:
        """Per-class pixel sums of the similarity."""
        return self.values.reshape(len(self.classes), -1).sum(dim=1)

    def detach(self) -> "SimilarityField":
        return SimilarityField(self.classes, self.values.detach())


def compute_prototypes(features: torch.Tensor, label: torch.Tensor) -> PrototypeSet:
    """Masked mean of ``(C, *spatial)`` features over the pixels of each class."""
    if features.shape[1:] != label.shape:
        raise ValueError(f"features {tuple(features.shape)} do not match label {tuple(label.shape)}")
    C = features.shape[0]
    flat = features.reshape(C, -1)
    y = label.reshape(-1).long()
    classes = tuple(int(k) for k in torch.unique(y).tolist())
    rows = [flat[:, y == k].mean(dim=1) for k in classes]
    return PrototypeSet(classes, torch.stack(rows))


def _safe_norm(x, dim):
    sq = (x * x).sum(dim=dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def similarity_field(features: torch.Tensor, prototypes: PrototypeSet) -> SimilarityField:
    """Per-pixel cosine similarity of ``(C, *spatial)`` features to each prototype.

    A zero-norm feature or prototype yields similarity 0.
    """
    C = features.shape[0]
    spatial = features.shape[1:]
    flat = features.reshape(C, -1)
    protos = prototypes.matrix
    dots = protos @ flat
    denom = _safe_norm(protos, 1)[:, None] * _safe_norm(flat, 0)[None, :]
    ok = denom > 0
    if not bool(ok.all()):
        log.warning("zero-norm feature or prototype; cosine similarity set to 0 for %d entries", int((~ok).sum()))
    cos = torch.where(ok, dots / torch.where(ok, denom, torch.ones_like(denom)), torch.zeros_like(dots))
    return SimilarityField(prototypes.classes, cos.clamp(-1.0, 1.0).reshape((len(prototypes.classes),) + spatial))


def similarity_from_logits(logits: torch.Tensor, label: torch.Tensor) -> SimilarityField:
    """Prototype similarity field of one sample's own output-level features."""
    return similarity_field(logits, compute_prototypes(logits, label))


def _check_fields(a: SimilarityField, b: SimilarityField):
    if a.classes != b.classes:
        raise ValueError(f"class sets differ: {a.classes} vs {b.classes}")
    if a.values.shape != b.values.shape:
        raise ValueError("similarity fields cover different pixels")


def knowledge_gap(uni_field: SimilarityField, teacher_field: SimilarityField) -> torch.Tensor:
    """Pixel mean of the summed absolute per-class similarity differences."""
    _check_fields(uni_field, teacher_field)
    diff = (uni_field.values - teacher_field.values).abs()
    return diff.sum(dim=0).mean()


def proto_distill(uni_field: SimilarityField, teacher_field: SimilarityField) -> torch.Tensor:
    """Pixel mean of summed squared similarity differences; teacher detached."""
    _check_fields(uni_field, teacher_field)
    diff = uni_field.values - teacher_field.values.detach()
    return (diff * diff).sum(dim=0).mean()
