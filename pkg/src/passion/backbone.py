"""Multi-encoder / shared-decoder segmentation network.

Every modality owns a small convolutional encoder producing one skip feature
per resolution level. Skips of the available modalities are fused level by
level and decoded by a single shared decoder with a 1x1 prediction head at
every level (deep supervision). Missing modalities never run their encoder;
their skip features are all-zero tensors.

Uni-modal pathways reuse the same decoder on a fusion where every other
modality is zeroed, so a forward pass costs ``len(present) + 1`` decoder
passes (stacked along the batch axis).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

FUSION_RULES = ("mean", "sum", "mix")


@dataclass
class BackboneConfig:
    n_modalities: int = 3
    n_classes: int = 3
    width: int = 8
    depth: int = 4  # number of resolution levels, L + 1
    rank: int = 2
    fusion: str = "mean"
    upsample: str = "nearest"
    convs_per_block: int = 1

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.width < 4:
            raise ValueError("width must be >= 4")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_modalities < 1:
            raise ValueError("n_modalities must be >= 1")
        if self.rank not in (2, 3):
            raise ValueError("rank must be 2 or 3")
        if self.fusion not in FUSION_RULES:
            raise ValueError(f"fusion must be one of {FUSION_RULES}, got {self.fusion!r}")
        if self.upsample not in ("nearest", "linear"):
            raise ValueError("upsample must be 'nearest' or 'linear'")
        if self.convs_per_block < 1:
            raise ValueError("convs_per_block must be >= 1")

    @property
    def levels(self) -> int:
        """L, the index of the coarsest level."""
        return self.depth - 1

    def channels(self, level: int) -> int:
        return self.width * 2**level


@dataclass
class FeaturePyramid:
    """Outputs of one forward pass.

    ``fused_logits[l]`` has shape ``(B, K, *spatial / 2**l)``. ``uni_logits``
    holds the level-0 logits of each present modality's own pathway and
    ``uni_pyramids`` the full per-level lists when requested.
    """

    fused_logits: list[torch.Tensor]
    uni_logits: dict[int, torch.Tensor]
    present: frozenset[int]
    uni_pyramids: dict[int, list[torch.Tensor]] | None = None

    @property
    def levels(self) -> int:
        return len(self.fused_logits) - 1


def _conv(rank):
    return nn.Conv2d if rank == 2 else nn.Conv3d


def _norm(rank):
    return nn.InstanceNorm2d if rank == 2 else nn.InstanceNorm3d


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, rank, n_convs=1):
        super().__init__()
        conv, norm = _conv(rank), _norm(rank)
        layers = []
        for i in range(n_convs):
            layers += [conv(cin if i == 0 else cout, cout, 3, padding=1), norm(cout, affine=True), nn.LeakyReLU(0.01)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class Encoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.rank = cfg.rank
        self.stages = nn.ModuleList(
            ConvBlock(1 if l == 0 else cfg.channels(l - 1), cfg.channels(l), cfg.rank, cfg.convs_per_block)
            for l in range(cfg.depth)
        )

    def forward(self, x):
        pool = F.max_pool2d if self.rank == 2 else F.max_pool3d
        feats = []
        for l, stage in enumerate(self.stages):
            if l > 0:
                x = pool(x, 2)
            x = stage(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        conv = _conv(cfg.rank)
        L = cfg.levels
        self.cfg = cfg
        n = cfg.convs_per_block
        self.bottom = ConvBlock(cfg.channels(L), cfg.channels(L), cfg.rank, n)
        self.reduce = nn.ModuleList(conv(cfg.channels(l + 1), cfg.channels(l), 1) for l in range(L))
        self.blocks = nn.ModuleList(ConvBlock(2 * cfg.channels(l), cfg.channels(l), cfg.rank, n) for l in range(L))
        self.heads = nn.ModuleList(conv(cfg.channels(l), cfg.n_classes, 1) for l in range(cfg.depth))

    def forward(self, skips):
        L = self.cfg.levels
        x = self.bottom(skips[L])
        logits = [None] * (L + 1)
        logits[L] = self.heads[L](x)
        for l in range(L - 1, -1, -1):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.reduce[l](x)
            x = self.blocks[l](torch.cat([x, skips[l]], dim=1))
            logits[l] = self.heads[l](x)
        return logits


class MultiModalSegNet(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.encoders = nn.ModuleList(Encoder(cfg) for _ in range(cfg.n_modalities))
        if cfg.fusion == "mix":
            conv = _conv(cfg.rank)
            self.mixers = nn.ModuleList(
                conv(cfg.n_modalities * cfg.channels(l), cfg.channels(l), 1) for l in range(cfg.depth)
            )
        self.decoder = Decoder(cfg)

    def encode(self, images: torch.Tensor, present) -> dict[int, list[torch.Tensor]]:
        return {m: self.encoders[m](images[:, m : m + 1]) for m in sorted(present)}

    def zero_features(self, like: list[torch.Tensor]) -> list[torch.Tensor]:
        return [torch.zeros_like(f) for f in like]

    def fuse(self, feats: dict[int, list[torch.Tensor]], members) -> list[torch.Tensor]:
        """Fuse per-level skips of ``members``; all other slots are zero."""
        members = sorted(members)
        template = feats[members[0]]
        slots = [feats[m] if m in members else self.zero_features(template) for m in range(self.cfg.n_modalities)]
        fused = []
        for l in range(self.cfg.depth):
            level = [slot[l] for slot in slots]
            if self.cfg.fusion == "mix":
                fused.append(self.mixers[l](torch.cat(level, dim=1)))
                continue
            total = level[0]
            for f in level[1:]:
                total = total + f
            if self.cfg.fusion == "mean":
                total = total / len(members)
            fused.append(total)
        return fused

    def check_input(self, images: torch.Tensor, present) -> None:
        cfg = self.cfg
        if not present:
            raise ValueError("at least one modality must be present")
        if any(not 0 <= m < cfg.n_modalities for m in present):
            raise ValueError(f"modality index out of range in {sorted(present)}")
        if images.dim() != cfg.rank + 2 or images.shape[1] != cfg.n_modalities:
            raise ValueError(
                f"expected images of shape (B, {cfg.n_modalities}, *spatial) with rank {cfg.rank}, "
                f"got {tuple(images.shape)}"
            )
        step = 2**cfg.levels
        if any(s % step for s in images.shape[2:]):
            raise ValueError(f"spatial shape {tuple(images.shape[2:])} not divisible by 2**L = {step}")

    def forward(self, images, present, need_uni_pyramids: bool = False, uni: bool = True) -> FeaturePyramid:
        """Run the fused pathway and, if ``uni``, one pathway per present modality.

        ``images`` is ``(B, M, *spatial)``; slots of absent modalities are
        ignored whatever they contain.
        """
        present = frozenset(int(m) for m in present)
        self.check_input(images, present)
        feats = self.encode(images, present)
        order = sorted(present)
        groups = [self.fuse(feats, order)]
        if uni:
            groups += [self.fuse(feats, [m]) for m in order]
        B = images.shape[0]
        skips = [torch.cat([g[l] for g in groups], dim=0) for l in range(self.cfg.depth)]
        stacked = self.decoder(skips)
        fused = [z[:B] for z in stacked]
        uni_logits, uni_pyramids = {}, ({} if need_uni_pyramids and uni else None)
        if uni:
            for i, m in enumerate(order, start=1):
                pyr = [z[i * B : (i + 1) * B] for z in stacked]
                uni_logits[m] = pyr[0]
                if uni_pyramids is not None:
                    uni_pyramids[m] = pyr
        return FeaturePyramid(fused, uni_logits, present, uni_pyramids)

    def forward_sample(self, sample, need_uni_pyramids=False, uni=True) -> FeaturePyramid:
        images = torch.from_numpy(sample.stacked()).unsqueeze(0)
        return self(images, sample.present, need_uni_pyramids=need_uni_pyramids, uni=uni)


def upsample_logits(logits: torch.Tensor, factor: int, mode: str = "nearest") -> torch.Tensor:
    """Upsample ``(B, K, *spatial)`` logits by a power-of-two ``factor``."""
    if int(factor) != factor or factor < 1 or (int(factor) & (int(factor) - 1)):
        raise ValueError(f"upsampling factor must be a power of two, got {factor}")
    if factor == 1:
        return logits
    if mode == "nearest":
        return F.interpolate(logits, scale_factor=int(factor), mode="nearest")
    interp = "bilinear" if logits.dim() == 4 else "trilinear"
    return F.interpolate(logits, scale_factor=int(factor), mode=interp, align_corners=False)


def parameter_count(cfg: BackboneConfig) -> int:
    return sum(p.numel() for p in MultiModalSegNet(cfg).parameters())


def save_checkpoint(model: MultiModalSegNet, path, extra: dict | None = None) -> Path:
    """Store the config as a JSON header next to named float arrays."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    header = {"config": asdict(model.cfg), "extra": extra or {}}
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
    return path


def load_checkpoint(path) -> tuple[MultiModalSegNet, dict]:
    with np.load(path) as npz:
        header = json.loads(bytes(npz["__header__"]).decode())
        state = {k[len("param/") :]: torch.from_numpy(npz[k].copy()) for k in npz.files if k.startswith("param/")}
    model = MultiModalSegNet(BackboneConfig(**header["config"]))
    model.load_state_dict(state)
    return model, header.get("extra", {})
