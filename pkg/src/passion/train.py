"""Training loop for the baseline, ModDrop and PASSION regimes."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import losses
from .backbone import BackboneConfig, FeaturePyramid, MultiModalSegNet, save_checkpoint
from .config import ExperimentConfig, format_config
from .data import DatasetSpec, MultiModalSample, apply_presence, generate_dataset, load_container
from .metrics import EvalReport, evaluate_combinations, nested_grouping
from .preference import (
    PreferenceState,
    SamplePreference,
    accumulate,
    relative_preference,
    total_loss,
    update_beta,
    write_rp_log,
)
from .presence import PresenceMatrix, load_manifest, missing_rates, sample_presence, save_manifest

log = logging.getLogger(__name__)

DETERMINISTIC_ENV = "PASSION_DETERMINISTIC"


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "1").strip().lower() not in ("0", "false", "off", "no")


def seed_everything(seed: int):
    torch.manual_seed(seed)
    if deterministic_mode():
        torch.use_deterministic_algorithms(True)


def poly_lr(lr0: float, step: int, total: int, power: float = 0.9) -> float:
    """``lr0 * (1 - step / total) ** power``, reaching 0 at ``step == total``."""
    frac = min(max(step / total, 0.0), 1.0)
    return lr0 * (1.0 - frac) ** power


@dataclass
class StepLoss:
    total: torch.Tensor
    seg: torch.Tensor
    reg: dict = field(default_factory=dict)
    pixel: dict = field(default_factory=dict)
    proto: dict = field(default_factory=dict)
    pref: SamplePreference | None = None


@dataclass
class LossRule:
    """How one training step turns a forward pass into a scalar loss.

    ``baseline``: segmentation loss plus a supervised loss on each visible
    modality's own pathway. ``moddrop``: the same, after randomly hiding
    visible modalities. ``passion``: segmentation loss plus the toggled
    distillation terms weighted by beta and the task mask.
    """

    method: str
    pixel: bool = True
    proto: bool = True
    delta: bool = True
    beta: bool = True
    lambda1: float = 0.5
    lambda2: float = 0.1
    tau: float = 4.0
    moddrop_rate: float = 0.5
    upsample: str = "nearest"

    @property
    def needs_uni_pyramids(self) -> bool:
        return self.method == "passion" and self.pixel

    def visible(self, present, rng: np.random.Generator) -> frozenset[int]:
        """Modalities fed to the network this step.

        ModDrop drops each present modality with ``moddrop_rate``; if all are
        dropped one of them, chosen uniformly, is restored.
        """
        present = sorted(present)
        if self.method != "moddrop":
            return frozenset(present)
        keep = [m for m in present if rng.random() >= self.moddrop_rate]
        if not keep:
            keep = [present[int(rng.integers(len(present)))]]
        return frozenset(keep)

    def __call__(self, pyramid: FeaturePyramid, label: torch.Tensor, state: PreferenceState) -> StepLoss:
        seg = losses.seg_loss(pyramid, label, self.upsample)
        present = sorted(pyramid.present)
        M = state.n_modalities

        teacher = losses.similarity_from_logits(pyramid.fused_logits[0][0], label[0]).detach()
        students = {m: losses.similarity_from_logits(pyramid.uni_logits[m][0], label[0]) for m in present}
        gaps = {m: float(losses.knowledge_gap(students[m].detach(), teacher)) for m in present}
        pref = relative_preference(gaps, present, M)

        if self.method in ("baseline", "moddrop"):
            reg = losses.baseline_reg_loss(pyramid, label)
            total = seg
            for m in present:
                total = total + reg[m]
            return StepLoss(total, seg, reg=reg, pref=pref)

        pixel = {}
        if self.pixel:
            pixel = {m: losses.pixel_distill(pyramid.uni_pyramids[m], pyramid.fused_logits, self.tau) for m in present}
        weighted = pref if self.delta else replace(pref, delta={m: 1 for m in pref.rp})
        proto = {}
        if self.proto:
            proto = {m: losses.proto_distill(students[m], teacher) for m in present if weighted.delta[m]}
        total = total_loss(
            seg,
            pixel,
            proto,
            weighted,
            state.beta,
            self.lambda1 if self.pixel else 0.0,
            self.lambda2 if self.proto else 0.0,
        )
        return StepLoss(total, seg, pixel=pixel, proto=proto, pref=pref)


def build_method_loss(method: str, toggles: dict | None = None, **params) -> LossRule:
    toggles = dict(toggles or {})
    unknown = set(toggles) - {"pixel", "proto", "delta", "beta"}
    if unknown:
        raise ValueError(f"unknown components {sorted(unknown)}")
    if method not in ("baseline", "moddrop", "passion"):
        raise ValueError(f"unknown method {method!r}")
    if method != "passion" and toggles and not all(toggles.values()):
        raise ValueError("component toggles only apply to passion")
    if method != "passion":
        toggles = {}
    return LossRule(method, **toggles, **params)


@dataclass
class RunResult:
    config: ExperimentConfig
    report: EvalReport
    history: list
    loss_trace: list
    presence: PresenceMatrix
    paths: dict
    model: MultiModalSegNet | None = None

    def final_abs_rp(self) -> float:
        """Mean over modalities of |epoch-mean RP| in the last epoch."""
        return float(np.mean(np.abs(self.history[-1][1])))

    def uni_dice(self, m: int) -> float:
        return self.report.subset_avg_dice((m,))


def dataset_spec(cfg: ExperimentConfig, n: int, seed: int) -> DatasetSpec:
    return DatasetSpec(
        n_samples=n,
        n_modalities=cfg.n_modalities,
        n_classes=cfg.n_classes,
        shape=cfg.shape,
        profiles=cfg.profiles,
        noise=cfg.noise,
        seed=seed,
    )


def load_data(cfg: ExperimentConfig):
    """Training samples with presence applied, the presence matrix, and the test set."""
    seed = cfg.resolved_data_seed
    if cfg.data_path:
        train = load_container(cfg.data_path)
    else:
        train = generate_dataset(dataset_spec(cfg, cfg.n_train, seed))
    if cfg.test_path:
        test = load_container(cfg.test_path)
    else:
        test = generate_dataset(dataset_spec(cfg, cfg.n_test, seed + 1_000_003))
    if not train or not test:
        raise ValueError("training and test sets must be non-empty")
    for name, ds in (("training", train), ("test", test)):
        if ds[0].n_modalities != cfg.n_modalities:
            raise ValueError(f"{name} data has {ds[0].n_modalities} modalities, config says {cfg.n_modalities}")
    if any(len(s.images) != s.n_modalities for s in test):
        raise ValueError("test data must contain every modality")

    complete = all(len(s.images) == s.n_modalities for s in train)
    if cfg.presence_path:
        C = load_manifest(cfg.presence_path)
    elif complete:
        C = sample_presence(cfg.missing_rates, len(train), seed)
    else:
        C = PresenceMatrix(np.stack([s.presence_row for s in train]))
    if C.n_samples != len(train) or C.n_modalities != cfg.n_modalities:
        raise ValueError(f"presence matrix {C.entries.shape} does not match {len(train)} x {cfg.n_modalities} data")
    if complete:
        train = [apply_presence(s, C.row(n)) for n, s in enumerate(train)]
    elif not all(np.array_equal(s.presence_row, C.row(n)) for n, s in enumerate(train)):
        raise ValueError("presence matrix disagrees with the presence rows stored in the data")
    return train, C, test


def augment(images: np.ndarray, label: np.ndarray, rng: np.random.Generator):
    """Random right-angle rotation in the first two spatial axes plus per-image intensity jitter."""
    k = int(rng.integers(4))
    axes = (1, 2)
    images = np.rot90(images, k, axes=axes)
    label = np.rot90(label, k, axes=(0, 1))
    scale = rng.uniform(0.9, 1.1, size=(images.shape[0],) + (1,) * (images.ndim - 1))
    shift = rng.uniform(-0.1, 0.1, size=scale.shape)
    return np.ascontiguousarray(images * scale + shift, dtype=np.float32), np.ascontiguousarray(label)


def to_tensors(sample: MultiModalSample, rng=None):
    images, label = sample.stacked(), sample.label
    if rng is not None:
        images, label = augment(images, label, rng)
    return torch.from_numpy(images).unsqueeze(0), torch.from_numpy(label.astype(np.int64)).unsqueeze(0)


def train_model(cfg: ExperimentConfig, train, C: PresenceMatrix, progress=None):
    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = MultiModalSegNet(
        BackboneConfig(
            n_modalities=cfg.n_modalities,
            n_classes=cfg.n_classes,
            width=cfg.width,
            depth=cfg.depth,
            rank=len(cfg.shape),
            fusion=cfg.fusion,
            upsample=cfg.upsample,
            convs_per_block=cfg.convs_per_block,
        )
    )
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rule = build_method_loss(
        cfg.method,
        cfg.toggles if cfg.method == "passion" else None,
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
        tau=cfg.tau,
        moddrop_rate=cfg.moddrop_rate,
        upsample=cfg.upsample,
    )
    state = PreferenceState.from_missing_rates(missing_rates(C), gamma=cfg.gamma, floor=cfg.beta_floor)
    steer_beta = cfg.method == "passion" and cfg.beta
    N = len(train)
    total_steps = cfg.epochs * N
    step = 0
    trace = []
    for epoch in range(cfg.epochs):
        for n in rng.permutation(N):
            sample = train[n]
            images, label = to_tensors(sample, rng if cfg.augment else None)
            visible = rule.visible(sample.present, rng)
            lr = poly_lr(cfg.lr, step, total_steps, cfg.poly_power)
            for group in opt.param_groups:
                group["lr"] = lr
            pyramid = model(images, visible, need_uni_pyramids=rule.needs_uni_pyramids)
            out = rule(pyramid, label, state)
            opt.zero_grad(set_to_none=True)
            out.total.backward()
            opt.step()
            accumulate(state, out.pref)
            trace.append(
                {
                    "epoch": epoch,
                    "step": step,
                    "sample": int(n),
                    "lr": lr,
                    "total": out.total.item(),
                    "seg": out.seg.item(),
                    "reg": sum(v.item() for v in out.reg.values()),
                    "pixel": sum(v.item() for v in out.pixel.values()),
                    "proto": sum(v.item() for v in out.proto.values()),
                }
            )
            step += 1
        update_beta(state, frozen=not steer_beta)
        if progress:
            progress(epoch, state)
    return model, state, trace


def write_trace(trace, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if trace:
            w = csv.DictWriter(fh, fieldnames=list(trace[0]))
            w.writeheader()
            for row in trace:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def run_experiment(cfg: ExperimentConfig, out_dir=None, write=True, progress=None) -> RunResult:
    """Train, evaluate and (optionally) write every artifact of one run."""
    cfg.validate()
    out = Path(out_dir or cfg.out_dir)
    train, C, test = load_data(cfg)
    model, state, trace = train_model(cfg, train, C, progress)
    report = evaluate_combinations(model, test, nested_grouping(cfg.n_classes), cfg.hd_variant)
    paths = {}
    if write:
        out.mkdir(parents=True, exist_ok=True)
        paths["config"] = out / "resolved_config.txt"
        paths["config"].write_text(format_config(cfg))
        paths["presence"] = save_manifest(C, out / "presence.txt")
        paths["checkpoint"] = save_checkpoint(model, out / "checkpoint.npz", {"method": cfg.method, "seed": cfg.seed})
        paths["rp_log"] = write_rp_log(state.history, out / "rp_log.csv")
        paths["loss_trace"] = write_trace(trace, out / "loss_trace.csv")
        paths["report"] = out / "eval_report.csv"
        paths["report"].write_text(report.to_csv())
        paths["table"] = out / "eval_report.txt"
        paths["table"].write_text(report.to_table())
        paths["summary"] = out / "summary.json"
        summary = {
            "method": cfg.method,
            "toggles": cfg.toggles,
            "seed": cfg.seed,
            "realized_missing_rates": missing_rates(C).tolist(),
            "final_beta": state.beta.tolist(),
            "final_mean_rp": state.history[-1][1].tolist(),
            "grand_dice": report.grand_dice(),
        }
        paths["summary"].write_text(json.dumps(summary, indent=2) + "\n")
        if cfg.plots:
            from .plots import emit_dice_plot, emit_rp_plot
            from .preference import read_rp_log

            paths["rp_plot"] = emit_rp_plot(read_rp_log(paths["rp_log"]), out / "rp_curves.png", cfg.method)
            paths["dice_plot"] = emit_dice_plot(report, out / "dice_by_subset.png", cfg.method)
    return RunResult(cfg, report, state.history, trace, C, paths, model)
