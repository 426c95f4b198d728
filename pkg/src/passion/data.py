"""Synthetic multi-modal segmentation data and the ``PASS`` container.

Label maps are nested ellipses (class ``k + 1`` lies inside class ``k``),
loosely mimicking nested tumour sub-regions. Each modality renders the label
through its own informativeness profile: a class the modality cannot see is
drawn at the background intensity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"PASS"
VERSION = 1


class ContainerError(ValueError):
    """Raised when a container file cannot be parsed."""


@dataclass
class MultiModalSample:
    """One training case.

    ``images`` maps modality index to a float32 array; only modalities whose
    ``presence_row`` entry is 1 are stored.
    """

    images: dict[int, np.ndarray]
    label: np.ndarray
    presence_row: np.ndarray

    def __post_init__(self):
        self.presence_row = np.asarray(self.presence_row, dtype=np.uint8)
        self.label = np.asarray(self.label)
        for m, img in self.images.items():
            if img.shape != self.label.shape:
                raise ValueError(f"modality {m} image shape {img.shape} != label shape {self.label.shape}")
            if not self.presence_row[m]:
                raise ValueError(f"modality {m} is stored but marked unavailable")

    @property
    def n_modalities(self) -> int:
        return len(self.presence_row)

    @property
    def present(self) -> frozenset[int]:
        return frozenset(int(m) for m in np.flatnonzero(self.presence_row))

    def stacked(self) -> np.ndarray:
        """All modalities as one ``(M, *shape)`` array, zeros where absent."""
        out = np.zeros((self.n_modalities,) + self.label.shape, dtype=np.float32)
        for m, img in self.images.items():
            out[m] = img
        return out

    def __eq__(self, other):
        if not isinstance(other, MultiModalSample):
            return NotImplemented
        return (
            np.array_equal(self.presence_row, other.presence_row)
            and np.array_equal(self.label, other.label)
            and self.images.keys() == other.images.keys()
            and all(np.array_equal(self.images[m], other.images[m]) for m in self.images)
        )


@dataclass
class DatasetSpec:
    """Parameters of a synthetic dataset.

    ``profiles[m]`` lists the foreground classes visible in modality ``m``;
    ``None`` means every class is visible. ``outer_radius`` is the range of
    the outermost ellipse's semi-axes as a fraction of the smallest spatial
    dimension, ``shrink`` the range of the child/parent semi-axis ratio.
    """

    n_samples: int = 120
    n_modalities: int = 3
    n_classes: int = 3
    shape: tuple[int, ...] = (64, 64)
    profiles: list | None = None
    noise: float = 0.1
    seed: int = 0
    outer_radius: tuple[float, float] = (0.2, 0.35)
    shrink: tuple[float, float] = (0.45, 0.7)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_modalities < 2:
            raise ValueError("n_modalities must be >= 2")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if len(self.shape) not in (2, 3):
            raise ValueError(f"spatial shape must be 2-D or 3-D, got {self.shape}")
        if self.profiles is not None and len(self.profiles) != self.n_modalities:
            raise ValueError("profiles must list one entry per modality")

    def visible(self, m: int) -> frozenset[int]:
        if self.profiles is None or self.profiles[m] is None:
            return frozenset(range(1, self.n_classes))
        return frozenset(int(k) for k in self.profiles[m])

    def min_extent(self) -> int:
        # innermost region needs a few pixels of semi-axis after K-2 shrinks
        return int(np.ceil(3.0 / (self.outer_radius[0] * self.shrink[0] ** (self.n_classes - 2))))

    def foreground_band(self, k: int) -> tuple[float, float]:
        """Bounds on the pixel fraction covered by classes ``>= k``.

        The upper bound is the ellipse area at maximal radii; the lower bound
        uses minimal radii and the worst-case clipping of nested ellipses.
        """
        d = len(self.shape)
        unit = np.pi if d == 2 else 4.0 / 3.0 * np.pi
        box = float(np.prod(self.shape)) / min(self.shape) ** d
        hi = unit * (self.outer_radius[1] * self.shrink[1] ** (k - 1)) ** d / box
        lo = unit * (self.outer_radius[0] * (self.shrink[0] ** (k - 1)) * 0.5) ** d / box
        return lo, min(hi, 1.0)


def _ellipse(grid, center, radii):
    acc = 0.0
    for g, c, r in zip(grid, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def make_label(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    shape = spec.shape
    grid = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    base = min(shape)
    for _ in range(100):
        label = np.zeros(shape, dtype=np.uint8)
        radii = base * rng.uniform(*spec.outer_radius, size=len(shape))
        lo = radii + 1
        hi = np.array(shape) - radii - 2
        center = rng.uniform(lo, np.maximum(hi, lo))
        region = np.ones(shape, dtype=bool)
        for k in range(1, spec.n_classes):
            if k > 1:
                parent = radii
                radii = parent * rng.uniform(*spec.shrink, size=len(shape))
                slack = parent - radii
                center = center + rng.uniform(-0.5, 0.5, size=len(shape)) * slack
            region = region & _ellipse(grid, center, radii)
            label[region] = k
        counts = np.bincount(label.ravel(), minlength=spec.n_classes)
        if counts.min() > 0:
            return label
    raise ValueError(f"could not place {spec.n_classes - 1} nested regions in shape {shape}")


def render_modality(label, visible, n_classes, noise, rng) -> np.ndarray:
    levels = np.array([float(k) if k in visible else 0.0 for k in range(n_classes)])
    img = levels[label]
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=label.shape)
    std = img.std()
    img = img - img.mean()
    if std > 0:
        img = img / std
    return img.astype(np.float32)


def generate_dataset(spec: DatasetSpec) -> list[MultiModalSample]:
    """Deterministically generate ``spec.n_samples`` complete samples."""
    if min(spec.shape) < spec.min_extent():
        raise ValueError(
            f"spatial shape {spec.shape} too small for {spec.n_classes - 1} nested regions "
            f"(need every side >= {spec.min_extent()})"
        )
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_samples)
    samples = []
    full = np.ones(spec.n_modalities, dtype=np.uint8)
    for child in children:
        rng = np.random.default_rng(child)
        label = make_label(spec, rng)
        images = {
            m: render_modality(label, spec.visible(m), spec.n_classes, spec.noise, rng)
            for m in range(spec.n_modalities)
        }
        samples.append(MultiModalSample(images, label, full.copy()))
    return samples


def apply_presence(sample: MultiModalSample, presence_row) -> MultiModalSample:
    """Drop the modalities whose entry in ``presence_row`` is 0."""
    row = np.asarray(presence_row, dtype=np.uint8)
    if row.shape != (sample.n_modalities,):
        raise ValueError(f"presence row must have length {sample.n_modalities}")
    if not row.any():
        raise ValueError("presence row removes every modality")
    missing = [m for m in np.flatnonzero(row) if m not in sample.images]
    if missing:
        raise ValueError(f"modalities {missing} are already absent from the sample")
    images = {m: img for m, img in sample.images.items() if row[m]}
    return MultiModalSample(images, sample.label, row)


# -- container ----------------------------------------------------------------

_HEAD = struct.Struct("<4sBIIII")  # magic, version, records, M, K, rank


def save_container(samples: Sequence[MultiModalSample], path, *, n_modalities=None, n_classes=None):
    """Write samples to a ``PASS`` file.

    Layout: header (magic, version, record count, M, K, rank, dims), then per
    record the M presence bytes, the float32 images of present modalities in
    index order, and the uint8 label.
    """
    samples = list(samples)
    if samples:
        shape = samples[0].label.shape
        M = samples[0].n_modalities
        K = n_classes if n_classes is not None else int(max(s.label.max() for s in samples)) + 1
    else:
        shape = ()
        M = n_modalities or 0
        K = n_classes or 0
    if K > 256:
        raise ContainerError("labels are stored as uint8; at most 256 classes")
    buf = bytearray(_HEAD.pack(MAGIC, VERSION, len(samples), M, K, len(shape)))
    buf += struct.pack(f"<{len(shape)}I", *shape)
    for s in samples:
        if s.label.shape != shape or s.n_modalities != M:
            raise ContainerError("all records must share spatial shape and modality count")
        buf += s.presence_row.astype(np.uint8).tobytes()
        for m in sorted(s.images):
            buf += np.ascontiguousarray(s.images[m], dtype="<f4").tobytes()
        buf += np.ascontiguousarray(s.label, dtype=np.uint8).tobytes()
    Path(path).write_bytes(bytes(buf))
    return Path(path)


def load_container(path) -> list[MultiModalSample]:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise ContainerError("truncated container header")
    magic, version, count, M, K, rank = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    off = _HEAD.size
    if rank not in (0, 2, 3) or len(data) < off + 4 * rank:
        raise ContainerError("corrupted or truncated spatial header")
    shape = struct.unpack_from(f"<{rank}I", data, off)
    off += 4 * rank
    npix = int(np.prod(shape)) if rank else 0
    samples = []
    for i in range(count):
        if len(data) < off + M:
            raise ContainerError(f"truncated record {i}")
        row = np.frombuffer(data, dtype=np.uint8, count=M, offset=off).copy()
        off += M
        if not np.isin(row, (0, 1)).all():
            raise ContainerError(f"record {i} has a non-binary presence row")
        need = int(row.sum()) * npix * 4 + npix
        if len(data) < off + need:
            raise ContainerError(f"truncated record {i}")
        images = {}
        for m in np.flatnonzero(row):
            arr = np.frombuffer(data, dtype="<f4", count=npix, offset=off)
            images[int(m)] = arr.astype(np.float32).reshape(shape)
            off += 4 * npix
        label = np.frombuffer(data, dtype=np.uint8, count=npix, offset=off).copy().reshape(shape)
        off += npix
        if label.size and label.max() >= K:
            raise ContainerError(f"record {i} has label values >= K={K}")
        samples.append(MultiModalSample(images, label, row))
    if off != len(data):
        raise ContainerError(f"{len(data) - off} trailing bytes after {count} records")
    return samples


def container_header(path) -> dict:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise ContainerError("truncated container header")
    magic, version, count, M, K, rank = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}")
    shape = struct.unpack_from(f"<{rank}I", data, _HEAD.size)
    return {"version": version, "records": count, "n_modalities": M, "n_classes": K, "shape": shape}
