"""Datasets: FER2013 CSV ingestion, schematic synthetic faces, augmentation and batching.

Class indices follow the FER2013 convention for every dataset:
0 angry, 1 disgust, 2 fear, 3 happy, 4 sad, 5 surprise, 6 neutral.
"""
from __future__ import annotations

import csv
import hashlib
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyDataset, ImageTooSmall, InvalidShape, MalformedRow
from .kernels import grid_generate, grid_sample
from .tensor import Tensor, no_grad

CLASS_NAMES = ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")
NUM_CLASSES = len(CLASS_NAMES)
FER_SIZE = 48
USAGES = ("Training", "PublicTest", "PrivateTest")


@dataclass
class Sample:
    pixels: np.ndarray  # 1 x H x W, values in [0, 1]
    label: int
    meta: dict = field(default_factory=dict)


class Dataset:
    """Ordered collection of samples stored as one N x 1 x H x W float32 array."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, meta: Optional[List[dict]] = None):
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1] != 1:
            raise InvalidShape(f"images must be N x 1 x H x W, got {images.shape}")
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != images.shape[0]:
            raise InvalidShape(f"{labels.shape[0]} labels for {images.shape[0]} images")
        self.images = images
        self.labels = labels
        self.meta = list(meta) if meta is not None else [{} for _ in range(len(labels))]

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), self.meta[i])

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Dataset":
        if not samples:
            raise EmptyDataset("no samples")
        return cls(np.stack([s.pixels for s in samples]), np.array([s.label for s in samples]),
                   [s.meta for s in samples])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], [self.meta[i] for i in idx])

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()


# FER2013 ---------------------------------------------------------------------

def load_fer2013_csv(path, usage_filter: str = "all", limit: Optional[int] = None) -> Dataset:
    """Read ``emotion,pixels,Usage`` rows; pixels are 2304 space-separated integers 0-255."""
    if usage_filter != "all" and usage_filter not in USAGES:
        raise ValueError(f"usage_filter must be 'all' or one of {USAGES}")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    n_pix = FER_SIZE * FER_SIZE
    images, labels, meta = [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["emotion", "pixels", "Usage"]:
            raise MalformedRow(1, f"header must be emotion,pixels,Usage, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if limit is not None and len(labels) >= limit:
                break
            if not row:
                continue
            if len(row) != 3:
                raise MalformedRow(lineno, f"expected 3 fields, got {len(row)}")
            usage = row[2].strip()
            if usage_filter != "all" and usage != usage_filter:
                continue
            try:
                label = int(row[0])
                pix = np.array(row[1].split(), dtype=np.int64)
            except ValueError as exc:
                raise MalformedRow(lineno, str(exc)) from None
            if not 0 <= label < NUM_CLASSES:
                raise MalformedRow(lineno, f"label {label} outside 0-6")
            if pix.size != n_pix:
                raise MalformedRow(lineno, f"{pix.size} pixels, expected {n_pix}")
            if pix.min() < 0 or pix.max() > 255:
                raise MalformedRow(lineno, "pixel values must lie in 0-255")
            images.append((pix.astype(np.float32) / 255.0).reshape(1, FER_SIZE, FER_SIZE))
            labels.append(label)
            meta.append({"source": "fer2013", "usage": usage, "row": lineno})
    if not labels:
        return Dataset(np.zeros((0, 1, FER_SIZE, FER_SIZE), np.float32), np.zeros(0, np.int64), [])
    return Dataset(np.stack(images), np.array(labels), meta)


# Synthetic faces -------------------------------------------------------------

@dataclass(frozen=True)
class FaceParams:
    label: int
    eye_open: float     # [0, 1]
    brow_angle: float   # [-1, 1], negative lowers the inner ends
    kappa: float        # [-1, 1], positive curves the mouth corners up
    mouth_open: float   # [0, 1]
    jitter_seed: int

    def as_dict(self) -> dict:
        return {"eye_open": self.eye_open, "brow_angle": self.brow_angle, "kappa": self.kappa,
                "mouth_open": self.mouth_open, "jitter_seed": self.jitter_seed}


# nominal (eye_open, brow_angle, kappa, mouth_open) per class
NOMINAL = {
    0: (0.45, -0.8, -0.3, 0.0),   # angry
    1: (0.2, -0.4, -0.5, 0.35),   # disgust
    2: (1.0, 0.7, -0.2, 0.5),     # fear
    3: (0.5, 0.0, 0.8, 0.2),      # happy
    4: (0.4, 0.7, -0.8, 0.0),     # sad
    5: (1.0, 0.5, 0.0, 0.9),      # surprise
    6: (0.0, 0.0, 0.0, 0.0),      # neutral
}
JITTER = 0.15


def face_params(label: int, jitter_seed: int) -> FaceParams:
    rng = np.random.default_rng([jitter_seed, 0])
    e, b, k, m = NOMINAL[label] + rng.uniform(-JITTER, JITTER, size=4)
    return FaceParams(label, float(np.clip(e, 0, 1)), float(np.clip(b, -1, 1)), float(np.clip(k, -1, 1)),
                      float(np.clip(m, 0, 1)), jitter_seed)


def _segment_distance(u, v, p0, p1):
    d = np.subtract(p1, p0)
    t = np.clip(((u - p0[0]) * d[0] + (v - p0[1]) * d[1]) / (d @ d), 0.0, 1.0)
    return np.hypot(u - (p0[0] + t * d[0]), v - (p0[1] + t * d[1]))


def render_face(params: FaceParams, size: Tuple[int, int]) -> np.ndarray:
    """Rasterize a schematic face at 2x resolution and box-filter down to ``size``."""
    h, w = size
    rng = np.random.default_rng([params.jitter_seed, 1])
    shift_u, shift_v = rng.uniform(-0.025, 0.025, size=2)
    zoom = rng.uniform(0.97, 1.03)
    bg, skin, ink = rng.uniform(0.1, 0.2), rng.uniform(0.55, 0.75), rng.uniform(0.0, 0.1)

    vv, uu = np.meshgrid((np.arange(2 * h) + 0.5) / (2 * h), (np.arange(2 * w) + 0.5) / (2 * w), indexing="ij")
    u = (uu - 0.5 - shift_u) / zoom + 0.5
    v = (vv - 0.5 - shift_v) / zoom + 0.5

    img = np.full(u.shape, bg)
    img[((u - 0.5) / 0.40) ** 2 + ((v - 0.52) / 0.47) ** 2 <= 1.0] = skin
    dark = np.zeros(u.shape, dtype=bool)

    ry = 0.012 + 0.055 * params.eye_open
    for cx in (0.32, 0.68):
        dark |= ((u - cx) / 0.09) ** 2 + ((v - 0.36) / ry) ** 2 <= 1.0

    half, drop = 0.1, -params.brow_angle * 0.1 * math.sin(math.radians(25))
    for cx, inner in ((0.32, 1.0), (0.68, -1.0)):
        p_in = (cx + inner * half, 0.22 + drop)
        p_out = (cx - inner * half, 0.22 - drop)
        dark |= _segment_distance(u, v, p_out, p_in) <= 0.025

    um = (u - 0.5) / 0.17
    inside = np.abs(um) <= 1.0
    arc = np.clip(1.0 - um ** 2, 0.0, 1.0)
    centre = 0.80 + params.kappa * 0.06 * (arc - 0.5)
    gap = 0.045 * params.mouth_open * np.sqrt(arc) + 0.02
    dark |= inside & (np.abs(v - centre) <= gap)

    img[dark] = ink
    img = img.reshape(h, 2, w, 2).mean(axis=(1, 3))
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_synthetic_faces(n: int, size: Tuple[int, int] = (32, 32), seed: int = 0) -> Dataset:
    """Balanced schematic-face dataset; class ``i % 7`` for the i-th sample before shuffling."""
    h, w = size
    if h < 16 or w < 16:
        raise ImageTooSmall(f"synthetic faces need at least 16x16, got {h}x{w}")
    if n < 1:
        raise EmptyDataset("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % NUM_CLASSES
    rng.shuffle(labels)
    jitter = rng.integers(0, 2**63 - 1, size=n)
    images = np.empty((n, 1, h, w), dtype=np.float32)
    meta = []
    for i in range(n):
        p = face_params(int(labels[i]), int(jitter[i]))
        images[i, 0] = render_face(p, size)
        meta.append({"source": "synthetic", "params": p.as_dict(), "aug": None})
    return Dataset(images, labels, meta)


# PGM I/O ---------------------------------------------------------------------

def write_pgm(path, array: np.ndarray, maxval: int = 255) -> None:
    """Write a 2-D integer array as plain (P2) PGM."""
    a = np.asarray(array)
    if a.ndim != 2:
        raise InvalidShape(f"PGM needs a 2-D array, got {a.shape}")
    a = a.astype(np.int64)
    if a.min(initial=0) < 0 or a.max(initial=0) > maxval:
        raise ValueError(f"PGM values must lie in [0, {maxval}]")
    lines = [f"P2\n{a.shape[1]} {a.shape[0]}\n{maxval}\n"]
    lines.extend(" ".join(str(int(x)) for x in row) + "\n" for row in a)
    Path(path).write_text("".join(lines), encoding="ascii")


def read_pgm(path) -> Tuple[np.ndarray, int]:
    tokens = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.array(tokens[4:], dtype=np.int64)
    if values.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {values.size}")
    return values.reshape(h, w), maxval


PGM_MAXVAL = 65535


def export_dataset(dataset: Dataset, directory) -> None:
    """Write one PGM per sample plus ``labels.txt`` with ``index,label,params`` lines."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rows = ["index,label,params\n"]
    for i, s in enumerate(dataset):
        write_pgm(d / f"{i:05d}.pgm", np.rint(s.pixels[0] * PGM_MAXVAL), PGM_MAXVAL)
        params = s.meta.get("params") or {}
        rows.append(f"{i},{s.label},{';'.join(f'{k}={v}' for k, v in params.items())}\n")
    (d / "labels.txt").write_text("".join(rows), encoding="utf-8")


def import_dataset(directory) -> Dataset:
    d = Path(directory)
    lines = (d / "labels.txt").read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "index,label,params":
        raise MalformedRow(1, "labels.txt header must be index,label,params")
    images, labels, meta = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",", 2)
        if len(parts) != 3:
            raise MalformedRow(lineno, "expected index,label,params")
        idx, label = int(parts[0]), int(parts[1])
        if not 0 <= label < NUM_CLASSES:
            raise MalformedRow(lineno, f"label {label} outside 0-6")
        arr, maxval = read_pgm(d / f"{idx:05d}.pgm")
        images.append((arr / maxval).astype(np.float32)[None])
        labels.append(label)
        params = dict(kv.split("=", 1) for kv in parts[2].split(";") if kv)
        meta.append({"source": "pgm", "params": params})
    if not labels:
        raise EmptyDataset(f"{d} holds no samples")
    return Dataset(np.stack(images), np.array(labels), meta)


# Augmentation ----------------------------------------------------------------

@dataclass(frozen=True)
class Occlusion:
    fraction: float = 0.0
    fill: str = "zero"  # "zero" or "mean"
    rect: Optional[Tuple[float, float, float, float]] = None  # explicit fractional (r0, r1, c0, c1)

    def __post_init__(self):
        if self.fill not in ("zero", "mean"):
            raise ValueError(f"fill must be 'zero' or 'mean', got {self.fill!r}")
        area = self.fraction
        if self.rect is not None:
            r0, r1, c0, c1 = self.rect
            if not (0 <= r0 < r1 <= 1 and 0 <= c0 < c1 <= 1):
                raise ValueError(f"invalid occlusion rectangle {self.rect}")
            area = (r1 - r0) * (c1 - c0)
        if not 0 <= area <= 0.5:
            raise ValueError(f"occlusion must cover at most half the image, got {area:.3f}")


@dataclass(frozen=True)
class Pose:
    rotation: float = 0.0  # degrees, in-plane
    shear: float = 0.0     # horizontal shear factor

    def __post_init__(self):
        if abs(self.rotation) > 45:
            raise ValueError(f"|rotation| must be <= 45 degrees, got {self.rotation}")

    def theta(self) -> np.ndarray:
        a = math.radians(self.rotation)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        shear = np.array([[1.0, self.shear], [0.0, 1.0]])
        return np.hstack([rot @ shear, np.zeros((2, 1))])


@dataclass(frozen=True)
class AugSpec:
    occlusion: Optional[Occlusion] = None
    pose: Optional[Pose] = None
    seed: int = 0

    def describe(self) -> str:
        parts = []
        if self.occlusion is not None:
            o = self.occlusion
            where = f"rect={o.rect}" if o.rect is not None else f"fraction={o.fraction:g}"
            parts.append(f"occlusion({where},fill={o.fill})")
        if self.pose is not None:
            parts.append(f"pose(rotation={self.pose.rotation:g},shear={self.pose.shear:g})")
        return "+".join(parts) if parts else "identity"


def _occlusion_rect(occ: Occlusion, h: int, w: int, rng: np.random.Generator) -> Tuple[int, int, int, int]:
    if occ.rect is not None:
        r0, r1, c0, c1 = occ.rect
        return int(math.floor(r0 * h)), int(math.floor(r1 * h)) if r1 < 1 else h, \
            int(math.floor(c0 * w)), int(math.floor(c1 * w)) if c1 < 1 else w
    f = occ.fraction
    hf = float(np.clip(rng.uniform(0.6, 1.6) * math.sqrt(f), f, 1.0))
    wf = min(1.0, f / hf)
    rh, rw = max(1, int(round(hf * h))), max(1, int(round(wf * w)))
    r0 = int(rng.integers(0, h - rh + 1))
    c0 = int(rng.integers(0, w - rw + 1))
    return r0, r0 + rh, c0, c0 + rw


def warp_image(pixels: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Affine warp of a 1 x H x W image through the grid sampler (zero padding)."""
    with no_grad():
        th = Tensor(np.asarray(theta, dtype=np.float64)[None])
        img = Tensor(pixels[None].astype(np.float64))
        out = grid_sample(img, grid_generate(th, pixels.shape[1:]))
    return out.data[0].astype(pixels.dtype)


def augment(sample: Sample, spec: AugSpec) -> Sample:
    pixels = sample.pixels.copy()
    h, w = pixels.shape[1:]
    rng = np.random.default_rng(spec.seed)
    record = {}
    pose = spec.pose
    if pose is not None and (pose.rotation != 0 or pose.shear != 0):
        pixels = np.clip(warp_image(pixels, pose.theta()), 0.0, 1.0)
        record["pose"] = (pose.rotation, pose.shear)
    occ = spec.occlusion
    if occ is not None and (occ.rect is not None or occ.fraction > 0):
        r0, r1, c0, c1 = _occlusion_rect(occ, h, w, rng)
        value = 0.0 if occ.fill == "zero" else float(pixels.mean())
        pixels[:, r0:r1, c0:c1] = value
        record["occlusion"] = (r0, r1, c0, c1, occ.fill)
    meta = dict(sample.meta)
    meta["aug"] = {"spec": spec.describe(), "seed": spec.seed, **record}
    return Sample(pixels, sample.label, meta)


def augment_dataset(dataset: Dataset, spec: AugSpec) -> Dataset:
    """Apply ``spec`` to every sample; sample i uses seed ``spec.seed + i``."""
    return Dataset.from_samples([augment(s, replace(spec, seed=spec.seed + i)) for i, s in enumerate(dataset)])


def pose_occlusion_testset(dataset: Dataset, seed: int = 0, max_rotation: float = 30.0,
                           occlusion_fraction: float = 0.15) -> Dataset:
    """Per-sample random in-plane rotation and a random occluding block."""
    rng = np.random.default_rng([seed, 3])
    out = []
    for i, s in enumerate(dataset):
        rot = float(rng.uniform(-max_rotation, max_rotation))
        spec = AugSpec(Occlusion(occlusion_fraction, "zero"), Pose(rot, 0.0), seed=int(rng.integers(0, 2**31)))
        out.append(augment(s, spec))
    return Dataset.from_samples(out)


# Batching --------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


def make_batches(dataset: Dataset, batch_size: int, shuffle_seed: Optional[int] = None) -> List[Batch]:
    """Split into batches following a permutation drawn from ``shuffle_seed`` (identity when None)."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot batch an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    return [Batch(dataset.images[idx], dataset.labels[idx], idx)
            for idx in (order[i : i + batch_size] for i in range(0, n, batch_size))]


def split(dataset: Dataset, n_train: int, seed: int = 0) -> Tuple[Dataset, Dataset]:
    order = np.random.default_rng([seed, 4]).permutation(len(dataset))
    return dataset.subset(order[:n_train]), dataset.subset(order[n_train:])


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Pixel-space nearest-class-mean classifier; a floor for learned models."""
    x = train.images.reshape(len(train), -1).astype(np.float64)
    cents = np.stack([x[train.labels == k].mean(axis=0) for k in range(NUM_CLASSES)])
    t = test.images.reshape(len(test), -1).astype(np.float64)
    d = ((t[:, None, :] - cents[None]) ** 2).sum(axis=2)
    return float((d.argmin(axis=1) == test.labels).mean())
