"""Synthetic texture ROIs, patch sampling/augmentation and patient-grouped splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .ops import bilinear_matrix

NON_CANCER = 0
CANCER = 1
LABEL_NAMES = {NON_CANCER: "non_cancer", CANCER: "cancer"}
LABEL_IDS = {v: k for k, v in LABEL_NAMES.items()}

MIN_SIDE = 8
STAGE1_LIMIT = 16  # dims above this get the 8..15 px crop


@dataclass
class PatchRecord:
    patient_id: str
    image: np.ndarray
    label: int

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 2 or min(img.shape) < MIN_SIDE:
            raise ValueError(f"ROI must be 2-D with sides >= {MIN_SIDE}, got {img.shape}")
        if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
            raise ValueError("ROI values must be finite and lie in [0, 1]")
        if self.label not in LABEL_NAMES:
            raise ValueError(f"unknown label {self.label}")
        self.image = img


@dataclass
class SplitManifest:
    train_ids: List[str]
    test_ids: List[str]
    seed: int

    def select(self, records: Sequence[PatchRecord], which: str) -> List[PatchRecord]:
        ids = set(self.train_ids if which == "train" else self.test_ids)
        return [r for r in records if r.patient_id in ids]

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", "set"])
            w.writerows([pid, "train"] for pid in self.train_ids)
            w.writerows([pid, "test"] for pid in self.test_ids)

    @classmethod
    def read(cls, path, seed: int = -1) -> "SplitManifest":
        train, test = [], []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                (train if row["set"] == "train" else test).append(row["patient_id"])
        return cls(train, test, seed)


@dataclass
class ClassParams:
    """Texture model for the two classes.

    Both classes are Gaussian-smoothed white noise around mid-grey. The
    positive class gets a longer correlation length, more contrast and a
    faint periodic blob pattern, each scaled by ``difficulty`` so that
    ``difficulty=0`` makes the classes identically distributed.
    """

    difficulty: float = 1.0
    correlation: float = 0.8
    correlation_gain: float = 0.5
    contrast: float = 0.07
    contrast_gain: float = 3.0
    blob_amplitude: float = 0.05
    blob_period: float = 6.0
    patient_offset_std: float = 0.02
    positive_fraction: float = 0.5
    min_roi: int = 8
    max_roi: int = 24

    def __post_init__(self):
        if not 0.0 <= self.difficulty <= 1.0:
            raise ValueError(f"difficulty must lie in [0, 1], got {self.difficulty}")

    def texture(self, label: int) -> Tuple[float, float, float]:
        d = self.difficulty if label == CANCER else 0.0
        return (
            self.correlation * (1 + d * self.correlation_gain),
            self.contrast * (1 + d * self.contrast_gain),
            self.blob_amplitude * d,
        )


def _texture(rng: np.random.Generator, h: int, w: int, sigma: float, contrast: float,
             blob: float, period: float, phase: Tuple[float, float], offset: float) -> np.ndarray:
    margin = int(math.ceil(4 * sigma)) + 1
    field_ = gaussian_filter(rng.standard_normal((h + 2 * margin, w + 2 * margin)), sigma, mode="wrap")
    # unit variance for white noise smoothed by a 2-D Gaussian of width sigma
    field_ = field_[margin:margin + h, margin:margin + w] * (2 * math.sqrt(math.pi) * sigma)
    img = 0.5 + offset + contrast * field_
    if blob:
        yy, xx = np.mgrid[0:h, 0:w]
        wave = np.cos(2 * np.pi * (yy + phase[0]) / period) * np.cos(2 * np.pi * (xx + phase[1]) / period)
        img = img + blob * np.maximum(wave, 0.0) ** 2
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(num_patients: int, rois_per_patient: int, class_params: Optional[ClassParams] = None,
                       seed: int = 0) -> List[PatchRecord]:
    cp = class_params or ClassParams()
    if num_patients < 1 or rois_per_patient < 1:
        raise ValueError("need at least one patient and one ROI per patient")
    root = np.random.SeedSequence(seed)
    records = []
    for p, child in enumerate(root.spawn(num_patients)):
        rng = np.random.default_rng(child)
        pid = f"P{p:03d}"
        phase = tuple(rng.uniform(0, cp.blob_period, size=2))
        offset = rng.normal(0.0, cp.patient_offset_std)
        n_pos = int(round(cp.positive_fraction * rois_per_patient))
        labels = np.array([CANCER] * n_pos + [NON_CANCER] * (rois_per_patient - n_pos))
        rng.shuffle(labels)
        for lab in labels:
            h, w = rng.integers(cp.min_roi, cp.max_roi + 1, size=2)
            sigma, contrast, blob = cp.texture(int(lab))
            img = _texture(rng, int(h), int(w), sigma, contrast, blob, cp.blob_period, phase, offset)
            records.append(PatchRecord(pid, img, int(lab)))
    return records


def mean_variance_features(records: Sequence[PatchRecord]) -> np.ndarray:
    return np.array([[r.image.mean(), r.image.var()] for r in records])


def nearest_centroid_accuracy(records: Sequence[PatchRecord]) -> float:
    """Resubstitution accuracy of a nearest-centroid rule on standardized (mean, variance)."""
    x = mean_variance_features(records)
    y = np.array([r.label for r in records])
    x = (x - x.mean(axis=0)) / np.where(x.std(axis=0) > 0, x.std(axis=0), 1.0)
    centroids = np.stack([x[y == k].mean(axis=0) for k in (NON_CANCER, CANCER)])
    pred = np.argmin(((x[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    return float((pred == y).mean())


# ---------------------------------------------------------------------------
# patch extraction
# ---------------------------------------------------------------------------


def stage1_crop(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Crop every dimension longer than 16 px to a random length in [8, 15]."""
    h, w = image.shape
    top = left = 0
    if h > STAGE1_LIMIT:
        nh = int(rng.integers(MIN_SIDE, STAGE1_LIMIT))
        top = int(rng.integers(0, h - nh + 1))
        h = nh
    if w > STAGE1_LIMIT:
        nw = int(rng.integers(MIN_SIDE, STAGE1_LIMIT))
        left = int(rng.integers(0, w - nw + 1))
        w = nw
    return image[top:top + h, left:left + w]


def square_crop(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape
    side = min(h, w)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    return image[top:top + side, left:left + side]


def sample_patch(record: PatchRecord, rng: np.random.Generator) -> np.ndarray:
    return square_crop(stage1_crop(record.image, rng), rng)


def apply_dihedral(patch: np.ndarray, hflip: bool, vflip: bool, quarter_turns: int) -> np.ndarray:
    out = patch
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1, :]
    return np.ascontiguousarray(np.rot90(out, quarter_turns))


def augment(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise ValueError(f"augment expects a square patch, got {patch.shape}")
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    k = int(rng.integers(0, 4))
    return apply_dihedral(patch, hflip, vflip, k)


def resize_to_input(patch: np.ndarray, target: int, dtype=np.float32) -> np.ndarray:
    """Bilinear (half-pixel centre) resize of a square patch to (1, target, target)."""
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise ValueError(f"resize_to_input expects a square patch, got {patch.shape}")
    A = bilinear_matrix(patch.shape[0], target)
    return (A @ patch @ A.T)[None].astype(dtype)


def make_batch(records: Sequence[PatchRecord], rngs: Sequence[np.random.Generator], input_size: int,
               augmentation: bool) -> Tuple[np.ndarray, np.ndarray]:
    xs = []
    for rec, rng in zip(records, rngs):
        patch = sample_patch(rec, rng)
        if augmentation:
            patch = augment(patch, rng)
        xs.append(resize_to_input(patch, input_size))
    return np.stack(xs), np.array([r.label for r in records], dtype=np.int64)


# ---------------------------------------------------------------------------
# splits and class weights
# ---------------------------------------------------------------------------


def split_by_patient(records: Sequence[PatchRecord], fraction: float = 0.7, seed: int = 0) -> SplitManifest:
    ids = sorted({r.patient_id for r in records})
    if len(ids) < 2:
        raise ValueError("need at least two patients to split")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = math.floor(Fraction(str(fraction)) * len(ids))
    return SplitManifest(shuffled[:n_train], shuffled[n_train:], seed)


@dataclass(frozen=True)
class ClassWeights:
    cancer: float
    non_cancer: float

    def by_label(self) -> np.ndarray:
        w = np.empty(2)
        w[CANCER] = self.cancer
        w[NON_CANCER] = self.non_cancer
        return w


PAPER_CLASS_WEIGHTS = ClassWeights(cancer=0.81, non_cancer=1.3)


def compute_class_weights(records: Sequence[PatchRecord]) -> ClassWeights:
    """Inverse-frequency weights N / (classes * N_c)."""
    labels = np.array([r.label for r in records])
    counts = {k: int((labels == k).sum()) for k in LABEL_NAMES}
    if any(c == 0 for c in counts.values()):
        raise ValueError(f"every class needs at least one sample, got counts {counts}")
    n = len(labels)
    return ClassWeights(cancer=n / (2 * counts[CANCER]), non_cancer=n / (2 * counts[NON_CANCER]))


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["patient_id", "path", "label"]


def write_dataset(records: Sequence[PatchRecord], out_dir) -> Path:
    """Write 16-bit grayscale PNGs plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    counters: Dict[str, int] = {}
    rows = []
    for rec in records:
        i = counters.get(rec.patient_id, 0)
        counters[rec.patient_id] = i + 1
        rel = f"images/{rec.patient_id}_{i:04d}.png"
        Image.fromarray(np.round(rec.image * 65535).astype(np.uint16)).save(out / rel)
        rows.append([rec.patient_id, rel, LABEL_NAMES[rec.label]])
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    return manifest


def read_dataset(manifest) -> List[PatchRecord]:
    manifest = Path(manifest)
    records = []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ValueError(f"manifest header must be {','.join(MANIFEST_HEADER)}")
        for row in reader:
            arr = np.array(Image.open(manifest.parent / row["path"]))
            scale = 65535.0 if arr.dtype == np.uint16 else 255.0
            records.append(PatchRecord(row["patient_id"], arr.astype(np.float64) / scale, LABEL_IDS[row["label"]]))
    return records
