"""Sample container files, dataset directories and patient-level fold splits.

Sample file layout (little-endian):

    magic    7 bytes  b"BRUSMP1"
    u32      rows, u32 columns
    float32  rows*columns image payload
    u8       rows*columns label payload
    u32      patient id
    u64      generator seed

Images are also exportable as binary PGM for eyeballing; label maps are
scaled by 36 so class 6 maps to gray 216.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .synth import Sample

MAGIC = b"BRUSMP1"
LABEL_GRAY_STEP = 36


def save_sample(path, s: Sample) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = s.labels.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(s.image[0], dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())
        fh.write(struct.pack("<IQ", s.patient, s.seed % 2 ** 64))


def load_sample(path) -> Sample:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ConfigError(f"{path}: not a sample file (bad magic)")
        h, w = struct.unpack("<II", fh.read(8))
        image = np.frombuffer(fh.read(4 * h * w), dtype="<f4").reshape(h, w).astype(np.float64)
        labels = np.frombuffer(fh.read(h * w), dtype=np.uint8).reshape(h, w).copy()
        patient, seed = struct.unpack("<IQ", fh.read(12))
    index = 0
    stem = path.stem
    if "_s" in stem:
        try:
            index = int(stem.rsplit("_s", 1)[1])
        except ValueError:
            pass
    return Sample(image=image[None], labels=labels, patient=patient,
                  index=index, seed=seed, provenance="file")


def sample_filename(patient: int, index: int) -> str:
    return f"p{patient:03d}_s{index:03d}.brusmp"


def save_dataset(directory, samples: list[Sample]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in samples:
        p = directory / sample_filename(s.patient, s.index)
        save_sample(p, s)
        paths.append(p)
    return paths


def load_dataset(directory) -> list[Sample]:
    directory = Path(directory)
    files = sorted(directory.glob("*.brusmp"))
    if not files:
        raise ConfigError(f"no samples under {directory}")
    return [load_sample(p) for p in files]


def class_pixel_stats(samples: list[Sample]) -> dict[int, int]:
    counts = {c: 0 for c in range(7)}
    for s in samples:
        values, n = np.unique(s.labels, return_counts=True)
        for v, k in zip(values, n):
            counts[int(v)] += int(k)
    return counts


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.dtype != np.uint8:
        raise ConfigError("PGM export expects uint8 data")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def labels_to_gray(labels: np.ndarray) -> np.ndarray:
    return (labels.astype(np.uint16) * LABEL_GRAY_STEP).clip(0, 255).astype(np.uint8)


def image_to_gray(image01: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image01 * 255.0), 0, 255).astype(np.uint8)


def subsample_spatial(s: Sample, factor: int) -> Sample:
    """Keep every factor-th pixel of both image and labels."""
    if factor < 1:
        raise ConfigError("subsample factor must be >= 1")
    return s.copy_with(
        image=np.ascontiguousarray(s.image[:, ::factor, ::factor]),
        labels=np.ascontiguousarray(s.labels[::factor, ::factor]),
        provenance=s.provenance + f"+sub{factor}",
    )


@dataclass
class DataSplit:
    fold: int
    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)
    train_patients: tuple[int, ...] = ()
    val_patients: tuple[int, ...] = ()
    test_patients: tuple[int, ...] = ()


def split_folds(samples: list[Sample], k: int, val_fraction: float = 0.10,
                seed: int = 0) -> list[DataSplit]:
    """Patient-level k-fold partition; within each fold's training patients,
    a validation share is held out, also at patient level."""
    if k < 2:
        raise ConfigError("need at least 2 folds (k=1 leaves an empty test set)")
    patients = sorted({s.patient for s in samples})
    if len(patients) % k:
        raise ConfigError(f"{len(patients)} patients not divisible into {k} folds")
    if not 0 < val_fraction < 1:
        raise ConfigError("val_fraction must be in (0, 1)")

    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(5,)))
    order = [patients[i] for i in rng.permutation(len(patients))]
    per_fold = len(patients) // k
    by_patient: dict[int, list[Sample]] = {p: [] for p in patients}
    for s in samples:
        by_patient[s.patient].append(s)

    splits = []
    for fold in range(k):
        test_patients = order[fold * per_fold:(fold + 1) * per_fold]
        remaining = [p for p in order if p not in test_patients]
        n_val = max(1, round(val_fraction * len(remaining)))
        if n_val >= len(remaining):
            raise ConfigError("not enough patients to carve out a validation split")
        val_patients = remaining[:n_val]
        train_patients = remaining[n_val:]
        split = DataSplit(
            fold=fold,
            train=[s for p in train_patients for s in by_patient[p]],
            val=[s for p in val_patients for s in by_patient[p]],
            test=[s for p in test_patients for s in by_patient[p]],
            train_patients=tuple(train_patients),
            val_patients=tuple(val_patients),
            test_patients=tuple(test_patients),
        )
        overlap = set(split.train_patients) & set(split.test_patients)
        assert not overlap, f"patient leak across train/test: {overlap}"
        splits.append(split)
    return splits
