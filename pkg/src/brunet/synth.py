"""Synthetic layered cross-section images with ground-truth label maps.

Seven smooth boundary curves (top margin plus six cumulative layer
thicknesses, each carrying correlated noise) partition every column into
background 0 above and below and ordered classes 1..6 in between.
Optional drusen-like pathology lifts the boundaries above the lowest one
with Gaussian bumps, which makes the deep layers locally non-convex.
Region intensities plus speckle noise render the image. Everything is a
pure function of (params, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import ConfigError


@dataclass(frozen=True)
class GenParams:
    height: int = 128
    width: int = 128
    layer_thickness: tuple[float, ...] = (10.0, 8.0, 12.0, 10.0, 12.0, 10.0)
    thickness_sigma: float = 1.5
    top_margin: float = 26.0
    margin_sigma: float = 3.0
    smoothness: float = 16.0          # correlation length of boundary noise, px
    drusen_count: int = 2
    drusen_max_height: float = 16.0
    drusen_width: tuple[float, float] = (4.0, 9.0)
    speckle: float = 0.05
    intensities: tuple[float, ...] = (0.04, 0.62, 0.30, 0.52, 0.22, 0.44, 0.68)
    seed: int = 0

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ConfigError("image extents must be at least 16")
        if len(self.layer_thickness) != 6 or any(t <= 0 for t in self.layer_thickness):
            raise ConfigError("need 6 positive layer thicknesses")
        if len(self.intensities) != 7:
            raise ConfigError("need 7 class intensities")
        if not 0 <= self.drusen_max_height < self.height / 4:
            raise ConfigError("drusen height must be below height/4")
        if self.smoothness <= 0:
            raise ConfigError("smoothness must be positive")


@dataclass
class Sample:
    """One grayscale cross-section and its label map."""

    image: np.ndarray       # [1, H, W], float, values in [0, 1]
    labels: np.ndarray      # [H, W], uint8, classes 0..6
    patient: int = 0
    index: int = 0
    seed: int = 0
    provenance: str = "gen"

    def copy_with(self, image=None, labels=None, provenance=None) -> "Sample":
        return Sample(
            image=self.image if image is None else image,
            labels=self.labels if labels is None else labels,
            patient=self.patient,
            index=self.index,
            seed=self.seed,
            provenance=self.provenance if provenance is None else provenance,
        )


def _smooth_noise(rng: np.random.Generator, n: int, corr_len: float) -> np.ndarray:
    """Unit-variance stationary noise with the given correlation length."""
    radius = max(1, int(3 * corr_len))
    white = rng.standard_normal(n + 2 * radius)
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / corr_len) ** 2)
    taps /= np.sqrt((taps * taps).sum())
    return np.convolve(white, taps, mode="same")[radius:radius + n]


def draw_boundaries(params: GenParams, rng: np.random.Generator) -> np.ndarray:
    """[7, W] row coordinates: b[c] is the top of class c+1, b[6] the bottom
    of class 6. Monotone non-decreasing down each column after clipping."""
    w = params.width
    b = np.empty((7, w))
    b[0] = params.top_margin + params.margin_sigma * _smooth_noise(rng, w, params.smoothness)
    for c, mean_t in enumerate(params.layer_thickness):
        t = mean_t + params.thickness_sigma * _smooth_noise(rng, w, params.smoothness)
        b[c + 1] = b[c] + np.maximum(t, 1.0)

    # drusen: Gaussian bumps lift everything above the lowest boundary
    cols = np.arange(w)
    for _ in range(params.drusen_count):
        center = rng.uniform(0.15 * w, 0.85 * w)
        height = rng.uniform(0.5, 1.0) * params.drusen_max_height
        width = rng.uniform(*params.drusen_width)
        bump = height * np.exp(-0.5 * ((cols - center) / width) ** 2)
        b[:6] -= bump

    # crossings after deformation are repaired by clipping (monotone columns)
    b[0] = np.clip(b[0], 1.0, params.height - 2.0)
    for c in range(1, 7):
        b[c] = np.clip(np.maximum(b[c], b[c - 1]), 1.0, params.height - 1.0)
    return b


def labels_from_boundaries(b: np.ndarray, height: int) -> np.ndarray:
    rows = np.arange(height)[:, None]
    labels = np.zeros((height, b.shape[1]), dtype=np.uint8)
    for c in range(6):
        labels[(rows >= b[c]) & (rows < b[c + 1])] = c + 1
    return labels


def generate(params: GenParams) -> Sample:
    """Draw one sample; identical params (including seed) give identical bits."""
    params.validate()
    rng = np.random.default_rng(np.random.SeedSequence(params.seed))
    b = draw_boundaries(params, rng)
    labels = labels_from_boundaries(b, params.height)
    base = np.asarray(params.intensities, dtype=np.float64)[labels]
    image = base + params.speckle * rng.standard_normal(labels.shape)
    image = np.clip(image, 0.0, 1.0)
    return Sample(image=image[None], labels=labels, seed=params.seed)


def generate_patient(params: GenParams, patient: int, count: int, master_seed: int) -> list[Sample]:
    """A stack of samples for one synthetic patient; per-sample seeds derive
    from (master_seed, patient, index) so datasets are reproducible."""
    out = []
    for index in range(count):
        seed = int(
            np.random.SeedSequence(entropy=master_seed, spawn_key=(patient, index))
            .generate_state(1)[0]
        )
        s = generate(replace(params, seed=seed))
        s.patient = patient
        s.index = index
        out.append(s)
    return out


# -- label-map structure checks ---------------------------------------------


def ordering_violations(labels: np.ndarray) -> list[tuple[int, int, int, int]]:
    """Runs that break the 0..k..0 non-decreasing column structure.

    Returns (column, start_row, run_length, value) for every nonzero run
    whose class is lower than one already seen above it in the column, and
    for every zero run sandwiched between nonzero runs.
    """
    h, w = labels.shape
    bad: list[tuple[int, int, int, int]] = []
    for col in range(w):
        column = labels[:, col]
        change = np.flatnonzero(np.diff(column)) + 1
        starts = np.concatenate(([0], change))
        lengths = np.diff(np.concatenate((starts, [h])))
        values = column[starts]
        high = 0
        nonzero_seen = False
        last_nonzero_end = -1
        for start, length, value in zip(starts, lengths, values):
            if value == 0:
                continue
            if nonzero_seen and start > last_nonzero_end:
                zero_start = last_nonzero_end
                bad.append((col, int(zero_start), int(start - zero_start), 0))
            if value < high:
                bad.append((col, int(start), int(length), int(value)))
            high = max(high, int(value))
            nonzero_seen = True
            last_nonzero_end = int(start + length)
    return bad


def boundary_top_rows(labels: np.ndarray, cls: int) -> np.ndarray:
    """Per-column first row of `cls`; NaN where the class is absent."""
    mask = labels == cls
    any_col = mask.any(axis=0)
    first = mask.argmax(axis=0).astype(np.float64)
    first[~any_col] = np.nan
    return first


def boundary_is_convex(labels: np.ndarray, cls: int = 6, tol: float = 0.05,
                       sigma: float = 3.0) -> bool:
    """Whether the top boundary of `cls`, lightly smoothed, has no concave
    bend beyond `tol` (a drusen dome always fails at its shoulders)."""
    rows = boundary_top_rows(labels, cls)
    finite = np.isfinite(rows)
    if finite.sum() < 8:
        return True
    smoothed = gaussian_filter1d(rows[finite], sigma)
    second = np.diff(smoothed, 2)
    return bool(second.min() >= -tol)
