"""Procedural NIR-style eye images with known geometry.

Each identity owns a frozen polar texture; individual captures vary by
pupil dilation, a small radial texture offset, additive sensor noise and an
eyelid chord. Because the texture lives in normalised (radius, angle)
coordinates, rubber-sheet unwrapping of any capture recovers it.
"""
from __future__ import annotations

import functools
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imgcore import GrayImage, Point2D, save_pgm
from .segmentation import IrisGeometry

TEXTURE_ROWS = 64
TEXTURE_COLS = 512
# (radial cells, angular cells, amplitude) per octave
OCTAVES = ((3, 16, 1.0), (6, 32, 0.9), (12, 64, 0.8), (24, 128, 0.5))

PUPIL_LEVEL = 18.0
IRIS_BASE = 55.0
IRIS_GAIN = 125.0
SCLERA_LEVEL = 215.0
EYELID_LEVEL = 200.0
NOISE_SIGMA = 1.5
MAX_RADIAL_JITTER = 0.004
MARGIN = 4.0


def seed_stream(*keys: int) -> np.random.Generator:
    """Independent generator for a tuple of integer keys."""
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]))


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True, eq=False)
class IdentityTexture:
    seed: int
    polar_texture: np.ndarray  # (rows, cols) in [0, 1]; axis 1 is angle and wraps


@functools.lru_cache(maxsize=256)
def identity_texture(seed: int, rows: int = TEXTURE_ROWS, cols: int = TEXTURE_COLS) -> IdentityTexture:
    """Band-limited value noise, periodic in angle, fully determined by ``seed``."""
    rng = seed_stream(seed, 0x7E7)
    acc = np.zeros((rows, cols))
    rr = np.linspace(0.0, 1.0, rows)
    aa = np.arange(cols) / cols
    for rcells, acells, amp in OCTAVES:
        # 3 guard rows each side keep grid-wrap from tying inner and outer edge
        lattice = rng.standard_normal((rcells + 7, acells))
        ri, ai = np.meshgrid(rr * rcells + 3, aa * acells, indexing="ij")
        layer = ndimage.map_coordinates(lattice, [ri, ai], order=3, mode="grid-wrap")
        acc += amp * layer / (layer.std() + 1e-12)
    z = (acc - acc.mean()) / acc.std()
    tex = np.clip(0.5 + 0.2 * z, 0.0, 1.0)
    tex.setflags(write=False)
    return IdentityTexture(seed, tex)


@dataclass(frozen=True)
class EyeRenderSpec:
    identity_seed: int
    pupil_radius: float
    iris_radius: float
    center: Point2D
    image_size: tuple[int, int]  # (width, height)
    noise_seed: int
    occlusion_fraction: float = 0.0
    rotation_deg: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", Point2D(float(self.center[0]), float(self.center[1])))
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError("image size must be positive")
        if not 0 < self.pupil_radius < self.iris_radius < min(w, h) / 2 - MARGIN:
            raise ValueError(
                f"need 0 < pupil_radius < iris_radius < min(w,h)/2 - {MARGIN}: "
                f"{self.pupil_radius}, {self.iris_radius}, {self.image_size}")
        cx, cy = self.center
        r = self.iris_radius
        if not (cx - r >= MARGIN and cx + r <= w - 1 - MARGIN and cy - r >= MARGIN and cy + r <= h - 1 - MARGIN):
            raise ValueError(f"iris at {tuple(self.center)} r={r} does not fit in {self.image_size}")
        if not 0.0 <= self.occlusion_fraction <= 0.4:
            raise ValueError("occlusion_fraction must lie in [0, 0.4]")

    @property
    def geometry(self) -> IrisGeometry:
        cx, cy = self.center
        return IrisGeometry.concentric(cx, cy, self.pupil_radius, self.iris_radius)

    @property
    def eyelid_y(self) -> float:
        """Rows above this line inside the iris annulus are covered by the lid."""
        cy, r_i, r_p = self.center[1], self.iris_radius, self.pupil_radius
        return cy - r_i + self.occlusion_fraction * (r_i - r_p)


def render_eye(spec: EyeRenderSpec) -> tuple[GrayImage, IrisGeometry]:
    w, h = spec.image_size
    cx, cy = spec.center
    tex = identity_texture(spec.identity_seed).polar_texture
    rows, cols = tex.shape
    rng = seed_stream(spec.noise_seed, 0x5E5)
    radial_shift = rng.uniform(-MAX_RADIAL_JITTER, MAX_RADIAL_JITTER)

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    r = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx) - np.deg2rad(spec.rotation_deg), 2 * np.pi)

    out = np.full((h, w), SCLERA_LEVEL)
    annulus = (r >= spec.pupil_radius) & (r < spec.iris_radius)
    rho = (r[annulus] - spec.pupil_radius) / (spec.iris_radius - spec.pupil_radius) + radial_shift
    ti = np.clip(rho, 0.0, 1.0) * (rows - 1)
    tj = theta[annulus] / (2 * np.pi) * cols
    # periodic bilinear lookup in the polar texture
    i0 = np.clip(np.floor(ti).astype(int), 0, rows - 2)
    fi = ti - i0
    j0 = np.floor(tj).astype(int) % cols
    j1 = (j0 + 1) % cols
    fj = tj - np.floor(tj)
    t = ((tex[i0, j0] * (1 - fj) + tex[i0, j1] * fj) * (1 - fi)
         + (tex[i0 + 1, j0] * (1 - fj) + tex[i0 + 1, j1] * fj) * fi)
    out[annulus] = IRIS_BASE + IRIS_GAIN * t
    out[r < spec.pupil_radius] = PUPIL_LEVEL
    if spec.occlusion_fraction > 0:
        out[annulus & (ys < spec.eyelid_y)] = EYELID_LEVEL
    out += rng.normal(0.0, NOISE_SIGMA, size=out.shape)
    return GrayImage.from_float(out), spec.geometry


# ---------------------------------------------------------------------- dataset

SIDES = ("L", "R")


@dataclass(frozen=True)
class DatasetParams:
    image_size: tuple[int, int] = (256, 256)
    iris_radius_range: tuple[float, float] = (70.0, 86.0)
    center_jitter: float = 4.0
    occlusion_range: tuple[float, float] = (0.0, 0.2)
    rotation_range_deg: float = 2.0


def image_name(subject: int, side: str, index: int) -> str:
    return f"S{subject:03d}_{side}_{index}.pgm"


def capture_spec(seed: int, subject: int, side: str, index: int,
                 pupil_radius_range=(20.0, 38.0), params: DatasetParams = DatasetParams()) -> EyeRenderSpec:
    """Render parameters of one capture, a pure function of its keys."""
    side_key = SIDES.index(side)
    ident_seed = derive_seed(seed, subject, side_key)
    id_rng = seed_stream(ident_seed, 0x1D)
    iris_r = float(id_rng.uniform(*params.iris_radius_range))
    rng = seed_stream(seed, subject, side_key, index)
    lo, hi = pupil_radius_range
    pupil_r = float(lo) if lo == hi else float(rng.uniform(lo, hi))
    if not pupil_r < iris_r:
        raise ValueError(f"pupil radius {pupil_r} must stay below iris radius {iris_r}")
    w, h = params.image_size
    j = params.center_jitter
    center = Point2D(float((w - 1) / 2 + rng.uniform(-j, j)), float((h - 1) / 2 + rng.uniform(-j, j)))
    occ = float(rng.uniform(*params.occlusion_range))
    rot = float(rng.uniform(-params.rotation_range_deg, params.rotation_range_deg))
    noise_seed = derive_seed(seed, subject, side_key, index, 0xA5)
    return EyeRenderSpec(ident_seed, pupil_r, iris_r, center, (w, h), noise_seed, occ, rot)


def generate_dataset(n_subjects: int, images_per_subject: int, pupil_radius_range, seed: int,
                     out_dir, params: DatasetParams = DatasetParams(), workers: int = 1,
                     skip_existing: bool = False):
    """Render ``n_subjects`` x 2 eyes x ``images_per_subject`` PGMs plus ``manifest.csv``.

    With ``skip_existing`` an image already on disk is assumed current and not re-rendered.
    """
    from .pairsel import DatasetManifest, ManifestEntry  # manifest format lives there

    if n_subjects < 2 or images_per_subject < 1:
        raise ValueError("need n_subjects >= 2 and images_per_subject >= 1")
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(s, side, k) for s in range(n_subjects) for side in SIDES for k in range(images_per_subject)]

    def work(job):
        s, side, k = job
        spec = capture_spec(seed, s, side, k, pupil_radius_range, params)
        name = image_name(s, side, k)
        path = os.path.join(out_dir, name)
        if not (skip_existing and os.path.exists(path)):
            save_pgm(path, render_eye(spec)[0])
        return ManifestEntry(f"S{s:03d}", side, name, spec.pupil_radius, spec.iris_radius)

    from .parallel import ordered_map
    entries = ordered_map(work, jobs, workers)
    manifest = DatasetManifest(entries)
    manifest.save(os.path.join(out_dir, "manifest.csv"))
    return manifest
