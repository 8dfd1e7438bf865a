"""Pupil/iris localisation: threshold label masks and least-squares circle fits."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .imgcore import BACKGROUND, IRIS, PUPIL, GrayImage, LabelMask, Point2D


class SegmentationError(RuntimeError):
    """A required class has no pixels."""


class FitError(ValueError):
    """Circle fit is undetermined (too few or collinear points)."""


class GeometryError(ValueError):
    """Fitted circles violate the pupil-inside-iris constraints."""

    def __init__(self, msg, pupil=None, iris=None):
        super().__init__(msg)
        self.pupil = pupil
        self.iris = iris


@dataclass(frozen=True)
class EllipseParams:
    """Boundary as ``[X, Y, r_min, r_max]``; circles have ``r_min == r_max``."""

    cx: float
    cy: float
    r_min: float
    r_max: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.r_min, self.r_max)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite ellipse parameters {vals}")
        if not 0 < self.r_min <= self.r_max:
            raise ValueError(f"need 0 < r_min <= r_max, got {self.r_min}, {self.r_max}")

    @classmethod
    def circle(cls, cx, cy, r) -> "EllipseParams":
        return cls(float(cx), float(cy), float(r), float(r))

    @property
    def radius(self) -> float:
        """Effective radius used by every downstream stage."""
        return 0.5 * (self.r_min + self.r_max)

    @property
    def center(self) -> Point2D:
        return Point2D(self.cx, self.cy)

    def point_at(self, theta):
        """Boundary point(s) at angle ``theta`` (radians, +x towards +y)."""
        r = self.radius
        return self.cx + r * np.cos(theta), self.cy + r * np.sin(theta)


@dataclass(frozen=True)
class IrisGeometry:
    pupil: EllipseParams
    iris: EllipseParams

    def __post_init__(self):
        p, i = self.pupil, self.iris
        if not p.r_max < i.r_min:
            raise GeometryError(
                f"pupil radius {p.r_max:.3f} not below iris radius {i.r_min:.3f}", p, i)
        offset = float(np.hypot(p.cx - i.cx, p.cy - i.cy))
        if not offset < i.r_min - p.r_max:
            raise GeometryError(
                f"pupil not strictly inside iris (centre offset {offset:.3f})", p, i)

    @classmethod
    def concentric(cls, cx, cy, pupil_r, iris_r) -> "IrisGeometry":
        return cls(EllipseParams.circle(cx, cy, pupil_r), EllipseParams.circle(cx, cy, iris_r))

    def as_row(self) -> list[float]:
        p, i = self.pupil, self.iris
        return [p.cx, p.cy, p.r_min, p.r_max, i.cx, i.cy, i.r_min, i.r_max]

    @classmethod
    def from_row(cls, row: Sequence[float]) -> "IrisGeometry":
        v = [float(x) for x in row]
        return cls(EllipseParams(*v[:4]), EllipseParams(*v[4:8]))


# ---------------------------------------------------------------- segmentation

DEFAULT_PUPIL_THRESH = 40
DEFAULT_IRIS_THRESH = 180


def _largest_component(binary: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(binary)
    if n == 0:
        return np.zeros_like(binary, dtype=bool)
    sizes = np.bincount(lab.ravel())[1:]
    # argmax picks the lowest label on ties, i.e. the first component in raster order
    return lab == (int(np.argmax(sizes)) + 1)


def segment_threshold(img: GrayImage, pupil_thresh: int = DEFAULT_PUPIL_THRESH,
                      iris_thresh: int = DEFAULT_IRIS_THRESH) -> LabelMask:
    """Two-threshold labelling followed by largest-component filtering per class."""
    if not pupil_thresh < iris_thresh:
        raise ValueError("pupil_thresh must be below iris_thresh")
    px = img.pixels
    pupil = _largest_component(px < pupil_thresh)
    if not pupil.any():
        raise SegmentationError("segmentation failed: empty pupil component")
    iris = _largest_component((px >= pupil_thresh) & (px < iris_thresh))
    if not iris.any():
        raise SegmentationError("segmentation failed: empty iris component")
    labels = np.full(px.shape, BACKGROUND, dtype=np.uint8)
    labels[iris] = IRIS
    labels[pupil] = PUPIL
    return LabelMask(labels)


# ------------------------------------------------------------------ circle fit

def fit_circle_lms(points) -> EllipseParams:
    """Algebraic (Kasa) least-squares circle.

    Minimises sum(((x-cx)^2 + (y-cy)^2 - r^2)^2) through the linear normal
    equations, solved in centroid-relative coordinates for conditioning.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise FitError(f"need at least 3 points, got {len(pts)}")
    mean = pts.mean(axis=0)
    u, v = (pts - mean).T
    suu, svv, suv = u @ u, v @ v, u @ v
    m = np.array([[suu, suv], [suv, svv]])
    scale = suu + svv
    if scale <= 0:
        raise FitError("degenerate point set: all points coincide")
    # smallest eigenvalue relative to the spread detects collinear input
    if np.linalg.eigvalsh(m)[0] <= 1e-12 * scale:
        raise FitError("collinear points: singular normal matrix")
    rhs = 0.5 * np.array([u @ (u * u) + u @ (v * v), v @ (v * v) + v @ (u * u)])
    uc, vc = np.linalg.solve(m, rhs)
    r = float(np.sqrt(uc * uc + vc * vc + scale / len(pts)))
    return EllipseParams.circle(mean[0] + uc, mean[1] + vc, r)


def boundary_points(region: np.ndarray) -> np.ndarray:
    """Sub-pixel edge points of a binary region.

    Boundary pixels are region pixels with a 4-neighbour outside it. Each
    such (inside, outside) neighbour pair contributes the midpoint between the
    two pixel centres, which sits on the discretised edge rather than half a
    pixel inside it.
    """
    region = np.asarray(region, dtype=bool)
    padded = np.pad(region, 1, constant_values=False)
    core = padded[1:-1, 1:-1]
    pts = []
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = padded[1 + dy:padded.shape[0] - 1 + dy, 1 + dx:padded.shape[1] - 1 + dx]
        ys, xs = np.nonzero(core & ~nb)
        pts.append(np.column_stack([xs + 0.5 * dx, ys + 0.5 * dy]))
    return np.concatenate(pts).astype(np.float64)


def fit_circle_trimmed(points, n_iter: int = 6, min_tol: float = 1.5) -> EllipseParams:
    """LMS circle refit after discarding points far off the current estimate.

    Handles eyelid chords in the iris outline; for clean outlines the first
    fit already keeps every point and the result equals ``fit_circle_lms``.
    """
    pts = np.asarray(points, dtype=np.float64)
    keep = np.ones(len(pts), dtype=bool)
    circ = fit_circle_lms(pts)
    for _ in range(n_iter):
        d = np.abs(np.hypot(pts[:, 0] - circ.cx, pts[:, 1] - circ.cy) - circ.radius)
        tol = max(min_tol, 3.0 * float(np.median(d[keep])))
        new_keep = d <= tol
        if np.array_equal(new_keep, keep):
            break
        keep = new_keep
        circ = fit_circle_lms(pts[keep])
    return circ


def geometry_from_mask(mask: LabelMask) -> IrisGeometry:
    """Fit pupil and outer iris circles to a label mask."""
    lab = mask.labels
    pupil = ndimage.binary_fill_holes(lab == PUPIL)
    eye = ndimage.binary_fill_holes((lab == PUPIL) | (lab == IRIS))
    if not pupil.any():
        raise GeometryError("mask has no pupil pixels")
    if not (lab == IRIS).any():
        raise GeometryError("mask has no iris pixels")
    try:
        p = fit_circle_trimmed(boundary_points(pupil))
        i = fit_circle_trimmed(boundary_points(eye))
    except FitError as exc:
        raise GeometryError(f"circle fit failed: {exc}") from exc
    return IrisGeometry(p, i)


def segment(img: GrayImage, pupil_thresh: int = DEFAULT_PUPIL_THRESH,
            iris_thresh: int = DEFAULT_IRIS_THRESH) -> tuple[LabelMask, IrisGeometry]:
    mask = segment_threshold(img, pupil_thresh, iris_thresh)
    return mask, geometry_from_mask(mask)
