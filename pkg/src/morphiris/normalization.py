"""Homogeneous rubber-sheet unwrapping of the iris annulus."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .imgcore import BACKGROUND, GrayImage, LabelMask, bilinear_sample_many, load_pgm, save_pgm
from .segmentation import IrisGeometry

DEFAULT_ROWS = 64
DEFAULT_COLS = 512


@dataclass(frozen=True, eq=False)
class RubberSheet:
    """``intensity`` and ``valid`` are (rows, cols); column j is angle 2*pi*j/cols."""

    intensity: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        inten = np.array(self.intensity, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if inten.ndim != 2 or inten.shape != valid.shape:
            raise ValueError("intensity and valid must be equal-shaped 2-D arrays")
        inten.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "intensity", inten)
        object.__setattr__(self, "valid", valid)

    @property
    def rows(self) -> int:
        return self.intensity.shape[0]

    @property
    def cols(self) -> int:
        return self.intensity.shape[1]


def sample_grid(geom: IrisGeometry, rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    """Source coordinates ``(xs, ys)`` of every sheet cell."""
    rho = np.arange(rows) / (rows - 1)
    theta = 2 * np.pi * np.arange(cols) / cols
    px, py = geom.pupil.point_at(theta)
    ix, iy = geom.iris.point_at(theta)
    xs = (1 - rho)[:, None] * px[None, :] + rho[:, None] * ix[None, :]
    ys = (1 - rho)[:, None] * py[None, :] + rho[:, None] * iy[None, :]
    return xs, ys


def unwrap(img: GrayImage, geom: IrisGeometry, rows: int = DEFAULT_ROWS, cols: int = DEFAULT_COLS,
           occlusion_mask: LabelMask | None = None) -> RubberSheet:
    """Map the annulus between the pupil and iris circles onto a rows x cols grid.

    Row 0 lies on the pupil boundary and the last row on the iris boundary.
    Cells whose source falls outside the image, or on a background label of
    ``occlusion_mask``, are marked invalid.
    """
    if rows < 2 or cols < 4:
        raise ValueError("need rows >= 2 and cols >= 4")
    # re-validate in case a geometry was built around __post_init__
    IrisGeometry(geom.pupil, geom.iris)
    xs, ys = sample_grid(geom, rows, cols)
    inten = bilinear_sample_many(img.pixels, xs, ys)
    valid = (xs >= 0) & (xs <= img.width - 1) & (ys >= 0) & (ys <= img.height - 1)
    if occlusion_mask is not None:
        if occlusion_mask.labels.shape != img.pixels.shape:
            raise ValueError("mask and image dimensions differ")
        xi = np.clip(np.floor(xs + 0.5).astype(int), 0, img.width - 1)
        yi = np.clip(np.floor(ys + 0.5).astype(int), 0, img.height - 1)
        valid &= occlusion_mask.labels[yi, xi] != BACKGROUND
    return RubberSheet(inten, valid)


def save_sheet(stem: str, sheet: RubberSheet) -> tuple[str, str]:
    """Write ``<stem>.rs.pgm`` (intensity) and ``<stem>.rsmask.pgm`` (0/255 validity)."""
    a, b = stem + ".rs.pgm", stem + ".rsmask.pgm"
    save_pgm(a, GrayImage.from_float(sheet.intensity))
    save_pgm(b, GrayImage(np.where(sheet.valid, 255, 0).astype(np.uint8)))
    return a, b


def load_sheet(stem: str) -> RubberSheet:
    inten = load_pgm(stem + ".rs.pgm").pixels
    valid = load_pgm(stem + ".rsmask.pgm").pixels > 127
    return RubberSheet(inten.astype(np.float64), valid)


def sheet_exists(stem: str) -> bool:
    return os.path.exists(stem + ".rs.pgm") and os.path.exists(stem + ".rsmask.pgm")
