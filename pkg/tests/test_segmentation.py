import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphiris.imgcore import BACKGROUND, IRIS, PUPIL, GrayImage, LabelMask
from morphiris.segmentation import (EllipseParams, FitError, GeometryError, IrisGeometry, SegmentationError,
                                    boundary_points, fit_circle_lms, geometry_from_mask, segment, segment_threshold)

from conftest import eye


def circle_pts(cx, cy, r, n=360, noise=0.0, rng=None):
    t = 2 * np.pi * np.arange(n) / n
    pts = np.column_stack([cx + r * np.cos(t), cy + r * np.sin(t)])
    if noise:
        pts += rng.normal(0, noise, pts.shape)
    return pts


def disk_mask(size, cx, cy, rp, ri):
    ys, xs = np.mgrid[0:size, 0:size]
    lab = np.zeros((size, size), np.uint8)
    lab[np.hypot(xs - cx, ys - cy) <= ri] = IRIS
    lab[np.hypot(xs - cx, ys - cy) <= rp] = PUPIL
    return LabelMask(lab)


def test_three_point_circle():
    c = fit_circle_lms([(0, 1), (1, 0), (0, -1)])
    assert abs(c.cx) < 1e-9 and abs(c.cy) < 1e-9 and abs(c.radius - 1) < 1e-9


def test_exact_circle():
    c = fit_circle_lms(circle_pts(64, 64, 30))
    assert max(abs(c.cx - 64), abs(c.cy - 64), abs(c.radius - 30)) < 1e-6


def test_noisy_circle_median_error(rng):
    ce, re = [], []
    for _ in range(100):
        c = fit_circle_lms(circle_pts(64, 64, 30, noise=0.5, rng=rng))
        ce.append(np.hypot(c.cx - 64, c.cy - 64))
        re.append(abs(c.radius - 30))
    assert np.median(ce) < 0.5 and np.median(re) < 0.5


@pytest.mark.parametrize("pts", [[(0, 0), (1, 1)], [(0, 0), (1, 1), (2, 2), (3, 3)], [(5, 5)] * 4])
def test_fit_errors(pts):
    with pytest.raises(FitError):
        fit_circle_lms(pts)


@settings(max_examples=60, deadline=None)
@given(st.floats(-500, 500), st.floats(-500, 500), st.floats(0, 2 * np.pi), st.integers(0, 2**31))
def test_fit_equivariance(dx, dy, phi, seed):
    pts = circle_pts(10, -4, 25, n=40, noise=1.0, rng=np.random.default_rng(seed))
    base = fit_circle_lms(pts)
    moved = fit_circle_lms(pts + [dx, dy])
    assert abs(moved.cx - base.cx - dx) < 1e-9 and abs(moved.cy - base.cy - dy) < 1e-9
    assert abs(moved.radius - base.radius) < 1e-9
    ctr = pts.mean(axis=0)
    rot = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
    turned = fit_circle_lms((pts - ctr) @ rot.T + ctr)
    assert abs(turned.radius - base.radius) < 1e-9


def test_rendered_eye_pupil_centre():
    spec, img, _ = eye(2, "L", 0)
    mask = segment_threshold(img)
    ys, xs = np.nonzero(mask.labels == PUPIL)
    assert np.hypot(xs.mean() - spec.center.x, ys.mean() - spec.center.y) < 1.0


def test_white_image_fails():
    with pytest.raises(SegmentationError, match="pupil"):
        segment_threshold(GrayImage(np.full((32, 32), 255, np.uint8)))


def test_largest_dark_blob_wins():
    px = np.full((60, 60), 100, np.uint8)
    px[5:10, 5:10] = 0
    px[30:50, 30:50] = 0
    lab = segment_threshold(GrayImage(px)).labels
    assert (lab[30:50, 30:50] == PUPIL).all()
    assert not (lab[5:10, 5:10] == PUPIL).any()


def test_concentric_mask_radii():
    g = geometry_from_mask(disk_mask(128, 63.3, 64.1, 20, 50))
    assert abs(g.pupil.radius - 20) < 0.5 and abs(g.iris.radius - 50) < 0.5


def test_pupil_outside_iris_is_geometry_error():
    lab = np.zeros((100, 100), np.uint8)
    ys, xs = np.mgrid[0:100, 0:100]
    lab[np.hypot(xs - 30, ys - 50) <= 20] = IRIS
    lab[np.hypot(xs - 75, ys - 50) <= 10] = PUPIL
    with pytest.raises(GeometryError) as info:
        geometry_from_mask(LabelMask(lab))
    assert info.value.pupil is not None and info.value.iris is not None


def test_geometry_invariants():
    with pytest.raises(GeometryError):
        IrisGeometry(EllipseParams.circle(0, 0, 30), EllipseParams.circle(0, 0, 20))
    with pytest.raises(ValueError):
        EllipseParams(0, 0, 5, 4)
    g = IrisGeometry(EllipseParams(10, 10, 4, 6), EllipseParams(10, 11, 20, 24))
    assert g.pupil.radius == 5 and g.iris.radius == 22
    assert IrisGeometry.from_row(g.as_row()) == g


def test_boundary_points_of_square():
    region = np.zeros((6, 6), bool)
    region[2:4, 2:4] = True
    pts = boundary_points(region)
    assert len(pts) == 8
    assert pts[:, 0].min() == 1.5 and pts[:, 0].max() == 3.5


def test_occluded_eye_still_fits():
    for k in range(10):
        spec, img, _ = eye(k, "L", 0, params=__import__("morphiris.synthgen", fromlist=["DatasetParams"])
                           .DatasetParams(occlusion_range=(0.35, 0.4)))
        _, g = segment(img)
        assert abs(g.iris.radius - spec.iris_radius) < 1.5
