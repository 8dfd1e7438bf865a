"""Landmark-driven periocular morphing.

Pipeline: 76 landmarks per eye (36 pupil + 36 iris boundary points every
10 degrees, plus the 4 image corners), Delaunay triangulation of the
averaged landmarks, per-triangle inverse affine warping of both parents onto
that shape, then linear blending.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from typing import Sequence

import numpy as np

from .imgcore import GrayImage, Point2D, bilinear_sample_many
from .segmentation import IrisGeometry

N_ANGLES = 36
N_LANDMARKS = 2 * N_ANGLES + 4
ANGLES_DEG = np.arange(N_ANGLES) * 10.0
DEFAULT_ALPHA = 0.5

AREA_EPS = 1e-9


class LandmarkError(ValueError):
    pass


class TriangulationError(ValueError):
    pass


class AffineError(ValueError):
    pass


class WarpError(RuntimeError):
    pass


class MorphError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """76 x 2 array: pupil ring, iris ring (0..350 deg), then TL, TR, BL, BR corners."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 2):
            raise LandmarkError(f"expected {N_LANDMARKS} landmarks, got array of shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise LandmarkError("non-finite landmark coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def __getitem__(self, i) -> Point2D:
        return Point2D(*self.points[i])


Triangle = tuple[int, int, int]


@dataclass(frozen=True, eq=False)
class AffineTransform:
    matrix: np.ndarray  # 3x3, last row (0, 0, 1)

    def apply(self, xs, ys):
        m = self.matrix
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        return m[0, 0] * xs + m[0, 1] * ys + m[0, 2], m[1, 0] * xs + m[1, 1] * ys + m[1, 2]


@dataclass(frozen=True, eq=False)
class MorphResult:
    morph: GrayImage
    avg_landmarks: LandmarkSet
    alpha: float
    parents: tuple[str, str] = ("A", "B")


# ------------------------------------------------------------------ landmarks

def _unit_circle_deg(deg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rad = np.deg2rad(deg)
    c, s = np.cos(rad), np.sin(rad)
    # exact zeros at multiples of 90 degrees
    c[np.abs(c) < 1e-12] = 0.0
    s[np.abs(s) < 1e-12] = 0.0
    return c, s


def generate_landmarks(geom: IrisGeometry, width: int, height: int) -> LandmarkSet:
    i = geom.iris
    r = i.radius
    if i.cx - r < 0 or i.cy - r < 0 or i.cx + r > width - 1 or i.cy + r > height - 1:
        raise LandmarkError(
            f"iris circle ({i.cx:.2f}, {i.cy:.2f}, r={r:.2f}) extends beyond the {width}x{height} image")
    c, s = _unit_circle_deg(ANGLES_DEG)
    p = geom.pupil
    pupil = np.column_stack([p.cx + p.radius * c, p.cy + p.radius * s])
    iris = np.column_stack([i.cx + r * c, i.cy + r * s])
    corners = np.array([[0, 0], [width - 1, 0], [0, height - 1], [width - 1, height - 1]], dtype=np.float64)
    return LandmarkSet(np.vstack([pupil, iris, corners]))


def average_landmarks(a: LandmarkSet, b: LandmarkSet, alpha: float = DEFAULT_ALPHA) -> LandmarkSet:
    return LandmarkSet(alpha * a.points + (1.0 - alpha) * b.points)


# ------------------------------------------------------------------ Delaunay

@lru_cache(maxsize=8)
def _triples(n: int) -> np.ndarray:
    out = np.array(list(combinations(range(n), 3)), dtype=np.intp)
    out.setflags(write=False)
    return out


def delaunay(points, tol: float = 1e-10, chunk: int = 2048) -> list[Triangle]:
    """Delaunay triangulation with a canonical resolution of cocircular ties.

    Every vertex triple whose circumcircle has no point strictly inside is a
    candidate; the points lying on such a circle form one Delaunay face (a
    convex cyclic polygon). Faces with more than three vertices are split
    into a fan from their lowest-index vertex, so the result does not depend
    on floating-point noise in how ties happen to be ordered.

    Returns triangles as ascending index triples, sorted lexicographically.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 3:
        raise TriangulationError(f"need at least 3 points, got {n}")
    centered = pts - pts.mean(axis=0)
    extent = float(np.abs(centered).max())
    if extent == 0:
        raise TriangulationError("all points coincide")
    q = centered / extent
    sv = np.linalg.svd(q, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise TriangulationError("all points are collinear")
    d2 = ((q[:, None, :] - q[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    if d2.min() <= 1e-24:
        raise TriangulationError("duplicate points")

    tri = _triples(n)
    a, b, c = q[tri[:, 0]], q[tri[:, 1]], q[tri[:, 2]]
    orient = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    keep = np.abs(orient) > AREA_EPS
    tri, orient = tri[keep], orient[keep]
    sign = np.sign(orient)

    # lifted to the paraboloid z = x^2 + y^2, "d inside circle(a, b, c)" is
    # "d' below the plane through a', b', c'": a linear form in (x, y, z, 1)
    lifted = np.column_stack([q, (q * q).sum(axis=1), np.ones(n)])
    faces: set[tuple[int, ...]] = set()
    for start in range(0, len(tri), chunk):
        t = tri[start:start + chunk]
        s = sign[start:start + chunk, None]
        la, lb, lc = lifted[t[:, 0], :3], lifted[t[:, 1], :3], lifted[t[:, 2], :3]
        normal = np.cross(lb - la, lc - la)
        coef = -s * np.column_stack([normal, -(normal * la).sum(axis=1)])
        det = coef @ lifted.T
        empty = ~(det > tol).any(axis=1)
        if not empty.any():
            continue
        on_circle = np.abs(det[empty]) <= tol
        # a cocircular face shows up once per vertex triple; the set collapses repeats
        for row in on_circle:
            faces.add(tuple(np.flatnonzero(row).tolist()))

    out: set[Triangle] = set()
    for face in faces:
        if len(face) == 3:
            out.add(face)
            continue
        idx = np.array(face)
        ctr = q[idx].mean(axis=0)
        ang = np.arctan2(q[idx, 1] - ctr[1], q[idx, 0] - ctr[0])
        ring = idx[np.argsort(ang, kind="stable")].tolist()
        k = ring.index(min(ring))
        ring = ring[k:] + ring[:k]
        for j in range(1, len(ring) - 1):
            out.add(tuple(sorted((ring[0], ring[j], ring[j + 1]))))
    return sorted(out)


def triangle_area(p0, p1, p2) -> float:
    return 0.5 * abs((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0]))


# -------------------------------------------------------------------- affine

def affine_from_triangles(src: Sequence, dst: Sequence) -> AffineTransform:
    """T with T @ [x, y, 1]^T mapping each src vertex onto its dst vertex (T = A X^-1)."""
    s = np.asarray(src, dtype=np.float64).reshape(3, 2)
    d = np.asarray(dst, dtype=np.float64).reshape(3, 2)
    if triangle_area(*s) <= AREA_EPS:
        raise AffineError(f"degenerate source triangle {s.tolist()}: singular vertex matrix")
    if triangle_area(*d) <= AREA_EPS:
        raise AffineError(f"degenerate destination triangle {d.tolist()}")
    X = np.vstack([s.T, np.ones(3)])
    A = np.vstack([d.T, np.ones(3)])
    # T X = A  <=>  X^T T^T = A^T
    T = np.linalg.solve(X.T, A.T).T
    T[2] = (0.0, 0.0, 1.0)
    return AffineTransform(T)


# ---------------------------------------------------------------------- warp

def triangle_owner(dst_points, triangles: Sequence[Triangle], height: int, width: int) -> np.ndarray:
    """Index of the triangle that owns each pixel (-1 outside all of them).

    A pixel on a shared edge belongs to the first covering triangle in list order.
    """
    dst = np.asarray(dst_points, dtype=np.float64)
    owner = np.full((height, width), -1, dtype=np.intp)
    for k, t in enumerate(triangles):
        dv = dst[list(t)]
        x0 = max(int(np.floor(dv[:, 0].min())), 0)
        x1 = min(int(np.ceil(dv[:, 0].max())), width - 1)
        y0 = max(int(np.floor(dv[:, 1].min())), 0)
        y1 = min(int(np.ceil(dv[:, 1].max())), height - 1)
        if x1 < x0 or y1 < y0:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
        (ax, ay), (bx, by), (cx, cy) = dv
        den = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
        if abs(den) <= 2 * AREA_EPS:
            raise WarpError(f"triangle {tuple(t)} is degenerate in the destination shape")
        l0 = ((by - cy) * (xs - cx) + (cx - bx) * (ys - cy)) / den
        l1 = ((cy - ay) * (xs - cx) + (ax - cx) * (ys - cy)) / den
        l2 = 1.0 - l0 - l1
        eps = 1e-9
        box = owner[y0:y1 + 1, x0:x1 + 1]
        box[(l0 >= -eps) & (l1 >= -eps) & (l2 >= -eps) & (box < 0)] = k
    return owner


def warp_to_shape(img: GrayImage, src_lm: LandmarkSet, dst_lm: LandmarkSet,
                  triangles: Sequence[Triangle], owner: np.ndarray | None = None) -> GrayImage:
    """Piecewise-affine warp of ``img`` from ``src_lm`` onto ``dst_lm``.

    Each output pixel inside a destination triangle is pulled from the source
    by that triangle's inverse affine map and bilinear sampling. ``owner``
    may carry a precomputed ``triangle_owner`` map for ``dst_lm``.
    """
    src = np.asarray(src_lm.points if isinstance(src_lm, LandmarkSet) else src_lm, dtype=np.float64)
    dst = np.asarray(dst_lm.points if isinstance(dst_lm, LandmarkSet) else dst_lm, dtype=np.float64)
    if src.shape != dst.shape:
        raise WarpError("landmark sets differ in length")
    h, w = img.height, img.width
    if owner is None:
        owner = triangle_owner(dst, triangles, h, w)
    mats = np.empty((max(len(triangles), 1), 3, 3))
    for k, t in enumerate(triangles):
        try:
            mats[k] = affine_from_triangles(dst[list(t)], src[list(t)]).matrix
        except AffineError as exc:
            raise WarpError(f"triangle {tuple(t)}: {exc}") from exc
    out = img.pixels.astype(np.float64)  # pixels outside the hull keep their value
    yi, xi = np.nonzero(owner >= 0)
    m = mats[owner[yi, xi]]
    px, py = xi.astype(np.float64), yi.astype(np.float64)
    sx = m[:, 0, 0] * px + m[:, 0, 1] * py + m[:, 0, 2]
    sy = m[:, 1, 0] * px + m[:, 1, 1] * py + m[:, 1, 2]
    out[yi, xi] = bilinear_sample_many(img.pixels, sx, sy)
    return GrayImage.from_float(out)


def blend(img_a: GrayImage, img_b: GrayImage, alpha: float = DEFAULT_ALPHA) -> GrayImage:
    """Per-pixel ``alpha * a + (1 - alpha) * b`` rounded half-up."""
    if img_a.pixels.shape != img_b.pixels.shape:
        raise ValueError(f"dimension mismatch: {img_a.pixels.shape} vs {img_b.pixels.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    a = img_a.pixels.astype(np.float64)
    b = img_b.pixels.astype(np.float64)
    return GrayImage.from_float(alpha * a + (1.0 - alpha) * b)


def morph_pair(img_a: GrayImage, geom_a: IrisGeometry, img_b: GrayImage, geom_b: IrisGeometry,
               alpha: float = DEFAULT_ALPHA, ids: tuple[str, str] = ("A", "B")) -> MorphResult:
    if img_a.pixels.shape != img_b.pixels.shape:
        raise MorphError(f"{ids[0]}/{ids[1]}: images differ in size "
                         f"({img_a.width}x{img_a.height} vs {img_b.width}x{img_b.height})")
    try:
        lm_a = generate_landmarks(geom_a, img_a.width, img_a.height)
        lm_b = generate_landmarks(geom_b, img_b.width, img_b.height)
        avg = average_landmarks(lm_a, lm_b, alpha)
        tris = delaunay(avg.points)
        owner = triangle_owner(avg.points, tris, img_a.height, img_a.width)
        warped_a = warp_to_shape(img_a, lm_a, avg, tris, owner)
        warped_b = warp_to_shape(img_b, lm_b, avg, tris, owner)
        out = blend(warped_a, warped_b, alpha)
    except (LandmarkError, TriangulationError, WarpError, ValueError) as exc:
        raise MorphError(f"morph {ids[0]} x {ids[1]} failed: {exc}") from exc
    return MorphResult(out, avg, float(alpha), tuple(ids))


def morph_geometry(result: MorphResult) -> IrisGeometry:
    """Circles through the averaged landmark rings (diagnostics only)."""
    from .segmentation import fit_circle_lms
    pts = result.avg_landmarks.points
    return IrisGeometry(fit_circle_lms(pts[:N_ANGLES]), fit_circle_lms(pts[N_ANGLES:2 * N_ANGLES]))
