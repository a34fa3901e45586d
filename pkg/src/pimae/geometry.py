"""Camera projection and point-cloud grouping primitives.

Conventions:
  - points are float64 arrays of shape (n, 3) in world coordinates
  - the camera maps world -> pixel through h = K @ Rt @ [x, y, z, 1]^T,
    u = h0/h2, v = h1/h2, with h2 the camera-frame depth
  - pixel (u, v) has u growing rightward along image width and v downward
    along image height; patch indices are row-major over the patch grid
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DepthNonPositive, OutOfBounds, ShapeMismatch, TooFewPoints

DEPTH_EPS = 1e-9


def as_points(points) -> np.ndarray:
    """Validate and return an (n, 3) float64 point array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeMismatch(f"expected (n, 3) points, got {pts.shape}")
    if not np.isfinite(pts).all():
        raise ShapeMismatch("points contain non-finite values")
    return pts


class Projected2(NamedTuple):
    """A 2D projection with its camera-frame depth."""
    u: float
    v: float
    z: float


@dataclass(frozen=True)
class CameraModel:
    """Intrinsics (3x4) and world-to-camera extrinsics (4x4) plus image size."""
    K: np.ndarray
    Rt: np.ndarray
    h: int
    w: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        Rt = np.asarray(self.Rt, dtype=np.float64)
        if K.shape != (3, 4):
            raise ShapeMismatch(f"K must be (3, 4), got {K.shape}")
        if Rt.shape != (4, 4):
            raise ShapeMismatch(f"Rt must be (4, 4), got {Rt.shape}")
        if not (np.isfinite(K).all() and np.isfinite(Rt).all()):
            raise ShapeMismatch("camera matrices contain non-finite values")
        if self.h <= 0 or self.w <= 0:
            raise ShapeMismatch("image dimensions must be positive")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "Rt", Rt)

    @property
    def projection(self) -> np.ndarray:
        """The combined (3, 4) world-to-pixel matrix K @ Rt."""
        return self.K @ self.Rt


@dataclass(frozen=True)
class PatchGrid:
    """Square-patch tiling of an image. Width and height must divide evenly."""
    patch_size: int = 16
    rows: int = 0
    cols: int = 0

    def __post_init__(self):
        if self.patch_size <= 0 or self.rows <= 0 or self.cols <= 0:
            raise ShapeMismatch("patch grid dimensions must be positive")

    @classmethod
    def for_image(cls, h: int, w: int, patch_size: int = 16) -> "PatchGrid":
        if h % patch_size or w % patch_size:
            raise ShapeMismatch(
                f"image {h}x{w} not divisible by patch size {patch_size}")
        return cls(patch_size, h // patch_size, w // patch_size)

    @property
    def patch_count(self) -> int:
        return self.rows * self.cols

    @property
    def image_h(self) -> int:
        return self.rows * self.patch_size

    @property
    def image_w(self) -> int:
        return self.cols * self.patch_size


def project_point(point, cam: CameraModel) -> Projected2:
    """Project one world point to pixel coordinates.

    Raises DepthNonPositive when the camera-frame depth is <= 1e-9; points
    at or behind the image plane have no meaningful pixel. Delegates to the
    batched path so scalar and vectorized projections agree bit-for-bit.
    """
    p = np.asarray(point, dtype=np.float64).reshape(1, 3)
    u, v, z, ok = project_points(p, cam)
    if not ok[0]:
        raise DepthNonPositive(f"depth {z[0]:.3e} at point {p[0].tolist()}")
    return Projected2(float(u[0]), float(v[0]), float(z[0]))


def project_points(points, cam: CameraModel):
    """Vectorized projection of (n, 3) points.

    Returns (u, v, z, depth_ok) arrays; u and v are only meaningful where
    depth_ok is True. No exception is raised for bad depths here, callers
    that must drop out-of-range points use the mask instead.
    """
    pts = as_points(points)
    P = cam.projection
    x, y, zc = pts[:, 0], pts[:, 1], pts[:, 2]
    # explicit elementwise form: identical rounding for any batch size,
    # unlike BLAS matmul whose kernel choice depends on the shape
    h0 = P[0, 0] * x + P[0, 1] * y + P[0, 2] * zc + P[0, 3]
    h1 = P[1, 0] * x + P[1, 1] * y + P[1, 2] * zc + P[1, 3]
    h2 = P[2, 0] * x + P[2, 1] * y + P[2, 2] * zc + P[2, 3]
    depth_ok = h2 > DEPTH_EPS
    safe = np.where(depth_ok, h2, 1.0)
    return h0 / safe, h1 / safe, h2, depth_ok


def patch_index(p: Projected2, grid: PatchGrid) -> int:
    """Map a projection to its row-major patch index.

    The pixel is (floor(u), floor(v)); the patch is that pixel's tile:
    index = floor(floor(v)/S) * cols + floor(floor(u)/S).
    Raises OutOfBounds when (u, v) falls outside [0, W) x [0, H).
    """
    w, h = grid.image_w, grid.image_h
    if not (0.0 <= p.u < w and 0.0 <= p.v < h):
        raise OutOfBounds(f"(u={p.u}, v={p.v}) outside {w}x{h} image")
    s = grid.patch_size
    return (math.floor(math.floor(p.v) / s)) * (w // s) + math.floor(math.floor(p.u) / s)


def patch_indices(u, v, depth_ok, grid: PatchGrid):
    """Vectorized patch_index. Returns (indices, in_bounds); indices are -1
    where the projection is out of bounds or the depth was invalid."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    ok = depth_ok & (u >= 0.0) & (u < grid.image_w) & (v >= 0.0) & (v < grid.image_h)
    s = grid.patch_size
    idx = np.full(u.shape, -1, dtype=np.int64)
    if ok.any():
        col = np.floor(np.floor(u[ok]) / s).astype(np.int64)
        row = np.floor(np.floor(v[ok]) / s).astype(np.int64)
        idx[ok] = row * grid.cols + col
    return idx, ok


def farthest_point_sampling(points, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Starts from seed_index and repeatedly picks the point maximizing the
    minimum squared Euclidean distance to the already chosen set. Ties go
    to the lowest index, so the result is deterministic.

    Args:
        points: (n, 3) array.
        m: number of samples, 1 <= m <= n.
        seed_index: index of the first chosen point.

    Returns:
        (m,) int64 array of point indices, in selection order.
    """
    pts = as_points(points)
    n = len(pts)
    if not 1 <= m <= n:
        raise TooFewPoints(f"cannot sample {m} of {n} points")
    if not 0 <= seed_index < n:
        raise OutOfBounds(f"seed index {seed_index} outside [0, {n})")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    # min squared distance from every point to the chosen set so far
    diff = pts - pts[seed_index]
    min_d2 = np.einsum("ij,ij->i", diff, diff)
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))  # argmax returns the first max: lowest index wins ties
        chosen[i] = nxt
        diff = pts - pts[nxt]
        d2 = np.einsum("ij,ij->i", diff, diff)
        np.minimum(min_d2, d2, out=min_d2)
    return chosen


def knn_group(points, center_index: int, k: int) -> np.ndarray:
    """Indices of the k nearest points to points[center_index].

    The center itself is a candidate (distance zero). Ordering is by
    (squared distance, index) ascending, so duplicates resolve stably.
    """
    pts = as_points(points)
    n = len(pts)
    if not 0 <= center_index < n:
        raise OutOfBounds(f"center index {center_index} outside [0, {n})")
    if not 1 <= k <= n:
        raise TooFewPoints(f"cannot take {k} neighbours from {n} points")
    diff = pts - pts[center_index]
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.argsort(d2, kind="stable")  # stable sort keeps index order on ties
    return order[:k].astype(np.int64)
