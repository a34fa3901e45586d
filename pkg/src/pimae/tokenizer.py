"""Scene tokenization: point cluster tokens, image patches, masking.

Masking vocabulary: a center's projection "hits" the patch containing its
pixel. hit_visible collects patches hit by visible centers, hit_masked by
masked centers. Strategies couple the modalities through these sets:

  complement  patches hit by visible centers are forced masked; patches hit
              only by masked centers are forced visible
  uniform     the mirror image: visible-center hits stay visible, masked-
              center hits are masked
  random      hits are reported but ignored for assignment

When one patch is hit from both sides the visible-center constraint wins.
Random fill tops the masked set up to floor(r_i * patch_count). If the fill
runs out of unconstrained patches, the constraint derived from masked
centers yields before the one derived from visible centers; the masked
count still lands on max(target, forced-masked size).
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeMismatch, TooFewPoints
from .geometry import (
    CameraModel,
    PatchGrid,
    as_points,
    farthest_point_sampling,
    knn_group,
    patch_indices,
    project_points,
)


@dataclass
class PointTokenSet:
    """FPS centers with their kNN groups; visible_mask arrives later."""
    centers: np.ndarray          # (m, 3) cluster centers
    center_indices: np.ndarray   # (m,) indices into the source cloud
    groups: np.ndarray           # (m, k) point indices per cluster
    visible_mask: np.ndarray | None = None  # (m,) bool, True = visible

    @property
    def m(self) -> int:
        return len(self.centers)

    @property
    def k(self) -> int:
        return self.groups.shape[1]

    @property
    def masked_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.visible_mask)

    @property
    def visible_ids(self) -> np.ndarray:
        return np.flatnonzero(self.visible_mask)


@dataclass
class ImagePatchSet:
    """Flattened non-overlapping patches in row-major grid order."""
    patches: np.ndarray          # (patch_count, S*S*3) values in [0, 1]
    grid: PatchGrid
    visible_mask: np.ndarray | None = None  # (patch_count,) bool

    @property
    def patch_count(self) -> int:
        return len(self.patches)

    @property
    def masked_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.visible_mask)

    @property
    def visible_ids(self) -> np.ndarray:
        return np.flatnonzero(self.visible_mask)


@dataclass(frozen=True)
class MaskAlignment:
    strategy: str
    hit_visible: np.ndarray  # sorted patch indices hit by visible centers
    hit_masked: np.ndarray   # sorted patch indices hit by masked centers
    dropped: int             # centers whose projection left the image


STRATEGIES = ("random", "uniform", "complement")


def cluster_points(points, m: int, k: int, seed_index: int = 0) -> PointTokenSet:
    """Build m cluster tokens of k nearest neighbours around FPS centers."""
    pts = as_points(points)
    if m > len(pts):
        raise TooFewPoints(f"{m} clusters from {len(pts)} points")
    if k > len(pts):
        raise TooFewPoints(f"group size {k} exceeds {len(pts)} points")
    centers = farthest_point_sampling(pts, m, seed_index=seed_index)
    groups = np.stack([knn_group(pts, int(c), k) for c in centers])
    return PointTokenSet(centers=pts[centers], center_indices=centers, groups=groups)


def sample_point_mask(tokens: PointTokenSet, r_p: float, rng) -> PointTokenSet:
    """Mask exactly floor(r_p * m) clusters, uniformly without replacement."""
    if not 0.0 <= r_p < 1.0:
        raise ShapeMismatch(f"point mask ratio {r_p} outside [0, 1)")
    n_masked = int(r_p * tokens.m)
    visible = np.ones(tokens.m, dtype=bool)
    if n_masked:
        visible[rng.choice(tokens.m, size=n_masked, replace=False)] = False
    return replace(tokens, visible_mask=visible)


def build_image_mask(tokens: PointTokenSet, cam: CameraModel, grid: PatchGrid,
                     strategy: str, r_i: float, rng):
    """Assign patch visibility under the given strategy.

    Returns (visible_mask, MaskAlignment). tokens.visible_mask must be set.
    """
    if strategy not in STRATEGIES:
        raise ShapeMismatch(f"unknown strategy {strategy!r}")
    if not 0.0 <= r_i < 1.0:
        raise ShapeMismatch(f"image mask ratio {r_i} outside [0, 1)")
    if tokens.visible_mask is None:
        raise ShapeMismatch("point visible_mask must be set before image masking")

    u, v, _, depth_ok = project_points(tokens.centers, cam)
    idx, in_bounds = patch_indices(u, v, depth_ok, grid)
    dropped = int((~in_bounds).sum())
    vis = tokens.visible_mask
    hit_visible = np.unique(idx[in_bounds & vis])
    hit_masked = np.unique(idx[in_bounds & ~vis])

    pc = grid.patch_count
    target = int(r_i * pc)
    if strategy == "random":
        masked = rng.choice(pc, size=target, replace=False) if target else np.empty(0, np.int64)
    else:
        if strategy == "complement":
            primary_masked = hit_visible
            secondary_visible = np.setdiff1d(hit_masked, hit_visible)
            masked = _fill_masked(pc, target, primary_masked, secondary_visible,
                                  steal_ok=True, rng=rng)
        else:  # uniform
            primary_visible = hit_visible
            secondary_masked = np.setdiff1d(hit_masked, hit_visible)
            masked = _fill_masked(pc, target, secondary_masked, primary_visible,
                                  steal_ok=False, rng=rng)

    visible_mask = np.ones(pc, dtype=bool)
    visible_mask[masked] = False
    align = MaskAlignment(strategy=strategy, hit_visible=hit_visible,
                          hit_masked=hit_masked, dropped=dropped)
    return visible_mask, align


def _fill_masked(pc, target, forced_masked, forced_visible, steal_ok, rng):
    """Core fill: forced_masked first, random patches up to target.

    steal_ok marks forced_visible as the weaker constraint (derived from
    masked-center hits); it is consumed only when free patches run out.
    When steal_ok is false, forced_visible is inviolable and the target is
    capped at pc - |forced_visible|.
    """
    masked = list(forced_masked)
    need = target - len(masked)
    if need > 0:
        taken = np.zeros(pc, dtype=bool)
        taken[forced_masked] = True
        taken[forced_visible] = True
        free = np.flatnonzero(~taken)
        grab = min(need, len(free))
        if grab:
            masked.extend(rng.choice(free, size=grab, replace=False))
            need -= grab
        if need > 0 and steal_ok and len(forced_visible):
            grab = min(need, len(forced_visible))
            masked.extend(rng.choice(forced_visible, size=grab, replace=False))
    return np.asarray(sorted(masked), dtype=np.int64)


def patchify_image(image, grid: PatchGrid) -> ImagePatchSet:
    """Split an (H, W, 3) image into flattened row-major patches."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"expected (H, W, 3) image, got {img.shape}")
    if img.shape[0] != grid.image_h or img.shape[1] != grid.image_w:
        raise ShapeMismatch(
            f"image {img.shape[0]}x{img.shape[1]} does not match grid "
            f"{grid.image_h}x{grid.image_w}")
    s = grid.patch_size
    # (rows, S, cols, S, 3) -> (rows, cols, S, S, 3) -> flat per patch
    blocks = img.reshape(grid.rows, s, grid.cols, s, 3).transpose(0, 2, 1, 3, 4)
    patches = blocks.reshape(grid.patch_count, s * s * 3).copy()
    return ImagePatchSet(patches=patches, grid=grid)


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Inverse of patchify_image for a full (patch_count, S*S*3) array."""
    s = grid.patch_size
    blocks = patches.reshape(grid.rows, grid.cols, s, s, 3).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(grid.image_h, grid.image_w, 3)


def tokenize_scene(scene, m, k, patch_size, strategy, r_p, r_i, rng,
                   seed_index=0, base_tokens=None):
    """Cluster, patchify and mask a scene in one call.

    base_tokens lets callers reuse the deterministic clustering (FPS and kNN
    do not depend on the rng) across training steps.

    Returns (PointTokenSet, ImagePatchSet, MaskAlignment).
    """
    if base_tokens is None:
        base_tokens = cluster_points(scene.points, m, k, seed_index=seed_index)
    tokens = sample_point_mask(base_tokens, r_p, rng)
    grid = PatchGrid.for_image(scene.image.shape[0], scene.image.shape[1], patch_size)
    patches = patchify_image(scene.image, grid)
    visible_mask, align = build_image_mask(tokens, scene.cam, grid, strategy, r_i, rng)
    patches.visible_mask = visible_mask
    return tokens, patches, align
