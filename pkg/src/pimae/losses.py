"""Training losses: Chamfer on point offsets, MSE on masked pixels, and the
cross-modal feature-matching term with its bilinear up-sampling step.

The total objective is the unweighted sum of the three parts. Cross-modal
targets are sampled from the shared-decoder image tokens and detached, so
that path trains the point branch without pulling on the image branch.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import EmptySet, OutOfBounds, ShapeMismatch
from .geometry import PatchGrid, Projected2, project_points


@dataclass(frozen=True)
class LossReport:
    loss_pc: float
    loss_img: float
    loss_cross: float
    loss_total: float


def _pair_d2(a, b):
    """(|a|, |b|) squared distances with fixed elementwise rounding order."""
    diff = a[:, None, :] - b[None, :, :]
    return (diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1]
            + diff[..., 2] * diff[..., 2])


def chamfer_l2(a, b) -> float:
    """Symmetric mean-reduced squared-distance Chamfer between 3D point sets.

    Accumulates with math.fsum, so the value is independent of set size
    rounding quirks and exactly symmetric.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("chamfer_l2 needs two non-empty point sets")
    d2 = _pair_d2(a, b)
    term_a = math.fsum(d2.min(axis=1).tolist()) / len(a)
    term_b = math.fsum(d2.min(axis=0).tolist()) / len(b)
    return term_a + term_b


def _chamfer_term(pred, target_rows):
    """Differentiable sum of squared residuals / row count, rows pre-matched."""
    diff = dc.add(pred, dc.scale(target_rows, -1.0))
    # mean over k*3 entries times 3 = (1/k) * sum of squared distances
    return dc.scale(dc.mean_reduce(dc.mul(diff, diff)), 3.0)


def _chamfer_diff(pred, target):
    """Differentiable Chamfer for one cluster: pred is a (k, 3) Tensor."""
    d2 = _pair_d2(pred.data, target)
    near_t = dc.tensor(target[d2.argmin(axis=1)])
    term_a = _chamfer_term(pred, near_t)
    matched_p = dc.gather_rows(pred, d2.argmin(axis=0))
    term_b = _chamfer_term(matched_p, dc.tensor(target))
    return dc.add(term_a, term_b)


def point_loss(pred_offsets, tokens, points) -> dc.Tensor:
    """Mean Chamfer distance over masked clusters.

    pred_offsets is (masked, k, 3); targets are the true group points
    relative to their cluster center.
    """
    masked = tokens.masked_ids
    if pred_offsets.shape[0] != len(masked):
        raise ShapeMismatch(
            f"{pred_offsets.shape[0]} offset rows for {len(masked)} masked clusters")
    pts = np.asarray(points, dtype=np.float64)
    k = tokens.k
    flat = dc.reshape(pred_offsets, (-1, 3))
    total = None
    for i, cid in enumerate(masked):
        target = pts[tokens.groups[cid]] - tokens.centers[cid]
        pred = dc.gather_rows(flat, np.arange(i * k, (i + 1) * k))
        cd = _chamfer_diff(pred, target)
        total = cd if total is None else dc.add(total, cd)
    return dc.scale(total, 1.0 / len(masked))


def image_loss(pred_pixels, patches) -> dc.Tensor:
    """MSE over every pixel value of the masked patches, raw [0, 1] space."""
    target = patches.patches[patches.masked_ids]
    if pred_pixels.shape != target.shape:
        raise ShapeMismatch(
            f"pixel predictions {pred_pixels.shape} vs targets {target.shape}")
    diff = dc.add(pred_pixels, dc.scale(dc.tensor(target), -1.0))
    return dc.mean_reduce(dc.mul(diff, diff))


def _to_grid_coords(u, v, patch_size):
    """Pixel coordinates -> fractional patch-grid coordinates.

    Patch (r, c) carries its feature at pixel ((c+0.5)*S, (r+0.5)*S), so the
    grid coordinate is the pixel coordinate over S minus half a patch.
    """
    return v / patch_size - 0.5, u / patch_size - 0.5


def upsample_feature(feats, p: Projected2, patch_size: int) -> dc.Tensor:
    """Bilinearly interpolate a (rows, cols, d) feature grid at a projection.

    Features sit at patch centers; coordinates are clamped to the hull of
    those centers. Raises OutOfBounds when p lies outside the image.
    """
    rows, cols, _ = feats.shape
    h, w = rows * patch_size, cols * patch_size
    if not (0.0 <= p.u < w and 0.0 <= p.v < h):
        raise OutOfBounds(f"({p.u}, {p.v}) outside {w}x{h} image")
    gy, gx = _to_grid_coords(p.u, p.v, patch_size)
    return dc.reshape(dc.bilinear_sample_2d(feats, [gy], [gx]), (feats.shape[2],))


def cross_modal_loss(cross_preds, l3_image, tokens, cam, grid: PatchGrid):
    """MSE between cross-modal predictions and up-sampled image features.

    Targets come from the shared-decoder image tokens, reshaped onto the
    patch grid and detached. Masked centers that project outside the image
    (or behind the camera) are excluded from the mean.

    Returns (scalar Tensor, excluded count). All-excluded gives loss 0.
    """
    masked = tokens.masked_ids
    if cross_preds.shape[0] != len(masked):
        raise ShapeMismatch(
            f"{cross_preds.shape[0]} cross rows for {len(masked)} masked clusters")
    u, v, _, ok = project_points(tokens.centers[masked], cam)
    ok = ok & (u >= 0.0) & (u < grid.image_w) & (v >= 0.0) & (v < grid.image_h)
    excluded = int(len(masked) - ok.sum())
    if not ok.any():
        return dc.tensor(0.0), excluded
    feats = dc.reshape(l3_image.detach(), (grid.rows, grid.cols, l3_image.shape[1]))
    gy, gx = _to_grid_coords(u[ok], v[ok], grid.patch_size)
    targets = dc.bilinear_sample_2d(feats, gy, gx)
    preds = dc.gather_rows(cross_preds, np.nonzero(ok)[0])
    diff = dc.add(preds, dc.scale(targets, -1.0))
    return dc.mean_reduce(dc.mul(diff, diff)), excluded


def total_loss(loss_pc=None, loss_img=None, loss_cross=None):
    """Unweighted sum; absent terms count as zero.

    Returns (total Tensor, LossReport). The report is plain floats for
    logging; the Tensor drives backward.
    """
    total = None
    vals = []
    for term in (loss_pc, loss_img, loss_cross):
        if term is None:
            vals.append(0.0)
            continue
        vals.append(float(term.data))
        total = term if total is None else dc.add(total, term)
    if total is None:
        total = dc.tensor(0.0)
    report = LossReport(loss_pc=vals[0], loss_img=vals[1], loss_cross=vals[2],
                        loss_total=float(total.data))
    return total, report
