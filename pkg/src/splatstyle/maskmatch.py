"""Semantic matching: lifting 2D mask labels onto Gaussians and isolating
style regions.

Label unprojection accumulates each Gaussian's per-pixel blending weight
T * alpha into a per-label score across all views; a Gaussian adopts the
dominant label when it holds at least a ``tau`` fraction of the Gaussian's
total accumulated weight.  Style isolation crops a style region into a
self-contained image completed only from in-region content, so features
extracted from it cannot leak style from neighboring regions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .render import RenderOptions, render
from .scene import GaussianScene

COMPLETION_MODES = ("mirror", "translate", "mean-fill")


@dataclass
class LabelMask:
    """H x W grid of label indices; 0 means unlabeled."""

    grid: np.ndarray
    num_labels: int

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        if self.grid.ndim != 2:
            raise ValidationError("label mask must be a 2D grid")
        if self.grid.size and self.grid.max() > self.num_labels:
            raise ValidationError(
                f"mask contains label {int(self.grid.max())} > num_labels {self.num_labels}")

    @staticmethod
    def from_grid(grid: np.ndarray) -> "LabelMask":
        grid = np.asarray(grid)
        return LabelMask(grid=grid, num_labels=int(grid.max()) if grid.size else 0)


@dataclass
class IsolatedStyleRegion:
    completed_image: np.ndarray     # (h, w, 3) crop, filled outside the region
    region_cell_mask: np.ndarray    # bool feature-grid cells fully inside the原 region
    completion_mode: str
    bbox: tuple                     # (row0, row1, col0, col1) in style-image coords


@dataclass
class SemanticMatchingGroup:
    label: int                      # group index z (equals the content label)
    content_mask_label: int
    style_region: IsolatedStyleRegion
    gaussian_indices: np.ndarray    # sorted indices into the scene
    style_pixels: np.ndarray        # (K, 3) original-region pixels, for color moments


def unproject_labels(scene: GaussianScene, cameras, masks,
                     opts: RenderOptions | None = None) -> np.ndarray:
    """Accumulate per-Gaussian label weights w[i, j] = sum T_i(p) alpha_i(p)
    over all pixels p labeled j, summed across views.

    ``masks`` is a per-view list of LabelMask (or raw grids); column 0 of the
    returned array is unused (label 0 = unlabeled contributes nothing).
    """
    if len(cameras) != len(masks):
        raise ValidationError(f"{len(cameras)} cameras but {len(masks)} masks")
    opts = opts or RenderOptions()

    grids = [m.grid if isinstance(m, LabelMask) else np.asarray(m) for m in masks]
    num_labels = max((int(g.max()) for g in grids if g.size), default=0)
    weights = np.zeros((len(scene), num_labels + 1))

    for cam, grid in zip(cameras, grids):
        if grid.shape != (cam.height, cam.width):
            raise ValidationError(
                f"mask shape {grid.shape} does not match camera ({cam.height}, {cam.width})")
        out = render(scene, cam, want_contribs=True, opts=opts)
        w = out.contribs.weights.reshape(out.contribs.weights.shape[0], -1)
        flat = grid.reshape(-1)
        onehot = np.zeros((flat.size, num_labels + 1))
        onehot[np.arange(flat.size), flat] = 1.0
        onehot[:, 0] = 0.0
        weights[out.contribs.gaussian_indices] += w @ onehot
    return weights


def assign_labels(weights: np.ndarray, tau: float = 0.6) -> np.ndarray:
    """Dominant label per Gaussian when it carries >= tau of the total weight.

    Returns int labels (0 = unlabeled).  Ties go to the smallest label index.
    """
    if not 0 < tau <= 1:
        raise ValidationError("tau must lie in (0, 1]")
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum(axis=1)
    best = np.argmax(weights, axis=1)  # first occurrence wins ties
    ratio = np.divide(weights[np.arange(len(weights)), best], total,
                      out=np.zeros(len(weights)), where=total > 0)
    labels = np.where((total > 0) & (ratio >= tau), best, 0)
    return labels.astype(np.int32)


def erode_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological erosion with a square element of half-width ``radius``."""
    if radius < 0:
        raise ValidationError("erosion radius must be nonnegative")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_erosion(mask, structure=structure, border_value=0)


def _fill_mean(crop, inside):
    mean = crop[inside].mean(axis=0)
    out = np.where(inside[:, :, None], crop, mean)
    return out


def _fill_mirror(crop, inside):
    """Reflect each outside pixel across its nearest in-region pixel."""
    h, w = inside.shape
    # nearest in-region pixel for every location
    _, (near_r, near_c) = ndimage.distance_transform_edt(~inside, return_indices=True)
    rows, cols = np.indices(inside.shape)
    ref_r = np.clip(2 * near_r - rows, 0, h - 1)
    ref_c = np.clip(2 * near_c - cols, 0, w - 1)
    # if the reflected coordinate is itself outside the region, fall back to
    # the nearest in-region pixel
    ok = inside[ref_r, ref_c]
    src_r = np.where(ok, ref_r, near_r)
    src_c = np.where(ok, ref_c, near_c)
    out = crop[src_r, src_c]
    out[inside] = crop[inside]
    return out


def _fill_translate(crop, inside):
    """Tile in-region content periodically: rows first, then columns."""
    h, w = inside.shape
    out = crop.copy()
    row_done = np.zeros(h, dtype=bool)
    for r in range(h):
        cols = np.flatnonzero(inside[r])
        if cols.size:
            vals = crop[r, cols]
            cyclic = vals[np.arange(w) % cols.size]
            missing = ~inside[r]
            out[r, missing] = cyclic[missing]
            row_done[r] = True
    if not row_done.all():
        done_rows = np.flatnonzero(row_done)
        for r in np.flatnonzero(~row_done):
            out[r] = out[done_rows[r % done_rows.size]]
    return out


def isolate_style_region(style_image: np.ndarray, region_mask: np.ndarray,
                         mode: str = "mirror", erosion_radius: int = 8,
                         feature_stride: int = 8, receptive_field: int = 8) -> IsolatedStyleRegion:
    """Crop an eroded style region and complete it from in-region content only.

    The returned ``region_cell_mask`` marks feature-grid cells (for the given
    extractor geometry) whose receptive field lies entirely inside the
    original (pre-erosion) region; only those cells serve as style features.
    """
    if mode not in COMPLETION_MODES:
        raise ValidationError(f"unknown completion mode '{mode}'; expected one of {COMPLETION_MODES}")
    style_image = np.asarray(style_image, dtype=np.float64)
    region_mask = np.asarray(region_mask, dtype=bool)
    if style_image.shape[:2] != region_mask.shape:
        raise ValidationError("style image and region mask dimensions differ")

    eroded = erode_mask(region_mask, erosion_radius)
    if not eroded.any():
        raise ValidationError(
            f"style region is empty after erosion radius {erosion_radius}; "
            "use a smaller radius")

    rows = np.flatnonzero(eroded.any(axis=1))
    cols = np.flatnonzero(eroded.any(axis=0))
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    c0, c1 = int(cols[0]), int(cols[-1]) + 1

    inside = eroded[r0:r1, c0:c1]
    # zero out everything outside the eroded region before filling so the
    # result provably depends on in-region pixels only
    crop = np.where(inside[:, :, None], style_image[r0:r1, c0:c1], 0.0)
    if mode == "mean-fill":
        completed = _fill_mean(crop, inside)
    elif mode == "mirror":
        completed = _fill_mirror(crop, inside)
    else:
        completed = _fill_translate(crop, inside)

    original_crop_mask = region_mask[r0:r1, c0:c1]
    region_cell_mask = _cells_fully_inside(original_crop_mask, feature_stride, receptive_field)
    return IsolatedStyleRegion(
        completed_image=completed,
        region_cell_mask=region_cell_mask,
        completion_mode=mode,
        bbox=(r0, r1, c0, c1),
    )


def _cells_fully_inside(mask: np.ndarray, stride: int, receptive_field: int) -> np.ndarray:
    h, w = mask.shape
    hf = (h - receptive_field) // stride + 1 if h >= receptive_field else 0
    wf = (w - receptive_field) // stride + 1 if w >= receptive_field else 0
    out = np.zeros((max(hf, 0), max(wf, 0)), dtype=bool)
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            field = mask[i * stride:i * stride + receptive_field,
                         j * stride:j * stride + receptive_field]
            out[i, j] = bool(field.all())
    return out


@dataclass
class StyleSpec:
    """One style source: an image, the region of it to use, and how to
    complete the crop."""

    image: np.ndarray               # (H, W, 3) float in [0, 1]
    mask: np.ndarray | None = None  # bool region; None = whole image
    mode: str = "mirror"


def build_matching_groups(content_masks, style_specs, mapping, scene_labels,
                          erosion_radius: int = 8,
                          feature_stride: int = 8,
                          receptive_field: int = 8):
    """Assemble one SemanticMatchingGroup per mapped content label.

    ``mapping`` maps content-label -> index into ``style_specs``.  Every label
    carried by a Gaussian must be mapped; unmapped labels are an error.
    """
    scene_labels = np.asarray(scene_labels)
    present = sorted(int(l) for l in np.unique(scene_labels) if l != 0)
    unmapped = [l for l in present if l not in mapping]
    if unmapped:
        raise ValidationError(
            f"content labels {unmapped} have labeled Gaussians but no style mapping")

    groups = []
    for label in sorted(mapping):
        spec = style_specs[mapping[label]]
        mask = np.ones(spec.image.shape[:2], dtype=bool) if spec.mask is None \
            else np.asarray(spec.mask, dtype=bool)
        region = isolate_style_region(
            spec.image, mask, mode=spec.mode, erosion_radius=erosion_radius,
            feature_stride=feature_stride, receptive_field=receptive_field)
        groups.append(SemanticMatchingGroup(
            label=label,
            content_mask_label=label,
            style_region=region,
            gaussian_indices=np.flatnonzero(scene_labels == label),
            style_pixels=np.asarray(spec.image, dtype=np.float64)[mask],
        ))
    return groups
