"""Feature extraction for rendered, content, and style images.

Two extractor kinds:

* ``patch-stats`` computes 12 channels per non-overlapping (or strided)
  patch: mean RGB, per-channel standard deviation, and the mean absolute
  horizontal/vertical forward differences per channel.  It is cheap,
  deterministic, and carries a closed-form adjoint, so the stylization loop
  can backpropagate through it.
* ``file`` loads a precomputed feature tensor (e.g. deep network activations
  exported offline) from an FMAP file; valid for loss evaluation on fixed
  renders only, since no adjoint is available.

FMAP tensor format: magic ``FMAP``, u32 version, u32 ndims, ndims x u64
dims, float32 little-endian row-major payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_MAX_ELEMENTS = 1 << 31

PATCH_STATS_CHANNELS = 12


@dataclass
class FeatureMap:
    grid: np.ndarray                  # (H_f, W_f, C)
    stride: int                       # pixels per cell
    receptive_field: int              # pixels
    label_grid: np.ndarray | None = None  # (H_f, W_f) ints, 0 = unlabeled

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3:
            raise ValidationError("feature grid must be H_f x W_f x C")
        if not np.all(np.isfinite(self.grid)):
            raise ValidationError("feature grid contains non-finite values")
        if self.label_grid is not None:
            self.label_grid = np.asarray(self.label_grid)
            if self.label_grid.shape != self.grid.shape[:2]:
                raise ValidationError("label grid dimensions do not match feature grid")

    @property
    def channels(self) -> int:
        return self.grid.shape[2]

    def vectors(self, label: int | None = None) -> np.ndarray:
        """Flattened (N, C) cell vectors, optionally restricted to one label."""
        if label is None:
            return self.grid.reshape(-1, self.channels)
        if self.label_grid is None:
            raise ValidationError("feature map has no label grid")
        return self.grid[self.label_grid == label]


@dataclass
class FeatureExtractorSpec:
    kind: str = "patch-stats"         # "patch-stats" | "file"
    patch: int = 8
    stride: int = 8
    path_template: str | None = None  # for kind="file", formatted with view/style ids

    def __post_init__(self):
        if self.kind not in ("patch-stats", "file"):
            raise ValidationError(f"unknown extractor kind '{self.kind}'")
        if self.kind == "file" and not self.path_template:
            raise ValidationError("file extractor needs a path template")
        if self.patch < 1 or self.stride < 1:
            raise ValidationError("patch and stride must be positive")

    @property
    def receptive_field(self) -> int:
        return self.patch


def _patch_view(image: np.ndarray, patch: int, stride: int) -> np.ndarray:
    """(H_f, W_f, patch, patch, 3) strided window view."""
    win = np.lib.stride_tricks.sliding_window_view(image, (patch, patch), axis=(0, 1))
    return win[::stride, ::stride].transpose(0, 1, 3, 4, 2)


def extract(image: np.ndarray, spec: FeatureExtractorSpec,
            key: str | None = None) -> FeatureMap:
    """Feature map for an RGB image; ``key`` resolves the file template."""
    if spec.kind == "file":
        if key is None:
            raise ValidationError("file extractor requires a key to resolve the path template")
        return load_feature_map(spec.path_template.format(key=key),
                                stride=spec.stride, receptive_field=spec.patch)

    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError("patch-stats extractor expects an H x W x 3 image")
    if image.shape[0] < spec.patch or image.shape[1] < spec.patch:
        raise ValidationError(
            f"image {image.shape[:2]} smaller than the {spec.patch} px receptive field")

    patches = _patch_view(image, spec.patch, spec.stride)
    mean = patches.mean(axis=(2, 3))
    std = patches.std(axis=(2, 3))
    gx = np.abs(np.diff(patches, axis=3)).mean(axis=(2, 3))
    gy = np.abs(np.diff(patches, axis=2)).mean(axis=(2, 3))
    grid = np.concatenate([mean, std, gx, gy], axis=2)
    return FeatureMap(grid=grid, stride=spec.stride, receptive_field=spec.patch)


def extract_adjoint(image: np.ndarray, spec: FeatureExtractorSpec,
                    grad_grid: np.ndarray) -> np.ndarray:
    """d<grad_grid, extract(image)>/d image for the patch-stats extractor.

    Standard-deviation and absolute-difference channels use the subgradient 0
    at their non-differentiable points (constant patches).
    """
    if spec.kind != "patch-stats":
        raise ValidationError("only the patch-stats extractor has an adjoint")
    image = np.asarray(image, dtype=np.float64)
    grad_grid = np.asarray(grad_grid, dtype=np.float64)
    patch, stride = spec.patch, spec.stride
    patches = _patch_view(image, patch, stride)
    hf, wf = patches.shape[:2]
    if grad_grid.shape != (hf, wf, PATCH_STATS_CHANNELS):
        raise ValidationError(
            f"grad grid shape {grad_grid.shape} does not match ({hf}, {wf}, {PATCH_STATS_CHANNELS})")

    npx = patch * patch
    g_mean = grad_grid[:, :, 0:3]
    g_std = grad_grid[:, :, 3:6]
    g_gx = grad_grid[:, :, 6:9]
    g_gy = grad_grid[:, :, 9:12]

    # per-patch gradients, shape (hf, wf, patch, patch, 3)
    gp = np.broadcast_to(g_mean[:, :, None, None, :] / npx, patches.shape).copy()

    mean = patches.mean(axis=(2, 3), keepdims=True)
    std = patches.std(axis=(2, 3), keepdims=True)
    centered = patches - mean
    safe = np.where(std > 1e-12, std, 1.0)
    gp += np.where(std > 1e-12, g_std[:, :, None, None, :] * centered / (npx * safe), 0.0)

    dx = np.diff(patches, axis=3)
    sx = np.sign(dx) * (g_gx[:, :, None, None, :] / (patch * (patch - 1)))
    gp[:, :, :, 1:, :] += sx
    gp[:, :, :, :-1, :] -= sx

    dy = np.diff(patches, axis=2)
    sy = np.sign(dy) * (g_gy[:, :, None, None, :] / (patch * (patch - 1)))
    gp[:, :, 1:, :, :] += sy
    gp[:, :, :-1, :, :] -= sy

    out = np.zeros_like(image)
    for i in range(hf):
        r = i * stride
        for j in range(wf):
            c = j * stride
            out[r:r + patch, c:c + patch] += gp[i, j]
    return out


def downsample_labels(mask: np.ndarray, fm_shape, stride: int,
                      receptive_field: int) -> np.ndarray:
    """Majority pixel label per feature cell footprint; ties become unlabeled."""
    mask = np.asarray(mask)
    hf, wf = fm_shape
    out = np.zeros((hf, wf), dtype=np.int32)
    for i in range(hf):
        for j in range(wf):
            cell = mask[i * stride:i * stride + receptive_field,
                        j * stride:j * stride + receptive_field]
            vals, counts = np.unique(cell, return_counts=True)
            top = counts.max()
            winners = vals[counts == top]
            out[i, j] = winners[0] if winners.size == 1 else 0
    return out


# ---------------------------------------------------------------------------
# FMAP tensor I/O
# ---------------------------------------------------------------------------

def write_tensor(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(struct.pack("<II", FMAP_VERSION, array.ndim))
        fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"tensor file not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FMAP_MAGIC:
            raise ValidationError(f"bad magic {magic!r} in {path}; expected {FMAP_MAGIC!r}")
        version, ndims = struct.unpack("<II", fh.read(8))
        if version != FMAP_VERSION:
            raise ValidationError(f"unsupported FMAP version {version}")
        if ndims == 0 or ndims > 8:
            raise ValidationError(f"implausible dimension count {ndims}")
        dims = struct.unpack(f"<{ndims}Q", fh.read(8 * ndims))
        if any(d == 0 for d in dims):
            raise ValidationError(f"zero-sized dimension in {path}: {dims}")
        total = 1
        for d in dims:
            total *= d
            if total > _MAX_ELEMENTS:
                raise ValidationError(f"dimension overflow in {path}: {dims}")
        payload = fh.read(4 * total)
        if len(payload) != 4 * total:
            raise ValidationError(f"tensor payload truncated in {path}")
        return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)


def load_feature_map(path, stride: int = 8, receptive_field: int = 8) -> FeatureMap:
    """Read and validate a 3D FMAP tensor as a feature map."""
    arr = read_tensor(path)
    if arr.ndim != 3:
        raise ValidationError(
            f"feature map needs 3 dimensions (H_f, W_f, C); {path} has {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"non-finite values in feature map {path}")
    return FeatureMap(grid=arr, stride=stride, receptive_field=receptive_field)
