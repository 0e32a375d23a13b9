"""Moment-matching color transforms and image reconstruction losses.

The recoloring step fits, per matching group, an affine map A p + b that
transports the mean and covariance of the group's content pixels onto the
statistics of its style region (closed form via eigendecompositions of the
two covariances).  The same map is applied to the content images and to the
bound Gaussians' colors.  The module also houses the L1 + D-SSIM
reconstruction loss used to retrain the scene against the recolored views,
with an analytic gradient for the renderer adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_SSIM_WIN = 11
_SSIM_SIGMA = 1.5


@dataclass
class ColorMoments:
    mean: np.ndarray   # (3,)
    cov: np.ndarray    # (3, 3) symmetric PSD
    count: int

    def validate(self) -> None:
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.cov))):
            raise NumericalError("color moments contain non-finite values")
        if np.max(np.abs(self.cov - self.cov.T)) > 1e-8:
            raise ValidationError("covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(self.cov)) < -1e-8:
            raise ValidationError("covariance must be positive semi-definite")


@dataclass
class ColorTransform:
    weight: np.ndarray  # (3, 3)
    bias: np.ndarray    # (3,)


def compute_moments(pixels: np.ndarray) -> ColorMoments:
    """Sample mean and population (divide by N) covariance of RGB pixels."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    n = pixels.shape[0]
    if n < 2:
        raise ValidationError(f"need at least 2 pixels to compute moments, got {n}")
    mean = pixels.mean(axis=0)
    centered = pixels - mean
    cov = centered.T @ centered / n
    return ColorMoments(mean=mean, cov=cov, count=n)


def solve_color_transform(mc: ColorMoments, ms: ColorMoments,
                          eig_floor: float = 1e-8) -> ColorTransform:
    """Closed-form A, b with A Cov_c A^T = Cov_s and A mean_c + b = mean_s.

    Content eigenvalues are clamped below at ``eig_floor`` before the inverse
    square root, which keeps grayscale or otherwise rank-deficient content
    pixel sets solvable.
    """
    mc.validate()
    ms.validate()
    evc, Uc = np.linalg.eigh(mc.cov)
    evs, Us = np.linalg.eigh(ms.cov)
    evc = np.maximum(evc, eig_floor)
    evs = np.maximum(evs, 0.0)
    whiten = Uc @ np.diag(evc ** -0.5) @ Uc.T
    colorize = Us @ np.diag(evs ** 0.5) @ Us.T
    weight = colorize @ whiten
    bias = ms.mean - weight @ mc.mean
    if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
        raise NumericalError("color transform solve produced non-finite values")
    return ColorTransform(weight=weight, bias=bias)


def apply_transform(t: ColorTransform, colors: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Affine map over a (..., 3) color array; clamped to [0, 1] for storage."""
    colors = np.asarray(colors, dtype=np.float64)
    out = colors @ t.weight.T + t.bias
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out


def recolor_groups(groups, content_images, content_masks, scene,
                   global_mode: bool = False):
    """Fit and apply one color transform per matching group.

    ``content_images`` and ``content_masks`` are parallel per-view lists; a
    group's content pixels are pooled across every view where the mask equals
    the group's content label.  Returns (recolored images, recolored scene,
    {label: ColorTransform}).  Unlabeled pixels and Gaussians are untouched.
    With ``global_mode`` a single transform is fitted on the union of all
    groups' pixels and applied to every labeled pixel/Gaussian.
    """
    if len(content_images) != len(content_masks):
        raise ValidationError("content_images and content_masks must be parallel lists")

    def pooled_pixels(label):
        chunks = [img[mask == label]
                  for img, mask in zip(content_images, content_masks)]
        chunks = [c for c in chunks if c.size]
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3))

    transforms = {}
    if global_mode:
        content_px = np.concatenate(
            [pooled_pixels(g.content_mask_label) for g in groups], axis=0)
        style_px = np.concatenate([g.style_pixels for g in groups], axis=0)
        if content_px.shape[0] < 2:
            raise ValidationError("global color transform needs at least 2 content pixels")
        t = solve_color_transform(compute_moments(content_px), compute_moments(style_px))
        for g in groups:
            transforms[g.label] = t
    else:
        for g in groups:
            content_px = pooled_pixels(g.content_mask_label)
            if content_px.shape[0] < 2:
                raise ValidationError(
                    f"group {g.label} has {content_px.shape[0]} content pixels; "
                    "need at least 2 to fit a color transform")
            transforms[g.label] = solve_color_transform(
                compute_moments(content_px), compute_moments(g.style_pixels))

    recolored = []
    for img, mask in zip(content_images, content_masks):
        out = img.astype(np.float64).copy()
        for g in groups:
            sel = mask == g.content_mask_label
            if sel.any():
                out[sel] = apply_transform(transforms[g.label], out[sel])
        recolored.append(out)

    new_scene = scene.copy()
    for g in groups:
        idx = np.fromiter(sorted(g.gaussian_indices), dtype=np.int64) \
            if not isinstance(g.gaussian_indices, np.ndarray) else g.gaussian_indices
        if idx.size:
            new_scene.colors[idx] = apply_transform(transforms[g.label],
                                                    new_scene.colors[idx])
    return recolored, new_scene, transforms


# ---------------------------------------------------------------------------
# SSIM / reconstruction loss
# ---------------------------------------------------------------------------

def _gaussian_kernel(win: int, sigma: float) -> np.ndarray:
    r = (win - 1) // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _pick_window(h: int, w: int) -> int:
    win = min(_SSIM_WIN, h, w)
    if win % 2 == 0:
        win -= 1
    if win < 1:
        raise ValidationError("image too small for SSIM")
    return win


def _valid_correlate(img: np.ndarray, k2: np.ndarray) -> np.ndarray:
    """2D 'valid' correlation per channel with a small dense kernel."""
    win = k2.shape[0]
    windows = np.lib.stride_tricks.sliding_window_view(img, (win, win), axis=(0, 1))
    return np.tensordot(windows, k2, axes=([-2, -1], [0, 1]))


def _valid_correlate_adjoint(grad: np.ndarray, k2: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape)
    win = k2.shape[0]
    for u in range(win):
        for v in range(win):
            out[u:u + grad.shape[0], v:v + grad.shape[1]] += k2[u, v] * grad
    return out


def _ssim_maps(a: np.ndarray, b: np.ndarray, k2: np.ndarray):
    mu_a = _valid_correlate(a, k2)
    mu_b = _valid_correlate(b, k2)
    e_aa = _valid_correlate(a * a, k2)
    e_bb = _valid_correlate(b * b, k2)
    e_ab = _valid_correlate(a * b, k2)
    va = e_aa - mu_a ** 2
    vb = e_bb - mu_b ** 2
    cab = e_ab - mu_a * mu_b
    lum = 2 * mu_a * mu_b + _SSIM_C1
    con = 2 * cab + _SSIM_C2
    den1 = mu_a ** 2 + mu_b ** 2 + _SSIM_C1
    den2 = va + vb + _SSIM_C2
    s = (lum * con) / (den1 * den2)
    return s, (mu_a, mu_b, lum, con, den1, den2)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image dimensions differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    return a, b


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over valid windows (Gaussian 11x11, sigma 1.5, data range 1)."""
    a, b = _check_pair(a, b)
    win = _pick_window(a.shape[0], a.shape[1])
    k1 = _gaussian_kernel(win, _SSIM_SIGMA)
    k2 = np.outer(k1, k1)
    s, _ = _ssim_maps(a, b, k2)
    return float(s.mean())


def ssim_with_grad(a: np.ndarray, b: np.ndarray):
    """(mean SSIM, d mean-SSIM / d a)."""
    a, b = _check_pair(a, b)
    win = _pick_window(a.shape[0], a.shape[1])
    k1 = _gaussian_kernel(win, _SSIM_SIGMA)
    k2 = np.outer(k1, k1)
    s, (mu_a, mu_b, lum, con, den1, den2) = _ssim_maps(a, b, k2)
    value = float(s.mean())

    g = np.full_like(s, 1.0 / s.size)
    inv = 1.0 / (den1 * den2)
    d_lum = g * con * inv
    d_con = g * lum * inv
    d_den1 = -g * s / den1
    d_den2 = -g * s / den2
    # filtered-map gradients; va = E[a^2] - mu_a^2, cab = E[ab] - mu_a mu_b
    g_mu_a = d_lum * 2 * mu_b + d_den1 * 2 * mu_a + d_den2 * (-2 * mu_a) + d_con * (-2 * mu_b)
    g_e_aa = d_den2
    g_e_ab = d_con * 2

    shape = a.shape
    grad = (_valid_correlate_adjoint(g_mu_a, k2, shape)
            + _valid_correlate_adjoint(g_e_aa, k2, shape) * 2 * a
            + _valid_correlate_adjoint(g_e_ab, k2, shape) * b)
    return value, grad


def reconstruction_loss(rendered: np.ndarray, target: np.ndarray,
                        lambda_dssim: float = 0.2):
    """(1 - lambda) L1 + lambda (1 - SSIM) / 2, with gradient w.r.t. rendered."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValidationError(f"image dimensions differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    if not diff.any():
        # exact fixed point: both the L1 and D-SSIM gradients vanish; skip the
        # windowed math so no floating-point residue leaks into the optimizer
        return 0.0, np.zeros_like(rendered)
    l1 = float(np.abs(diff).mean())
    g_l1 = np.sign(diff) / diff.size

    if lambda_dssim == 0.0:
        return l1, g_l1
    s_val, s_grad = ssim_with_grad(rendered, target)
    if rendered.ndim == 2:
        s_grad = s_grad[:, :, 0]
    loss = (1 - lambda_dssim) * l1 + lambda_dssim * (1 - s_val) / 2
    grad = (1 - lambda_dssim) * g_l1 - lambda_dssim * 0.5 * s_grad
    return loss, grad
