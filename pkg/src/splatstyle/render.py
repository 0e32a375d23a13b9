"""Reference differentiable forward renderer for Gaussian-splat scenes.

Per-pixel semantics: every non-culled splat is projected to a 2D Gaussian
(EWA-style first-order projection with a low-pass floor), splats are sorted
front to back by camera depth (ties broken by index), and each pixel
alpha-composites

    color = sum_i T_i * alpha_i * c_i + T_residual * background
    depth = sum_i T_i * alpha_i * d_i            (unnormalized camera z)

with alpha_i = opacity_i * exp(-0.5 * delta^T cov2d^-1 * delta) clamped at
``alpha_clamp`` and per-pixel early stop once transmittance drops below
``stop_transmittance``.  The evaluation is dense (no tiling): exact,
auditable, and fast enough at desk scale.

``render_adjoint`` implements the exact reverse-mode derivative of this
forward map for position, rotation, scale, opacity, and color.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .scene import Camera, Gaussian, GaussianScene, quat_to_rotmat


@dataclass
class RenderOptions:
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    alpha_clamp: float = 0.99
    stop_transmittance: float = 1e-4
    lowpass_floor: float = 0.3   # px^2 added to cov2d diagonal
    near_plane: float = 0.01

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)


@dataclass
class Splat2D:
    mean2d: np.ndarray   # (2,) pixel coords
    cov2d: np.ndarray    # (2, 2) pixels^2, includes low-pass floor
    depth: float         # camera-space z
    gaussian_index: int


@dataclass
class Contributions:
    """Per-splat blending weights T_i * alpha_i, composite order, dense grid."""

    gaussian_indices: np.ndarray  # (M,) indices into the scene, front-to-back
    weights: np.ndarray           # (M, H, W)


@dataclass
class RenderOutput:
    color: np.ndarray       # (H, W, 3) in [0, 1]
    depth: np.ndarray       # (H, W) camera z, unnormalized
    alpha_acc: np.ndarray   # (H, W) accumulated sum of T_i * alpha_i
    contribs: Contributions | None = None


@dataclass
class SceneGrads:
    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    @staticmethod
    def zeros(n: int) -> "SceneGrads":
        return SceneGrads(
            positions=np.zeros((n, 3)),
            rotations=np.zeros((n, 4)),
            scales=np.zeros((n, 3)),
            opacities=np.zeros(n),
            colors=np.zeros((n, 3)),
        )


def _project_all(scene: GaussianScene, cam: Camera, opts: RenderOptions):
    """Project every Gaussian; returns per-splat arrays plus the visibility mask.

    Culling: camera depth <= near plane, non-finite projection, or the 3-sigma
    footprint entirely off-image.
    """
    rot_c = cam.rotation
    p_cam = scene.positions @ rot_c.T + cam.translation
    z = p_cam[:, 2]
    vis = z > opts.near_plane

    # guard divisions for the culled entries
    zs = np.where(vis, z, 1.0)
    u = cam.fx * p_cam[:, 0] / zs + cam.cx
    v = cam.fy * p_cam[:, 1] / zs + cam.cy
    mean2d = np.stack([u, v], axis=1)

    rot_g = quat_to_rotmat(scene.rotations)
    s2 = scene.scales ** 2
    cov3d = rot_g @ (s2[:, :, None] * rot_g.transpose(0, 2, 1))

    jac = np.zeros((len(scene), 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * p_cam[:, 0] / zs ** 2
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * p_cam[:, 1] / zs ** 2
    jw = jac @ rot_c
    cov2d = jw @ cov3d @ jw.transpose(0, 2, 1)
    cov2d[:, 0, 0] += opts.lowpass_floor
    cov2d[:, 1, 1] += opts.lowpass_floor

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    vis &= np.isfinite(det) & (det > 0) & np.isfinite(u) & np.isfinite(v)

    # 3-sigma bound from the largest eigenvalue
    eig_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(eig_max, 0.0))
    vis &= (u + radius > 0) & (u - radius < cam.width) & (v + radius > 0) & (v - radius < cam.height)

    return {
        "p_cam": p_cam, "depth": z, "mean2d": mean2d, "cov2d": cov2d,
        "cov3d": cov3d, "jw": jw, "jac": jac, "rot_g": rot_g, "vis": vis,
    }


def project(g: Gaussian, cam: Camera, opts: RenderOptions | None = None) -> Splat2D | None:
    """Project a single Gaussian; None when culled."""
    opts = opts or RenderOptions()
    scene = GaussianScene(
        positions=g.position[None], rotations=g.rotation[None], scales=g.scale[None],
        opacities=np.array([g.opacity]), colors=g.color[None], labels=np.array([g.label]),
    )
    pr = _project_all(scene, cam, opts)
    if not pr["vis"][0]:
        return None
    return Splat2D(
        mean2d=pr["mean2d"][0].copy(),
        cov2d=pr["cov2d"][0].copy(),
        depth=float(pr["depth"][0]),
        gaussian_index=0,
    )


def _forward(scene: GaussianScene, cam: Camera, opts: RenderOptions):
    """Shared forward pass; returns outputs plus the intermediates the adjoint needs."""
    H, W = cam.height, cam.width
    P = H * W
    pr = _project_all(scene, cam, opts)
    order = np.flatnonzero(pr["vis"])
    # front-to-back: by depth, stable in index for deterministic ties
    order = order[np.argsort(pr["depth"][order], kind="stable")]
    M = order.size

    bg = opts.background
    if M == 0:
        color = np.tile(bg, (H, W, 1))
        out = RenderOutput(color=color, depth=np.zeros((H, W)), alpha_acc=np.zeros((H, W)))
        return out, None

    mean2d = pr["mean2d"][order]
    cov2d = pr["cov2d"][order]
    depth = pr["depth"][order]
    opac = scene.opacities[order]
    col = scene.colors[order]

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    ia = (c / det)[:, None]
    ib = (-b / det)[:, None]
    ic = (a / det)[:, None]

    xs = np.arange(W, dtype=np.float64) + 0.5
    ys = np.arange(H, dtype=np.float64) + 0.5
    px = np.tile(xs, H)
    py = np.repeat(ys, W)

    dx = px[None, :] - mean2d[:, 0:1]
    dy = py[None, :] - mean2d[:, 1:2]
    qform = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
    gauss = np.exp(-0.5 * qform)
    araw = opac[:, None] * gauss
    unclamped = araw < opts.alpha_clamp
    alpha = np.minimum(araw, opts.alpha_clamp)
    om = 1.0 - alpha

    trans = np.empty_like(om)
    trans[0] = 1.0
    np.cumprod(om[:-1], axis=0, out=trans[1:])
    active = trans >= opts.stop_transmittance
    w = trans * alpha * active

    alpha_acc = w.sum(axis=0)
    color = w.T @ col + (1.0 - alpha_acc)[:, None] * bg
    depth_map = w.T @ depth

    out = RenderOutput(
        color=color.reshape(H, W, 3),
        depth=depth_map.reshape(H, W),
        alpha_acc=alpha_acc.reshape(H, W),
    )
    internals = {
        "order": order, "pr": pr, "mean2d": mean2d, "cov2d": cov2d,
        "depth": depth, "opac": opac, "col": col,
        "ia": ia, "ib": ib, "ic": ic, "dx": dx, "dy": dy,
        "gauss": gauss, "unclamped": unclamped, "alpha": alpha, "om": om,
        "trans": trans, "active": active, "w": w,
    }
    return out, internals


def render(scene: GaussianScene, cam: Camera, want_contribs: bool = False,
           opts: RenderOptions | None = None) -> RenderOutput:
    """Forward render color, depth and accumulated alpha for one camera."""
    opts = opts or RenderOptions()
    out, internals = _forward(scene, cam, opts)
    if want_contribs:
        if internals is None:
            out.contribs = Contributions(
                gaussian_indices=np.zeros(0, dtype=np.int64),
                weights=np.zeros((0, cam.height, cam.width)),
            )
        else:
            out.contribs = Contributions(
                gaussian_indices=internals["order"].copy(),
                weights=internals["w"].reshape(-1, cam.height, cam.width).copy(),
            )
    return out


def render_adjoint(scene: GaussianScene, cam: Camera,
                   grad_color: np.ndarray, grad_depth: np.ndarray,
                   opts: RenderOptions | None = None) -> SceneGrads:
    """Exact reverse-mode derivative of ``render`` for all splat parameters.

    ``grad_color`` (H, W, 3) and ``grad_depth`` (H, W) are the upstream
    gradients of a scalar loss with respect to the rendered color and depth.
    """
    opts = opts or RenderOptions()
    H, W = cam.height, cam.width
    grad_color = np.asarray(grad_color, dtype=np.float64)
    grad_depth = np.asarray(grad_depth, dtype=np.float64)
    if grad_color.shape != (H, W, 3) or grad_depth.shape != (H, W):
        raise ValidationError(
            f"gradient image dimensions {grad_color.shape}/{grad_depth.shape} "
            f"do not match camera ({H}, {W})"
        )

    grads = SceneGrads.zeros(len(scene))
    out, it = _forward(scene, cam, opts)
    if it is None:
        return grads

    gC = grad_color.reshape(-1, 3)   # (P, 3)
    gD = grad_depth.reshape(-1)      # (P,)
    order = it["order"]
    w, trans, alpha, om = it["w"], it["trans"], it["alpha"], it["om"]
    col, depth, opac = it["col"], it["depth"], it["opac"]
    gauss, unclamped = it["gauss"], it["unclamped"]
    dx, dy = it["dx"], it["dy"]
    ia, ib, ic = it["ia"], it["ib"], it["ic"]
    bg = opts.background

    # --- compositing ------------------------------------------------------
    # dL/dw_i(p) = sum_ch gC * (c_i - bg) + gD * d_i ; background absorbs 1 - sum w
    gw = (col - bg) @ gC.T + depth[:, None] * gD[None, :]

    # w_i = [active] * T_i * alpha_i with T_i = prod_{j<i} (1 - alpha_j):
    # dL/dalpha_i = [active_i] gw_i T_i - (sum_{j>i} gw_j w_j) / (1 - alpha_i)
    gww = gw * w
    suffix = np.zeros_like(gww)
    np.cumsum(gww[:0:-1], axis=0, out=suffix[-2::-1])
    galpha = gw * (trans * it["active"]) - suffix / om

    grads.colors[order] = w @ gC
    gdepth_direct = w @ gD

    # --- splat response ----------------------------------------------------
    garaw = galpha * unclamped
    grads.opacities[order] = np.einsum("np,np->n", garaw, gauss)
    gq = -0.5 * gauss * garaw * opac[:, None]

    gm00 = np.einsum("np,np->n", gq, dx * dx)
    gm11 = np.einsum("np,np->n", gq, dy * dy)
    gm01 = np.einsum("np,np->n", gq, dx * dy)  # full-matrix off-diagonal (each of the two)
    two_gq = 2.0 * gq
    gmx = -np.einsum("np,np->n", two_gq, ia * dx + ib * dy)
    gmy = -np.einsum("np,np->n", two_gq, ib * dx + ic * dy)

    # M = cov2d^-1: dL/dcov2d = -M gM M
    gM = np.empty((order.size, 2, 2))
    gM[:, 0, 0] = gm00
    gM[:, 0, 1] = gM[:, 1, 0] = gm01
    gM[:, 1, 1] = gm11
    Minv = np.empty_like(gM)
    Minv[:, 0, 0] = ia[:, 0]
    Minv[:, 0, 1] = Minv[:, 1, 0] = ib[:, 0]
    Minv[:, 1, 1] = ic[:, 0]
    gcov2d = -Minv @ gM @ Minv

    # --- projection --------------------------------------------------------
    pr = it["pr"]
    jw = pr["jw"][order]
    cov3d = pr["cov3d"][order]
    rot_g = pr["rot_g"][order]
    p_cam = pr["p_cam"][order]
    scales = scene.scales[order]
    quats = scene.rotations[order]

    gSigma = jw.transpose(0, 2, 1) @ gcov2d @ jw             # symmetric
    gJW = 2.0 * (gcov2d @ jw @ cov3d)
    gJ = gJW @ cam.rotation.T

    X, Y, Z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    gX = gJ[:, 0, 2] * (-fx / Z ** 2) + gmx * fx / Z
    gY = gJ[:, 1, 2] * (-fy / Z ** 2) + gmy * fy / Z
    gZ = (
        gJ[:, 0, 0] * (-fx / Z ** 2)
        + gJ[:, 1, 1] * (-fy / Z ** 2)
        + gJ[:, 0, 2] * (2.0 * fx * X / Z ** 3)
        + gJ[:, 1, 2] * (2.0 * fy * Y / Z ** 3)
        - gmx * fx * X / Z ** 2
        - gmy * fy * Y / Z ** 2
        + gdepth_direct
    )
    grads.positions[order] = np.stack([gX, gY, gZ], axis=1) @ cam.rotation

    # Sigma = R diag(s^2) R^T
    gR = 2.0 * (gSigma @ rot_g) * (scales ** 2)[:, None, :]
    gdiag = np.einsum("nij,njk,nki->ni", rot_g.transpose(0, 2, 1), gSigma, rot_g)
    grads.scales[order] = 2.0 * scales * gdiag

    grads.rotations[order] = _quat_backward(quats, gR)
    return grads


def _quat_backward(quats: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Chain dL/dR into dL/dq including the normalization q -> q/|q|."""
    n = np.linalg.norm(quats, axis=1, keepdims=True)
    qh = quats / n
    qw, qx, qy, qz = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    zero = np.zeros_like(qw)

    def mat(rows):
        return 2.0 * np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dRdw = mat([[zero, -qz, qy], [qz, zero, -qx], [-qy, qx, zero]])
    dRdx = mat([[zero, qy, qz], [qy, -2 * qx, -qw], [qz, qw, -2 * qx]])
    dRdy = mat([[-2 * qy, qx, qw], [qx, zero, qz], [-qw, qz, -2 * qy]])
    dRdz = mat([[-2 * qz, -qw, qx], [qw, -2 * qz, qy], [qx, qy, zero]])

    gqh = np.stack([
        np.einsum("nij,nij->n", gR, d) for d in (dRdw, dRdx, dRdy, dRdz)
    ], axis=1)
    # normalization: dL/dq = (gqh - qh (qh . gqh)) / |q|
    return (gqh - qh * np.einsum("ni,ni->n", qh, gqh)[:, None]) / n
