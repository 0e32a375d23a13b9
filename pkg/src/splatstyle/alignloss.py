"""Feature-alignment style losses and the full stylization objective.

The core idea: build a mutual-kNN affinity between rendered and style
feature vectors, fit a closed-form linear map P that minimizes the
affinity-weighted squared distance between projected rendered features and
their style partners, and penalize the cosine distance between each rendered
feature and its aligned target P^T v.  Aligned targets are recomputed from
the current render every step and treated as constants, so gradients flow
only through the rendered features.

Also here: the nearest-neighbor ablation losses (single or k-averaged
feature matching, Gram matching), content preservation, total variation,
depth preservation, and scale/opacity drift regularizers, each returning
(value, gradient).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .features import FeatureMap, extract, extract_adjoint
from .render import RenderOptions, SceneGrads, render, render_adjoint


@dataclass
class LossWeights:
    lambda_fast: float = 2.0
    lambda_con: float = 0.005
    lambda_tv: float = 0.02
    lambda_dep: float = 0.01
    lambda_sca: float = 1.0
    lambda_opa: float = 1.0
    k: int = 5

    def __post_init__(self):
        for name in ("lambda_fast", "lambda_con", "lambda_tv",
                     "lambda_dep", "lambda_sca", "lambda_opa"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if self.k < 1:
            raise ValidationError("k must be at least 1")


@dataclass
class AffinityMatrix:
    matrix: np.ndarray   # (N_r, N_s) binary
    pair_count: int

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        self.pair_count = int(self.pair_count)


def normalized_similarity(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """Cosine similarity between two stacks of feature vectors.

    Zero vectors are treated as orthogonal to everything (similarity 0).
    """
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    if fa.shape[1] != fb.shape[1]:
        raise ValidationError(f"feature dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    na = np.linalg.norm(fa, axis=1)
    nb = np.linalg.norm(fb, axis=1)
    na = np.where(na > 0, na, 1.0)
    nb = np.where(nb > 0, nb, 1.0)
    return (fa / na[:, None]) @ (fb / nb[:, None]).T


def build_affinity(fr: np.ndarray, fs: np.ndarray, k: int) -> AffinityMatrix:
    """Union-of-mutual-kNN incidence between rendered and style vectors.

    A[i, j] = 1 iff style j is among the k most cosine-similar style vectors
    to rendered i, or rendered i is among the k most similar rendered vectors
    to style j.  Similarity ties resolve to the smaller index.
    """
    fr = np.atleast_2d(np.asarray(fr, dtype=np.float64))
    fs = np.atleast_2d(np.asarray(fs, dtype=np.float64))
    if fr.shape[0] == 0 or fs.shape[0] == 0:
        raise ValidationError("affinity needs non-empty feature sets")
    sim = normalized_similarity(fr, fs)
    nr, ns = sim.shape
    a = np.zeros((nr, ns), dtype=np.uint8)

    kr = min(k, ns)
    order_rows = np.argsort(-sim, axis=1, kind="stable")[:, :kr]
    a[np.repeat(np.arange(nr), kr), order_rows.reshape(-1)] = 1

    kc = min(k, nr)
    order_cols = np.argsort(-sim.T, axis=1, kind="stable")[:, :kc]
    a[order_cols.reshape(-1), np.repeat(np.arange(ns), kc)] = 1

    return AffinityMatrix(matrix=a, pair_count=int(a.sum()))


def default_ridge(fr: np.ndarray, affinity: AffinityMatrix) -> float:
    """1e-6 * trace(F D F^T) / C: keeps the normal matrix invertible when the
    active rendered features span fewer than C dimensions."""
    d = affinity.matrix.sum(axis=1) / affinity.pair_count
    tr = float(np.einsum("nc,n,nc->", fr, d, fr))
    return 1e-6 * tr / fr.shape[1]


def solve_alignment(fr: np.ndarray, fs: np.ndarray, affinity: AffinityMatrix,
                    ridge: float = 0.0) -> np.ndarray:
    """Closed-form C x C map P minimizing the affinity-weighted objective

        (1/N_pair) sum_ij A_ij ||P^T v_r_i - v_s_j||^2 + ridge ||P||_F^2.

    Solves (F_r D_r F_r^T + ridge I) P = F_r U F_s^T with U = A / N_pair and
    D_r the diagonal of row sums of U.
    """
    fr = np.atleast_2d(np.asarray(fr, dtype=np.float64))
    fs = np.atleast_2d(np.asarray(fs, dtype=np.float64))
    a = affinity.matrix
    npair = affinity.pair_count
    if npair <= 0:
        raise ValidationError("affinity matrix has no pairs")
    if a.shape != (fr.shape[0], fs.shape[0]):
        raise ValidationError(
            f"affinity shape {a.shape} does not match feature counts "
            f"({fr.shape[0]}, {fs.shape[0]})")

    c = fr.shape[1]
    d_r = a.sum(axis=1) / npair
    lhs = (fr * d_r[:, None]).T @ fr + ridge * np.eye(c)
    rhs = fr.T @ (a / npair) @ fs
    try:
        p = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"alignment solve failed: {exc}") from exc
    if not np.all(np.isfinite(p)):
        raise NumericalError("alignment solve produced non-finite values "
                             "(degenerate rendered features even after ridge)")
    return p


def align_features(fm: FeatureMap, pmats: dict) -> FeatureMap:
    """Apply v -> P_label^T v per labeled cell; unlabeled cells pass through."""
    if fm.label_grid is None:
        raise ValidationError("feature map needs a label grid for alignment")
    grid = fm.grid.copy()
    for label in np.unique(fm.label_grid):
        if label == 0:
            continue
        if label not in pmats:
            raise ValidationError(f"no alignment matrix for label {int(label)}")
        sel = fm.label_grid == label
        grid[sel] = fm.grid[sel] @ pmats[label]
    return FeatureMap(grid=grid, stride=fm.stride,
                      receptive_field=fm.receptive_field, label_grid=fm.label_grid)


# ---------------------------------------------------------------------------
# cosine helpers
# ---------------------------------------------------------------------------

def _cosine_distance_and_grad(u: np.ndarray, v: np.ndarray):
    """Per-row 1 - cos(u, v) and its gradient w.r.t. u; v is constant.

    Rows where either vector has zero norm contribute 0 with zero gradient.
    """
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    ok = (nu > 0) & (nv > 0)
    nu_s = np.where(ok, nu, 1.0)
    nv_s = np.where(ok, nv, 1.0)
    cos = np.einsum("nc,nc->n", u, v) / (nu_s * nv_s)
    dist = np.where(ok, 1.0 - cos, 0.0)
    grad = -(v / (nu_s * nv_s)[:, None] - (cos / nu_s ** 2)[:, None] * u)
    grad[~ok] = 0.0
    return dist, grad


def fast_loss(fr: FeatureMap, frs: FeatureMap, mask: np.ndarray | None = None):
    """Mean cosine distance between rendered cells and their aligned targets.

    The aligned map ``frs`` is a detached target: the gradient is returned
    w.r.t. ``fr.grid`` only.  ``mask`` defaults to the labeled cells.
    """
    if fr.grid.shape != frs.grid.shape:
        raise ValidationError("feature maps must have the same shape")
    if mask is None:
        mask = fr.label_grid > 0 if fr.label_grid is not None \
            else np.ones(fr.grid.shape[:2], dtype=bool)
    grad = np.zeros_like(fr.grid)
    count = int(mask.sum())
    if count == 0:
        return 0.0, grad
    u = fr.grid[mask]
    v = frs.grid[mask]
    dist, g = _cosine_distance_and_grad(u, v)
    grad[mask] = g / count
    return float(dist.mean()), grad


def nnfm_loss(fr: FeatureMap, style_sets: dict):
    """Mean cosine distance from each labeled cell to its nearest style vector
    within the cell's group."""
    return knnfm_loss(fr, style_sets, k=1)


def knnfm_loss(fr: FeatureMap, style_sets: dict, k: int = 5):
    """Per labeled cell: mean cosine distance to its k most similar style
    vectors (group-restricted); averaged over all labeled cells."""
    if fr.label_grid is None:
        raise ValidationError("feature map needs a label grid")
    if k < 1:
        raise ValidationError("k must be at least 1")
    grad = np.zeros_like(fr.grid)
    total = 0.0
    count = 0
    for label, style in style_sets.items():
        sel = fr.label_grid == label
        n = int(sel.sum())
        if n == 0:
            continue
        u = fr.grid[sel]
        style = np.atleast_2d(np.asarray(style, dtype=np.float64))
        sim = normalized_similarity(u, style)
        kk = min(k, style.shape[0])
        nn = np.argsort(-sim, axis=1, kind="stable")[:, :kk]
        cell_grad = np.zeros_like(u)
        cell_loss = np.zeros(len(u))
        for col in range(kk):
            d, g = _cosine_distance_and_grad(u, style[nn[:, col]])
            cell_loss += d / kk
            cell_grad += g / kk
        total += cell_loss.sum()
        grad[sel] = cell_grad
        count += n
    if count == 0:
        return 0.0, grad
    grad /= count
    return total / count, grad


def gram_loss(fr: FeatureMap, style_sets: dict):
    """Frobenius mismatch of mean-pooled Gram matrices, per group, averaged
    with cell-count weights; normalized by C^2."""
    if fr.label_grid is None:
        raise ValidationError("feature map needs a label grid")
    c = fr.channels
    grad = np.zeros_like(fr.grid)
    total = 0.0
    count = 0
    for label, style in style_sets.items():
        sel = fr.label_grid == label
        n = int(sel.sum())
        if n == 0:
            continue
        u = fr.grid[sel]
        style = np.atleast_2d(np.asarray(style, dtype=np.float64))
        g_r = u.T @ u / n
        g_s = style.T @ style / style.shape[0]
        diff = g_r - g_s
        loss = float(np.sum(diff ** 2)) / c ** 2
        # d loss / d u_row = (4 / (C^2 N)) diff @ u_row
        grad[sel] = (4.0 / (c ** 2 * n)) * u @ diff
        total += loss * n
        count += n
    if count == 0:
        return 0.0, grad
    # convert the per-group cell-count weighting into a proper mean
    for label, style in style_sets.items():
        sel = fr.label_grid == label
        n = int(sel.sum())
        if n:
            grad[sel] *= n / count
    return total / count, grad


def content_loss(fc: FeatureMap, fr: FeatureMap):
    """Mean squared difference over every cell and channel."""
    if fc.grid.shape != fr.grid.shape:
        raise ValidationError("feature maps must have the same shape")
    diff = fr.grid - fc.grid
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def tv_loss(image: np.ndarray):
    """Anisotropic total variation: mean squared forward difference in x plus
    the same in y, over all channels."""
    image = np.asarray(image, dtype=np.float64)
    dx = image[:, 1:] - image[:, :-1]
    dy = image[1:] - image[:-1]
    loss = 0.0
    grad = np.zeros_like(image)
    if dx.size:
        loss += float(np.mean(dx ** 2))
        g = 2.0 * dx / dx.size
        grad[:, 1:] += g
        grad[:, :-1] -= g
    if dy.size:
        loss += float(np.mean(dy ** 2))
        g = 2.0 * dy / dy.size
        grad[1:] += g
        grad[:-1] -= g
    return loss, grad


def depth_loss(d_init: np.ndarray, d_r: np.ndarray):
    """Mean squared pixel difference against the frozen initial depth map."""
    d_init = np.asarray(d_init, dtype=np.float64)
    d_r = np.asarray(d_r, dtype=np.float64)
    if d_init.shape != d_r.shape:
        raise ValidationError("depth maps must have the same shape")
    diff = d_r - d_init
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def _norm_reg(current: np.ndarray, initial: np.ndarray):
    delta = current - initial
    norm = float(np.linalg.norm(delta))
    grad = delta / norm if norm > 0 else np.zeros_like(delta)
    return norm, grad


def scale_reg(scene):
    """Euclidean norm of the per-Gaussian scale drift from the snapshot."""
    return _norm_reg(scene.scales, scene.initial_snapshot.scales)


def opacity_reg(scene):
    """Euclidean norm of the per-Gaussian opacity drift from the snapshot."""
    return _norm_reg(scene.opacities, scene.initial_snapshot.opacities)


# ---------------------------------------------------------------------------
# full objective
# ---------------------------------------------------------------------------

@dataclass
class StylizationState:
    """Per-view inputs of the stylization objective.

    ``style_features`` maps group label -> (N_s, C) style vectors;
    ``label_grid`` assigns feature cells of this view to groups;
    ``depth_init`` is rendered once from the scene entering stylization.
    """

    scene: object
    camera: object
    extractor: object
    label_grid: np.ndarray
    content_features: FeatureMap
    style_features: dict
    depth_init: np.ndarray
    render_opts: RenderOptions = field(default_factory=RenderOptions)
    ridge: float | None = None   # None = auto per group


def total_stylization_loss(state: StylizationState, weights: LossWeights):
    """Weighted stylization objective with gradients for every splat parameter.

    Returns (total, components, SceneGrads, skipped_groups): ``components``
    maps loss name to its unweighted value; ``skipped_groups`` lists labels
    with no labeled cells in this view.
    """
    scene, cam = state.scene, state.camera
    out = render(scene, cam, opts=state.render_opts)
    fr = extract(out.color, state.extractor)
    fr.label_grid = state.label_grid
    if state.label_grid.shape != fr.grid.shape[:2]:
        raise ValidationError("label grid does not match the extracted feature grid")

    pmats = {}
    skipped = []
    for label, style in state.style_features.items():
        cells = fr.grid[state.label_grid == label]
        if cells.shape[0] == 0:
            skipped.append(label)
            continue
        aff = build_affinity(cells, style, weights.k)
        ridge = default_ridge(cells, aff) if state.ridge is None else state.ridge
        pmats[label] = solve_alignment(cells, style, aff, ridge=ridge)

    target_mask = np.isin(state.label_grid, list(pmats)) & (state.label_grid > 0)
    frs = FeatureMap(grid=fr.grid.copy(), stride=fr.stride,
                     receptive_field=fr.receptive_field, label_grid=fr.label_grid)
    for label, p in pmats.items():
        sel = state.label_grid == label
        frs.grid[sel] = fr.grid[sel] @ p

    l_fast, g_fast = fast_loss(fr, frs, mask=target_mask)
    l_con, g_con = content_loss(state.content_features, fr)
    l_tv, g_tv = tv_loss(out.color)
    l_dep, g_dep = depth_loss(state.depth_init, out.depth)
    l_sca, g_sca = scale_reg(scene)
    l_opa, g_opa = opacity_reg(scene)

    grad_grid = weights.lambda_fast * g_fast + weights.lambda_con * g_con
    grad_image = extract_adjoint(out.color, state.extractor, grad_grid)
    grad_image += weights.lambda_tv * g_tv
    grad_depth = weights.lambda_dep * g_dep

    grads = render_adjoint(scene, cam, grad_image, grad_depth, opts=state.render_opts)
    grads.scales += weights.lambda_sca * g_sca
    grads.opacities += weights.lambda_opa * g_opa

    components = {
        "fast": l_fast, "content": l_con, "tv": l_tv,
        "depth": l_dep, "scale_reg": l_sca, "opacity_reg": l_opa,
    }
    total = (weights.lambda_fast * l_fast + weights.lambda_con * l_con
             + weights.lambda_tv * l_tv + weights.lambda_dep * l_dep
             + weights.lambda_sca * l_sca + weights.lambda_opa * l_opa)
    if not np.isfinite(total):
        raise NumericalError("stylization loss became non-finite")
    return total, components, grads, skipped
