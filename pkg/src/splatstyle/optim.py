"""Gradient-based training loops: reconstruction retraining and stylization.

Both stages drive the reference renderer's adjoint with a bias-corrected
adaptive-moment update (per-parameter-group learning rates).  After every
step the parameters are projected back to their legal ranges: opacities into
[1e-4, 1-1e-4], scales floored at 1e-6, quaternions renormalized.
Determinism contract: identical seed and configuration produce bit-identical
loss histories.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .alignloss import LossWeights, StylizationState, total_stylization_loss
from .colormatch import reconstruction_loss
from .errors import NumericalError, ValidationError
from .render import RenderOptions, SceneGrads, render, render_adjoint

PARAM_GROUPS = ("positions", "rotations", "scales", "opacities", "colors")


@dataclass
class LearningRates:
    position: float = 1.6e-4
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 5e-2
    color: float = 2.5e-3

    def for_group(self, group: str) -> float:
        return {
            "positions": self.position, "rotations": self.rotation,
            "scales": self.scale, "opacities": self.opacity, "colors": self.color,
        }[group]


@dataclass
class OptimizerSettings:
    lrs: LearningRates = field(default_factory=LearningRates)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    update_groups: tuple = ("colors", "opacities", "scales")

    def __post_init__(self):
        bad = [g for g in self.update_groups if g not in PARAM_GROUPS]
        if bad:
            raise ValidationError(f"unknown parameter groups {bad}")


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0

    @staticmethod
    def for_scene(scene) -> "OptimState":
        return OptimState(
            m={g: np.zeros_like(getattr(scene, g)) for g in PARAM_GROUPS},
            v={g: np.zeros_like(getattr(scene, g)) for g in PARAM_GROUPS},
        )


@dataclass
class StageReport:
    stage: str
    iterations: int
    loss_history: list
    wall_clock_sec: float
    final_metrics: dict
    warnings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def adam_step(scene, grads: SceneGrads, state: OptimState,
              settings: OptimizerSettings) -> None:
    """One in-place update of the scene parameters listed in update_groups."""
    state.step += 1
    t = state.step
    for group in settings.update_groups:
        g = getattr(grads, group)
        if not np.all(np.isfinite(g)):
            raise NumericalError(
                f"non-finite gradient in parameter group '{group}' at iteration {t}")
        m = state.m[group]
        v = state.v[group]
        m *= settings.beta1
        m += (1 - settings.beta1) * g
        v *= settings.beta2
        v += (1 - settings.beta2) * g ** 2
        m_hat = m / (1 - settings.beta1 ** t)
        v_hat = v / (1 - settings.beta2 ** t)
        param = getattr(scene, group)
        param -= settings.lrs.for_group(group) * m_hat / (np.sqrt(v_hat) + settings.eps)

    if "opacities" in settings.update_groups:
        np.clip(scene.opacities, 1e-4, 1 - 1e-4, out=scene.opacities)
    if "scales" in settings.update_groups:
        np.maximum(scene.scales, 1e-6, out=scene.scales)
    if "colors" in settings.update_groups:
        np.clip(scene.colors, 0.0, 1.0, out=scene.colors)
    if "rotations" in settings.update_groups:
        norms = np.linalg.norm(scene.rotations, axis=1, keepdims=True)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            scene.rotations /= norms


def run_reconstruction(scene, images, cameras, iters: int = 1000,
                       lambda_dssim: float = 0.2,
                       settings: OptimizerSettings | None = None,
                       render_opts: RenderOptions | None = None,
                       seed: int = 0,
                       snapshot_hook=None):
    """Retrain every Gaussian parameter against target images (one random
    view per step).  Densification stays disabled: the Gaussian count is
    fixed for the whole stage."""
    if len(images) != len(cameras):
        raise ValidationError("images and cameras must be parallel lists")
    settings = settings or OptimizerSettings(update_groups=PARAM_GROUPS)
    render_opts = render_opts or RenderOptions()
    rng = np.random.default_rng(seed)
    state = OptimState.for_scene(scene)
    history = []
    t0 = time.perf_counter()

    for it in range(iters):
        vi = int(rng.integers(len(cameras)))
        cam = cameras[vi]
        out = render(scene, cam, opts=render_opts)
        loss, grad = reconstruction_loss(out.color, images[vi], lambda_dssim)
        history.append({"total": float(loss)})
        if not np.isfinite(loss):
            report = StageReport(
                stage="reconstruction", iterations=it + 1, loss_history=history,
                wall_clock_sec=time.perf_counter() - t0,
                final_metrics={"aborted": True})
            err = NumericalError(f"reconstruction loss became non-finite at iteration {it}")
            err.report = report
            raise err
        grads = render_adjoint(scene, cam, grad,
                               np.zeros((cam.height, cam.width)), opts=render_opts)
        adam_step(scene, grads, state, settings)
        if snapshot_hook is not None:
            snapshot_hook(it, scene)

    final_l1 = float(np.mean([
        np.abs(render(scene, cam, opts=render_opts).color - img).mean()
        for img, cam in zip(images, cameras)
    ])) if cameras else 0.0
    report = StageReport(
        stage="reconstruction", iterations=iters, loss_history=history,
        wall_clock_sec=time.perf_counter() - t0,
        final_metrics={"mean_l1": final_l1},
    )
    return scene, report


def run_stylization(scene, cameras, label_grids, content_features,
                    style_features, depth_init, extractor,
                    weights: LossWeights | None = None,
                    settings: OptimizerSettings | None = None,
                    render_opts: RenderOptions | None = None,
                    iters: int = 2000, seed: int = 0, ridge: float | None = None,
                    snapshot_hook=None):
    """Optimize the scene under the full stylization objective.

    Views are visited round-robin in a seeded shuffled order, reshuffled each
    epoch.  ``label_grids``, ``content_features`` and ``depth_init`` are
    per-view lists; ``style_features`` maps group label -> style vectors.
    """
    n_views = len(cameras)
    if not (len(label_grids) == len(content_features) == len(depth_init) == n_views):
        raise ValidationError("per-view inputs must all match the camera count")
    weights = weights or LossWeights()
    settings = settings or OptimizerSettings()
    render_opts = render_opts or RenderOptions()
    rng = np.random.default_rng(seed)
    state = OptimState.for_scene(scene)
    history = []
    skip_counts = {}
    order = rng.permutation(n_views)
    t0 = time.perf_counter()

    for it in range(iters):
        if n_views > 1 and it % n_views == 0 and it > 0:
            order = rng.permutation(n_views)
        vi = int(order[it % n_views])
        st = StylizationState(
            scene=scene, camera=cameras[vi], extractor=extractor,
            label_grid=label_grids[vi], content_features=content_features[vi],
            style_features=style_features, depth_init=depth_init[vi],
            render_opts=render_opts, ridge=ridge,
        )
        try:
            total, comps, grads, skipped = total_stylization_loss(st, weights)
        except NumericalError as err:
            err.report = StageReport(
                stage="stylization", iterations=it, loss_history=history,
                wall_clock_sec=time.perf_counter() - t0,
                final_metrics={"aborted": True}, warnings=skip_counts)
            raise
        for label in skipped:
            key = f"label_{label}_skipped"
            skip_counts[key] = skip_counts.get(key, 0) + 1
        entry = {"total": float(total)}
        entry.update({k: float(v) for k, v in comps.items()})
        history.append(entry)
        adam_step(scene, grads, state, settings)
        if snapshot_hook is not None:
            snapshot_hook(it, scene)

    report = StageReport(
        stage="stylization", iterations=iters, loss_history=history,
        wall_clock_sec=time.perf_counter() - t0,
        final_metrics={
            "final_total": history[-1]["total"] if history else 0.0,
        },
        warnings=skip_counts,
    )
    return scene, report
