import numpy as np
import pytest

from splatstyle.scene import Camera, GaussianScene


def random_scene(rng, n, label_frac=0.0, depth_range=(3.0, 5.0),
                 spread=0.6, opacity_range=(0.25, 0.7)) -> GaussianScene:
    """Random scene in front of an identity camera at the origin.

    Opacities stay moderate so that alpha clamping and the early-stop
    transmittance threshold are never hit; finite-difference oracles need the
    forward map to be smooth around the sample point.
    """
    positions = rng.uniform(-spread, spread, size=(n, 3))
    positions[:, 2] += rng.uniform(*depth_range, size=n)
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    scales = rng.uniform(0.05, 0.2, size=(n, 3))
    opacities = rng.uniform(*opacity_range, size=n)
    colors = rng.uniform(0.1, 0.9, size=(n, 3))
    labels = np.zeros(n, dtype=np.int32)
    if label_frac > 0:
        k = max(1, int(n * label_frac))
        labels[rng.choice(n, size=k, replace=False)] = 1
    return GaussianScene(
        positions=positions, rotations=rotations, scales=scales,
        opacities=opacities, colors=colors, labels=labels,
    )


def simple_camera(width=16, height=16, focal=None, z_offset=0.0) -> Camera:
    focal = focal or width * 1.2
    w2c = np.eye(4)
    w2c[2, 3] = z_offset
    return Camera(
        width=width, height=height, fx=focal, fy=focal,
        cx=width / 2.0, cy=height / 2.0, world_to_camera=w2c,
    )


def orbit_camera(angle, radius=4.0, width=16, height=16, focal=None, target=None) -> Camera:
    """Camera on a horizontal circle looking at ``target``."""
    focal = focal or width * 1.2
    target = np.zeros(3) if target is None else np.asarray(target, dtype=np.float64)
    eye = target + radius * np.array([np.sin(angle), 0.0, -np.cos(angle)])
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up_hint = np.array([0.0, -1.0, 0.0])
    right = np.cross(up_hint, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])  # world -> camera rows
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ eye
    return Camera(
        width=width, height=height, fx=focal, fy=focal,
        cx=width / 2.0, cy=height / 2.0, world_to_camera=w2c,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
