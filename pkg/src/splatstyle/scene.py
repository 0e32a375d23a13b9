"""Gaussian-splat scene data model and I/O.

A scene is a struct-of-arrays collection of anisotropic 3D Gaussians
(position, unit quaternion, per-axis scale, opacity, degree-0 RGB color,
optional semantic label) plus the camera list and a frozen snapshot of
(scale, opacity, color) captured at load time.  Scenes are read/written
either as binary little-endian PLY files in the standard splat layout
(log-scales, logit opacities, f_dc color coefficients) or as a plain JSON
format convenient for hand-written fixtures.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import SceneLoadError, ValidationError

# Degree-0 spherical-harmonic basis constant: color = 0.5 + SH_C0 * f_dc.
SH_C0 = 0.28209479177387814

_QUAT_TOL = 1e-6


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for quaternions ``q`` of shape (..., 4), order (w, x, y, z).

    Quaternions are normalized internally, so inputs need not be unit length.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - z * w)
    rot[..., 0, 2] = 2 * (x * z + y * w)
    rot[..., 1, 0] = 2 * (x * y + z * w)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - x * w)
    rot[..., 2, 0] = 2 * (x * z - y * w)
    rot[..., 2, 1] = 2 * (y * z + x * w)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


@dataclass
class Gaussian:
    """A single splat in natural parameter space."""

    position: np.ndarray  # (3,)
    rotation: np.ndarray  # (4,) unit quaternion, (w, x, y, z)
    scale: np.ndarray     # (3,) positive axis lengths
    opacity: float        # in [0, 1]
    color: np.ndarray     # (3,) RGB in [0, 1]
    label: int = 0        # 0 = unlabeled

    def validate(self) -> None:
        if abs(np.linalg.norm(self.rotation) - 1.0) > _QUAT_TOL:
            raise ValidationError("gaussian rotation is not a unit quaternion")
        if not np.all(np.asarray(self.scale) > 0):
            raise ValidationError("gaussian scale components must be positive")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValidationError("gaussian opacity must lie in [0, 1]")


@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-camera transform.

    ``world_to_camera`` is a row-major 4x4 matrix; points map as
    p_cam = R @ p_world + t with R = M[:3, :3], t = M[:3, 3].  The camera
    looks along +z; pixel (row, col) has center (col + 0.5, row + 0.5).
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # (4, 4)

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.world_to_camera.shape != (4, 4):
            raise ValidationError("world_to_camera must be a 4x4 matrix")
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        rot = self.world_to_camera[:3, :3]
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-6:
            raise ValidationError("world_to_camera rotation part is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]


@dataclass
class SceneSnapshot:
    """Frozen copy of (scale, opacity, color) used by drift regularizers."""

    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    @staticmethod
    def capture(scene: "GaussianScene") -> "SceneSnapshot":
        snap = SceneSnapshot(
            scales=scene.scales.copy(),
            opacities=scene.opacities.copy(),
            colors=scene.colors.copy(),
        )
        for arr in (snap.scales, snap.opacities, snap.colors):
            arr.setflags(write=False)
        return snap


@dataclass
class GaussianScene:
    """Ordered set of Gaussians stored as parallel arrays."""

    positions: np.ndarray   # (N, 3) float64
    rotations: np.ndarray   # (N, 4) unit quaternions (w, x, y, z)
    scales: np.ndarray      # (N, 3) positive
    opacities: np.ndarray   # (N,) in [0, 1]
    colors: np.ndarray      # (N, 3) in [0, 1]
    labels: np.ndarray      # (N,) int32, 0 = unlabeled
    cameras: list = field(default_factory=list)
    initial_snapshot: SceneSnapshot | None = None

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.rotations = np.atleast_2d(np.asarray(self.rotations, dtype=np.float64))
        self.scales = np.atleast_2d(np.asarray(self.scales, dtype=np.float64))
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(-1)
        self.colors = np.atleast_2d(np.asarray(self.colors, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int32).reshape(-1)
        if self.initial_snapshot is None:
            self.initial_snapshot = SceneSnapshot.capture(self)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i].copy(),
            rotation=self.rotations[i].copy(),
            scale=self.scales[i].copy(),
            opacity=float(self.opacities[i]),
            color=self.colors[i].copy(),
            label=int(self.labels[i]),
        )

    def validate(self) -> None:
        n = len(self)
        for name, arr, shape in (
            ("positions", self.positions, (n, 3)),
            ("rotations", self.rotations, (n, 4)),
            ("scales", self.scales, (n, 3)),
            ("opacities", self.opacities, (n,)),
            ("colors", self.colors, (n, 3)),
            ("labels", self.labels, (n,)),
        ):
            if arr.shape != shape:
                raise ValidationError(f"scene field {name} has shape {arr.shape}, expected {shape}")
            if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
                raise ValidationError(f"scene field {name} contains non-finite values")
        if n and np.max(np.abs(np.linalg.norm(self.rotations, axis=1) - 1.0)) > _QUAT_TOL:
            raise ValidationError("scene rotations must be unit quaternions")
        if n and not np.all(self.scales > 0):
            raise ValidationError("scene scales must be positive")
        if n and not (np.all(self.opacities >= 0) and np.all(self.opacities <= 1)):
            raise ValidationError("scene opacities must lie in [0, 1]")
        if self.initial_snapshot is not None and len(self.initial_snapshot.opacities) != n:
            raise ValidationError("initial_snapshot length does not match scene")

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            scales=self.scales.copy(),
            opacities=self.opacities.copy(),
            colors=self.colors.copy(),
            labels=self.labels.copy(),
            cameras=list(self.cameras),
            initial_snapshot=self.initial_snapshot,
        )

    def recapture_snapshot(self) -> None:
        """Re-freeze (scale, opacity, color); used after destructive updates."""
        self.initial_snapshot = SceneSnapshot.capture(self)

    def bbox_diagonal(self) -> float:
        if len(self) == 0:
            return 0.0
        span = self.positions.max(axis=0) - self.positions.min(axis=0)
        return float(np.linalg.norm(span))


def covariance_of(g: Gaussian) -> np.ndarray:
    """3x3 world-space covariance R diag(s^2) R^T of a single Gaussian."""
    rot = quat_to_rotmat(g.rotation)
    return rot @ np.diag(np.asarray(g.scale, dtype=np.float64) ** 2) @ rot.T


def covariances(scene: GaussianScene) -> np.ndarray:
    """(N, 3, 3) stack of world-space covariances for every Gaussian."""
    rot = quat_to_rotmat(scene.rotations)
    s2 = scene.scales ** 2
    return rot @ (s2[:, :, None] * rot.transpose(0, 2, 1))


def filter_outliers(
    scene: GaussianScene,
    opacity_min: float = 0.005,
    scale_max: float | None = None,
    neighbor_radius: float | None = None,
    min_neighbors: int = 3,
) -> GaussianScene:
    """Drop floaters: low opacity, oversized scale, or too few nearby centers.

    ``scale_max`` defaults to 10% of the bounding-box diagonal and
    ``neighbor_radius`` to 2% of it.  The neighbor criterion is iterated to a
    fixed point so that filtering is idempotent.  Raises NumericalError when
    nothing survives.
    """
    from .errors import NumericalError

    if opacity_min < 0 or (scale_max is not None and scale_max < 0):
        raise ValidationError("filter thresholds must be nonnegative")
    if neighbor_radius is not None and neighbor_radius < 0:
        raise ValidationError("neighbor_radius must be nonnegative")

    diag = scene.bbox_diagonal()
    if scale_max is None:
        scale_max = 0.1 * diag if diag > 0 else np.inf
    if neighbor_radius is None:
        neighbor_radius = 0.02 * diag

    keep = (scene.opacities >= opacity_min) & np.all(scene.scales <= scale_max, axis=1)
    if min_neighbors > 0 and neighbor_radius > 0:
        while True:
            idx = np.flatnonzero(keep)
            if idx.size == 0:
                break
            tree = cKDTree(scene.positions[idx])
            counts = np.array(
                [len(tree.query_ball_point(scene.positions[i], neighbor_radius)) - 1 for i in idx]
            )
            drop = counts < min_neighbors
            if not drop.any():
                break
            keep[idx[drop]] = False

    if not keep.any():
        raise NumericalError("outlier filtering removed every Gaussian (degenerate scene)")

    filtered = GaussianScene(
        positions=scene.positions[keep].copy(),
        rotations=scene.rotations[keep].copy(),
        scales=scene.scales[keep].copy(),
        opacities=scene.opacities[keep].copy(),
        colors=scene.colors[keep].copy(),
        labels=scene.labels[keep].copy(),
        cameras=list(scene.cameras),
    )
    return filtered


# ---------------------------------------------------------------------------
# PLY I/O (binary little-endian, standard splat vertex layout)
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1),
    "char": ("<i1", 1), "int8": ("<i1", 1),
    "ushort": ("<u2", 2), "uint16": ("<u2", 2),
    "short": ("<i2", 2), "int16": ("<i2", 2),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
    "int": ("<i4", 4), "int32": ("<i4", 4),
}

_REQUIRED_PROPS = (
    "x", "y", "z",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity",
    "f_dc_0", "f_dc_1", "f_dc_2",
)


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _read_ply_header(fh):
    magic = fh.readline().strip()
    if magic != b"ply":
        raise SceneLoadError("not a PLY file (missing 'ply' magic)")
    fmt = None
    vertex_count = None
    props = []          # (name, dtype str) in declaration order
    in_vertex = False
    while True:
        raw = fh.readline()
        if not raw:
            raise SceneLoadError("malformed PLY header: missing end_header")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith("comment"):
            continue
        if line == "end_header":
            break
        parts = line.split()
        if parts[0] == "format":
            if parts[1] != "binary_little_endian":
                raise SceneLoadError(f"unsupported PLY format '{parts[1]}' (binary_little_endian required)")
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                try:
                    vertex_count = int(parts[2])
                except (IndexError, ValueError):
                    raise SceneLoadError("malformed PLY header: bad vertex element count")
            elif vertex_count is not None:
                # properties after a non-vertex element no longer belong to vertices
                in_vertex = False
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise SceneLoadError("list properties are not supported in the vertex element")
            if len(parts) != 3:
                raise SceneLoadError(f"malformed PLY property line: '{line}'")
            tname, pname = parts[1], parts[2]
            if tname not in _PLY_TYPES:
                raise SceneLoadError(f"unsupported PLY property type '{tname}' for field {pname}")
            props.append((pname, _PLY_TYPES[tname][0]))
    if fmt is None:
        raise SceneLoadError("malformed PLY header: missing format line")
    if vertex_count is None:
        raise SceneLoadError("malformed PLY header: missing vertex element")
    return vertex_count, props


def _load_ply(path: Path) -> GaussianScene:
    with open(path, "rb") as fh:
        count, props = _read_ply_header(fh)
        names = [p[0] for p in props]
        for req in _REQUIRED_PROPS:
            if req not in names:
                raise SceneLoadError(f"missing PLY property '{req}'")
        if any(name.startswith("f_rest_") for name in names):
            warnings.warn(
                "input PLY carries higher-degree SH coefficients (f_rest_*); "
                "only the degree-0 color is used",
                stacklevel=3,
            )
        dtype = np.dtype([(n, t) for n, t in props])
        payload = fh.read(dtype.itemsize * count)
        if len(payload) != dtype.itemsize * count:
            raise SceneLoadError("PLY payload truncated (fewer vertices than declared)")
        data = np.frombuffer(payload, dtype=dtype, count=count)

    def col(name):
        arr = np.asarray(data[name], dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise SceneLoadError(f"non-finite value in PLY field '{name}'")
        return arr

    positions = np.stack([col("x"), col("y"), col("z")], axis=1)
    log_scales = np.stack([col(f"scale_{i}") for i in range(3)], axis=1)
    quats = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    norms = np.linalg.norm(quats, axis=1)
    if count and np.any(norms == 0):
        raise SceneLoadError("non-finite value in PLY field 'rot_0' (zero quaternion)")
    quats = quats / norms[:, None] if count else quats.reshape(0, 4)
    opacities = _sigmoid(col("opacity"))
    f_dc = np.stack([col(f"f_dc_{i}") for i in range(3)], axis=1)
    colors = 0.5 + SH_C0 * f_dc

    labels = np.zeros(count, dtype=np.int32)
    sidecar = _label_sidecar_path(path)
    if sidecar.exists():
        stored = json.loads(sidecar.read_text())["labels"]
        if len(stored) != count:
            raise SceneLoadError("label sidecar length does not match vertex count")
        labels = np.asarray(stored, dtype=np.int32)

    return GaussianScene(
        positions=positions,
        rotations=quats,
        scales=np.exp(log_scales),
        opacities=opacities,
        colors=colors,
        labels=labels,
    )


def _save_ply(scene: GaussianScene, path: Path) -> None:
    n = len(scene)
    fields = [
        ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
        ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
        ("f_dc_0", "<f4"), ("f_dc_1", "<f4"), ("f_dc_2", "<f4"),
        ("opacity", "<f4"),
        ("scale_0", "<f4"), ("scale_1", "<f4"), ("scale_2", "<f4"),
        ("rot_0", "<f4"), ("rot_1", "<f4"), ("rot_2", "<f4"), ("rot_3", "<f4"),
    ]
    data = np.zeros(n, dtype=np.dtype(fields))
    data["x"], data["y"], data["z"] = scene.positions.T
    f_dc = (scene.colors - 0.5) / SH_C0
    data["f_dc_0"], data["f_dc_1"], data["f_dc_2"] = f_dc.T
    # logit is undefined at exactly 0/1; nudge inside the open interval
    data["opacity"] = _logit(np.clip(scene.opacities, 1e-7, 1 - 1e-7))
    log_s = np.log(scene.scales)
    data["scale_0"], data["scale_1"], data["scale_2"] = log_s.T
    data["rot_0"], data["rot_1"], data["rot_2"], data["rot_3"] = scene.rotations.T

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name, _ in fields]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())

    sidecar = _label_sidecar_path(path)
    if np.any(scene.labels != 0):
        sidecar.write_text(json.dumps({"labels": scene.labels.tolist()}))
    elif sidecar.exists():
        sidecar.unlink()


def _label_sidecar_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".labels.json")


# ---------------------------------------------------------------------------
# JSON scene format (natural parameter space, for hand-written fixtures)
# ---------------------------------------------------------------------------

def _load_json_scene(path: Path) -> GaussianScene:
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneLoadError(f"malformed JSON scene: {exc}") from exc
    try:
        entries = doc["gaussians"]
    except (TypeError, KeyError):
        raise SceneLoadError("JSON scene missing 'gaussians' field")
    n = len(entries)
    positions = np.zeros((n, 3))
    rotations = np.zeros((n, 4))
    scales = np.zeros((n, 3))
    opacities = np.zeros(n)
    colors = np.zeros((n, 3))
    labels = np.zeros(n, dtype=np.int32)
    for i, g in enumerate(entries):
        for key, target in (("position", positions), ("rotation", rotations),
                            ("scale", scales), ("color", colors)):
            try:
                target[i] = np.asarray(g[key], dtype=np.float64)
            except KeyError:
                raise SceneLoadError(f"gaussian {i} missing field '{key}'")
            except ValueError:
                raise SceneLoadError(f"gaussian {i} field '{key}' has wrong arity")
        try:
            opacities[i] = float(g["opacity"])
        except KeyError:
            raise SceneLoadError(f"gaussian {i} missing field 'opacity'")
        labels[i] = int(g.get("label", 0))
    for name, arr in (("position", positions), ("rotation", rotations),
                      ("scale", scales), ("opacity", opacities), ("color", colors)):
        if not np.all(np.isfinite(arr)):
            raise SceneLoadError(f"non-finite value in JSON scene field '{name}'")
    norms = np.linalg.norm(rotations, axis=1)
    if n and np.any(norms == 0):
        raise SceneLoadError("non-finite value in JSON scene field 'rotation' (zero quaternion)")
    if n:
        rotations /= norms[:, None]
    return GaussianScene(
        positions=positions, rotations=rotations, scales=scales,
        opacities=opacities, colors=colors, labels=labels,
    )


def _save_json_scene(scene: GaussianScene, path: Path) -> None:
    entries = []
    for i in range(len(scene)):
        entries.append({
            "position": scene.positions[i].tolist(),
            "rotation": scene.rotations[i].tolist(),
            "scale": scene.scales[i].tolist(),
            "opacity": float(scene.opacities[i]),
            "color": scene.colors[i].tolist(),
            "label": int(scene.labels[i]),
        })
    path.write_text(json.dumps({"gaussians": entries}, indent=1))


def load_scene(path) -> GaussianScene:
    """Load a scene from .ply (standard splat layout) or .json.

    PLY stored values are mapped to natural space: scale = exp(stored),
    opacity = sigmoid(stored), color = 0.5 + SH_C0 * f_dc.  A label sidecar
    (<name>.ply.labels.json) is picked up automatically when present.
    """
    path = Path(path)
    if not path.exists():
        raise SceneLoadError(f"scene file not found: {path}")
    if path.suffix.lower() == ".json":
        scene = _load_json_scene(path)
    else:
        scene = _load_ply(path)
    scene.validate()
    return scene


def save_scene(scene: GaussianScene, path) -> None:
    """Write a scene to .ply (with label sidecar) or .json, loadable by load_scene."""
    path = Path(path)
    scene.validate()
    if path.suffix.lower() == ".json":
        _save_json_scene(scene, path)
    else:
        _save_ply(scene, path)


# ---------------------------------------------------------------------------
# Camera I/O
# ---------------------------------------------------------------------------

def load_cameras(path) -> list:
    """Read the camera list from a JSON file.

    Expected document: {"cameras": [{"width", "height", "fx", "fy", "cx",
    "cy", "world_to_camera": 4x4 row-major}, ...]}.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"camera file not found: {path}")
    try:
        doc = json.loads(path.read_text())
        entries = doc["cameras"]
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise ValidationError(f"malformed camera file {path}: {exc}") from exc
    cams = []
    for i, e in enumerate(entries):
        try:
            cams.append(Camera(
                width=int(e["width"]), height=int(e["height"]),
                fx=float(e["fx"]), fy=float(e["fy"]),
                cx=float(e["cx"]), cy=float(e["cy"]),
                world_to_camera=np.asarray(e["world_to_camera"], dtype=np.float64),
            ))
        except KeyError as exc:
            raise ValidationError(f"camera {i} missing field {exc}") from exc
    return cams


def save_cameras(cameras, path) -> None:
    entries = [{
        "width": c.width, "height": c.height,
        "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
        "world_to_camera": c.world_to_camera.tolist(),
    } for c in cameras]
    Path(path).write_text(json.dumps({"cameras": entries}, indent=1))
