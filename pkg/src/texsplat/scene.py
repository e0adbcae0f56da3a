"""Gaussian-splat scenes, camera poses, and procedural test objects.

A scene is a flat list of anisotropic 3D Gaussians (position, scale,
rotation, RGB color, opacity) plus a background color. Procedural scenes and
camera rings replace captured datasets at desk scale.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np


@dataclass
class GaussianScene:
    """Editable splat object.

    positions (N,3), scales (N,3) positive, rotations (N,4) unit quaternions
    (w,x,y,z), colors (N,3) in [0,1], opacities (N,) in [0,1].
    """

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self):
        if len(self.positions) < 1:
            raise ValueError("scene must contain at least one splat")
        if np.any(self.scales <= 0.0):
            raise ValueError("all scale components must be positive")
        if np.any(self.opacities < 0.0) or np.any(self.opacities > 1.0):
            raise ValueError("opacities must lie in [0,1]")
        qn = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(qn - 1.0) > 1e-6):
            raise ValueError("rotation quaternions must be unit norm (within 1e-6)")

    @property
    def num_splats(self) -> int:
        return len(self.positions)

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            positions=self.positions.copy(),
            scales=self.scales.copy(),
            rotations=self.rotations.copy(),
            colors=self.colors.copy(),
            opacities=self.opacities.copy(),
            background=self.background.copy(),
        )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a unit quaternion (w,x,y,z)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera: world->camera rigid transform plus intrinsics.

    Convention: camera looks down +z, x right, y down (image row direction).
    """

    rotation: np.ndarray      # (3,3) world->camera
    translation: np.ndarray   # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    azimuth: float = 0.0      # degrees, used for view ordering on rings

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            raise ValueError("rotation part must be orthonormal (within 1e-6)")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def cam_to_world(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation

    def project(self, cam_points: np.ndarray) -> np.ndarray:
        """Camera-space points (N,3) -> pixel coordinates (N,2) as (u,v)."""
        z = cam_points[..., 2]
        u = self.fx * cam_points[..., 0] / z + self.cx
        v = self.fy * cam_points[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def unproject(self, u: np.ndarray, v: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Pixel coordinates plus depth (camera z) -> world points."""
        x = (u - self.cx) / self.fx * depth
        y = (v - self.cy) / self.fy * depth
        cam = np.stack([x, y, depth], axis=-1)
        return self.cam_to_world(cam)


def look_at_pose(eye: np.ndarray, target: np.ndarray, width: int, height: int,
                 focal: float, azimuth: float = 0.0) -> CameraPose:
    """Pose looking from eye toward target with world +z as up."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / rn
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return CameraPose(
        rotation=rot,
        translation=-rot @ eye,
        fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
        width=width, height=height, azimuth=azimuth,
    )


def camera_ring(count: int, radius: float, elevation_deg: float, width: int,
                height: int, focal: float, target: np.ndarray | None = None) -> list[CameraPose]:
    """Equally spaced azimuth ring of poses, all looking at the target."""
    if count < 1:
        raise ValueError("ring must contain at least one pose")
    target = np.zeros(3) if target is None else np.asarray(target, dtype=np.float64)
    poses = []
    el = np.deg2rad(elevation_deg)
    for i in range(count):
        az = 360.0 * i / count
        a = np.deg2rad(az)
        eye = target + radius * np.array([np.cos(a) * np.cos(el),
                                          np.sin(a) * np.cos(el),
                                          np.sin(el)])
        poses.append(look_at_pose(eye, target, width, height, focal, azimuth=az))
    return poses


def _random_unit_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


SCENE_SPECS = ("sphere-blob", "box-cluster", "two-lobe")


def synth_scene(spec: str, seed: int, ring_count: int = 8, num_splats: int = 48,
                width: int = 64, height: int = 64) -> tuple[GaussianScene, list[CameraPose]]:
    """Deterministic procedural scene plus a camera ring around it.

    spec names one of the built-in objects; unknown names raise ValueError.
    Same (spec, seed) yields bit-identical scenes.
    """
    if spec not in SCENE_SPECS:
        raise ValueError(f"unknown scene spec {spec!r}; choose one of {SCENE_SPECS}")
    rng = np.random.default_rng(seed)

    if spec == "sphere-blob":
        dirs = rng.normal(size=(num_splats, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = 0.93 + 0.07 * rng.random(num_splats)
        positions = dirs * radii[:, None]
        scales = 0.20 + 0.08 * rng.random((num_splats, 3))
    elif spec == "box-cluster":
        grid = np.stack(np.meshgrid(*([np.linspace(-0.8, 0.8, 3)] * 3),
                                    indexing="ij"), axis=-1).reshape(-1, 3)
        reps = int(np.ceil(num_splats / len(grid)))
        positions = np.tile(grid, (reps, 1))[:num_splats]
        positions = positions + 0.08 * rng.normal(size=positions.shape)
        scales = 0.22 + 0.08 * rng.random((num_splats, 3))
    else:  # two-lobe
        half = num_splats // 2
        lobes = []
        for cx, n in ((-0.75, half), (0.75, num_splats - half)):
            d = rng.normal(size=(n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            lobes.append(np.array([cx, 0.0, 0.0]) + 0.55 * d * (0.85 + 0.15 * rng.random((n, 1))))
        positions = np.concatenate(lobes)
        scales = 0.18 + 0.08 * rng.random((num_splats, 3))

    # Dense near-opaque shell with a smooth low-frequency palette: renders of
    # the unedited object must be view-consistent up to resampling, which an
    # iid per-splat coloring or a translucent cloud would break.
    base = np.array([0.45, 0.47, 0.52])
    field_proj = 0.5 * rng.normal(size=(3, 3))
    colors = np.clip(base + 0.12 * np.tanh(positions @ field_proj), 0.05, 0.95)
    opacities = 0.95 + 0.05 * rng.random(num_splats)
    scene = GaussianScene(
        positions=positions,
        scales=scales,
        rotations=_random_unit_quats(rng, num_splats),
        colors=colors,
        opacities=opacities,
        background=np.array([0.06, 0.06, 0.08]),
    )
    centroid = scene.positions.mean(axis=0)
    poses = camera_ring(ring_count, radius=3.4, elevation_deg=18.0,
                        width=width, height=height, focal=float(width),
                        target=centroid)
    return scene, poses


# ---------------------------------------------------------------------------
# Scene serialization: versioned line-oriented text, bit-exact round trip.

SCENE_FORMAT_VERSION = 1


def scene_to_text(scene: GaussianScene) -> str:
    buf = io.StringIO()
    buf.write(f"texsplat-scene {SCENE_FORMAT_VERSION}\n")
    buf.write("background " + " ".join(repr(float(c)) for c in scene.background) + "\n")
    buf.write(f"splats {scene.num_splats}\n")
    for i in range(scene.num_splats):
        fields = np.concatenate([
            scene.positions[i], scene.scales[i], scene.rotations[i],
            scene.colors[i], [scene.opacities[i]],
        ])
        buf.write(" ".join(repr(float(x)) for x in fields) + "\n")
    return buf.getvalue()


def scene_from_text(text: str) -> GaussianScene:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split()
    if header[0] != "texsplat-scene" or int(header[1]) != SCENE_FORMAT_VERSION:
        raise ValueError(f"unsupported scene header: {lines[0]!r}")
    bg = np.array([float(x) for x in lines[1].split()[1:]])
    n = int(lines[2].split()[1])
    rows = np.array([[float(x) for x in ln.split()] for ln in lines[3:3 + n]])
    if rows.shape != (n, 14):
        raise ValueError("malformed splat records")
    return GaussianScene(
        positions=rows[:, 0:3], scales=rows[:, 3:6], rotations=rows[:, 6:10],
        colors=rows[:, 10:13], opacities=rows[:, 13], background=bg,
    )


def save_scene(path, scene: GaussianScene) -> None:
    with open(path, "w") as f:
        f.write(scene_to_text(scene))


def load_scene(path) -> GaussianScene:
    with open(path) as f:
        return scene_from_text(f.read())
