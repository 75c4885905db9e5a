"""Synthetic box scenes, an exact ray-cast RGB-D oracle, trajectories and dataset IO.

Dataset directories follow the TUM RGB-D layout (``rgb.txt``, ``depth.txt``,
``groundtruth.txt``) with PPM/PGM images, plus ``velocities.txt`` for the
body-frame velocity stream and ``dataset.json`` for camera and noise metadata.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Pose
from .motion import IMU_RATE_HZ, NoiseModel, VelocityMeasurement, read_measurements, \
    simulate_velocities, write_measurements
from .render import Frame, Intrinsics, pixel_grid, pixel_rays, read_pgm16, read_ppm, \
    write_pgm16, write_ppm

# -- colour functions ---------------------------------------------------------------------


@dataclass(frozen=True)
class Solid:
    colour: tuple

    def __call__(self, pts, axis):
        return np.broadcast_to(np.asarray(self.colour, float), (len(pts), 3)).copy()


@dataclass(frozen=True)
class Checker:
    """Checkerboard over the two in-face coordinates of the hit point."""

    c1: tuple
    c2: tuple
    size: float = 0.5

    def __call__(self, pts, axis):
        other = [a for a in range(3) if a != axis]
        k = np.floor(pts[:, other[0]] / self.size) + np.floor(pts[:, other[1]] / self.size)
        odd = (k.astype(np.int64) % 2 == 1)[:, None]
        return np.where(odd, np.asarray(self.c2, float), np.asarray(self.c1, float))


@dataclass(frozen=True)
class CheckerEnv:
    """Soft checker on (polar, azimuth); integer frequencies keep it continuous at the seam."""

    c1: tuple = (0.85, 0.75, 0.35)
    c2: tuple = (0.15, 0.3, 0.6)
    n_theta: int = 3
    n_phi: int = 4
    sharpness: float = 3.0

    def __call__(self, dirs):
        dirs = np.atleast_2d(dirs)
        theta = np.arccos(np.clip(dirs[:, 2], -1, 1))
        phi = np.arctan2(dirs[:, 1], dirs[:, 0])
        s = np.tanh(self.sharpness * np.sin(self.n_theta * theta) * np.sin(self.n_phi * phi))
        a = (0.5 * (1 + s))[:, None]
        return a * np.asarray(self.c1, float) + (1 - a) * np.asarray(self.c2, float)


# -- scene -------------------------------------------------------------------------------


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    colour: Callable = Solid((0.5, 0.5, 0.5))

    def __post_init__(self):
        self.lo = np.asarray(self.lo, float)
        self.hi = np.asarray(self.hi, float)
        if not np.all(self.hi > self.lo):
            raise ValueError("box needs lo < hi on every axis")


@dataclass
class SyntheticScene:
    boxes: list
    room: Optional[Box] = None
    # per-face colours of the room interior ordered (-x, +x, -y, +y, -z, +z); None leaves it open
    room_faces: Optional[Sequence] = None
    env_map: Callable = field(default_factory=CheckerEnv)

    def __post_init__(self):
        if self.room is not None:
            for b in self.boxes:
                if np.any(b.lo < self.room.lo) or np.any(b.hi > self.room.hi):
                    raise ValueError("boxes must lie inside the room")
            if self.room_faces is None:
                self.room_faces = [self.room.colour] * 6


def _slabs(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - o) / d
        t1 = (hi - o) / d
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t0), np.inf, np.maximum(t0, t1))
    return tmin, tmax


def cast(scene: SyntheticScene, o, d):
    """First-hit distance (inf on escape) and colour for each ray."""
    n = len(d)
    best = np.full(n, np.inf)
    colour = scene.env_map(d)
    for box in scene.boxes:
        tmin, tmax = _slabs(o, d, box.lo, box.hi)
        t_in, t_out = tmin.max(1), tmax.min(1)
        hit = (t_in <= t_out) & (t_in > 0) & (t_in < best)
        if hit.any():
            best[hit] = t_in[hit]
            axis = tmin.argmax(1)
            for a in range(3):
                m = hit & (axis == a)
                if m.any():
                    colour[m] = box.colour(o[m] + t_in[m, None] * d[m], a)
    if scene.room is not None:
        _, tmax = _slabs(o, d, scene.room.lo, scene.room.hi)
        t_out = tmax.min(1)
        axis = tmax.argmin(1)
        side = (d[np.arange(n), axis] > 0).astype(int)
        hit = (t_out > 0) & (t_out < best)
        for a in range(3):
            for s in range(2):
                fn = scene.room_faces[2 * a + s]
                m = hit & (axis == a) & (side == s)
                if fn is None or not m.any():
                    continue
                best[m] = t_out[m]
                colour[m] = fn(o[m] + t_out[m, None] * d[m], a)
    return best, colour


@dataclass(frozen=True)
class DepthNoise:
    """sigma(d) = a + b d^2 (m)."""

    a: float = 0.005
    b: float = 0.01

    def sigma(self, d):
        return self.a + self.b * np.asarray(d, float) ** 2


def oracle_render(scene: SyntheticScene, pose: Pose, intr: Intrinsics, t: float = 0.0,
                  depth_noise: Optional[DepthNoise] = None, rng=None) -> Frame:
    o, d = pixel_rays(intr, pixel_grid(intr), pose)
    dist, colour = cast(scene, o, d)
    depth = np.where(np.isfinite(dist), dist, 0.0)
    if depth_noise is not None:
        rng = np.random.default_rng() if rng is None else rng
        z = rng.standard_normal(len(depth))
        valid = depth > 0
        depth = np.where(valid, depth + depth_noise.sigma(depth) * z, 0.0)
        depth[depth <= 0] = 0.0
    h, w = intr.height, intr.width
    return Frame(t, np.clip(colour, 0, 1).reshape(h, w, 3), depth.reshape(h, w), intr)


# -- trajectories ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "orbit"
    amplitude: float = 1.2
    rate: float = 0.4          # rad/s
    duration: float = 10.0     # s
    frame_rate: float = 20.0   # Hz
    look_at: tuple = (0.0, 0.0, 0.0)
    center: tuple = (0.0, 0.0, 0.0)
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("orbit", "lissajous", "static"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if not (self.rate > 0 and self.duration > 0 and self.frame_rate > 0):
            raise ValueError("rate, duration and frame rate must be positive")


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera rotation: z toward the target, y down (opposite ``up``)."""
    z = np.asarray(target, float) - np.asarray(position, float)
    nz = np.linalg.norm(z)
    if nz < 1e-9:
        raise ValueError("camera position coincides with the look-at target")
    z /= nz
    up = np.asarray(up, float)
    y = -(up - (up @ z) * z)
    ny = np.linalg.norm(y)
    if ny < 1e-9:
        raise ValueError("viewing direction is parallel to the up vector")
    y /= ny
    return np.stack([np.cross(y, z), y, z], axis=1)


def _position(spec: TrajectorySpec, t):
    c = np.asarray(spec.center, float)
    a, w, p = spec.amplitude, spec.rate, spec.phase
    if spec.kind == "orbit":
        return c + a * np.array([math.cos(p + w * t), math.sin(p + w * t), 0.0])
    if spec.kind == "lissajous":
        return c + a * np.array([math.sin(p + w * t), 0.5 * math.sin(2 * w * t),
                                 0.25 * math.sin(3 * w * t)])
    return c + np.array([a, 0.0, 0.0])


def make_trajectory(spec: TrajectorySpec, rate: Optional[float] = None):
    """Poses at ``rate`` Hz (default: the frame rate), times k / rate."""
    rate = spec.frame_rate if rate is None else rate
    n = int(round(spec.duration * rate))
    out = []
    for k in range(n + 1):
        t = k / rate
        p = _position(spec, t)
        out.append((t, Pose(look_at(p, spec.look_at), p)))
    return out


# -- datasets ---------------------------------------------------------------------------------


@dataclass
class Dataset:
    frames: list
    groundtruth: list            # (t, Pose) per frame
    measurements: list           # VelocityMeasurement
    meta: dict = field(default_factory=dict)

    @property
    def imu_enabled(self) -> bool:
        return len(self.measurements) > 0

    @property
    def intr(self) -> Intrinsics:
        return self.frames[0].intr

    @property
    def initial_pose(self) -> Pose:
        return self.groundtruth[0][1]

    @property
    def fg_bounds(self):
        b = self.meta.get("fg_bounds")
        return None if b is None else (np.asarray(b[0], float), np.asarray(b[1], float))

    @property
    def depth_noise(self) -> DepthNoise:
        a, b = self.meta.get("depth_noise", [DepthNoise.a, DepthNoise.b])
        return DepthNoise(a, b)


def _fmt(x):
    return f"{x:.17g}"


def pose_to_tum(t, pose: Pose, digits=17) -> str:
    q = Rotation.from_matrix(pose.C).as_quat()  # x, y, z, w
    return " ".join(f"{v:.{digits}g}" for v in (t, *pose.r, *q))


def write_trajectory(path, traj, digits=9) -> None:
    lines = ["# t tx ty tz qx qy qz qw"] + [pose_to_tum(t, p, digits) for t, p in traj]
    Path(path).write_text("\n".join(lines) + "\n")


def _data_lines(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"{path}: missing")
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        s = line.strip()
        if s and not s.startswith("#"):
            yield lineno, s.split()


def read_trajectory(path):
    path = Path(path)
    out = []
    for lineno, parts in _data_lines(path):
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(x) for x in parts]
            C = Rotation.from_quat(vals[4:]).as_matrix()
        except ValueError as err:
            raise ValueError(f"{path}:{lineno}: {err}") from None
        out.append((vals[0], Pose(C, np.array(vals[1:4]))))
    return out


def _read_index(path: Path):
    out = []
    for lineno, parts in _data_lines(path):
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'timestamp filename'")
        try:
            out.append((float(parts[0]), parts[1], lineno))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from None
    return out


def write_dataset(root, frames: Sequence[Frame], gt: Sequence, measurements: Sequence,
                  meta: Optional[dict] = None) -> None:
    if len(frames) != len(gt):
        raise ValueError("need one ground-truth pose per frame")
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    rgb_lines, depth_lines = ["# timestamp filename"], ["# timestamp filename"]
    for k, f in enumerate(frames):
        name = f"{k:06d}"
        write_ppm(root / "rgb" / f"{name}.ppm", f.rgb)
        write_pgm16(root / "depth" / f"{name}.pgm", f.depth)
        rgb_lines.append(f"{_fmt(f.t)} rgb/{name}.ppm")
        depth_lines.append(f"{_fmt(f.t)} depth/{name}.pgm")
    (root / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (root / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    write_trajectory(root / "groundtruth.txt", gt, digits=17)
    write_measurements(root / "velocities.txt", measurements)
    meta = dict(meta or {})
    meta["intrinsics"] = frames[0].intr.to_dict() if frames else meta.get("intrinsics")
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_dataset(root) -> Dataset:
    root = Path(root)
    meta_path = root / "dataset.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path}: missing")
    try:
        meta = json.loads(meta_path.read_text())
        intr = Intrinsics(**meta["intrinsics"])
    except (json.JSONDecodeError, KeyError, TypeError) as err:
        raise ValueError(f"{meta_path}: {err}") from None
    rgb_idx = _read_index(root / "rgb.txt")
    depth_idx = _read_index(root / "depth.txt")
    if len(rgb_idx) != len(depth_idx):
        raise ValueError(f"{root}: rgb.txt has {len(rgb_idx)} entries, depth.txt {len(depth_idx)}")
    frames = []
    for (t, rgb_name, ln), (td, d_name, _) in zip(rgb_idx, depth_idx):
        if t != td:
            raise ValueError(f"{root / 'depth.txt'}:{ln}: timestamp {td} != rgb timestamp {t}")
        try:
            rgb = read_ppm(root / rgb_name)
            depth = read_pgm16(root / d_name)
        except (OSError, ValueError) as err:
            raise ValueError(f"{root / 'rgb.txt'}:{ln}: {err}") from None
        frames.append(Frame(t, rgb, depth, intr))
    gt = read_trajectory(root / "groundtruth.txt")
    if len(gt) != len(frames):
        raise ValueError(f"{root / 'groundtruth.txt'}: {len(gt)} poses for {len(frames)} frames")
    noise = None
    if "sigma_v" in meta:
        noise = NoiseModel(np.asarray(meta["sigma_v"]), np.asarray(meta["sigma_u"]))
    vel = root / "velocities.txt"
    meas = read_measurements(vel, noise) if vel.exists() else []
    return Dataset(frames, gt, meas, meta)


# -- named scenarios ----------------------------------------------------------------------------

SCENARIOS = ("room-orbit", "bg-truncated")

_WALLS = [Checker((0.8, 0.3, 0.25), (0.95, 0.8, 0.6), 0.8),
          Checker((0.25, 0.55, 0.8), (0.7, 0.85, 0.95), 0.8),
          Checker((0.3, 0.7, 0.35), (0.85, 0.95, 0.7), 0.8),
          Checker((0.6, 0.35, 0.7), (0.9, 0.8, 0.95), 0.8),
          Checker((0.35, 0.3, 0.25), (0.75, 0.7, 0.6), 0.5),
          Checker((0.9, 0.9, 0.9), (0.6, 0.6, 0.65), 1.0)]


def _desk_boxes():
    return [Box([-0.45, -0.35, -1.0], [-0.05, 0.05, -0.4], Checker((0.9, 0.2, 0.2), (0.95, 0.9, 0.3), 0.2)),
            Box([0.1, -0.5, -1.0], [0.5, -0.1, -0.1], Solid((0.2, 0.4, 0.9))),
            Box([-0.2, 0.2, -1.0], [0.3, 0.55, -0.6], Checker((0.1, 0.6, 0.3), (0.8, 0.95, 0.8), 0.25))]


@dataclass
class Scenario:
    name: str
    scene: SyntheticScene
    trajectory: TrajectorySpec
    intr: Intrinsics
    fg_bounds: tuple
    noise: NoiseModel
    depth_noise: DepthNoise
    imu_rate: float = IMU_RATE_HZ


def build_scenario(name: str, seed: int = 0, n_frames: Optional[int] = None,
                   sigma_v: float = 0.2, sigma_u: float = 0.01) -> Scenario:
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    rng = np.random.default_rng([seed, 1])
    phase = float(rng.uniform(0, 2 * math.pi))
    intr = Intrinsics(50.0, 50.0, 32.0, 24.0, 64, 48)
    frame_rate = 20.0
    if name == "room-orbit":
        room = Box([-2.0, -2.0, -1.0], [2.0, 2.0, 1.5])
        scene = SyntheticScene(_desk_boxes(), room, list(_WALLS), CheckerEnv())
        n = 200 if n_frames is None else n_frames
        traj = TrajectorySpec("orbit", 1.2, 0.4, (n - 1) / frame_rate, frame_rate,
                              look_at=(0.0, 0.0, -0.6), center=(0.0, 0.0, 0.0), phase=phase)
        # margin beyond the walls keeps noisy far-wall depths inside the map box
        fg = ([-2.5, -2.5, -1.5], [2.5, 2.5, 2.0])
    else:
        # large room with an open ceiling; the map box covers only the centre
        room = Box([-3.0, -3.0, -1.0], [3.0, 3.0, 1.2])
        faces = list(_WALLS)
        faces[5] = None
        scene = SyntheticScene(_desk_boxes(), room, faces, CheckerEnv())
        n = 100 if n_frames is None else n_frames
        traj = TrajectorySpec("orbit", 1.6, 0.4, (n - 1) / frame_rate, frame_rate,
                              look_at=(0.0, 0.0, 0.1), center=(0.0, 0.0, 0.0), phase=phase)
        fg = ([-1.0, -1.0, -1.05], [1.0, 1.0, 0.95])
    noise = NoiseModel.isotropic(sigma_v, sigma_u, seed=int(rng.integers(2**31)))
    return Scenario(name, scene, traj, intr, (np.array(fg[0]), np.array(fg[1])), noise,
                    DepthNoise())


def generate(sc: Scenario, seed: int = 0, depth_noise: bool = True) -> Dataset:
    """Render frames, ground truth and noisy velocities for a scenario.

    Poses are sampled on the velocity clock; frames take every k-th pose so frame
    timestamps coincide exactly with measurement boundaries.
    """
    stride = int(round(sc.imu_rate / sc.trajectory.frame_rate))
    fine = make_trajectory(sc.trajectory, rate=sc.imu_rate)
    meas = simulate_velocities(fine, sc.noise)
    rng = np.random.default_rng([seed, 2])
    gt = fine[::stride]
    frames = [oracle_render(sc.scene, p, sc.intr, t, sc.depth_noise if depth_noise else None, rng)
              for t, p in gt]
    meta = dict(scenario=sc.name, seed=seed, imu_rate=sc.imu_rate,
                frame_rate=sc.trajectory.frame_rate,
                sigma_v=sc.noise.sigma_v.tolist(), sigma_u=sc.noise.sigma_u.tolist(),
                depth_noise=[sc.depth_noise.a, sc.depth_noise.b] if depth_noise else [0.0, 0.0],
                fg_bounds=[sc.fg_bounds[0].tolist(), sc.fg_bounds[1].tolist()],
                room_bounds=[sc.scene.room.lo.tolist(), sc.scene.room.hi.tolist()])
    return Dataset(frames, gt, meas, meta)
