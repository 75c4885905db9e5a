"""Tracking, keyframe selection, mapping and sequence orchestration."""
from __future__ import annotations

import logging
import os
import queue
import threading
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .field import BackgroundSphere, ForegroundGrid, new_field
from .geometry import Pose
from .losses import (
    LossWeights,
    PixelBatch,
    colour_grad,
    colour_loss,
    connecting_rmi,
    imu_tracking_loss,
    imu_whitened_residual,
    mapping_depth_grad,
    mapping_depth_loss,
    rmi_mapping_loss,
    tracking_depth_loss,
)
from .motion import (
    TIME_TOL,
    Rmi,
    equivalent_measurement,
    integrate,
    measurements_between,
    predict_pose,
    rmi_compose,
)
from .render import (
    FieldGrads,
    Frame,
    SamplingConfig,
    make_samples_batch,
    pixel_grid,
    pixel_rays,
    project,
    render_rays,
    render_rays_backward,
)

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3  # m, lower bound on per-pixel depth sigma
DEFAULT_NOISE_A, DEFAULT_NOISE_B = 0.005, 0.01  # sigma(d) = a + b d^2 when a dataset states none
LEVELS = ("fine", "coarse")

__all__ = ["Frame", "Keyframe", "MapOptimizer", "SlamConfig", "SlamOutput", "track_frame", "select_keyframes",
           "map_update", "run_sequence"]


@dataclass(frozen=True)
class SlamConfig:
    iters_track: int = 10
    iters_map: int = 60
    iters_init: int = 200         # mapping iterations on the first frame
    pixels_track: int = 1024
    pixels_map: int = 2048
    lr_pose: float = 1e-4
    lr_grid: float = 0.2          # colour grid
    lr_density: float = 1.0       # density grids (softplus needs large raw values for opaque cells)
    lr_bg: float = 0.2
    keyframe_every: int = 10
    map_every: int = 5
    overlap_K: int = 5
    weights: LossWeights = field(default_factory=LossWeights)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    mode: str = "sequential"
    seed: int = 0
    optimizer: str = "adam"
    use_imu: bool = True
    use_depth_uncertainty: bool = True
    use_background: bool = True
    rmi_weight_mode: str = "identity"
    res_coarse: int = 16
    res_fine: int = 64
    sphere_h: int = 32
    sphere_w: int = 64
    pose_fd_eps: float = 1e-4
    overlap_samples: int = 256

    def __post_init__(self):
        counts = (self.iters_track, self.pixels_track, self.pixels_map, self.keyframe_every,
                  self.map_every, self.overlap_K, self.overlap_samples)
        if min(counts) < 1 or self.iters_map < 0 or self.iters_init < 0:
            raise ValueError("iteration and pixel counts must be >= 1")
        if min(self.lr_pose, self.lr_grid, self.lr_density, self.lr_bg, self.pose_fd_eps) <= 0:
            raise ValueError("step sizes must be positive")
        if self.mode not in ("sequential", "parallel"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.rmi_weight_mode not in ("identity", "covariance"):
            raise ValueError(f"unknown rmi_weight_mode {self.rmi_weight_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SlamConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "weights" in d:
            d["weights"] = _nested(LossWeights, d["weights"], "weights")
        if "sampling" in d:
            d["sampling"] = _nested(SamplingConfig, d["sampling"], "sampling")
        return cls(**d)


def _nested(cls, d, name):
    if isinstance(d, cls):
        return d
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {name} keys: {', '.join(sorted(unknown))}")
    return cls(**d)


# -- per-frame pixel data ------------------------------------------------------------------


@dataclass
class FrameData:
    """Flattened pixels of one frame plus the depth sigmas used by each loss."""

    frame: Frame
    uv: np.ndarray
    rgb: np.ndarray
    depth: np.ndarray
    sigma_map: np.ndarray
    sigma_track: np.ndarray

    @classmethod
    def build(cls, frame: Frame, noise_a=DEFAULT_NOISE_A, noise_b=DEFAULT_NOISE_B,
              uncertainty: bool = True) -> "FrameData":
        """With ``uncertainty`` off the losses fall back to the unweighted baseline:
        plain metric L1 in mapping (sigma = 1 m) and only the rendered spread in
        tracking (sensor sigma at the floor).
        """
        depth = frame.depth.reshape(-1).astype(float)
        if uncertainty:
            sm = np.maximum(noise_a + noise_b * depth**2, SIGMA_FLOOR)
            st = sm
        else:
            sm = np.ones_like(depth)
            st = np.full_like(depth, SIGMA_FLOOR)
        return cls(frame, pixel_grid(frame.intr), frame.rgb.reshape(-1, 3).astype(float), depth, sm, st)

    @property
    def n(self) -> int:
        return len(self.depth)


@dataclass
class Keyframe:
    frame: Frame
    pose: Pose
    index: int = 0
    rmi_to_next: Optional[Rmi] = None
    data: Optional[FrameData] = None

    def __post_init__(self):
        if self.rmi_to_next is not None and abs(self.rmi_to_next.t_i - self.frame.t) > TIME_TOL:
            raise ValueError("rmi_to_next must start at the keyframe timestamp")


@dataclass
class SlamOutput:
    trajectory: list
    field: ForegroundGrid
    sphere: Optional[BackgroundSphere]
    diagnostics: list
    keyframes: list = field(default_factory=list)


class _Sample:
    """Pixel subset, rays and sample distances frozen for one loss evaluation."""

    def __init__(self, fd: FrameData, idx, pose: Pose, fld: ForegroundGrid, cfg: SlamConfig, rng,
                 track: bool = False):
        self.fd, self.idx = fd, idx
        o, d = pixel_rays(fd.frame.intr, fd.uv[idx], pose)
        depth = fd.depth[idx]
        self.betas, self.far = make_samples_batch(o, d, cfg.sampling, depth, rng,
                                                  bounds=(fld.lo, fld.hi))
        # depths past the map box belong to the background: colour only
        self.depth = np.where(depth <= self.far, depth, 0.0)
        self.sigma = (fd.sigma_track if track else fd.sigma_map)[idx]
        self.rgb = fd.rgb[idx]

    def rays(self, pose: Pose):
        return pixel_rays(self.fd.frame.intr, self.fd.uv[self.idx], pose)

    def batch(self, fld, sph, pose: Pose) -> tuple[PixelBatch, tuple]:
        o, d = self.rays(pose)
        renders = {lv: render_rays(fld, sph, lv, o, d, self.betas, self.far) for lv in LEVELS}
        return PixelBatch(self.rgb, self.depth, self.sigma, renders), (o, d)


def _pick(rng, n_total, n):
    if n >= n_total:
        return np.arange(n_total)
    return np.sort(rng.choice(n_total, size=n, replace=False))


def _pose_grad(fn, pose: Pose, eps: float) -> np.ndarray:
    g = np.zeros(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = eps
        g[i] = (fn(pose.perturbed(e)) - fn(pose.perturbed(-e))) / (2 * eps)
    return g


# -- tracking ------------------------------------------------------------------------------


def _vis_track_loss(b: PixelBatch, w: LossWeights) -> float:
    return tracking_depth_loss(b) + w.lambda_t * colour_loss(b)


def track_frame(fld: ForegroundGrid, sph: Optional[BackgroundSphere], frame, prev_pose: Pose,
                meas, cfg: SlamConfig, rng=None, diag: Optional[dict] = None) -> Pose:
    """Optimise the current pose against a fixed map.

    ``meas`` is the list of velocity measurements spanning the previous and
    current frame times (or ``None``). With measurements the optimisation
    starts at the dead-reckoned prediction and adds the motion prior.
    """
    fd = frame if isinstance(frame, FrameData) else FrameData.build(frame)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    w = cfg.weights
    prior = None
    pose = prev_pose
    if meas:
        rmi = integrate(meas, meas[0].t)
        pose = predict_pose(prev_pose, rmi)
        prior = equivalent_measurement(rmi)
    use_prior = prior is not None and w.lambda_imu > 0
    info = dict(track_flag="", track_iters=0, track_loss0=np.nan, track_loss=np.nan)
    if not np.any(fd.depth > 0):
        info["track_flag"] = "no-valid-depth"
        log.warning("frame at t=%s has no valid depth; keeping the initial pose", fd.frame.t)
        if diag is not None:
            diag.update(info)
        return pose
    eps = cfg.pose_fd_eps
    for it in range(cfg.iters_track):
        s = _Sample(fd, _pick(rng, fd.n, cfg.pixels_track), pose, fld, cfg, rng, track=True)

        def vis(p):
            return _vis_track_loss(s.batch(fld, sph, p)[0], w)

        f0 = vis(pose)
        g = _pose_grad(vis, pose, eps)
        A = np.eye(6) / cfg.lr_pose
        if use_prior:
            g += w.lambda_imu * _pose_grad(lambda p: imu_tracking_loss(prev_pose, p, prior), pose, eps)
            J = np.stack([(imu_whitened_residual(prev_pose, pose.perturbed(e), prior)
                           - imu_whitened_residual(prev_pose, pose.perturbed(-e), prior)) / (2 * eps)
                          for e in np.eye(6) * eps], axis=1)
            # Gauss-Newton curvature of the prior; the visual part keeps the plain step
            A = A + 2.0 * w.lambda_imu * J.T @ J
            f0 += w.lambda_imu * imu_tracking_loss(prev_pose, pose, prior)
        if it == 0:
            info["track_loss0"] = f0
        info["track_loss"] = f0
        pose = pose.perturbed(-np.linalg.solve(A, g))
        info["track_iters"] = it + 1
    if diag is not None:
        diag.update(info)
    return pose


# -- keyframe selection --------------------------------------------------------------------


def overlap_fraction(pts_world: np.ndarray, kf_pose: Pose, intr) -> float:
    uv, z = project(intr, kf_pose, pts_world)
    inside = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < intr.width) & (uv[:, 1] >= 0) & \
        (uv[:, 1] < intr.height)
    return float(inside.mean()) if len(pts_world) else 0.0


def backproject(frame: Frame, pose: Pose, idx=None) -> np.ndarray:
    depth = frame.depth.reshape(-1)
    uv = pixel_grid(frame.intr)
    if idx is None:
        idx = np.flatnonzero(depth > 0)
    o, d = pixel_rays(frame.intr, uv[idx], pose)
    return o + d * depth[idx, None]


def select_keyframes(store: Sequence[Keyframe], current_frame: Frame, current_pose: Pose, K: int,
                     n_samples: int = 256, rng=None) -> list[int]:
    """Indices into ``store`` (ascending) of the K best-overlapping keyframes.

    Ranking is by the fraction of back-projected current pixels that land in a
    keyframe's view, newer first on ties; the newest keyframe is always kept.
    """
    if not store:
        raise ValueError("empty keyframe store")
    rng = np.random.default_rng(0) if rng is None else rng
    valid = np.flatnonzero(current_frame.depth.reshape(-1) > 0)
    if len(valid) > n_samples:
        valid = np.sort(rng.choice(valid, size=n_samples, replace=False))
    pts = backproject(current_frame, current_pose, valid)
    scores = [overlap_fraction(pts, kf.pose, kf.frame.intr) for kf in store]
    order = sorted(range(len(store)), key=lambda i: (-scores[i], -i))
    chosen = order[:K]
    newest = len(store) - 1
    if newest not in chosen:
        chosen = chosen[:K - 1] + [newest]
    return sorted(chosen)


# -- mapping -------------------------------------------------------------------------------


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, x, g):
        if self.m is None:
            self.m, self.v = np.zeros(x.size), np.zeros(x.size)
        self.t += 1
        K.adam_step(x.reshape(-1), np.ascontiguousarray(g).reshape(-1), self.m, self.v, self.lr,
                    self.b1, self.b2, self.eps, 1 - self.b1**self.t, 1 - self.b2**self.t)


class _GD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, x, g):
        x -= self.lr * g


def _optim(kind, lr):
    return _Adam(lr) if kind == "adam" else _GD(lr)


class MapOptimizer:
    """Grid and sphere optimiser state, kept across mapping calls of one run."""

    def __init__(self, cfg: SlamConfig):
        self.density_fine = _optim(cfg.optimizer, cfg.lr_density)
        self.density_coarse = _optim(cfg.optimizer, cfg.lr_density)
        self.colour_fine = _optim(cfg.optimizer, cfg.lr_grid)
        self.sphere = _optim(cfg.optimizer, cfg.lr_bg)

    def step(self, fld: ForegroundGrid, sph: Optional[BackgroundSphere], grads: FieldGrads):
        self.density_fine.step(fld.density_fine, grads.density_fine)
        self.density_coarse.step(fld.density_coarse, grads.density_coarse)
        self.colour_fine.step(fld.colour_fine, grads.colour_fine)
        if sph is not None:
            self.sphere.step(sph.grid, grads.sphere)


def map_update(fld: ForegroundGrid, sph: Optional[BackgroundSphere], keyframes: Sequence[Keyframe],
               current: Optional[tuple] = None, cfg: SlamConfig = SlamConfig(), rng=None,
               iters: Optional[int] = None, diag: Optional[dict] = None, publish=None,
               rmi_chain: Optional[Sequence[Rmi]] = None, optimizer: Optional[MapOptimizer] = None):
    """Joint refinement of the grids, the sphere and the keyframe poses.

    ``keyframes`` is the time-ordered selected subset; the first one anchors the
    gauge. ``current`` is an optional ``(FrameData, Pose)`` whose pose stays fixed.
    ``rmi_chain`` is the store's contiguous RMI chain (defaults to the selected
    keyframes' own ``rmi_to_next``). ``optimizer`` carries grid optimiser state
    between calls; a fresh one is made when omitted. Grids are updated in place. Returns
    ``(field, sphere, poses)``.
    """
    if not keyframes:
        raise ValueError("mapping needs at least one keyframe")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    iters = cfg.iters_map if iters is None else iters
    w = cfg.weights
    members = [(kf.data if kf.data is not None else FrameData.build(kf.frame)) for kf in keyframes]
    poses = [kf.pose for kf in keyframes]
    free = [False] + [True] * (len(keyframes) - 1)
    if current is not None:
        cd, cp = current
        members.append(cd if isinstance(cd, FrameData) else FrameData.build(cd))
        poses.append(cp)
        free.append(False)
    use_rmi = w.lambda_rmi > 0 and len(keyframes) > 1
    rmis = []
    if use_rmi:
        chain = _chain_from(keyframes) if rmi_chain is None else list(rmi_chain)
        if chain:
            rmis = [connecting_rmi(chain, a.frame.t, b.frame.t)
                    for a, b in zip(keyframes[:-1], keyframes[1:])]
        else:
            use_rmi = False
    opt = MapOptimizer(cfg) if optimizer is None else optimizer
    opt_p = [_optim("gd", cfg.lr_pose) for _ in poses]
    per = max(1, cfg.pixels_map // len(members))
    eps = cfg.pose_fd_eps
    history = []
    for it in range(iters):
        grads = FieldGrads.zeros_like(fld, sph)
        total = 0.0
        pose_g = [np.zeros(6) for _ in poses]
        for m, (fd, pose) in enumerate(zip(members, poses)):
            s = _Sample(fd, _pick(rng, fd.n, per), pose, fld, cfg, rng)
            b, (o, d) = s.batch(fld, sph, pose)
            total += mapping_depth_loss(b) + w.lambda_m * colour_loss(b)
            gdep = mapping_depth_grad(b)
            gc = w.lambda_m * colour_grad(b)
            render_rays_backward(fld, sph, "fine", o, d, s.betas, s.far, gc, gdep["fine"], None, grads)
            render_rays_backward(fld, sph, "coarse", o, d, s.betas, s.far, None, gdep["coarse"], None,
                                 grads)
            if free[m]:
                def f(p, s=s):
                    bb = s.batch(fld, sph, p)[0]
                    return mapping_depth_loss(bb) + w.lambda_m * colour_loss(bb)
                pose_g[m] += _pose_grad(f, pose, eps)
        if use_rmi:
            kf_poses = list(poses[:len(keyframes)])

            def rmi_val(ps):
                return rmi_mapping_loss([(kf.frame.t, p) for kf, p in zip(keyframes, ps)], rmis,
                                        cfg.rmi_weight_mode)
            total += w.lambda_rmi * rmi_val(kf_poses)
            for m in range(1, len(keyframes)):
                def fr(p, m=m):
                    ps = list(kf_poses)
                    ps[m] = p
                    return rmi_val(ps)
                pose_g[m] += w.lambda_rmi * _pose_grad(fr, kf_poses[m], eps)
        history.append(total)
        opt.step(fld, sph, grads)
        for m in range(len(poses)):
            if free[m]:
                delta = np.zeros(6)
                opt_p[m].step(delta, pose_g[m])
                poses[m] = poses[m].perturbed(delta)
        if publish is not None:
            publish(fld, sph)
    if diag is not None:
        diag["map_iters"] = iters
        diag["map_loss0"] = history[0] if history else np.nan
        diag["map_loss"] = history[-1] if history else np.nan
    return fld, sph, poses[:len(keyframes)]


def _chain_from(keyframes: Sequence[Keyframe]) -> list:
    return [kf.rmi_to_next for kf in keyframes if kf.rmi_to_next is not None]


# -- orchestration --------------------------------------------------------------------------


def _frame_rng(seed, k, purpose):
    return np.random.default_rng([seed, k, purpose])


def _check_coverage(dataset):
    meas = dataset.measurements
    t0, t1 = dataset.frames[0].t, dataset.frames[-1].t
    covered = measurements_between(meas, t0, t1)
    if not covered:
        raise ValueError("IMU enabled but no measurements cover the frame interval")
    if abs(covered[0].t - t0) > TIME_TOL or abs(covered[-1].t_end - t1) > TIME_TOL:
        raise ValueError(f"measurements cover [{covered[0].t}, {covered[-1].t_end}], "
                         f"frames span [{t0}, {t1}]")
    for a, b in zip(covered[:-1], covered[1:]):
        if abs(a.t_end - b.t) > TIME_TOL:
            raise ValueError(f"gap in measurements between t={a.t_end} and t={b.t}")
    for f in dataset.frames:
        if not any(abs(m.t - f.t) <= TIME_TOL or abs(m.t_end - f.t) <= TIME_TOL for m in covered):
            raise ValueError(f"frame time {f.t} does not fall on a measurement boundary")


class _State:
    """Shared between tracker and mapper; the field snapshot is swapped atomically."""

    def __init__(self, fld, sph):
        self.lock = threading.Lock()
        self.snapshot = (fld.copy(), sph.copy() if sph is not None else None)

    def publish(self, fld, sph):
        snap = (fld.copy(), sph.copy() if sph is not None else None)
        self.snapshot = snap


def run_sequence(dataset, cfg: SlamConfig) -> SlamOutput:
    frames = dataset.frames
    if not frames:
        raise ValueError("dataset has no frames")
    if any(b.t <= a.t for a, b in zip(frames[:-1], frames[1:])):
        raise ValueError("frames must be strictly time-ordered")
    use_imu = cfg.use_imu and dataset.imu_enabled
    if cfg.use_imu and dataset.imu_enabled:
        _check_coverage(dataset)
    bounds = dataset.fg_bounds
    if bounds is None:
        c = dataset.initial_pose.r
        bounds = (c - 3.0, c + 3.0)
    fld, sph = new_field(bounds, cfg.res_coarse, cfg.res_fine, cfg.sphere_h, cfg.sphere_w,
                         init_seed=cfg.seed)
    if not cfg.use_background:
        sph = None
    dn = dataset.depth_noise
    datas = [FrameData.build(f, dn.a, dn.b, cfg.use_depth_uncertainty) for f in frames]
    est = [dataset.initial_pose]
    diags = [dict(t=frames[0].t, track_flag="initial", track_iters=0)]
    store = [Keyframe(frames[0], est[0], 0, None, datas[0])]
    kf_frame = {0: 0}

    opt = MapOptimizer(cfg)
    if cfg.iters_init > 0 and len(frames) > 1:
        map_update(fld, sph, store, None, cfg, _frame_rng(cfg.seed, 0, 1), cfg.iters_init, diags[0],
                   optimizer=opt)
    if cfg.mode == "parallel" and len(frames) > 1:
        return _run_parallel(dataset, cfg, fld, sph, datas, est, diags, store, kf_frame, use_imu, opt)

    rmi_since = None
    for k in range(1, len(frames)):
        diag = dict(t=frames[k].t)
        meas = measurements_between(dataset.measurements, frames[k - 1].t, frames[k].t) \
            if use_imu else None
        prev = store[-1].pose if kf_frame.get(len(store) - 1) == k - 1 else est[k - 1]
        pose = track_frame(fld, sph, datas[k], prev, meas, cfg, _frame_rng(cfg.seed, k, 0), diag)
        est.append(pose)
        if meas:
            step = integrate(meas, frames[k - 1].t)
            rmi_since = step if rmi_since is None else rmi_compose(rmi_since, step)
        if k % cfg.keyframe_every == 0:
            _insert_keyframe(store, kf_frame, frames[k], pose, k, datas[k], rmi_since)
            rmi_since = None
        if cfg.iters_map > 0 and k % cfg.map_every == 0:
            _map_step(fld, sph, store, kf_frame, datas[k], pose, k, cfg, diag, opt)
        diags.append(diag)
    traj = _final_trajectory(frames, est, store, kf_frame)
    return SlamOutput(traj, fld, sph, diags, store)


def _insert_keyframe(store, kf_frame, frame, pose, k, data, rmi_since):
    if rmi_since is not None:
        store[-1].rmi_to_next = rmi_since
    store.append(Keyframe(frame, pose, k, None, data))
    kf_frame[len(store) - 1] = k


def _map_step(fld, sph, store, kf_frame, data, pose, k, cfg, diag, opt, lock=None, publish=None):
    # the current frame is mapped with its tracked pose held fixed
    cand = [i for i in range(len(store)) if kf_frame[i] != k]
    if not cand:
        cand = list(range(len(store)))
    sub = [store[i] for i in cand]
    sel = select_keyframes(sub, data.frame, pose, cfg.overlap_K, cfg.overlap_samples,
                           _frame_rng(cfg.seed, k, 2))
    chosen = [cand[i] for i in sel]
    kfs = [store[i] for i in chosen]
    current = (data, pose) if kf_frame.get(chosen[-1]) != k else None
    chain = _chain_from(store)
    _, _, poses = map_update(fld, sph, kfs, current, cfg, _frame_rng(cfg.seed, k, 1), diag=diag,
                             publish=publish, rmi_chain=chain, optimizer=opt)
    ctx = lock if lock is not None else _NullLock()
    with ctx:
        for i, p in zip(chosen, poses):
            store[i].pose = p
    diag["map_keyframes"] = " ".join(str(kf_frame[i]) for i in chosen)


class _NullLock:
    def __enter__(self):
        return self

    def __exit__(self, *a):
        return False


def _final_trajectory(frames, est, store, kf_frame):
    traj = [(f.t, p) for f, p in zip(frames, est)]
    for i, kf in enumerate(store):
        k = kf_frame[i]
        traj[k] = (frames[k].t, kf.pose)
    return traj


def worker_cap() -> int:
    try:
        return max(1, int(os.environ.get("OWSLAM_THREADS", "2")))
    except ValueError:
        return 2


def _run_parallel(dataset, cfg, fld, sph, datas, est, diags, store, kf_frame, use_imu, opt):
    """Tracker in this thread, mapper in a worker consuming mapping requests."""
    frames = dataset.frames
    if worker_cap() < 2:
        log.info("OWSLAM_THREADS < 2: parallel mode runs the mapper inline")
    state = _State(fld, sph)
    requests: queue.Queue = queue.Queue()
    errors = []

    def mapper():
        while True:
            item = requests.get()
            if item is None:
                return
            data, pose, k, diag = item
            try:
                with state.lock:
                    n_store = len(store)
                _map_step(fld, sph, store[:n_store], kf_frame, data, pose, k, cfg, diag, opt,
                          lock=state.lock, publish=state.publish)
                state.publish(fld, sph)
            except Exception as err:  # surfaced after join
                errors.append(err)

    inline = worker_cap() < 2
    th = None if inline else threading.Thread(target=mapper, daemon=True)
    if th is not None:
        th.start()
    rmi_since = None
    for k in range(1, len(frames)):
        diag = dict(t=frames[k].t)
        meas = measurements_between(dataset.measurements, frames[k - 1].t, frames[k].t) \
            if use_imu else None
        snap_f, snap_s = state.snapshot
        with state.lock:
            prev = est[k - 1]
        pose = track_frame(snap_f, snap_s, datas[k], prev, meas, cfg, _frame_rng(cfg.seed, k, 0), diag)
        est.append(pose)
        if meas:
            step = integrate(meas, frames[k - 1].t)
            rmi_since = step if rmi_since is None else rmi_compose(rmi_since, step)
        if k % cfg.keyframe_every == 0:
            with state.lock:
                _insert_keyframe(store, kf_frame, frames[k], pose, k, datas[k], rmi_since)
            rmi_since = None
        if cfg.iters_map > 0 and k % cfg.map_every == 0:
            if inline:
                _map_step(fld, sph, store, kf_frame, datas[k], pose, k, cfg, diag, opt)
                state.publish(fld, sph)
            else:
                requests.put((datas[k], pose, k, diag))
        diags.append(diag)
    if th is not None:
        requests.put(None)
        th.join()
    if errors:
        raise errors[0]
    traj = _final_trajectory(frames, est, store, kf_frame)
    return SlamOutput(traj, fld, sph, diags, store)
