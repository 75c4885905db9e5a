"""Depth, colour and motion-prior loss terms, plus their upstream gradients.

Render-dependent terms take a :class:`PixelBatch` whose ``renders`` hold the
batched render outputs per level. The ``*_grad`` helpers return gradients
with respect to those outputs; the renderer's backward pass maps them onto
grid values.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import Pose
from .motion import TIME_TOL, Rmi, VelocityMeasurement, compose_chain, imu_prior_error, rmi_error
from .render import NO_SURFACE_WSUM, RenderBatch, RenderResult

log = logging.getLogger(__name__)

COV_REG = 1e-12
LEVELS = ("fine", "coarse")


@dataclass(frozen=True)
class LossWeights:
    lambda_m: float = 0.2
    lambda_t: float = 0.5
    lambda_imu: float = 1.0
    lambda_rmi: float = 1.0

    def __post_init__(self):
        if min(self.lambda_m, self.lambda_t, self.lambda_imu, self.lambda_rmi) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class PixelObservation:
    colour: np.ndarray
    depth: float
    depth_sigma: float
    render: Mapping[str, RenderResult]

    def __post_init__(self):
        if self.depth > 0 and not self.depth_sigma > 0:
            raise ValueError("depth_sigma must be positive for a valid depth")


@dataclass
class PixelBatch:
    colour: np.ndarray        # (N, 3) measured
    depth: np.ndarray         # (N,), 0 = invalid
    depth_sigma: np.ndarray   # (N,)
    renders: dict = field(default_factory=dict)  # level -> RenderBatch

    def __post_init__(self):
        self.colour = np.asarray(self.colour, dtype=float).reshape(-1, 3)
        self.depth = np.asarray(self.depth, dtype=float).reshape(-1)
        self.depth_sigma = np.asarray(self.depth_sigma, dtype=float).reshape(-1)
        if len(self.colour) == 0:
            raise ValueError("empty pixel batch")
        if np.any((self.depth > 0) & ~(self.depth_sigma > 0)):
            raise ValueError("depth_sigma must be positive wherever depth > 0")

    def __len__(self):
        return len(self.depth)

    @classmethod
    def from_observations(cls, obs: Sequence[PixelObservation]) -> "PixelBatch":
        obs = list(obs)
        if not obs:
            raise ValueError("empty pixel batch")
        renders = {}
        for level in obs[0].render:
            rs = [o.render[level] for o in obs]
            renders[level] = RenderBatch(
                colour=np.array([r.colour for r in rs], dtype=float),
                colour_fg=np.array([r.colour_fg if r.colour_fg is not None else r.colour
                                    for r in rs], dtype=float),
                background=np.zeros((len(rs), 3)),
                depth=np.array([r.depth for r in rs], dtype=float),
                depth_std=np.array([r.depth_std for r in rs], dtype=float),
                weight_sum=np.array([r.weight_sum for r in rs], dtype=float),
                boundary_transmittance=np.array([r.boundary_transmittance for r in rs], dtype=float))
        return cls(np.array([o.colour for o in obs], dtype=float),
                   np.array([o.depth for o in obs], dtype=float),
                   np.array([o.depth_sigma for o in obs], dtype=float), renders)

    def depth_mask(self, level: str) -> np.ndarray:
        """Pixels with a valid measurement and a rendered surface at ``level``."""
        return (self.depth > 0) & (self.renders[level].weight_sum >= NO_SURFACE_WSUM)

    @property
    def no_depth(self) -> bool:
        return not any(self.depth_mask(lv).any() for lv in self.renders if lv in LEVELS)


def _as_batch(b) -> PixelBatch:
    return b if isinstance(b, PixelBatch) else PixelBatch.from_observations(b)


def _levels(batch: PixelBatch):
    return [lv for lv in LEVELS if lv in batch.renders]


def mapping_depth_loss(batch) -> float:
    """Per-level mean of |d - d_hat| / sigma over valid pixels, summed over levels."""
    batch = _as_batch(batch)
    total = 0.0
    for lv in _levels(batch):
        m = batch.depth_mask(lv)
        if m.any():
            r = np.abs(batch.depth[m] - batch.renders[lv].depth[m]) / batch.depth_sigma[m]
            total += float(r.mean())
    return total


def mapping_depth_grad(batch: PixelBatch) -> dict:
    """{level: dL/d(depth_hat)}."""
    out = {}
    for lv in _levels(batch):
        m = batch.depth_mask(lv)
        g = np.zeros(len(batch))
        if m.any():
            g[m] = -np.sign(batch.depth[m] - batch.renders[lv].depth[m]) / batch.depth_sigma[m] / m.sum()
        out[lv] = g
    return out


def _combined_sigma(batch, lv, m):
    return np.sqrt(batch.depth_sigma[m] ** 2 + batch.renders[lv].depth_std[m] ** 2)


def tracking_depth_loss(batch) -> float:
    """As the mapping loss, with the rendered depth spread added to the sensor sigma."""
    batch = _as_batch(batch)
    total = 0.0
    for lv in _levels(batch):
        m = batch.depth_mask(lv)
        if m.any():
            r = np.abs(batch.depth[m] - batch.renders[lv].depth[m]) / _combined_sigma(batch, lv, m)
            total += float(r.mean())
    return total


def tracking_depth_grad(batch: PixelBatch) -> dict:
    """{level: (dL/d(depth_hat), dL/d(depth_std))}."""
    out = {}
    for lv in _levels(batch):
        m = batch.depth_mask(lv)
        gd, gs = np.zeros(len(batch)), np.zeros(len(batch))
        if m.any():
            s = _combined_sigma(batch, lv, m)
            res = batch.depth[m] - batch.renders[lv].depth[m]
            n = m.sum()
            gd[m] = -np.sign(res) / s / n
            gs[m] = -np.abs(res) * batch.renders[lv].depth_std[m] / s**3 / n
        out[lv] = (gd, gs)
    return out


def colour_loss(batch) -> float:
    batch = _as_batch(batch)
    diff = batch.colour - batch.renders["fine"].colour
    return float(np.abs(diff).sum(axis=1).mean())


def colour_grad(batch: PixelBatch) -> np.ndarray:
    """dL/d(composite colour), fine level."""
    return -np.sign(batch.colour - batch.renders["fine"].colour) / len(batch)


def _inv_cov(cov: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        np.linalg.cholesky(cov)
        return np.linalg.inv(cov), False
    except np.linalg.LinAlgError:
        return np.linalg.inv(cov + COV_REG * np.eye(len(cov))), True


def imu_tracking_loss(pose_prev: Pose, pose_curr: Pose, meas: VelocityMeasurement,
                      return_flag: bool = False):
    """Mahalanobis motion prior on ``pose_curr``; ``pose_prev`` is held fixed.

    Singular covariances get ``+1e-12 I``; ``return_flag`` exposes that.
    """
    e_C, e_r, cov_C, cov_r = imu_prior_error(pose_prev, pose_curr, meas)
    iC, fC = _inv_cov(cov_C)
    ir, fr = _inv_cov(cov_r)
    val = float(e_C @ iC @ e_C + e_r @ ir @ e_r)
    flag = fC or fr
    if flag:
        log.debug("singular IMU covariance regularised")
    return (val, flag) if return_flag else val


def imu_whitened_residual(pose_prev: Pose, pose_curr: Pose, meas: VelocityMeasurement) -> np.ndarray:
    """6-vector whose squared norm is :func:`imu_tracking_loss`."""
    e_C, e_r, cov_C, cov_r = imu_prior_error(pose_prev, pose_curr, meas)
    Lc = np.linalg.cholesky(_inv_cov(cov_C)[0])
    Lr = np.linalg.cholesky(_inv_cov(cov_r)[0])
    return np.concatenate([Lc.T @ e_C, Lr.T @ e_r])


def connecting_rmi(chain: Sequence[Rmi], t_i: float, t_j: float) -> Rmi:
    """Compose the contiguous run of ``chain`` spanning [t_i, t_j]."""
    starts = [k for k, r in enumerate(chain) if abs(r.t_i - t_i) <= TIME_TOL]
    if not starts:
        raise ValueError(f"no RMI starts at t={t_i}")
    k = starts[0]
    run = [chain[k]]
    while run[-1].t_k < t_j - TIME_TOL:
        k += 1
        if k >= len(chain) or abs(chain[k].t_i - run[-1].t_k) > TIME_TOL:
            raise ValueError(f"RMI chain is broken between t={t_i} and t={t_j}")
        run.append(chain[k])
    if abs(run[-1].t_k - t_j) > TIME_TOL:
        raise ValueError(f"no RMI ends at t={t_j}")
    return compose_chain(run)


def rmi_mapping_loss(keyframes: Sequence[tuple[float, Pose]], rmis: Sequence[Rmi],
                     weight_mode: str = "identity") -> float:
    """Sum of e^T W e over consecutive keyframes; ``rmis[k]`` joins keyframes k and k+1."""
    if weight_mode not in ("identity", "covariance"):
        raise ValueError(f"unknown weight_mode {weight_mode!r}")
    if len(rmis) != max(len(keyframes) - 1, 0):
        raise ValueError("need one connecting RMI per consecutive keyframe pair")
    total = 0.0
    for k, rmi in enumerate(rmis):
        (ti, pi), (tj, pj) = keyframes[k], keyframes[k + 1]
        if abs(rmi.t_i - ti) > TIME_TOL or abs(rmi.t_k - tj) > TIME_TOL:
            raise ValueError(f"RMI [{rmi.t_i}, {rmi.t_k}] does not connect {ti} and {tj}")
        e = rmi_error(rmi, pi, pj)
        if weight_mode == "identity":
            total += float(e @ e)
        else:
            total += float(e @ _inv_cov(rmi.cov)[0] @ e)
    return total


def tracking_objective(batch, pose: Pose, prev_pose: Optional[Pose],
                       meas: Optional[VelocityMeasurement], w: LossWeights) -> float:
    batch = _as_batch(batch)
    val = tracking_depth_loss(batch) + w.lambda_t * colour_loss(batch)
    if w.lambda_imu > 0 and meas is not None and prev_pose is not None:
        val += w.lambda_imu * imu_tracking_loss(prev_pose, pose, meas)
    return val


def mapping_objective(keyframe_batches: Sequence, keyframes: Sequence[tuple[float, Pose]],
                      rmis: Sequence[Rmi], w: LossWeights, weight_mode: str = "identity") -> float:
    val = 0.0
    for b in keyframe_batches:
        b = _as_batch(b)
        val += mapping_depth_loss(b) + w.lambda_m * colour_loss(b)
    if w.lambda_rmi > 0 and len(keyframes) > 1:
        val += w.lambda_rmi * rmi_mapping_loss(keyframes, rmis, weight_mode)
    return val


def pose_fd_grad(fn, pose: Pose, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``fn(pose)`` over the 6 tangent coordinates."""
    g = np.zeros(6)
    for i in range(6):
        d = np.zeros(6)
        d[i] = eps
        g[i] = (fn(pose.perturbed(d)) - fn(pose.perturbed(-d))) / (2 * eps)
    return g
