"""Velocity measurements, dead reckoning and relative motion increments.

Orientation uncertainty is a left perturbation, ``C_est = Exp(dphi) C_true``,
so the orientation block of :func:`rmi_error` is exactly ``dphi``. Covariances
are ordered (orientation, position) throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Pose, exp_so3, left_jacobian, left_jacobian_inv, log_so3, wedge

TIME_TOL = 1e-9
IMU_RATE_HZ = 100.0
DEFAULT_SIGMA_V = 0.01   # m/s per axis
DEFAULT_SIGMA_U = 0.001  # rad/s per axis


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class NoiseModel:
    sigma_v: np.ndarray = field(default_factory=lambda: np.eye(3) * DEFAULT_SIGMA_V**2)
    sigma_u: np.ndarray = field(default_factory=lambda: np.eye(3) * DEFAULT_SIGMA_U**2)
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_v", "sigma_u"):
            m = np.asarray(getattr(self, name), dtype=float).reshape(3, 3)
            if not np.allclose(m, m.T) or np.linalg.eigvalsh(m).min() < -1e-15:
                raise ValueError(f"{name} must be symmetric positive semi-definite")
            object.__setattr__(self, name, m)

    @classmethod
    def isotropic(cls, std_v: float, std_u: float, seed: int = 0) -> "NoiseModel":
        return cls(np.eye(3) * std_v**2, np.eye(3) * std_u**2, seed)

    @classmethod
    def zero(cls) -> "NoiseModel":
        return cls(np.zeros((3, 3)), np.zeros((3, 3)))


@dataclass(frozen=True)
class VelocityMeasurement:
    """Body-frame velocities held constant over ``[t, t + T]``."""

    v: np.ndarray
    u: np.ndarray
    t: float
    T: float
    cov_v: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    cov_u: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"measurement increment must be positive, got T={self.T}")
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float).reshape(3))
        object.__setattr__(self, "cov_v", np.asarray(self.cov_v, dtype=float).reshape(3, 3))
        object.__setattr__(self, "cov_u", np.asarray(self.cov_u, dtype=float).reshape(3, 3))

    @property
    def t_end(self) -> float:
        return self.t + self.T


@dataclass(frozen=True)
class Rmi:
    dC: np.ndarray
    dr: np.ndarray
    cov: np.ndarray
    t_i: float
    t_k: float

    @classmethod
    def identity(cls, t: float) -> "Rmi":
        return cls(np.eye(3), np.zeros(3), np.zeros((6, 6)), t, t)

    @property
    def duration(self) -> float:
        return self.t_k - self.t_i


def _check_increasing(times: Sequence[float]) -> None:
    if len(times) < 2:
        raise ValueError("trajectory needs at least two poses")
    if np.any(np.diff(times) <= 0):
        raise ValueError("trajectory timestamps must be strictly increasing")


def simulate_velocities(trajectory: Sequence[tuple[float, Pose]],
                        noise: NoiseModel) -> list[VelocityMeasurement]:
    """Forward-difference body-frame velocities plus additive Gaussian noise.

    The last pose has no successor and produces no measurement.
    """
    times = [float(t) for t, _ in trajectory]
    _check_increasing(times)
    n = len(trajectory) - 1
    rng = np.random.default_rng(noise.seed)
    z = rng.standard_normal((n, 6))
    wv = z[:, :3] @ _psd_sqrt(noise.sigma_v).T
    wu = z[:, 3:] @ _psd_sqrt(noise.sigma_u).T
    out = []
    for k in range(n):
        (t0, p0), (t1, p1) = trajectory[k], trajectory[k + 1]
        T = t1 - t0
        v = p0.C.T @ (p1.r - p0.r) / T + wv[k]
        u = log_so3(p0.C.T @ p1.C) / T + wu[k]
        out.append(VelocityMeasurement(v, u, t0, T, noise.sigma_v, noise.sigma_u))
    return out


def dead_reckon(pose0: Pose, meas: Sequence[VelocityMeasurement]) -> list[tuple[float, Pose]]:
    if not meas:
        return []
    out = [(meas[0].t, pose0)]
    C, r = pose0.C, pose0.r
    for m in meas:
        r = r + C @ (m.v * m.T)
        C = C @ exp_so3(m.u * m.T)
        out.append((m.t_end, Pose(C, r)))
    return out


def rmi_update(rmi: Rmi, meas: VelocityMeasurement) -> Rmi:
    if meas.t < rmi.t_k - TIME_TOL:
        raise ValueError(f"measurement at t={meas.t} precedes RMI end t={rmi.t_k}")
    T = meas.T
    phi = meas.u * T
    C_old = rmi.dC
    dC = C_old @ exp_so3(phi)
    dr = rmi.dr + C_old @ (meas.v * T)
    # error-state transition and noise Jacobians, noise ordered (u, v)
    A = np.eye(6)
    A[3:, :3] = -wedge(C_old @ (meas.v * T))
    B = np.zeros((6, 6))
    B[:3, :3] = C_old @ left_jacobian(phi) * T
    B[3:, 3:] = C_old * T
    Q = np.zeros((6, 6))
    Q[:3, :3] = meas.cov_u
    Q[3:, 3:] = meas.cov_v
    cov = A @ rmi.cov @ A.T + B @ Q @ B.T
    return Rmi(dC, dr, 0.5 * (cov + cov.T), rmi.t_i, meas.t_end)


def integrate(meas: Iterable[VelocityMeasurement], t0: float | None = None) -> Rmi:
    meas = list(meas)
    start = meas[0].t if t0 is None else t0
    rmi = Rmi.identity(start)
    for m in meas:
        rmi = rmi_update(rmi, m)
    return rmi


def rmi_compose(a: Rmi, b: Rmi) -> Rmi:
    if abs(a.t_k - b.t_i) > TIME_TOL:
        raise ValueError(f"RMIs are not adjacent: {a.t_k} != {b.t_i}")
    dC = a.dC @ b.dC
    dr = a.dr + a.dC @ b.dr
    Ja = np.eye(6)
    Ja[3:, :3] = -wedge(a.dC @ b.dr)
    Jb = np.zeros((6, 6))
    Jb[:3, :3] = a.dC
    Jb[3:, 3:] = a.dC
    cov = Ja @ a.cov @ Ja.T + Jb @ b.cov @ Jb.T
    return Rmi(dC, dr, 0.5 * (cov + cov.T), a.t_i, b.t_k)


def compose_chain(rmis: Sequence[Rmi]) -> Rmi:
    out = rmis[0]
    for r in rmis[1:]:
        out = rmi_compose(out, r)
    return out


def rmi_error(rmi: Rmi, pose_i: Pose, pose_j: Pose) -> np.ndarray:
    e_C = log_so3(rmi.dC @ pose_j.C.T @ pose_i.C)
    e_r = rmi.dr - pose_i.C.T @ (pose_j.r - pose_i.r)
    return np.concatenate([e_C, e_r])


def predict_pose(pose: Pose, rmi: Rmi) -> Pose:
    return Pose(pose.C @ rmi.dC, pose.r + pose.C @ rmi.dr)


def imu_prior_jacobian(e_C: np.ndarray, meas: VelocityMeasurement) -> np.ndarray:
    """d e_C / d w_u, with the noise removed from the measured rate (u_true = u - w)."""
    phi = meas.u * meas.T
    return -left_jacobian_inv(e_C) @ left_jacobian(phi) * meas.T


def imu_prior_error(pose_prev: Pose, pose_curr: Pose, meas: VelocityMeasurement):
    """Motion-prior residuals of ``pose_curr`` given a fixed ``pose_prev``.

    Returns ``(e_C, e_r, cov_C, cov_r)``.
    """
    if not meas.T > 0:
        raise ValueError("measurement increment must be positive")
    T = meas.T
    e_C = log_so3(exp_so3(meas.u * T) @ pose_curr.C.T @ pose_prev.C)
    e_r = meas.v - pose_prev.C.T @ (pose_curr.r - pose_prev.r) / T
    J = imu_prior_jacobian(e_C, meas)
    cov_C = J @ meas.cov_u @ J.T
    return e_C, e_r, 0.5 * (cov_C + cov_C.T), meas.cov_v.copy()


def equivalent_measurement(rmi: Rmi) -> VelocityMeasurement:
    """Collapse an RMI into one constant-velocity measurement over its interval.

    The covariances are chosen so that :func:`imu_prior_error` reproduces the
    RMI's marginal orientation and position covariances.
    """
    T = rmi.duration
    phi = log_so3(rmi.dC)
    Jinv = left_jacobian_inv(phi)
    cov_u = Jinv @ rmi.cov[:3, :3] @ Jinv.T / T**2
    cov_v = rmi.cov[3:, 3:] / T**2
    return VelocityMeasurement(rmi.dr / T, phi / T, rmi.t_i, T,
                               0.5 * (cov_v + cov_v.T), 0.5 * (cov_u + cov_u.T))


def measurements_between(meas: Sequence[VelocityMeasurement], t0: float, t1: float):
    return [m for m in meas if m.t >= t0 - TIME_TOL and m.t_end <= t1 + TIME_TOL]


def write_measurements(path, meas: Sequence[VelocityMeasurement]) -> None:
    lines = ["# t v1 v2 v3 u1 u2 u3 T"]
    for m in meas:
        vals = [m.t, *m.v, *m.u, m.T]
        lines.append(" ".join(f"{x:.17g}" for x in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_measurements(path, noise: NoiseModel | None = None) -> list[VelocityMeasurement]:
    cov_v = noise.sigma_v if noise is not None else np.zeros((3, 3))
    cov_u = noise.sigma_u if noise is not None else np.zeros((3, 3))
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            t, v1, v2, v3, u1, u2, u3, T = map(float, parts)
            out.append(VelocityMeasurement([v1, v2, v3], [u1, u2, u3], t, T, cov_v, cov_u))
        except ValueError as err:
            raise ValueError(f"{path}:{lineno}: {err}") from None
    return out
