"""Explicit radiance field: coarse/fine voxel grids plus a background sphere.

Raw values are stored; densities are activated with softplus and colours
with a sigmoid *after* interpolation.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels as K

INIT_DENSITY = 0.01
FIELD_MAGIC = b"OWNF"
FIELD_VERSION = 1


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    # y + log(1 - e^-y) avoids overflowing expm1 for large y
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass
class ForegroundGrid:
    lo: np.ndarray
    hi: np.ndarray
    density_coarse: np.ndarray  # (nx, ny, nz)
    density_fine: np.ndarray    # (nx, ny, nz)
    colour_fine: np.ndarray     # (nx, ny, nz, 3)

    @property
    def res_coarse(self) -> tuple[int, int, int]:
        return tuple(self.density_coarse.shape)

    @property
    def res_fine(self) -> tuple[int, int, int]:
        return tuple(self.density_fine.shape)

    def level_arrays(self, level: str):
        if level == "fine":
            return self.density_fine, self.colour_fine
        if level == "coarse":
            return self.density_coarse, None
        raise ValueError(f"unknown level {level!r}")

    def copy(self) -> "ForegroundGrid":
        return ForegroundGrid(self.lo.copy(), self.hi.copy(), self.density_coarse.copy(),
                              self.density_fine.copy(), self.colour_fine.copy())


@dataclass
class BackgroundSphere:
    grid: np.ndarray  # (H, W, 3) raw colour, rows = polar angle, cols = azimuth

    def copy(self) -> "BackgroundSphere":
        return BackgroundSphere(self.grid.copy())


@dataclass(frozen=True)
class FieldSample:
    density: float
    colour: np.ndarray


def _check_res(res, name):
    res = tuple(int(r) for r in np.broadcast_to(res, 3))
    if min(res) < 2:
        raise ValueError(f"{name} needs at least 2 vertices per axis, got {res}")
    return res


def new_field(bounds, res_coarse=16, res_fine=64, sphere_h=32, sphere_w=64, init_seed=0):
    """Near-empty field (density ~0.01/m) with mid-grey colours plus +-0.01 noise."""
    lo, hi = (np.asarray(b, dtype=float).reshape(3) for b in bounds)
    if not np.all(hi > lo):
        raise ValueError(f"degenerate bounds {lo} .. {hi}")
    rc, rf = _check_res(res_coarse, "res_coarse"), _check_res(res_fine, "res_fine")
    if sphere_h < 2 or sphere_w < 4:
        raise ValueError("background sphere needs H >= 2 and W >= 4")
    rng = np.random.default_rng(init_seed)
    raw_d = float(softplus_inv(INIT_DENSITY))
    colour = logit(0.5 + rng.uniform(-0.01, 0.01, size=rf + (3,)))
    sphere = logit(0.5 + rng.uniform(-0.01, 0.01, size=(sphere_h, sphere_w, 3)))
    grid = ForegroundGrid(lo, hi, np.full(rc, raw_d), np.full(rf, raw_d), colour)
    return grid, BackgroundSphere(sphere)


def cube_bounds(center, side):
    c = np.asarray(center, dtype=float)
    return c - side / 2, c + side / 2


def _locate(grid_shape, lo, hi, p):
    g = (np.asarray(p, dtype=float) - lo) / (hi - lo) * (np.asarray(grid_shape[:3]) - 1)
    if np.any(g < 0) or np.any(g > np.asarray(grid_shape[:3]) - 1):
        return None
    idx = np.minimum(np.floor(g).astype(int), np.asarray(grid_shape[:3]) - 2)
    return idx, g - idx


def trilinear_weights(grid_shape, lo, hi, p):
    """(corner indices (8,3), weights (8,)) or None outside the box."""
    loc = _locate(grid_shape, lo, hi, p)
    if loc is None:
        return None
    idx, f = loc
    corners, weights = [], []
    for c in range(8):
        bits = np.array([c & 1, (c >> 1) & 1, (c >> 2) & 1])
        corners.append(idx + bits)
        weights.append(np.prod(np.where(bits == 1, f, 1 - f)))
    return np.array(corners), np.array(weights)


def sample_foreground(grid: ForegroundGrid, level: str, p) -> FieldSample:
    dens, cols = grid.level_arrays(level)
    tw = trilinear_weights(dens.shape, grid.lo, grid.hi, p)
    if tw is None:
        return FieldSample(0.0, np.full(3, 0.5))
    corners, w = tw
    x = sum(wi * dens[tuple(c)] for c, wi in zip(corners, w))
    if cols is None:
        colour = np.full(3, 0.5)
    else:
        colour = sigmoid(sum(wi * cols[tuple(c)] for c, wi in zip(corners, w)))
    return FieldSample(float(softplus(x)), colour)


def sample_foreground_batch(grid: ForegroundGrid, level: str, pts):
    """Vectorised sampler: (density (M,), colour (M,3), inside (M,))."""
    dens, cols = grid.level_arrays(level)
    pts = np.ascontiguousarray(pts, dtype=float).reshape(-1, 3)
    sig = np.empty(len(pts))
    col = np.empty((len(pts), 3))
    inside = np.empty(len(pts), dtype=bool)
    has_col = cols is not None
    K.sample_points(dens, cols if has_col else np.zeros((1, 1, 1, 3)), has_col,
                    grid.lo, grid.hi, pts, sig, col, inside)
    return sig, col, inside


def dir_to_spherical(x_hat) -> tuple[float, float]:
    """Polar angle from +z and azimuth in [-pi, pi].

    The azimuth is ``sign(y) * acos(x / sqrt(x^2 + y^2))`` with sign(0) = +1;
    it is 0 at the poles.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    if abs(np.linalg.norm(x_hat) - 1.0) > 1e-9:
        raise ValueError("direction must be unit length")
    x, y, z = x_hat
    theta = math.acos(min(1.0, max(-1.0, z)))
    rho = math.hypot(x, y)
    if rho < 1e-15:
        return theta, 0.0
    phi = math.acos(min(1.0, max(-1.0, x / rho)))
    return theta, (phi if y >= 0 else -phi)


def spherical_to_dir(theta, phi):
    return np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi),
                     math.cos(theta)])


def sphere_node_angles(H, W, i, j):
    return i * math.pi / (H - 1), -math.pi + 2 * math.pi * j / W


def sphere_weights(H, W, theta, phi):
    """Bilinear corners ``[(row, col, weight)]`` for rows at i*pi/(H-1), cols at -pi + 2*pi*j/W."""
    u = theta / math.pi * (H - 1)
    i0 = min(max(int(math.floor(u)), 0), H - 2)
    a = u - i0
    v = (phi + math.pi) / (2 * math.pi) * W
    j = int(math.floor(v))
    b = v - j
    j0, j1 = j % W, (j + 1) % W
    return [(i0, j0, (1 - a) * (1 - b)), (i0, j1, (1 - a) * b),
            (i0 + 1, j0, a * (1 - b)), (i0 + 1, j1, a * b)]


def sample_background(sphere: BackgroundSphere, x_hat) -> np.ndarray:
    H, W, _ = sphere.grid.shape
    theta, phi = dir_to_spherical(x_hat)
    raw = sum(w * sphere.grid[i, j] for i, j, w in sphere_weights(H, W, theta, phi))
    return sigmoid(raw)


def sample_background_batch(sphere: BackgroundSphere, dirs) -> np.ndarray:
    dirs = np.ascontiguousarray(dirs, dtype=float).reshape(-1, 3)
    out = np.empty((len(dirs), 3))
    K.sample_sphere(sphere.grid, dirs, out)
    return out


def save_field(path, grid: ForegroundGrid, sphere: Optional[BackgroundSphere]) -> None:
    """Little-endian checkpoint; vertex arrays are x-fastest float32.

    A missing sphere is stored with a 0 x 0 grid.
    """
    H, W = sphere.grid.shape[:2] if sphere is not None else (0, 0)
    header = FIELD_MAGIC + struct.pack("<I6d3I3I2I", FIELD_VERSION, *grid.lo, *grid.hi,
                                       *grid.res_coarse, *grid.res_fine, H, W)

    def xfast(a):
        # [ix, iy, iz, ...] -> memory order iz, iy, ix, channels
        a = np.asarray(a)
        axes = (2, 1, 0) + tuple(range(3, a.ndim))
        return np.ascontiguousarray(a.transpose(axes)).astype("<f4").tobytes()

    body = (xfast(grid.density_coarse) + xfast(grid.density_fine) + xfast(grid.colour_fine)
            + (np.ascontiguousarray(sphere.grid).astype("<f4").tobytes() if sphere is not None else b""))
    Path(path).write_bytes(header + body)


def load_field(path):
    data = Path(path).read_bytes()
    if data[:4] != FIELD_MAGIC:
        raise ValueError(f"{path}: not a field checkpoint")
    fmt = "<I6d3I3I2I"
    off = 4 + struct.calcsize(fmt)
    vals = struct.unpack(fmt, data[4:off])
    if vals[0] != FIELD_VERSION:
        raise ValueError(f"{path}: unsupported version {vals[0]}")
    lo, hi = np.array(vals[1:4]), np.array(vals[4:7])
    rc, rf, (H, W) = tuple(vals[7:10]), tuple(vals[10:13]), vals[13:15]

    def take(shape, channels=0):
        nonlocal off
        n = int(np.prod(shape)) * max(channels, 1)
        a = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(float)
        off += 4 * n
        mem_shape = tuple(reversed(shape)) + ((channels,) if channels else ())
        a = a.reshape(mem_shape)
        axes = (2, 1, 0) + ((3,) if channels else ())
        return np.ascontiguousarray(a.transpose(axes))

    dc, df, cf = take(rc), take(rf), take(rf, 3)
    n = H * W * 3
    sph = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(float).reshape(H, W, 3)
    if off + 4 * n != len(data):
        raise ValueError(f"{path}: unexpected checkpoint length")
    return ForegroundGrid(lo, hi, dc, df, cf), (BackgroundSphere(sph.copy()) if H * W else None)
