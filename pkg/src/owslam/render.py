"""Pinhole rays, stratified sampling and foreground/background volume rendering."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .field import (
    BackgroundSphere,
    ForegroundGrid,
    sample_background,
    sample_foreground,
)
from .geometry import Pose

DEPTH_EPS = K.DEPTH_EPS
NO_SURFACE_WSUM = 1e-3
DEPTH_SCALE = 5000.0  # PGM units per metre


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "Intrinsics":
        f = 0.5 * width / math.tan(math.radians(hfov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)

    def to_dict(self):
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                    width=self.width, height=self.height)


@dataclass
class Frame:
    """One RGB-D image; depth is range along the pixel ray in metres, 0 = invalid."""

    t: float
    rgb: np.ndarray    # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W)
    intr: Intrinsics

    def __post_init__(self):
        h, w = self.intr.height, self.intr.width
        if self.rgb.shape != (h, w, 3) or self.depth.shape != (h, w):
            raise ValueError(f"image shapes {self.rgb.shape}, {self.depth.shape} do not match "
                             f"{w}x{h} intrinsics")


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    dir: np.ndarray


@dataclass(frozen=True)
class SamplingConfig:
    beta_near: float = 0.1
    beta_far: float = 8.0
    n_uniform: int = 32
    n_near_depth: int = 16
    depth_band: float = 0.12

    def __post_init__(self):
        if not (0 <= self.beta_near < self.beta_far):
            raise ValueError("need 0 <= beta_near < beta_far")
        if self.n_uniform < 1 or self.n_near_depth < 1:
            raise ValueError("sample counts must be >= 1")


@dataclass(frozen=True)
class RenderResult:
    colour: np.ndarray
    depth: float
    depth_std: float
    boundary_transmittance: float
    weight_sum: float = 0.0
    colour_fg: Optional[np.ndarray] = None

    @property
    def has_surface(self) -> bool:
        return self.weight_sum >= NO_SURFACE_WSUM


def camera_dirs(intr: Intrinsics, uv) -> np.ndarray:
    """Unit camera-frame directions for pixel coordinates (u, v)."""
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    d = np.stack([(uv[:, 0] - intr.cx) / intr.fx, (uv[:, 1] - intr.cy) / intr.fy,
                  np.ones(len(uv))], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def pixel_ray(intr: Intrinsics, px, pose: Pose) -> Ray:
    d = pose.C @ camera_dirs(intr, px)[0]
    return Ray(pose.r.copy(), d / np.linalg.norm(d))


def pixel_rays(intr: Intrinsics, uv, pose: Pose):
    d = camera_dirs(intr, uv) @ pose.C.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.broadcast_to(pose.r, d.shape).copy(), d


def pixel_grid(intr: Intrinsics) -> np.ndarray:
    """Pixel-centre coordinates (u + 0.5, v + 0.5) in row-major order."""
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    return np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=1).astype(float)


def project(intr: Intrinsics, pose: Pose, pts_world):
    """Pixel coordinates and camera-frame z of world points."""
    pc = pose.inverse_transform(pts_world)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pc[:, 0] / z + intr.cx
        v = intr.fy * pc[:, 1] / z + intr.cy
    return np.stack([u, v], axis=1), z


def ray_box(origins, dirs, lo, hi):
    """Slab test: entry/exit distances (exit < entry when the box is missed)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t0), np.inf, np.maximum(t0, t1))
    return tmin.max(axis=-1), tmax.min(axis=-1)


def _stratified(a, b, n, rng):
    a = np.asarray(a, dtype=float)[:, None]
    b = np.asarray(b, dtype=float)[:, None]
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (a.shape[0], n))
    else:
        u = (np.arange(n) + rng.random((a.shape[0], n))) / n
    return a + (b - a) * u


def sample_ranges(origins, dirs, cfg: SamplingConfig, bounds=None):
    n = len(origins)
    near = np.full(n, cfg.beta_near)
    far = np.full(n, cfg.beta_far)
    if bounds is not None:
        t_in, t_out = ray_box(origins, dirs, bounds[0], bounds[1])
        near = np.maximum(near, t_in)
        far = np.minimum(far, t_out)
    return near, far


def make_samples_batch(origins, dirs, cfg: SamplingConfig, depths=None, rng=None, bounds=None):
    """Sorted sample distances (N, n_uniform + n_near_depth), ``inf``-padded, and far limits.

    ``rng=None`` selects deterministic mid-bin placement. With ``bounds`` the
    range is clipped to the ray/box overlap; rays missing the box get no samples.
    """
    near, far = sample_ranges(origins, dirs, cfg, bounds)
    n = len(near)
    hit = far > near
    betas = np.full((n, cfg.n_uniform + cfg.n_near_depth), np.inf)
    uni = _stratified(near, np.where(hit, far, near), cfg.n_uniform, rng)
    betas[:, :cfg.n_uniform] = np.where(hit[:, None], uni, np.inf)
    if depths is not None:
        d = np.asarray(depths, dtype=float)
        use = hit & (d > 0) & (d >= near) & (d <= far)
        lo = np.clip(d - cfg.depth_band, near, far)
        hi = np.clip(d + cfg.depth_band, near, far)
        nd = _stratified(lo, hi, cfg.n_near_depth, rng)
        betas[:, cfg.n_uniform:] = np.where(use[:, None], nd, np.inf)
    betas.sort(axis=1)
    return betas, np.where(hit, far, near)


def make_samples(ray: Ray, cfg: SamplingConfig, measured_depth=None, rng=None, bounds=None):
    depths = None if measured_depth is None else np.array([measured_depth], dtype=float)
    betas, _ = make_samples_batch(ray.origin[None], ray.dir[None], cfg, depths, rng, bounds)
    row = betas[0]
    return row[np.isfinite(row)]


def render_ray(field: ForegroundGrid, sphere: Optional[BackgroundSphere], level: str, ray: Ray,
               betas: Sequence[float], beta_far: float | None = None) -> RenderResult:
    """Reference quadrature for one ray.

    The coarse level renders depth only (colour is zero).
    """
    betas = np.asarray(betas, dtype=float)
    if betas.size == 0:
        raise ValueError("need at least one sample")
    if beta_far is None:
        beta_far = SamplingConfig().beta_far
    deltas = np.append(np.diff(betas), beta_far - betas[-1]).clip(min=0.0)
    sig = np.empty(len(betas))
    cols = np.empty((len(betas), 3))
    for i, b in enumerate(betas):
        s = sample_foreground(field, level, ray.origin + b * ray.dir)
        sig[i], cols[i] = s.density, s.colour
    tau = sig * deltas
    alpha = -np.expm1(-tau)
    trans = np.exp(-np.concatenate([[0.0], np.cumsum(tau)[:-1]]))
    w = trans * alpha
    wsum = float(w.sum())
    t_far = float(np.exp(-tau.sum()))
    depth = float((w * betas).sum() / max(wsum, DEPTH_EPS))
    var = float((w * (betas - depth) ** 2).sum() / max(wsum, DEPTH_EPS))
    fg = (w[:, None] * cols).sum(axis=0) if level == "fine" else np.zeros(3)
    use_bg = sphere is not None and level == "fine"
    bg = sample_background(sphere, ray.dir) if use_bg else np.zeros(3)
    return RenderResult(fg + t_far * bg, depth, math.sqrt(var), t_far, wsum, fg)


@dataclass
class RenderBatch:
    colour: np.ndarray       # composite (N, 3)
    colour_fg: np.ndarray    # (N, 3)
    background: np.ndarray   # activated sphere colour per ray, zeros without a sphere
    depth: np.ndarray
    depth_std: np.ndarray
    weight_sum: np.ndarray
    boundary_transmittance: np.ndarray

    @property
    def has_surface(self) -> np.ndarray:
        return self.weight_sum >= NO_SURFACE_WSUM


_DUMMY_COLS = np.zeros((2, 2, 2, 3))
_DUMMY_SPHERE = np.zeros((2, 4, 3))


def _level_inputs(field: ForegroundGrid, sphere, level):
    dens, cols = field.level_arrays(level)
    has_col = cols is not None
    has_bg = sphere is not None and level == "fine"
    return (dens, cols if has_col else _DUMMY_COLS, has_col,
            sphere.grid if has_bg else _DUMMY_SPHERE, has_bg)


def render_rays(field: ForegroundGrid, sphere: Optional[BackgroundSphere], level: str,
                origins, dirs, betas, far) -> RenderBatch:
    origins = np.ascontiguousarray(origins, dtype=float)
    dirs = np.ascontiguousarray(dirs, dtype=float)
    betas = np.ascontiguousarray(betas, dtype=float)
    far = np.ascontiguousarray(far, dtype=float)
    n = len(origins)
    dens, cols, has_col, sph, has_bg = _level_inputs(field, sphere, level)
    fg, bg = np.empty((n, 3)), np.empty((n, 3))
    depth, std, wsum, tfar = np.empty(n), np.empty(n), np.empty(n), np.empty(n)
    K.render_forward(origins, dirs, betas, far, dens, cols, has_col, field.lo, field.hi,
                     sph, has_bg, fg, bg, depth, std, wsum, tfar)
    return RenderBatch(fg + tfar[:, None] * bg, fg, bg, depth, std, wsum, tfar)


@dataclass
class FieldGrads:
    density_coarse: np.ndarray
    density_fine: np.ndarray
    colour_fine: np.ndarray
    sphere: np.ndarray

    @classmethod
    def zeros_like(cls, field: ForegroundGrid, sphere: Optional[BackgroundSphere]):
        return cls(np.zeros_like(field.density_coarse), np.zeros_like(field.density_fine),
                   np.zeros_like(field.colour_fine),
                   np.zeros_like(sphere.grid) if sphere is not None else np.zeros((2, 4, 3)))

    def scale(self, s: float) -> None:
        for a in (self.density_coarse, self.density_fine, self.colour_fine, self.sphere):
            a *= s


def render_rays_backward(field, sphere, level, origins, dirs, betas, far,
                         g_colour, g_depth, g_std, grads: FieldGrads) -> None:
    """Accumulate raw-value gradients of a loss into ``grads`` (in place)."""
    n = len(origins)
    dens, cols, has_col, sph, has_bg = _level_inputs(field, sphere, level)
    g_colour = np.zeros((n, 3)) if g_colour is None else np.ascontiguousarray(g_colour, float)
    g_depth = np.zeros(n) if g_depth is None else np.ascontiguousarray(g_depth, float)
    g_std = np.zeros(n) if g_std is None else np.ascontiguousarray(g_std, float)
    if level == "fine":
        gd, gc = grads.density_fine, grads.colour_fine
    else:
        gd, gc = grads.density_coarse, _DUMMY_COLS.copy()
    gs = grads.sphere if has_bg else _DUMMY_SPHERE.copy()
    K.render_backward(np.ascontiguousarray(origins, float), np.ascontiguousarray(dirs, float),
                      np.ascontiguousarray(betas, float), np.ascontiguousarray(far, float),
                      dens, cols, has_col, field.lo, field.hi, sph, has_bg,
                      g_colour, g_depth, g_std, gd, gc, gs)


# -- preview / dataset image IO ---------------------------------------------------------


def write_ppm(path, rgb) -> None:
    rgb = np.asarray(rgb, dtype=float)
    h, w, _ = rgb.shape
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def quantize_depth(depth) -> np.ndarray:
    """Metres to 16-bit units, rounding half up."""
    q = np.floor(np.asarray(depth, dtype=float) * DEPTH_SCALE + 0.5)
    return np.clip(q, 0, 65535).astype(np.uint16)


def write_pgm16(path, depth) -> None:
    q = quantize_depth(depth)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + q.astype(">u2").tobytes())


def _read_pnm(path, magic):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} image, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    return data[pos:], w, h, maxval


def read_ppm(path) -> np.ndarray:
    body, w, h, maxval = _read_pnm(path, b"P6")
    if maxval != 255 or len(body) < w * h * 3:
        raise ValueError(f"{path}: unsupported or truncated PPM")
    return np.frombuffer(body, np.uint8, w * h * 3).reshape(h, w, 3).astype(float) / 255.0


def read_pgm16(path) -> np.ndarray:
    body, w, h, maxval = _read_pnm(path, b"P5")
    if maxval != 65535 or len(body) < w * h * 2:
        raise ValueError(f"{path}: unsupported or truncated 16-bit PGM")
    return np.frombuffer(body, ">u2", w * h).reshape(h, w).astype(float) / DEPTH_SCALE
