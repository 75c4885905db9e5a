"""Trajectory error and image-reconstruction metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .field import BackgroundSphere, ForegroundGrid
from .motion import TIME_TOL
from .render import NO_SURFACE_WSUM, Frame, SamplingConfig, make_samples_batch, pixel_grid, pixel_rays, \
    render_rays


@dataclass
class MetricReport:
    rmse: float = math.nan
    max_err: float = math.nan
    colour_l1: float = math.nan
    depth_l1: float = math.nan
    times: list = field(default_factory=list)
    pos_err: list = field(default_factory=list)
    colour_series: list = field(default_factory=list)
    depth_series: list = field(default_factory=list)


def position_errors(est, gt) -> np.ndarray:
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    for (ta, _), (tb, _) in zip(est, gt):
        if abs(ta - tb) > TIME_TOL:
            raise ValueError(f"timestamp mismatch: {ta} vs {tb}")
    return np.array([np.linalg.norm(a.r - b.r) for (_, a), (_, b) in zip(est, gt)])


def trajectory_metrics(est, gt) -> tuple[float, float]:
    """Positional RMSE and max error, no alignment (shared initial pose)."""
    e = position_errors(est, gt)
    if len(e) == 0:
        raise ValueError("empty trajectory")
    return float(np.sqrt(np.mean(e**2))), float(e.max())


def frame_l1(fld: ForegroundGrid, sph: Optional[BackgroundSphere], frame: Frame, pose,
             sampling: SamplingConfig = SamplingConfig()) -> tuple[float, float]:
    """(colour L1, depth L1) of one full image rendered with mid-bin samples.

    Colour: composite, channels summed, averaged over all pixels. Depth: fine
    level, over pixels with a valid measurement inside the map box and a
    rendered surface; NaN when there are none.
    """
    uv = pixel_grid(frame.intr)
    o, d = pixel_rays(frame.intr, uv, pose)
    depth = frame.depth.reshape(-1)
    betas, far = make_samples_batch(o, d, sampling, depth, None, (fld.lo, fld.hi))
    r = render_rays(fld, sph, "fine", o, d, betas, far)
    col = float(np.abs(r.colour - frame.rgb.reshape(-1, 3)).sum(axis=1).mean())
    m = (depth > 0) & (depth <= far) & (r.weight_sum >= NO_SURFACE_WSUM)
    dl1 = float(np.abs(depth[m] - r.depth[m]).mean()) if m.any() else math.nan
    return col, dl1


def reconstruction_l1(fld, sph, frames: Sequence[Frame], poses, sampling: SamplingConfig = SamplingConfig()):
    """Mean colour and depth L1 over frames; returns (colour, depth, per-frame list)."""
    per = [frame_l1(fld, sph, f, p, sampling) for f, p in zip(frames, poses)]
    cols = [c for c, _ in per]
    deps = [d for _, d in per if not math.isnan(d)]
    return (float(np.mean(cols)) if cols else math.nan,
            float(np.mean(deps)) if deps else math.nan, per)


def evaluate(est, gt, fld=None, sph=None, frames=None, sampling: SamplingConfig = SamplingConfig(),
             eval_every: int = 1) -> MetricReport:
    e = position_errors(est, gt)
    rep = MetricReport(*trajectory_metrics(est, gt))
    rep.times = [t for t, _ in est]
    rep.pos_err = e.tolist()
    rep.colour_series = [math.nan] * len(est)
    rep.depth_series = [math.nan] * len(est)
    if fld is not None and frames is not None:
        idx = list(range(0, len(frames), max(1, eval_every)))
        c, d, per = reconstruction_l1(fld, sph, [frames[i] for i in idx], [est[i][1] for i in idx],
                                      sampling)
        rep.colour_l1, rep.depth_l1 = c, d
        for i, (ci, di) in zip(idx, per):
            rep.colour_series[i] = ci
            rep.depth_series[i] = di
    return rep


def _num(x) -> str:
    return "" if isinstance(x, float) and math.isnan(x) else f"{x:.9g}"


def write_metrics_csv(path, rep: MetricReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "t", "pos_err", "colour_l1", "depth_l1"])
        for k, t in enumerate(rep.times):
            w.writerow([k, _num(t), _num(rep.pos_err[k]), _num(rep.colour_series[k]),
                        _num(rep.depth_series[k])])
        w.writerow(["summary", "", _num(rep.rmse), _num(rep.colour_l1), _num(rep.depth_l1)])
        w.writerow(["max", "", _num(rep.max_err), "", ""])


def read_metrics_csv(path) -> dict:
    """Summary values of a metrics CSV: rmse, max, colour_l1, depth_l1."""
    rows = list(csv.reader(Path(path).read_text().splitlines()))
    out = {}
    for r in rows:
        if r and r[0] == "summary":
            out["rmse"] = float(r[2])
            out["colour_l1"] = float(r[3]) if r[3] else math.nan
            out["depth_l1"] = float(r[4]) if r[4] else math.nan
        elif r and r[0] == "max":
            out["max"] = float(r[2])
    if "rmse" not in out:
        raise ValueError(f"{path}: no summary row")
    return out
