"""Command line entry point: dataset generation, runs, ablations and evaluation."""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .eval import evaluate, write_metrics_csv
from .field import load_field, save_field
from .render import make_samples_batch, pixel_grid, pixel_rays, render_rays, write_pgm16, write_ppm
from .scenegen import SCENARIOS, build_scenario, generate, read_dataset, read_trajectory, write_dataset, \
    write_trajectory
from .slam import SlamConfig, run_sequence

TOGGLES = ("depth_uncertainty", "imu", "background_sphere")
_TOGGLE_FIELD = {"depth_uncertainty": "use_depth_uncertainty", "imu": "use_imu",
                 "background_sphere": "use_background"}

# Budgets used by the acceptance experiments; everything else keeps SlamConfig defaults.
_COMMON = dict(pixels_track=128, pixels_map=512, overlap_K=3, map_every=10, iters_init=150,
               sampling=dict(n_uniform=16, n_near_depth=16), weights=dict(lambda_imu=0.01))
BUDGETS = {
    "low": dict(_COMMON, iters_track=5, iters_map=10),
    "full": dict(_COMMON, iters_track=10, iters_map=60),
}


@dataclass
class RunConfig:
    """A SLAM run: data source, feature toggles and the SLAM settings.

    ``slam`` holds every SlamConfig field except the three feature switches,
    which live in the top-level toggles.
    """

    dataset: Optional[str] = None     # dataset directory; else generated from ``scenario``
    scenario: Optional[str] = None
    n_frames: Optional[int] = None    # scenario length override
    out: str = "run"
    depth_uncertainty: bool = True
    imu: bool = True
    background_sphere: bool = True
    preview_every: int = 50
    eval_every: int = 1
    slam: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dataset is None and self.scenario is None:
            raise ValueError("config needs either 'dataset' or 'scenario'")
        if self.scenario is not None and self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.preview_every < 0 or self.eval_every < 1:
            raise ValueError("preview_every must be >= 0 and eval_every >= 1")
        for t in TOGGLES:
            if not isinstance(getattr(self, t), bool):
                raise ValueError(f"toggle {t!r} must be true or false")
        clash = set(self.slam) & set(_TOGGLE_FIELD.values())
        if clash:
            raise ValueError(f"set feature switches through the toggles, not slam.{sorted(clash)[0]}")
        self.slam = self.slam_config().to_dict()
        for k in _TOGGLE_FIELD.values():
            self.slam.pop(k)

    def slam_config(self) -> SlamConfig:
        d = dict(self.slam)
        for t, f in _TOGGLE_FIELD.items():
            d[f] = getattr(self, t)
        return SlamConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ValueError(f"{path}: invalid JSON ({err})") from err
    if not isinstance(d, dict):
        raise ValueError(f"{path}: top level must be an object")
    return RunConfig.from_dict(d)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def _override(cfg: RunConfig, seed=None, mode=None, out=None) -> RunConfig:
    slam = dict(cfg.slam)
    if seed is not None:
        slam["seed"] = seed
    if mode is not None:
        slam["mode"] = mode
    return replace(cfg, slam=slam, out=out if out is not None else cfg.out)


def load_data(cfg: RunConfig):
    if cfg.dataset is not None:
        return read_dataset(cfg.dataset)
    seed = cfg.slam["seed"]
    return generate(build_scenario(cfg.scenario, seed, n_frames=cfg.n_frames), seed)


# -- outputs -----------------------------------------------------------------------------------


DIAG_COLUMNS = ("frame", "t", "track_flag", "track_iters", "track_loss0", "track_loss", "map_iters",
                "map_loss0", "map_loss", "map_keyframes")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if np.isnan(v) else f"{v:.9g}"
    return str(v)


def write_diagnostics(path, diags) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAG_COLUMNS)
        for k, d in enumerate(diags):
            row = dict(d, frame=k)
            w.writerow([_fmt(row.get(c, "")) for c in DIAG_COLUMNS])


def write_preview(out_dir: Path, k, fld, sph, frame, pose, sampling) -> None:
    uv = pixel_grid(frame.intr)
    o, d = pixel_rays(frame.intr, uv, pose)
    betas, far = make_samples_batch(o, d, sampling, frame.depth.reshape(-1), None, (fld.lo, fld.hi))
    r = render_rays(fld, sph, "fine", o, d, betas, far)
    h, w = frame.intr.height, frame.intr.width
    write_ppm(out_dir / f"frame_{k:06d}.ppm", r.colour.reshape(h, w, 3))
    depth = np.where(r.has_surface, r.depth, 0.0).reshape(h, w)
    write_pgm16(out_dir / f"frame_{k:06d}.pgm", depth)


def execute(cfg: RunConfig) -> dict:
    """Run one configuration end to end and write its outputs; returns the summary."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    scfg = cfg.slam_config()
    ds = load_data(cfg)
    res = run_sequence(ds, scfg)
    (out / "config.json").write_text(dump_config(cfg))
    write_trajectory(out / "trajectory.txt", res.trajectory)
    rep = evaluate(res.trajectory, ds.groundtruth, res.field, res.sphere, ds.frames, scfg.sampling,
                   cfg.eval_every)
    write_metrics_csv(out / "metrics.csv", rep)
    write_diagnostics(out / "diagnostics.csv", res.diagnostics)
    save_field(out / "field.ownf", res.field, res.sphere)
    if cfg.preview_every > 0:
        prev = out / "previews"
        prev.mkdir(exist_ok=True)
        for k in range(0, len(ds.frames), cfg.preview_every):
            write_preview(prev, k, res.field, res.sphere, ds.frames[k], res.trajectory[k][1],
                          scfg.sampling)
    return dict(rmse=rep.rmse, max=rep.max_err, colour_l1=rep.colour_l1, depth_l1=rep.depth_l1)


def ablation_rows(cfg: RunConfig, toggles) -> list[dict]:
    toggles = list(toggles)
    bad = [t for t in toggles if t not in TOGGLES]
    if bad:
        raise ValueError(f"unknown toggle {bad[0]!r}; choose from {', '.join(TOGGLES)}")
    if len(set(toggles)) != len(toggles):
        raise ValueError("toggles listed twice")
    rows = []
    for combo in itertools.product((False, True), repeat=len(toggles)):
        setting = dict(zip(toggles, combo))
        tag = "_".join(f"{t}-{int(v)}" for t, v in setting.items()) or "base"
        sub = replace(cfg, out=str(Path(cfg.out) / tag), **setting)
        summary = execute(sub)
        rows.append(dict({t: getattr(sub, t) for t in TOGGLES}, **summary))
    return rows


ABLATION_COLUMNS = TOGGLES + ("rmse", "max", "colour_l1", "depth_l1")


def write_ablation(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([int(r[c]) if c in TOGGLES else _fmt(float(r[c])) for c in ABLATION_COLUMNS])


# -- commands ----------------------------------------------------------------------------------


def cmd_gen(args) -> int:
    ds = generate(build_scenario(args.scenario, args.seed, n_frames=args.frames), args.seed)
    write_dataset(args.out, ds.frames, ds.groundtruth, ds.measurements, ds.meta)
    print(f"wrote {len(ds.frames)} frames to {args.out}")
    return 0


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    return _override(cfg, args.seed, args.mode, args.out)


def cmd_run(args) -> int:
    cfg = _run_config(args)
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return 0
    s = execute(cfg)
    print(" ".join(f"{k}={_fmt(float(v))}" for k, v in s.items()))
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    toggles = TOGGLES if not args.toggles else [t.strip() for t in args.toggles.split(",") if t.strip()]
    rows = ablation_rows(cfg, toggles)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    write_ablation(Path(cfg.out) / "ablation.csv", rows)
    print(f"wrote {len(rows)} rows to {Path(cfg.out) / 'ablation.csv'}")
    return 0


def cmd_eval(args) -> int:
    ds = read_dataset(args.dataset)
    est = read_trajectory(args.trajectory)
    fld = sph = None
    if args.field:
        fld, sph = load_field(args.field)
    rep = evaluate(est, ds.groundtruth, fld, sph, ds.frames if fld is not None else None)
    if args.out:
        write_metrics_csv(args.out, rep)
    print(f"rmse={rep.rmse:.9g} max={rep.max_err:.9g} colour_l1={_fmt(rep.colour_l1)} "
          f"depth_l1={_fmt(rep.depth_l1)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="owslam", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="write a synthetic dataset")
    g.add_argument("--scenario", required=True, choices=SCENARIOS)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    for name, func, help_ in (("run", cmd_run, "run SLAM from a JSON config"),
                              ("ablate", cmd_ablate, "run toggle combinations")):
        r = sub.add_parser(name, help=help_)
        r.add_argument("--config", required=True)
        r.add_argument("--seed", type=int, default=None)
        r.add_argument("--mode", choices=("sequential", "parallel"), default=None)
        r.add_argument("--out", default=None)
        if name == "run":
            r.add_argument("--dump-config", action="store_true",
                           help="print the resolved config and exit")
        else:
            r.add_argument("--toggles", default=None,
                           help=f"comma-separated subset of {','.join(TOGGLES)}")
        r.set_defaults(func=func)

    e = sub.add_parser("eval", help="metrics for a trajectory (and optional field)")
    e.add_argument("--dataset", required=True)
    e.add_argument("--trajectory", required=True)
    e.add_argument("--field", default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as err:
        print(f"owslam: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
