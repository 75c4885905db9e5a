"""End-to-end acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line (repeated in the terminal summary)
and then asserts it. Criteria 5-9 run the full SLAM loop on generated data
for ten seeds and take about an hour together on one core; deselect them with
``-m "not acceptance"``.
"""
import time
from functools import lru_cache

import numpy as np
import pytest

import test_geometry as tg
import test_losses as tl
import test_motion as tm
import test_render as tr
from owslam.cli import BUDGETS, RunConfig, execute
from owslam.eval import evaluate, trajectory_metrics
from owslam.motion import TIME_TOL, dead_reckon
from owslam.scenegen import build_scenario, generate
from owslam.slam import run_sequence

SEEDS = range(10)
MINUTE = 60.0


def _suite(report, criterion, limit, checks):
    t0 = time.perf_counter()
    failures = []
    for fn, args in checks:
        try:
            fn(*args)
        except AssertionError as err:
            failures.append(f"{fn.__name__}: {str(err).splitlines()[0] if str(err) else 'assertion'}")
    dt = time.perf_counter() - t0
    ok = not failures and dt < limit
    detail = f"{len(checks)} checks, {len(failures)} failed, {dt:.2f}s (limit {limit:.0f}s)"
    if failures:
        detail += "; " + "; ".join(failures)
    report(criterion, ok, detail)
    assert ok, detail


def test_c1_lie_group(report):
    _suite(report, 1, 1.0, [(tg.test_log_roundtrip_random, ()),
                            (tg.test_left_jacobian_finite_difference, ())])


def test_c2_preintegration(report):
    _suite(report, 2, 30.0, [(tm.test_dead_reckon_inverts_simulation_1000_steps, ()),
                             (tm.test_rmi_split_equals_direct, ()),
                             (tm.test_rmi_compose_any_partition, ()),
                             (tm.test_rmi_covariance_vs_monte_carlo, ())])


def test_c3_rendering(report):
    _suite(report, 3, MINUTE, [(tr.test_conservation_and_batch_agreement, ()),
                               (tr.test_composite_identities, ()),
                               (tr.test_transmittance_split, ()),
                               (tr.test_dense_quadrature_oracle, ()),
                               (tr.test_render_gradients_match_fd, ("fine",)),
                               (tr.test_render_gradients_match_fd, ("coarse",))])


def test_c4_losses(report):
    _suite(report, 4, MINUTE, [(tl.test_depth_loss_examples, ()),
                               (tl.test_colour_loss_examples, ()),
                               (tl.test_scaling_law, ()),
                               (tl.test_imu_loss_consistent_is_zero, ()),
                               (tl.test_rmi_loss_zero_and_composed, ()),
                               (tl.test_objective_additivity, ()),
                               (tl.test_grid_gradients_match_fd, ("mapping",)),
                               (tl.test_grid_gradients_match_fd, ("tracking",)),
                               (tl.test_imu_pose_gradient_matches_fd, ())])


# -- end-to-end experiments --------------------------------------------------------------------


@lru_cache(maxsize=None)
def dataset(scenario, seed, n_frames):
    # noisy depth and noisy velocities, as generated by default
    return generate(build_scenario(scenario, seed, n_frames=n_frames), seed)


def run(scenario, seed, n_frames, budget, evaluate_images=False, **toggles):
    ds = dataset(scenario, seed, n_frames)
    cfg = RunConfig(scenario=scenario, n_frames=n_frames, slam=dict(BUDGETS[budget], seed=seed),
                    **toggles).slam_config()
    out = run_sequence(ds, cfg)
    if evaluate_images:
        return evaluate(out.trajectory, ds.groundtruth, out.field, out.sphere, ds.frames, cfg.sampling)
    return evaluate(out.trajectory, ds.groundtruth)


def _verdict(report, criterion, wins, need, dt, limit, detail):
    ok = wins >= need and (limit is None or dt < limit)
    lim = f" (limit {limit / MINUTE:.0f} min)" if limit is not None else ""
    report(criterion, ok, f"{wins}/10 seeds (need {need}), {dt / MINUTE:.1f} min{lim}; {detail}")
    assert ok


@pytest.mark.acceptance
def test_c5_imu_tracking_benefit(report):
    t0 = time.perf_counter()
    ratios = []
    for seed in SEEDS:
        with_imu = run("room-orbit", seed, 200, "low", imu=True).rmse
        without = run("room-orbit", seed, 200, "low", imu=False).rmse
        ratios.append(with_imu / without)
    dt = time.perf_counter() - t0
    wins = sum(r <= 0.5 for r in ratios)
    _verdict(report, 5, wins, 8, dt, 20 * MINUTE,
             "RMSE ratio with/without IMU " + " ".join(f"{r:.3f}" for r in ratios))


@pytest.mark.acceptance
def test_c6_depth_uncertainty_benefit(report):
    t0 = time.perf_counter()
    pairs = []
    for seed in SEEDS:
        w = run("room-orbit", seed, 60, "full", evaluate_images=True, depth_uncertainty=True).depth_l1
        u = run("room-orbit", seed, 60, "full", evaluate_images=True, depth_uncertainty=False).depth_l1
        pairs.append((w, u))
    dt = time.perf_counter() - t0
    wins = sum(w < u for w, u in pairs)
    _verdict(report, 6, wins, 8, dt, 20 * MINUTE,
             "depth L1 weighted/unweighted " + " ".join(f"{w:.4f}/{u:.4f}" for w, u in pairs))


@pytest.mark.acceptance
def test_c7_background_sphere_benefit(report):
    t0 = time.perf_counter()
    pairs = []
    for seed in SEEDS:
        bg = run("bg-truncated", seed, 40, "full", evaluate_images=True, background_sphere=True).colour_l1
        fg = run("bg-truncated", seed, 40, "full", evaluate_images=True, background_sphere=False).colour_l1
        pairs.append((bg, fg))
    dt = time.perf_counter() - t0
    wins = sum(bg <= 0.9 * fg for bg, fg in pairs)
    _verdict(report, 7, wins, 8, dt, 20 * MINUTE,
             "colour L1 reduction " + " ".join(f"{1 - bg / fg:.1%}" for bg, fg in pairs))


@pytest.mark.acceptance
def test_c8_determinism(report, tmp_path):
    cfg = RunConfig(scenario="room-orbit", n_frames=30, preview_every=0,
                    slam=dict(BUDGETS["low"], seed=4, mode="sequential"))
    for name in ("a", "b"):
        execute(RunConfig.from_dict(dict(cfg.to_dict(), out=str(tmp_path / name))))
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("trajectory.txt", "metrics.csv")}
    ok = all(same.values())
    report(8, ok, ", ".join(f"{f} {'identical' if s else 'DIFFERS'}" for f, s in same.items()))
    assert ok


def dead_reckoning_rmse(ds):
    dr = dead_reckon(ds.initial_pose, ds.measurements)
    times = np.array([t for t, _ in dr])
    est = []
    for f in ds.frames:
        k = int(np.argmin(np.abs(times - f.t)))
        assert abs(times[k] - f.t) <= TIME_TOL
        est.append((f.t, dr[k][1]))
    return trajectory_metrics(est, ds.groundtruth)[0]


@pytest.mark.acceptance
def test_c9_dead_reckoning_sanity(report):
    t0 = time.perf_counter()
    pairs = []
    for seed in SEEDS:
        slam = run("room-orbit", seed, 200, "full", imu=True).rmse
        pairs.append((dead_reckoning_rmse(dataset("room-orbit", seed, 200)), slam))
    dt = time.perf_counter() - t0
    wins = sum(d > s for d, s in pairs)
    _verdict(report, 9, wins, 9, dt, None,
             "RMSE dead-reckoning/SLAM " + " ".join(f"{d:.4f}/{s:.4f}" for d, s in pairs))
