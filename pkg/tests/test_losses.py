import numpy as np
import pytest

from owslam.field import new_field
from owslam.geometry import Pose, exp_so3
from owslam.losses import (
    LossWeights,
    PixelBatch,
    PixelObservation,
    colour_grad,
    colour_loss,
    connecting_rmi,
    imu_tracking_loss,
    imu_whitened_residual,
    mapping_depth_grad,
    mapping_depth_loss,
    mapping_objective,
    pose_fd_grad,
    rmi_mapping_loss,
    tracking_depth_grad,
    tracking_depth_loss,
    tracking_objective,
)
from owslam.motion import (
    NoiseModel,
    Rmi,
    VelocityMeasurement,
    imu_prior_error,
    integrate,
    rmi_update,
    simulate_velocities,
)
from owslam.render import (
    FieldGrads,
    Intrinsics,
    RenderResult,
    SamplingConfig,
    make_samples_batch,
    pixel_rays,
    render_rays,
    render_rays_backward,
)


def obs(d, d_hat, sigma, std=0.0, colour=(1, 1, 1), pred=(0.5, 0.5, 0.5), levels=("fine",)):
    r = RenderResult(np.array(pred, float), d_hat, std, 0.0, weight_sum=1.0)
    return PixelObservation(np.array(colour, float), d, sigma, {lv: r for lv in levels})


def test_depth_loss_examples():
    assert mapping_depth_loss([obs(2.0, 2.5, 0.25)]) == pytest.approx(2.0, abs=1e-15)
    assert mapping_depth_loss([obs(2.0, 2.0, 0.25, levels=("fine", "coarse"))]) == 0.0
    assert mapping_depth_loss([obs(2.0, 2.5, 0.25, levels=("fine", "coarse"))]) == pytest.approx(4.0)
    assert tracking_depth_loss([obs(2.0, 2.5, 0.3, std=0.4)]) == pytest.approx(1.0, abs=1e-15)
    assert tracking_depth_loss([obs(2.0, 2.5, 0.3, std=0.4, levels=("fine", "coarse"))]) == \
        pytest.approx(2.0, abs=1e-15)
    # zero rendered spread reduces to the mapping weighting
    assert tracking_depth_loss([obs(2.0, 2.5, 0.25)]) == mapping_depth_loss([obs(2.0, 2.5, 0.25)])


def test_colour_loss_examples():
    assert colour_loss([obs(1, 1, 1)]) == pytest.approx(1.5)
    assert colour_loss([obs(1, 1, 1, pred=(1, 1, 1))]) == 0.0
    rng = np.random.default_rng(0)
    items = [obs(1, 1, 1, colour=rng.uniform(size=3), pred=rng.uniform(size=3)) for _ in range(20)]
    a = colour_loss(items)
    rng.shuffle(items)
    assert colour_loss(items) == pytest.approx(a, abs=1e-15)


def test_invalid_depth_and_no_surface_excluded():
    a = obs(0.0, 2.0, 0.0)
    b = PixelObservation(np.ones(3), 2.0, 0.1,
                         {"fine": RenderResult(np.ones(3) * 0.5, 5.0, 0.0, 1.0, weight_sum=1e-4)})
    batch = PixelBatch.from_observations([a, b])
    assert mapping_depth_loss(batch) == 0.0
    assert tracking_depth_loss(batch) == 0.0
    assert batch.no_depth
    assert colour_loss(batch) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        obs(2.0, 2.0, 0.0)


def test_scaling_law():
    rng = np.random.default_rng(1)
    items = [obs(d, d + rng.normal(), s, levels=("fine", "coarse"))
             for d, s in zip(rng.uniform(1, 4, 30), rng.uniform(0.01, 0.5, 30))]
    base = mapping_depth_loss(items)
    for c in (2.0, 0.1, 7.5):
        scaled = [obs(o.depth, o.render["fine"].depth, c * o.depth_sigma, levels=("fine", "coarse"))
                  for o in items]
        assert mapping_depth_loss(scaled) == pytest.approx(base / c, rel=1e-12)


def test_nonnegative_random():
    rng = np.random.default_rng(2)
    for _ in range(100):
        items = [obs(rng.uniform(0, 3), rng.uniform(0, 3), rng.uniform(0.01, 1), rng.uniform(0, 1),
                     rng.uniform(size=3), rng.uniform(size=3)) for _ in range(5)]
        assert mapping_depth_loss(items) >= 0
        assert tracking_depth_loss(items) >= 0
        assert colour_loss(items) >= 0


# -- motion priors ------------------------------------------------------------------------


def _pose(rng, s=1.0):
    return Pose(exp_so3(rng.normal(size=3) * s), rng.normal(size=3) * s)


def test_imu_loss_consistent_is_zero():
    rng = np.random.default_rng(3)
    p0 = _pose(rng)
    v, u, T = rng.normal(size=3), rng.normal(size=3) * 0.3, 0.05
    p1 = Pose(p0.C @ exp_so3(u * T), p0.r + p0.C @ v * T)
    m = VelocityMeasurement(v, u, 0.0, T, np.eye(3) * 1e-4, np.eye(3) * 1e-6)
    assert imu_tracking_loss(p0, p1, m) == pytest.approx(0.0, abs=1e-12)


def test_imu_loss_quadratic_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p0, p1 = _pose(rng), _pose(rng)
        A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        m = VelocityMeasurement(rng.normal(size=3), rng.normal(size=3), 0.0, 0.1,
                                A @ A.T + 0.1 * np.eye(3), B @ B.T + 0.1 * np.eye(3))
        e_C, e_r, cC, cr = imu_prior_error(p0, p1, m)
        want = e_C @ np.linalg.solve(cC, e_C) + e_r @ np.linalg.solve(cr, e_r)
        assert imu_tracking_loss(p0, p1, m) == pytest.approx(want, rel=1e-12, abs=1e-12)
        res = imu_whitened_residual(p0, p1, m)
        assert res @ res == pytest.approx(want, rel=1e-9)


def test_imu_loss_isotropic_and_singular():
    rng = np.random.default_rng(5)
    p0, p1 = _pose(rng, 0.2), _pose(rng, 0.2)
    sv, su = 0.02, 0.003
    m = VelocityMeasurement(rng.normal(size=3), np.zeros(3), 0.0, 0.1, np.eye(3) * sv**2,
                            np.eye(3) * su**2)
    e_C, e_r, cC, _ = imu_prior_error(p0, p1, m)
    # with u = 0 and isotropic cov_u the orientation covariance is T^2 su^2 (J_l^-1 J_l^-T)
    want = e_C @ np.linalg.solve(cC, e_C) + e_r @ e_r / sv**2
    assert imu_tracking_loss(p0, p1, m) == pytest.approx(want, rel=1e-12)
    m0 = VelocityMeasurement(m.v, m.u, 0.0, 0.1)
    val, flag = imu_tracking_loss(p0, p1, m0, return_flag=True)
    assert flag and np.isfinite(val) and val > 0


def _chain(seed=6, n=8, dt=0.01):
    rng = np.random.default_rng(seed)
    traj = []
    for k in range(n + 1):
        t = k * dt
        traj.append((t, Pose(exp_so3([0.3 * t, np.sin(t), 0.1]), np.array([t, t * t, 0.2]))))
    meas = simulate_velocities(traj, NoiseModel.isotropic(0.01, 0.001, seed))
    per_step = [integrate([m], m.t) for m in meas]
    return traj, meas, per_step


def test_rmi_loss_zero_and_composed():
    traj, meas, steps = _chain()
    kfs = [traj[0], traj[3], traj[7]]
    rmis = [connecting_rmi(steps, kfs[0][0], kfs[1][0]), connecting_rmi(steps, kfs[1][0], kfs[2][0])]
    # noise-free chain -> 0
    clean = [integrate([VelocityMeasurement(m.v, m.u, m.t, m.T)], m.t) for m in
             simulate_velocities(traj, NoiseModel.zero())]
    rc = [connecting_rmi(clean, 0.0, 0.03), connecting_rmi(clean, 0.03, 0.07)]
    assert rmi_mapping_loss(kfs, rc) == pytest.approx(0.0, abs=1e-20)
    # subset {2, 4}: composed from stored pieces equals direct integration
    direct = integrate(meas[2:4], meas[2].t)
    composed = connecting_rmi(steps, traj[2][0], traj[4][0])
    kf24 = [traj[2], (traj[4][0], traj[4][1].perturbed([0.01, 0, 0, 0, 0.02, 0]))]
    assert rmi_mapping_loss(kf24, [composed]) == pytest.approx(rmi_mapping_loss(kf24, [direct]),
                                                               abs=1e-9)
    assert rmi_mapping_loss(kfs, rmis) > 0
    with pytest.raises(ValueError):
        connecting_rmi(steps[:3] + steps[4:], 0.0, 0.06)
    with pytest.raises(ValueError):
        rmi_mapping_loss(kfs, rmis[:1])


def test_rmi_loss_identity_vs_covariance():
    traj, _, steps = _chain(7)
    r = connecting_rmi(steps, 0.0, 0.05)
    r_eye = Rmi(r.dC, r.dr, np.eye(6), r.t_i, r.t_k)
    kfs = [traj[0], (traj[5][0], traj[5][1].perturbed([0.02, -0.01, 0, 0.01, 0, 0.03]))]
    assert rmi_mapping_loss(kfs, [r_eye], "covariance") == pytest.approx(
        rmi_mapping_loss(kfs, [r_eye], "identity"), rel=1e-12)
    with pytest.raises(ValueError):
        rmi_mapping_loss(kfs, [r_eye], "bogus")


# -- objectives ----------------------------------------------------------------------------


def test_objective_additivity():
    rng = np.random.default_rng(8)
    items = [obs(rng.uniform(1, 3), rng.uniform(1, 3), 0.1, rng.uniform(0, 0.3), rng.uniform(size=3),
                 rng.uniform(size=3), levels=("fine", "coarse")) for _ in range(10)]
    p0, p1 = _pose(rng, 0.3), _pose(rng, 0.3)
    m = VelocityMeasurement(rng.normal(size=3), rng.normal(size=3), 0.0, 0.05,
                            np.eye(3) * 1e-2, np.eye(3) * 1e-3)
    w = LossWeights(lambda_t=0.7, lambda_imu=0.3)
    want = tracking_depth_loss(items) + 0.7 * colour_loss(items) + 0.3 * imu_tracking_loss(p0, p1, m)
    assert tracking_objective(items, p1, p0, m, w) == want
    w0 = LossWeights(lambda_t=0.7, lambda_imu=0.0)
    assert tracking_objective(items, p1, p0, m, w0) == tracking_depth_loss(items) + 0.7 * colour_loss(items)

    traj, _, steps = _chain(9)
    kfs = [traj[0], (traj[4][0], traj[4][1].perturbed([0.01, 0, 0, 0, 0.01, 0]))]
    rmis = [connecting_rmi(steps, 0.0, 0.04)]
    batches = [items[:5], items[5:]]
    w = LossWeights(lambda_m=0.3, lambda_rmi=2.0)
    want = sum(mapping_depth_loss(b) + 0.3 * colour_loss(b) for b in batches) + \
        2.0 * rmi_mapping_loss(kfs, rmis)
    assert mapping_objective(batches, kfs, rmis, w) == want
    w0 = LossWeights(lambda_m=0.3, lambda_rmi=0.0)
    assert mapping_objective(batches, kfs, rmis, w0) == \
        sum(mapping_depth_loss(b) + 0.3 * colour_loss(b) for b in batches)
    perfect = [obs(2.0, 2.0, 0.1, colour=(0.3, 0.3, 0.3), pred=(0.3, 0.3, 0.3))]
    assert mapping_objective([perfect], [traj[0]], [], LossWeights()) == 0.0


# -- gradients through the renderer -----------------------------------------------------------


def _scene(seed=10):
    grid, sph = new_field(([-1.0] * 3, [1.0] * 3), res_coarse=4, res_fine=5, sphere_h=5,
                          sphere_w=8, init_seed=seed)
    rng = np.random.default_rng(seed)
    grid.density_fine[:] = rng.normal(0.5, 0.8, size=grid.density_fine.shape)
    grid.density_coarse[:] = rng.normal(0.5, 0.8, size=grid.density_coarse.shape)
    grid.colour_fine[:] = rng.normal(size=grid.colour_fine.shape)
    sph.grid[:] = rng.normal(size=sph.grid.shape)
    intr = Intrinsics(8.0, 8.0, 4.0, 3.0, 8, 6)
    pose = Pose(exp_so3([0.05, 0.1, 0.0]), np.array([0.1, -0.05, -2.5]))
    uv = np.stack(np.meshgrid(np.arange(8) + 0.5, np.arange(6) + 0.5), -1).reshape(-1, 2)
    n = len(uv)
    meas_depth = rng.uniform(1.8, 3.2, size=n)
    meas_depth[::7] = 0.0
    return grid, sph, intr, pose, uv, meas_depth, rng.uniform(size=(n, 3)), rng.uniform(0.02, 0.1, n)


def _batch(grid, sph, intr, pose, uv, depth, colour, sigma, betas=None):
    o, d = pixel_rays(intr, uv, pose)
    if betas is None:
        betas, far = make_samples_batch(o, d, SamplingConfig(0.1, 5.0, 10, 4), depth,
                                        bounds=(grid.lo, grid.hi))
    else:
        betas, far = betas
    renders = {lv: render_rays(grid, sph, lv, o, d, betas, far) for lv in ("fine", "coarse")}
    return PixelBatch(colour, depth, sigma, renders), (o, d, betas, far)


@pytest.mark.parametrize("kind", ["mapping", "tracking"])
def test_grid_gradients_match_fd(kind):
    grid, sph, intr, pose, uv, depth, colour, sigma = _scene()
    w = LossWeights()
    batch, (o, d, betas, far) = _batch(grid, sph, intr, pose, uv, depth, colour, sigma)

    def value():
        b, _ = _batch(grid, sph, intr, pose, uv, depth, colour, sigma, (betas, far))
        if kind == "mapping":
            return mapping_depth_loss(b) + w.lambda_m * colour_loss(b)
        return tracking_depth_loss(b) + w.lambda_t * colour_loss(b)

    grads = FieldGrads.zeros_like(grid, sph)
    lam = w.lambda_m if kind == "mapping" else w.lambda_t
    gc = lam * colour_grad(batch)
    if kind == "mapping":
        gdep = mapping_depth_grad(batch)
        gstd = {lv: None for lv in gdep}
    else:
        tg = tracking_depth_grad(batch)
        gdep = {lv: tg[lv][0] for lv in tg}
        gstd = {lv: tg[lv][1] for lv in tg}
    render_rays_backward(grid, sph, "fine", o, d, betas, far, gc, gdep["fine"], gstd["fine"], grads)
    render_rays_backward(grid, sph, "coarse", o, d, betas, far, None, gdep["coarse"],
                         gstd["coarse"], grads)
    eps = 1e-4
    checked = 0
    for arr, g in [(grid.density_fine, grads.density_fine), (grid.density_coarse, grads.density_coarse),
                   (grid.colour_fine, grads.colour_fine), (sph.grid, grads.sphere)]:
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in np.argsort(-np.abs(gflat))[:12]:
            if abs(gflat[i]) < 1e-5:
                continue
            old = flat[i]
            flat[i] = old + eps
            lp = value()
            flat[i] = old - eps
            lm = value()
            flat[i] = old
            assert gflat[i] == pytest.approx((lp - lm) / (2 * eps), rel=1e-4)
            checked += 1
    assert checked >= 20


def test_imu_pose_gradient_matches_fd():
    rng = np.random.default_rng(11)
    p0 = _pose(rng, 0.3)
    m = VelocityMeasurement(rng.normal(size=3), rng.normal(size=3) * 0.5, 0.0, 0.05,
                            np.eye(3) * 1e-2, np.eye(3) * 1e-3)
    p1 = Pose(p0.C @ exp_so3(m.u * m.T + 0.01), p0.r + p0.C @ m.v * m.T + 0.003)
    f = lambda p: imu_tracking_loss(p0, p, m)
    g_fine = pose_fd_grad(f, p1, eps=1e-7)
    g = pose_fd_grad(f, p1, eps=1e-4)
    np.testing.assert_allclose(g, g_fine, rtol=1e-3)
    # Gauss-Newton gradient (2 J^T r) agrees with the full gradient up to the covariance's pose dependence
    J = np.stack([(imu_whitened_residual(p0, p1.perturbed(e), m) -
                   imu_whitened_residual(p0, p1.perturbed(-e), m)) / 2e-6 for e in np.eye(6) * 1e-6], 1)
    r = imu_whitened_residual(p0, p1, m)
    np.testing.assert_allclose(2 * J.T @ r, g_fine, rtol=0.05, atol=1e-3 * np.abs(g_fine).max())
