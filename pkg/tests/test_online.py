"""Tests for the online estimator: schedules, single steps, full runs,
and the long-run likelihood geometry of the linear model."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mkv import (
    EstimatorDiverged,
    EstimatorState,
    InitialLaw,
    LearningRate,
    Schedule,
    SimConfig,
    ThetaInit,
    TrajectoryBatch,
    ValidationError,
    asymptotic_contrast_linear,
    asymptotic_loglik_hessian_linear,
    asymptotic_loglik_ips_linear,
    ips_invariant_moments_linear,
    linear_mean_field,
    lr_eval,
    lyapunov_covariance_linear,
    online_step_averaged,
    online_step_per_particle,
    online_trials_linear,
    online_trials_opinion,
    opinion_dynamics,
    run_online,
    simulate_ips,
)
from mkv.models import drift_values
from mkv import _rng


# ==== learning-rate schedules ====


def test_schedule_values():
    assert Schedule("constant", 0.3).value(0.0) == 0.3
    assert Schedule("constant", 0.3).value(1e6) == 0.3
    s = Schedule("powmin", 0.05, 0.51)
    assert s.value(0.0) == 0.05
    assert s.value(0.5) == 0.05  # t^-alpha > 1 below t = 1
    assert np.isclose(s.value(100.0), 0.004774962930107179, rtol=1e-12)
    # subnormal t once overflowed t^-alpha; the min with a is still a
    assert Schedule("powmin", 1.0, 1.0).value(2.225073858507203e-309) == 1.0
    assert Schedule("powmin", 1.0, 1.0).value(5e-324) == 1.0
    r = Schedule("reciprocal", 0.3, 5.0)
    assert r.value(7.0) == 0.3 / 12.0


def test_schedule_validation():
    with pytest.raises(ValidationError):
        Schedule("constant", -0.1)
    with pytest.raises(ValidationError):
        Schedule("powmin", 0.05, 0.5)  # alpha must exceed 1/2
    with pytest.raises(ValidationError):
        Schedule("powmin", 0.05, 1.2)
    with pytest.raises(ValidationError):
        Schedule("reciprocal", 0.0, 1.0)
    with pytest.raises(ValidationError):
        Schedule("warmup", 0.1)
    Schedule("powmin", 0.05, 1.0)  # alpha = 1 allowed
    Schedule("constant", 0.0)  # frozen coordinate allowed


@given(
    kind=st.sampled_from(["constant", "powmin", "reciprocal"]),
    a=st.floats(0.01, 10.0),
    b=st.floats(0.51, 1.0),
    t1=st.floats(0.0, 1e4),
    dt=st.floats(0.0, 1e4),
)
@settings(max_examples=200, deadline=None)
def test_schedules_are_nonincreasing(kind, a, b, t1, dt):
    s = Schedule(kind, a, b)
    assert s.value(t1 + dt) <= s.value(t1) + 1e-15
    assert s.value(t1) >= 0.0


def test_learning_rate_parse():
    lr = LearningRate.parse("powmin:0.05,0.51;constant:0")
    assert lr.schedules == (Schedule("powmin", 0.05, 0.51), Schedule("constant", 0.0))
    assert LearningRate.parse("constant:0.1", p=3) == LearningRate.constant(0.1, p=3)
    assert LearningRate.parse("reciprocal:2,8").schedules[0] == Schedule("reciprocal", 2.0, 8.0)
    for bad in ("", "constant:", "powmin:0.05", "constant:0.1;", "nope:1,2", "constant:x"):
        if bad == "constant:0.1;":
            LearningRate.parse(bad)  # trailing separator is tolerated
        else:
            with pytest.raises(ValidationError):
                LearningRate.parse(bad)
    with pytest.raises(ValidationError):
        LearningRate.parse("constant:1;constant:2", p=3)


def test_lr_eval():
    lr = LearningRate.parse("constant:0.2;powmin:0.1,0.6", p=2)
    v = lr_eval(lr, 0.0)
    assert v.shape == (2,)
    assert v[0] == 0.2 and v[1] == 0.1
    assert lr_eval(lr, 32.0)[1] == pytest.approx(0.1 * 32.0**-0.6, rel=1e-12)
    with pytest.raises(ValidationError):
        lr_eval(lr, -1.0)
    with pytest.raises(ValidationError):
        lr_eval(lr, float("nan"))


def test_theta_init_parse_and_sample():
    init = ThetaInit.parse("const:2;uniform:1.5,2.5")
    rng = np.random.default_rng(3)
    for _ in range(5):
        v = init.sample(rng)
        assert v[0] == 2.0
        assert 1.5 <= v[1] <= 2.5
    assert ThetaInit.parse("uniform:0,1", p=2).coords == (("uniform", 0.0, 1.0),) * 2
    for bad in ("", "uniform:1", "uniform:2,1", "const:a", "point:1"):
        with pytest.raises(ValidationError):
            ThetaInit.parse(bad)
    with pytest.raises(ValidationError):
        ThetaInit.parse("const:1;const:2", p=3)


# ==== single updates ====


def test_averaged_step_matches_hand_computation():
    # n=2, x=(1,3), x1=(1.5,2.5), theta=(1,0.5), dt=0.1, gamma=(0.1,0.2):
    # B = (-0.5, -3.5), resid = (0.55, -0.15),
    # sum g1*resid = -0.1, sum g2*resid = 0.7,
    # incr = (0.1*(-0.1)/2, 0.2*0.7/2) = (-0.005, 0.07)
    model = linear_mean_field(sigma=1.0)
    state = EstimatorState(theta=np.array([1.0, 0.5]), t=0.0, mode="averaged")
    out = online_step_averaged(
        model, state, np.array([1.0, 3.0]), np.array([1.5, 2.5]), 0.1, np.array([0.1, 0.2])
    )
    assert np.allclose(out.theta, [0.995, 0.57], rtol=0, atol=1e-15)
    assert out.step == 1
    assert out.t == 0.1


def test_per_particle_step_matches_hand_computation():
    # thetas ((1,0.5),(2,0)): B = (-0.5,-6), resid = (0.55, 0.1),
    # particle 1: incr = (0.1*(-1)*0.55, 0.2*(1)*0.55) = (-0.055, 0.11)
    # particle 2: incr = (0.1*(-3)*0.1, 0.2*(-1)*0.1) = (-0.03, -0.02)
    model = linear_mean_field(sigma=1.0)
    thetas = np.array([[1.0, 0.5], [2.0, 0.0]])
    state = EstimatorState(theta=thetas, t=0.0, mode="per-particle")
    out = online_step_per_particle(
        model, state, np.array([1.0, 3.0]), np.array([1.5, 2.5]), 0.1, np.array([0.1, 0.2])
    )
    assert np.allclose(out.theta, [[0.945, 0.61], [1.97, -0.02]], rtol=0, atol=1e-15)


def test_step_rejects_mode_mismatch():
    model = linear_mean_field()
    avg = EstimatorState(theta=np.array([1.0, 0.5]), t=0.0, mode="averaged")
    pp = EstimatorState(theta=np.ones((2, 2)), t=0.0, mode="per-particle")
    x = np.array([0.0, 1.0])
    with pytest.raises(ValidationError):
        online_step_averaged(model, pp, x, x, 0.1, np.array([0.1, 0.1]))
    with pytest.raises(ValidationError):
        online_step_per_particle(model, avg, x, x, 0.1, np.array([0.1, 0.1]))


def _dyadic_noiseless_frames(model, theta0, k_steps=8, dt=0.125):
    # dyadic states, power-of-two n and dyadic dt keep every Euler update
    # exact in binary floating point
    x = np.array([0.5, -0.25, 1.0, -2.0])
    frames = [x]
    for _ in range(k_steps):
        b = drift_values(model, theta0, x, x)
        x = x + b * dt
        frames.append(x)
    return np.stack(frames)


def test_noiseless_data_at_truth_is_a_fixed_point_bitwise():
    model = linear_mean_field(sigma=1.0)
    theta0 = np.array([1.0, 0.5])
    frames = _dyadic_noiseless_frames(model, theta0)
    gamma = np.array([0.25, 0.5])

    state = EstimatorState(theta=theta0.copy(), t=0.0, mode="averaged")
    for k in range(frames.shape[0] - 1):
        state = online_step_averaged(model, state, frames[k], frames[k + 1], 0.125, gamma)
        assert np.array_equal(state.theta, theta0)

    thetas = np.repeat(theta0[None, :], 4, axis=0)
    state = EstimatorState(theta=thetas.copy(), t=0.0, mode="per-particle")
    for k in range(frames.shape[0] - 1):
        state = online_step_per_particle(model, state, frames[k], frames[k + 1], 0.125, gamma)
        assert np.array_equal(state.theta, thetas)


def test_noiseless_replay_run_stays_at_truth():
    model = linear_mean_field(sigma=1.0)
    theta0 = np.array([1.0, 0.5])
    frames = _dyadic_noiseless_frames(model, theta0, k_steps=16)
    batch = TrajectoryBatch(
        times=np.arange(17) * 0.125, states=frames, model_id=model.kind, sigma=1.0
    )
    out = run_online(
        model, theta0, SimConfig(4, 0.125, 2.0, seed=5), LearningRate.constant(0.3, p=2),
        theta0.copy(), replay=batch,
    )
    assert np.array_equal(out.theta, theta0)
    _, hist = out.history
    assert np.array_equal(hist, np.repeat(theta0[None, :], hist.shape[0], axis=0))


# ==== full runs ====


def test_run_online_history_and_shapes():
    model = linear_mean_field()
    cfg = SimConfig(5, 0.1, 2.0, seed=42)
    out = run_online(model, (1.0, 0.5), cfg, LearningRate.constant(0.05, p=2),
                     ThetaInit.const([0.2, 0.1]))
    assert out.theta.shape == (2,)
    assert out.step == 20
    times, thetas = out.history
    assert times[0] == 0.0 and times[-1] == pytest.approx(2.0)
    assert times.size == 21  # below the history cap: every step kept
    assert thetas.shape == (21, 2)
    assert np.array_equal(thetas[0], [0.2, 0.1])

    short = run_online(model, (1.0, 0.5), cfg, LearningRate.constant(0.05, p=2),
                       ThetaInit.const([0.2, 0.1]), history_limit=5)
    t_short, _ = short.history
    assert t_short.size <= 7
    assert t_short[0] == 0.0 and t_short[-1] == pytest.approx(2.0)
    assert np.array_equal(short.theta, out.theta)  # downsampling never alters the path


def test_run_online_per_particle_shapes():
    model = linear_mean_field()
    cfg = SimConfig(6, 0.1, 1.0, seed=9)
    out = run_online(model, (1.0, 0.5), cfg, LearningRate.constant(0.02, p=2),
                     ThetaInit.const([0.3, 0.2]), mode="per-particle")
    assert out.theta.shape == (6, 2)
    _, thetas = out.history
    assert thetas.shape[1:] == (6, 2)
    assert np.all(thetas[0] == np.array([0.3, 0.2]))


def test_run_online_replay_matches_fresh_run_bitwise():
    model = linear_mean_field()
    cfg = SimConfig(8, 0.1, 3.0, init=InitialLaw("normal", 1.0, 1.0), seed=1234)
    lr = LearningRate.parse("powmin:0.1,0.51", p=2)
    init = ThetaInit.parse("uniform:0,2;uniform:0,1")

    fresh = run_online(model, (1.0, 0.5), cfg, lr, init)
    batch = simulate_ips(model, (1.0, 0.5), cfg)
    replayed = run_online(model, (1.0, 0.5), cfg, lr, init, replay=batch)

    assert np.array_equal(fresh.theta, replayed.theta)
    assert np.array_equal(fresh.history[1], replayed.history[1])


def test_run_online_rejects_mismatched_inputs():
    model = linear_mean_field()
    cfg = SimConfig(4, 0.1, 1.0, seed=0)
    with pytest.raises(ValidationError):
        run_online(model, (1.0, 0.5), cfg, LearningRate.constant(0.1, p=1),
                   ThetaInit.const([1.0, 1.0]))
    with pytest.raises(ValidationError):
        run_online(model, (1.0, 0.5), cfg, LearningRate.constant(0.1, p=2),
                   ThetaInit.const([1.0, 1.0]), mode="ensemble")


def test_run_online_raises_on_divergence():
    model = linear_mean_field()
    cfg = SimConfig(4, 0.1, 5.0, seed=3)
    with pytest.raises(EstimatorDiverged) as err:
        run_online(model, (1.0, 0.5), cfg, LearningRate.constant(1e12, p=2),
                   ThetaInit.const([5.0, 5.0]))
    assert err.value.step >= 1


# ==== long-run likelihood geometry ====


def test_contrast_zero_on_the_ridge():
    theta0 = (1.0, 0.5)
    assert asymptotic_contrast_linear((1.0, 0.5), theta0) == 0.0
    assert asymptotic_contrast_linear((1.3, 0.2), theta0) == 0.0
    assert asymptotic_contrast_linear((0.2, 1.3), theta0) == 0.0


def test_contrast_value_off_ridge():
    # sum mismatch 1.5 against theta0 sum 1.5: -(1.5^2)/(4*1.5) = -0.375
    assert asymptotic_contrast_linear((2.0, 1.0), (1.0, 0.5)) == -0.375
    assert asymptotic_contrast_linear((0.0, 0.0), (1.0, 0.5)) == -0.375
    with pytest.raises(ValidationError):
        asymptotic_contrast_linear((1.0, 0.5), (1.0, -1.0))
    with pytest.raises(ValidationError):
        asymptotic_contrast_linear((1.0,), (1.0, 0.5))


def test_lyapunov_covariance_solves_the_lyapunov_equation():
    for t1, t2, n in ((1.0, 0.5, 1), (1.0, 0.5, 7), (2.0, -0.5, 12), (0.3, 0.9, 25)):
        s = lyapunov_covariance_linear((t1, t2), n)
        a = (t1 + t2) * np.eye(n) - (t2 / n) * np.ones((n, n))
        resid = a @ s + s @ a.T - np.eye(n)
        assert np.max(np.abs(resid)) < 1e-12


def test_invariant_moments_match_the_covariance_matrix():
    for t1, t2, n in ((1.0, 0.5, 2), (1.0, 0.5, 3), (0.7, 0.2, 10)):
        c1, c2, c3 = ips_invariant_moments_linear((t1, t2), n)
        s = lyapunov_covariance_linear((t1, t2), n)
        u = np.zeros(n)
        u[0] = 1.0
        centered = u - np.full(n, 1.0 / n)
        assert c1 == pytest.approx(s[0, 0], rel=1e-13)
        assert c2 == pytest.approx(u @ s @ centered, rel=1e-13)
        assert c3 == pytest.approx(centered @ s @ centered, rel=1e-13)


def test_loglik_surface_is_the_hessian_quadratic_form():
    theta0 = (1.0, 0.5)
    h = asymptotic_loglik_hessian_linear(theta0, 10)
    rng = np.random.default_rng(0)
    assert asymptotic_loglik_ips_linear(theta0, theta0, 10) == 0.0
    for _ in range(20):
        d = rng.uniform(-2, 2, size=2)
        val = asymptotic_loglik_ips_linear((theta0[0] + d[0], theta0[1] + d[1]), theta0, 10)
        assert val == pytest.approx(0.5 * d @ h @ d, rel=1e-12, abs=1e-14)
        assert val <= 0.0


def test_ridge_curvature_decays_as_one_over_n():
    # curvature along (1,-1)/sqrt(2) is exactly -1/(4 theta1 n)
    v = np.array([1.0, -1.0]) / np.sqrt(2.0)
    for t1 in (0.5, 1.0, 2.0):
        for n in (2, 5, 10, 100):
            h = asymptotic_loglik_hessian_linear((t1, 0.5), n)
            assert v @ h @ v == pytest.approx(-1.0 / (4.0 * t1 * n), rel=1e-13)


# ==== batched trial kernels ====


def test_online_trials_linear_shapes_and_initial_error():
    lr = LearningRate.constant([0.05, 0.05])
    init = ThetaInit.const([0.2, 0.1])
    res = online_trials_linear((1.0, 0.5), 5, 0.1, 5.0, lr, init, trials=6, entropy=77,
                               modes=("averaged", "per-particle"))
    assert res.times[0] == 0.0 and res.times[-1] == pytest.approx(5.0)
    assert res.theta_init.shape == (6, 2)
    assert res.terminal["averaged"].shape == (6, 2)
    assert res.terminal["per-particle"].shape == (6, 5, 2)
    # constant init: checkpoint-0 MSE is exact, identical across modes
    exact = np.array([(0.2 - 1.0) ** 2, (0.1 - 0.5) ** 2])
    assert np.allclose(res.mse["averaged"][0], exact, rtol=0, atol=1e-15)
    assert np.allclose(res.mse["per-particle"][0], exact, rtol=0, atol=1e-15)


def test_online_trials_linear_error_decreases():
    lr = LearningRate.constant([0.1, 0.1])
    init = ThetaInit.const([0.0, 0.0])
    res = online_trials_linear((1.0, 0.5), 5, 0.1, 80.0, lr, init, trials=8, entropy=5)
    mse = res.mse["averaged"]
    assert mse[-1].sum() < 0.25 * mse[0].sum()


def test_online_trials_linear_trial_range_slices_bitwise():
    lr = LearningRate.parse("powmin:0.08,0.51", p=2)
    init = ThetaInit.parse("uniform:0,2", p=2)
    full = online_trials_linear((1.0, 0.5), 4, 0.1, 3.0, lr, init, trials=7, entropy=21,
                                modes=("averaged", "per-particle"))
    part = online_trials_linear((1.0, 0.5), 4, 0.1, 3.0, lr, init, trials=7, entropy=21,
                                modes=("averaged", "per-particle"), trial_range=(3, 7))
    for mode in ("averaged", "per-particle"):
        assert np.array_equal(part.terminal[mode], full.terminal[mode][3:7])
    assert np.array_equal(part.theta_init, full.theta_init[3:7])
    with pytest.raises(ValidationError):
        online_trials_linear((1.0, 0.5), 4, 0.1, 3.0, lr, init, trials=7, entropy=21,
                             trial_range=(5, 3))


def test_online_trials_opinion_trial_range_slices_bitwise():
    lr = LearningRate.parse("constant:0;constant:0.002", p=2)
    init = ThetaInit.parse("const:2;uniform:1.5,2.5", p=2)
    full = online_trials_opinion((2.0, 0.5), 6, 0.1, 2.0, lr, init, trials=5, entropy=31,
                                 init_law=InitialLaw("uniform", 0.0, 4.0), sigma=0.5)
    part = online_trials_opinion((2.0, 0.5), 6, 0.1, 2.0, lr, init, trials=5, entropy=31,
                                 init_law=InitialLaw("uniform", 0.0, 4.0), sigma=0.5,
                                 trial_range=(2, 5))
    assert np.array_equal(part.terminal["averaged"], full.terminal["averaged"][2:5])


def test_online_trials_linear_diverges_loudly():
    lr = LearningRate.constant([1e12, 1e12])
    init = ThetaInit.const([5.0, 5.0])
    with pytest.raises(EstimatorDiverged):
        online_trials_linear((1.0, 0.5), 4, 0.1, 5.0, lr, init, trials=2, entropy=1)


def _manual_trial_zero(kernel_kwargs, model, lr, horizon, dt, entropy, cell=0):
    # reproduce trial 0 of the batched kernel with the generic engine:
    # same simulation stream, same estimator-init stream
    sim_seq = np.random.SeedSequence(entropy=entropy, spawn_key=(cell, 0, _rng.SIM_ROLE))
    est_rng = _rng.substream(entropy, cell, 0, _rng.EST_ROLE)
    init_vec = kernel_kwargs["init"].sample(est_rng)
    cfg = SimConfig(
        kernel_kwargs["n"], dt, horizon, init=kernel_kwargs["init_law"], seed=sim_seq
    )
    out = run_online(model, kernel_kwargs["theta_true"], cfg, lr, init_vec)
    return init_vec, out.theta


def test_opinion_kernel_matches_generic_engine_on_trial_zero():
    lr = LearningRate.parse("constant:0.01;constant:0.01", p=2)
    kw = dict(
        theta_true=(2.0, 0.5), n=8,
        init=ThetaInit.parse("uniform:1.5,2.5", p=2),
        init_law=InitialLaw("uniform", 0.0, 4.0),
    )
    res = online_trials_opinion(kw["theta_true"], kw["n"], 0.1, 3.0, lr, kw["init"],
                                trials=1, entropy=909, init_law=kw["init_law"], sigma=0.5)
    init_vec, theta = _manual_trial_zero(kw, opinion_dynamics(sigma=0.5), lr, 3.0, 0.1, 909)
    assert np.array_equal(res.theta_init[0], init_vec)
    assert np.allclose(res.terminal["averaged"][0], theta, rtol=0, atol=1e-10)


def test_linear_kernel_matches_generic_engine_on_trial_zero():
    lr = LearningRate.parse("constant:0.05;constant:0.05", p=2)
    kw = dict(
        theta_true=(1.0, 0.5), n=6,
        init=ThetaInit.parse("uniform:0,2", p=2),
        init_law=InitialLaw("normal", 1.0, 1.0),
    )
    res = online_trials_linear(kw["theta_true"], kw["n"], 0.1, 4.0, lr, kw["init"],
                               trials=1, entropy=606, init_law=kw["init_law"])
    init_vec, theta = _manual_trial_zero(kw, linear_mean_field(), lr, 4.0, 0.1, 606)
    assert np.array_equal(res.theta_init[0], init_vec)
    assert np.allclose(res.terminal["averaged"][0], theta, rtol=0, atol=1e-10)
