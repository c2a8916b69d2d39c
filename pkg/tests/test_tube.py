import numpy as np
import pytest

from qmpc import mpc
from qmpc import plant as pl
from qmpc import tube


BENCH_K = np.array([-0.0621, -0.2027])


class TestComputeTube:
    def test_memoryless_case(self):
        # K = 0 and A = 0: Sigma_inf = sigma^2 B B^T exactly
        spec = tube.compute_tube(np.zeros((2, 2)), [0.5, 1.0], [0.0, 0.0],
                                 0.1, 0.95)
        np.testing.assert_allclose(
            spec.sigma_inf, 0.01 * np.outer([0.5, 1.0], [0.5, 1.0]),
            atol=1e-14)

    def test_lyapunov_residual_tiny(self):
        spec = tube.compute_tube(pl.BENCHMARK_A, pl.BENCHMARK_B, BENCH_K,
                                 0.1, 0.95)
        assert tube.lyapunov_residual(
            spec, pl.BENCHMARK_A, pl.BENCHMARK_B, 0.1) < 1e-10

    def test_matches_monte_carlo_covariance(self):
        spec = tube.compute_tube(pl.BENCHMARK_A, pl.BENCHMARK_B, BENCH_K,
                                 0.1, 0.95)
        # Monte-Carlo oracle: simulate e+ = (A+BK)e + B eps
        rng = np.random.default_rng(0)
        a_cl = pl.BENCHMARK_A + np.outer(pl.BENCHMARK_B, BENCH_K)
        n = 1_000_000
        e = np.zeros(2)
        samples = np.empty((n, 2))
        for i in range(n):
            e = a_cl @ e + pl.BENCHMARK_B * rng.normal(0.0, 0.1)
            samples[i] = e
        mc_cov = np.cov(samples.T)
        np.testing.assert_allclose(spec.sigma_inf, mc_cov, rtol=0.05)

    def test_median_confidence_gives_zero_widths(self):
        spec = tube.compute_tube(pl.BENCHMARK_A, pl.BENCHMARK_B, BENCH_K,
                                 0.1, 0.5)
        np.testing.assert_allclose(spec.state_half_widths, 0.0, atol=1e-15)
        assert spec.input_half_width == pytest.approx(0.0, abs=1e-15)

    def test_margins_monotone_in_noise(self):
        widths = []
        for sigma in (0.05, 0.1, 0.2, 0.4):
            spec = tube.compute_tube(pl.BENCHMARK_A, pl.BENCHMARK_B, BENCH_K,
                                     sigma, 0.95)
            assert np.all(spec.state_half_widths >= 0)
            widths.append(spec.state_half_widths.copy())
        for lo_w, hi_w in zip(widths, widths[1:]):
            assert np.all(hi_w > lo_w)

    def test_unstable_closed_loop_rejected(self):
        with pytest.raises(ValueError, match="unstable"):
            tube.compute_tube([[1.2, 0.0], [0.0, 0.3]], [0.0, 1.0],
                              [0.0, 0.0], 0.1, 0.95)

    def test_bad_confidence_rejected(self):
        with pytest.raises(ValueError, match="confidence"):
            tube.compute_tube(pl.BENCHMARK_A, pl.BENCHMARK_B, BENCH_K,
                              0.1, 1.0)


def benchmark_controller(sigma=0.1, alpha=0.95, **penalty_kw):
    spec = tube.compute_tube(pl.BENCHMARK_A, pl.BENCHMARK_B, BENCH_K,
                             sigma, alpha)
    problem = mpc.MpcProblem(horizon=10, robust=True,
                             ancillary_gain=BENCH_K.copy())
    penalty = mpc.PenaltyLoopConfig(**penalty_kw)
    return tube.TubeMpcController(pl.BENCHMARK_A, pl.BENCHMARK_B, spec,
                                  problem, penalty)


class TestTubeController:
    def test_tightened_bounds_are_original_minus_width(self):
        ctrl = benchmark_controller()
        np.testing.assert_allclose(
            ctrl.tight_upper,
            mpc.BENCHMARK_STATE_UPPER - ctrl.spec.state_half_widths)
        np.testing.assert_allclose(
            ctrl.tight_lower,
            mpc.BENCHMARK_STATE_LOWER + ctrl.spec.state_half_widths)

    def test_zero_disturbance_closed_loop_equals_nominal_plan(self):
        ctrl = benchmark_controller()
        p = pl.LtiPlant(sigma_eps=0.0, rng=np.random.default_rng(0))
        x = p.state.copy()
        ref = np.full((10, 1), 1.0)
        for _ in range(20):
            res = ctrl.step(x, ref)
            x = p.step(res.u_applied)
            ctrl.observe(res.u_applied, x)
            # without noise the measured state tracks the nominal state
            np.testing.assert_allclose(x, ctrl.nominal_state, atol=1e-9)

    def test_sigma_to_zero_converges_to_nominal_mpc_trajectory(self):
        # 50-step episode; vanishing tube must reproduce the sigma=0 run
        def run(sigma):
            ctrl = benchmark_controller(sigma=sigma)
            p = pl.LtiPlant(sigma_eps=0.0, rng=np.random.default_rng(1))
            x = p.state.copy()
            ref = np.full((10, 1), 1.5)
            traj = []
            for _ in range(50):
                res = ctrl.step(x, ref)
                x = p.step(res.u_applied)
                ctrl.observe(res.u_applied, x)
                traj.append(x.copy())
            return np.array(traj)

        base = run(0.0 + 1e-300)
        for sigma in (1e-6, 1e-9):
            diff = np.max(np.abs(run(sigma) - base))
            assert diff < 1e-6

    def test_forecast_band_reflects_tube(self):
        ctrl = benchmark_controller()
        p = pl.LtiPlant(rng=np.random.default_rng(3))
        x = p.state.copy()
        res = ctrl.step(x, np.full((10, 1), 1.0))
        f = res.forecast
        np.testing.assert_allclose(
            f.upper - f.median,
            np.tile(ctrl.spec.state_half_widths, (10, 1)))

    def test_infeasible_tube_rejected(self):
        spec = tube.compute_tube(pl.BENCHMARK_A, pl.BENCHMARK_B, BENCH_K,
                                 0.1, 0.95)
        spec.state_half_widths = np.array([10.0, 10.0])
        problem = mpc.MpcProblem(horizon=10)
        with pytest.raises(ValueError, match="no feasible state box"):
            tube.TubeMpcController(pl.BENCHMARK_A, pl.BENCHMARK_B, spec,
                                   problem)
