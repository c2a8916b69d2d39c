"""Tube-based robust MPC baseline for the linear benchmark.

Probabilistic steady-state tube: under the ancillary feedback u = v + K e
the prediction error follows e+ = (A + BK) e + B eps, whose stationary
covariance solves the discrete Lyapunov equation

    Sigma = (A + BK) Sigma (A + BK)^T + sigma^2 B B^T.

State bounds are tightened per dimension by the one-sided Gaussian
quantile of that stationary spread, input bounds by the same quantile of
K Sigma K^T. The nominal problem is then an exact-model MPC solved with
the same penalty and quasi-Newton machinery as the learned controller,
and the applied input corrects the nominal plan with K times the
deviation of the measured state from the internally propagated nominal
state.

The construction is the standard fixed-gain probabilistic tube; the gain
equals the learned controller's ancillary gain for comparability.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm as _gaussian

from .forecaster import QuantileForecast
from .mpc import (
    LinearRolloutObjective,
    MpcProblem,
    PenaltyLoopConfig,
    SolveResult,
    SolverAborted,
    augmented_lagrangian_solve,
)

LYAPUNOV_TOL = 1e-12
LYAPUNOV_MAX_ITERS = 10_000


@dataclass
class TubeSpec:
    gain: np.ndarray            # ancillary feedback K, (D,)
    sigma_inf: np.ndarray       # stationary error covariance, (D, D)
    confidence: float           # one-sided per-face confidence alpha
    state_half_widths: np.ndarray  # z_j per state dimension
    input_half_width: float


def compute_tube(a, b, gain, sigma_eps: float, alpha: float) -> TubeSpec:
    """Stationary covariance by fixed-point iteration plus quantile widths."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    gain = np.asarray(gain, dtype=float).reshape(-1)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"confidence must be in (0,1), got {alpha}")
    a_cl = a + np.outer(b, gain)
    radius = np.max(np.abs(np.linalg.eigvals(a_cl)))
    if radius >= 1.0:
        raise ValueError(
            f"A + BK is unstable (spectral radius {radius:.4f}); "
            "no stationary tube exists")
    w_cov = sigma_eps**2 * np.outer(b, b)
    sigma = w_cov.copy()
    for _ in range(LYAPUNOV_MAX_ITERS):
        nxt = a_cl @ sigma @ a_cl.T + w_cov
        if np.max(np.abs(nxt - sigma)) < LYAPUNOV_TOL:
            sigma = nxt
            break
        sigma = nxt
    sigma = 0.5 * (sigma + sigma.T)
    z = float(_gaussian.ppf(alpha))
    half_widths = z * np.sqrt(np.diag(sigma))
    input_half = z * float(np.sqrt(gain @ sigma @ gain))
    return TubeSpec(gain, sigma, alpha, half_widths, input_half)


def lyapunov_residual(spec: TubeSpec, a, b, sigma_eps: float) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    a_cl = a + np.outer(b, spec.gain)
    res = spec.sigma_inf - a_cl @ spec.sigma_inf @ a_cl.T \
        - sigma_eps**2 * np.outer(b, b)
    return float(np.max(np.abs(res)))


class TubeMpcController:
    """Nominal exact-model MPC inside tightened bounds plus ancillary
    feedback; tracks its own nominal state so the error stays inside the
    stationary tube."""

    def __init__(self, a, b, spec: TubeSpec, problem: MpcProblem,
                 penalty: PenaltyLoopConfig | None = None,
                 allow_relaxation: bool = True):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float).reshape(-1)
        self.spec = spec
        self.problem = problem
        self.penalty = penalty if penalty is not None else PenaltyLoopConfig()
        self.allow_relaxation = allow_relaxation
        self.tight_lower = problem.state_lower + spec.state_half_widths
        self.tight_upper = problem.state_upper - spec.state_half_widths
        if np.any(self.tight_lower >= self.tight_upper):
            raise ValueError("tube widths leave no feasible state box")
        self.input_lower = problem.input_bounds[0] + spec.input_half_width
        self.input_upper = problem.input_bounds[1] - spec.input_half_width
        if self.input_lower >= self.input_upper:
            raise ValueError("tube input tightening leaves no feasible inputs")
        self.nominal_state: np.ndarray | None = None
        self._last_plan: np.ndarray | None = None

    def observe(self, u_applied: float, x_next) -> None:
        # the nominal state propagates itself; nothing to record
        return None

    def step(self, x_measured, reference) -> SolveResult:
        t0 = time.perf_counter()
        n = self.problem.horizon
        x_measured = np.asarray(x_measured, dtype=float)
        if self.nominal_state is None:
            self.nominal_state = x_measured.copy()

        if self._last_plan is None:
            warm = np.zeros(n)
        else:
            warm = np.concatenate([self._last_plan[1:], self._last_plan[-1:]])
        fallback_input = warm[0]

        objective = LinearRolloutObjective(
            self.a, self.b, self.nominal_state, n, self.problem.q,
            self.problem.r, self.problem.tracked_dims, np.asarray(reference),
            self.tight_lower, self.tight_upper,
            prev_input=self._last_plan[0] if self._last_plan is not None else 0.0,
            penalize_increments=self.problem.penalize_increments)

        lo = np.full(n, self.input_lower)
        hi = np.full(n, self.input_upper)
        try:
            al = augmented_lagrangian_solve(
                objective, self.penalty, warm, lo, hi,
                allow_relaxation=self.allow_relaxation)
            aborted = False
        except SolverAborted:
            aborted = True
            al = None

        if aborted or not al.feasible:
            plan = warm
            fallback = True
            u_applied = float(np.clip(fallback_input,
                                      *self.problem.input_bounds))
        else:
            plan = al.v
            fallback = False
            e = x_measured - self.nominal_state
            u = plan[0] + float(self.spec.gain @ e)
            u_applied = float(np.clip(u, *self.problem.input_bounds))

        prediction = objective.predict(plan)
        forecast = QuantileForecast(
            (1.0 - self.spec.confidence, 0.5, self.spec.confidence),
            np.stack([prediction - self.spec.state_half_widths,
                      prediction,
                      prediction + self.spec.state_half_widths], axis=-1))
        self.nominal_state = self.a @ self.nominal_state + self.b * plan[0]
        self._last_plan = plan.copy()
        return SolveResult(
            v_opt=plan.copy(), u_applied=u_applied, forecast=forecast,
            feasible=False if aborted else al.feasible,
            outer_iters=0 if aborted else al.outer_iters,
            inner_iters=0 if aborted else al.inner_iters,
            wall_time=time.perf_counter() - t0, fallback_used=fallback,
            residuals=None if aborted else al.residuals,
            cost=float("nan") if aborted else al.cost,
            relaxed=() if aborted else al.relaxed)
