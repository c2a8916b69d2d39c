"""Simultaneous multi-step MPC over the quantile forecaster.

The horizon loss is built from the model's one-shot prediction: tracking
error of the median against the reference plus a quadratic input cost.
State constraints are enforced through the forecast quantiles (upper
quantile below the upper bound, lower quantile above the lower bound; the
nominal variant substitutes the median on both faces) and handled by an
augmented Lagrangian with ReLU penalties:

    Phi(v) = J(v) + mu/2 * sum ReLU(c_i)^2 + sum lambda_i ReLU(c_i)

with mu scaled up and lambda_i increased by ReLU(c_i) after every outer
iteration. The inner problem is solved by a limited-memory quasi-Newton
method with a backtracking line search, projecting onto the per-step
input box after each step; analytic gradients come from the tape.

Constraint residuals inside the solver are expressed in normalized state
units so the penalty tolerances are scale free; the public
quantile_constraints helper reports physical residuals.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .forecaster import Forecaster, QuantileForecast, TimeSeriesWindow

BENCHMARK_STATE_LOWER = np.array([-2.0, -3.5])
BENCHMARK_STATE_UPPER = np.array([2.5, 3.5])
BENCHMARK_INPUT_BOUNDS = (-5.0, 5.0)
BENCHMARK_ANCILLARY_GAIN = np.array([-0.0621, -0.2027])


class SolverAborted(RuntimeError):
    """A solve produced a non-finite loss or gradient."""


@dataclass
class MpcProblem:
    horizon: int
    q: np.ndarray = field(default_factory=lambda: np.eye(1))
    r: np.ndarray = field(default_factory=lambda: np.eye(1))
    tracked_dims: tuple = (0,)
    state_lower: np.ndarray = field(
        default_factory=lambda: BENCHMARK_STATE_LOWER.copy())
    state_upper: np.ndarray = field(
        default_factory=lambda: BENCHMARK_STATE_UPPER.copy())
    input_bounds: tuple = BENCHMARK_INPUT_BOUNDS
    robust: bool = True
    ancillary_gain: np.ndarray = field(
        default_factory=lambda: BENCHMARK_ANCILLARY_GAIN.copy())
    tighten_inputs: bool = True
    penalize_increments: bool = False
    reference: np.ndarray | None = None   # (N, n_tracked), set per solve

    def __post_init__(self):
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float))
        self.r = np.atleast_2d(np.asarray(self.r, dtype=float))
        self.tracked_dims = tuple(self.tracked_dims)
        self.state_lower = np.asarray(self.state_lower, dtype=float)
        self.state_upper = np.asarray(self.state_upper, dtype=float)
        self.ancillary_gain = np.asarray(self.ancillary_gain, dtype=float)
        for name, mat in (("Q", self.q), ("R", self.r)):
            if not np.allclose(mat, mat.T):
                raise ValueError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(mat)) <= 0:
                raise ValueError(f"{name} must be positive definite")
        both = np.isfinite(self.state_lower) & np.isfinite(self.state_upper)
        if np.any(self.state_lower[both] >= self.state_upper[both]):
            raise ValueError("state bounds must satisfy lower < upper")
        if not self.input_bounds[0] < self.input_bounds[1]:
            raise ValueError("input bounds must satisfy lower < upper")

    def constraint_faces(self):
        """Ordered (kind, dim) faces with finite bounds."""
        faces = []
        for d in range(self.state_lower.size):
            if np.isfinite(self.state_upper[d]):
                faces.append(("ub", d))
            if np.isfinite(self.state_lower[d]):
                faces.append(("lb", d))
        return faces


@dataclass
class PenaltyLoopConfig:
    mu0: float = 1.0
    alpha_mu: float = 2.0
    max_outer_iters: int = 8
    max_inner_iters: int = 100
    grad_tol: float = 1e-5
    constraint_tol: float = 1e-3
    lbfgs_memory: int = 10

    def __post_init__(self):
        if self.alpha_mu <= 1.0:
            raise ValueError("alpha_mu must be > 1")
        if self.grad_tol <= 0 or self.constraint_tol <= 0:
            raise ValueError("tolerances must be > 0")


@dataclass
class SolveResult:
    v_opt: np.ndarray
    u_applied: float
    forecast: QuantileForecast | None
    feasible: bool
    outer_iters: int
    inner_iters: int
    wall_time: float
    fallback_used: bool
    residuals: np.ndarray | None = None  # normalized units, active constraints
    cost: float = float("nan")
    relaxed: tuple = ()
    startup: bool = False


# ----------------------------------------------------------------------
# loss and constraint helpers (reference implementations)
# ----------------------------------------------------------------------

def mpc_loss(v, median, reference, q, r, tracked_dims=(0,),
             prev_input=0.0, penalize_increments=False) -> float:
    """Horizon tracking loss; numpy reference for the taped objective.

    median is the (N, D) median prediction, reference (N, n_tracked).
    """
    v = np.asarray(v, dtype=float).reshape(-1, 1)
    median = np.asarray(median, dtype=float)
    reference = np.asarray(reference, dtype=float).reshape(median.shape[0], -1)
    q = np.atleast_2d(q)
    r = np.atleast_2d(r)
    err = median[:, list(tracked_dims)] - reference
    track = float(np.einsum("ij,jk,ik->", err, q, err))
    vin = np.diff(np.concatenate([[[prev_input]], v]), axis=0) \
        if penalize_increments else v
    inp = float(np.einsum("ij,jk,ik->", vin, r, vin))
    return track + inp


def quantile_constraints(forecast: QuantileForecast, state_lower, state_upper,
                         nominal: bool = False):
    """Physical-unit residuals c_i, satisfied iff c_i <= 0.

    For each state dimension with a finite bound and each horizon step:
    upper quantile minus upper bound, then lower bound minus lower
    quantile. The nominal variant uses the median on both faces.
    Returns (residuals, labels) with labels (kind, dim, step).
    """
    state_lower = np.asarray(state_lower, dtype=float)
    state_upper = np.asarray(state_upper, dtype=float)
    upper = forecast.median if nominal else forecast.upper
    lower = forecast.median if nominal else forecast.lower
    n = upper.shape[0]
    residuals = []
    labels = []
    for d in range(state_lower.size):
        if np.isfinite(state_upper[d]):
            residuals.append(upper[:, d] - state_upper[d])
            labels.extend(("ub", d, i) for i in range(n))
        if np.isfinite(state_lower[d]):
            residuals.append(state_lower[d] - lower[:, d])
            labels.extend(("lb", d, i) for i in range(n))
    if not residuals:
        return np.empty(0), []
    return np.concatenate(residuals), labels


def tighten_input_bounds(input_bounds, gain, forecast: QuantileForecast):
    """Per-step input box from the interval Pontryagin difference.

    The per-step uncertainty box has half-widths given by the quantile
    band around the median; its image under the ancillary gain is the
    interval [sum_j min(K_j lo_j, K_j hi_j), sum_j max(...)], and the
    admissible nominal inputs are the original interval shrunk by it.
    Empty intervals are flagged and replaced by their midpoint.
    """
    gain = np.asarray(gain, dtype=float)
    lo_band = forecast.lower - forecast.median   # (N, D), <= 0
    hi_band = forecast.upper - forecast.median   # (N, D), >= 0
    n = lo_band.shape[0]
    u_lo, u_hi = float(input_bounds[0]), float(input_bounds[1])
    lo = np.empty(n)
    hi = np.empty(n)
    empty = np.zeros(n, dtype=bool)
    for i in range(n):
        kz_lo = 0.0
        kz_hi = 0.0
        for j in range(gain.size):
            a = gain[j] * lo_band[i, j]
            b = gain[j] * hi_band[i, j]
            kz_lo += min(a, b)
            kz_hi += max(a, b)
        lo_i = u_lo - kz_lo
        hi_i = u_hi - kz_hi
        if lo_i > hi_i:
            mid = 0.5 * (lo_i + hi_i)
            lo_i = hi_i = mid
            empty[i] = True
        lo[i] = lo_i
        hi[i] = hi_i
    return lo, hi, empty


def apply_ancillary(v0: float, e, gain, input_bounds) -> float:
    """u = v0 + K e, clamped to the original input bounds."""
    e = np.asarray(e, dtype=float)
    gain = np.asarray(gain, dtype=float)
    u = float(v0) + float(gain @ e)
    return float(np.clip(u, input_bounds[0], input_bounds[1]))


# ----------------------------------------------------------------------
# limited-memory quasi-Newton inner solver
# ----------------------------------------------------------------------

@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    pg_norm: float
    iterations: int
    n_evals: int
    converged: bool
    line_search_failed: bool
    stalled: bool = False


def _project(x, lower, upper):
    return np.clip(x, lower, upper)


def _pg_norm(x, g, lower, upper):
    return float(np.linalg.norm(x - _project(x - g, lower, upper)))


def lbfgs_minimize(evaluator, x0, lower=None, upper=None, memory: int = 10,
                   grad_tol: float = 1e-5, max_iters: int = 100) -> LbfgsResult:
    """Two-loop-recursion L-BFGS with backtracking Armijo line search.

    ``evaluator(x, need_grad)`` returns (f, g) with g None when not
    requested. Iterates are projected onto the box after every accepted
    step; convergence is measured by the projected-gradient norm. On a
    line-search failure the direction falls back to projected steepest
    descent once; if that fails too, the best iterate seen is returned
    with the failure flagged.
    """
    n = np.asarray(x0, dtype=float).size
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    x = _project(np.asarray(x0, dtype=float).copy(), lower, upper)

    f, g = evaluator(x, True)
    n_evals = 1
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise SolverAborted("non-finite loss or gradient at the start point")
    best_x, best_f, best_g = x.copy(), f, g.copy()

    pg = _pg_norm(x, g, lower, upper)
    if pg <= grad_tol:
        return LbfgsResult(x, f, g, pg, 0, n_evals, True, False)

    s_hist: deque = deque(maxlen=memory)
    y_hist: deque = deque(maxlen=memory)
    rho_hist: deque = deque(maxlen=memory)
    iterations = 0
    converged = False
    ls_failed = False
    stalled = False
    tiny_steps = 0

    def direction(gvec):
        q = gvec.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist),
                             reversed(rho_hist)):
            a = rho * s.dot(q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            s, y = s_hist[-1], y_hist[-1]
            q *= s.dot(y) / y.dot(y)
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist),
                                  reversed(alphas)):
            b = rho * y.dot(q)
            q += (a - b) * s
        return -q

    def line_search(d):
        nonlocal n_evals
        alpha = 1.0
        for _ in range(25):
            xt = _project(x + alpha * d, lower, upper)
            step = xt - x
            if not np.any(step):
                return None
            ft, _ = evaluator(xt, False)
            n_evals += 1
            slope = g.dot(step)
            if np.isfinite(ft):
                # allowance for rounding noise: near the optimum the true
                # decrease drops below float resolution of f itself
                noise = 10.0 * np.finfo(float).eps * (abs(f) + abs(ft) + 1.0)
                # projection can turn the step uphill; then demand a
                # strict decrease instead of the Armijo bound
                if (slope < 0 and ft <= f + 1e-4 * slope + noise) or \
                        (slope >= 0 and ft < f + noise):
                    return _refine(xt, ft, step, slope)
            # backtrack to the minimizer of the quadratic model through
            # (0, f), (alpha, ft) with slope g.d, clipped to [0.1, 0.5]a
            gd = g.dot(d)
            denom = 2.0 * (ft - f - alpha * gd)
            if np.isfinite(ft) and denom > 0 and gd < 0:
                cand = -gd * alpha * alpha / denom
                alpha = min(0.5 * alpha, max(0.1 * alpha, cand))
            else:
                alpha *= 0.5
        return None

    def _refine(xt, ft, step, slope):
        # one interpolation probe along the accepted step: exact line
        # search on quadratics, cheap no-op once unit steps are optimal
        nonlocal n_evals
        denom = 2.0 * (ft - f - slope)
        if slope < 0 and denom > 0:
            a_star = -slope / denom
            if 0.05 < a_star < 20.0 and abs(a_star - 1.0) > 0.1:
                xs = _project(x + a_star * step, lower, upper)
                fs, _ = evaluator(xs, False)
                n_evals += 1
                if np.isfinite(fs) and fs < ft:
                    return xs, fs
        return xt, ft

    while iterations < max_iters:
        d = direction(g)
        if d.dot(g) > -1e-12 * np.linalg.norm(d) * np.linalg.norm(g):
            d = -g
        hit = line_search(d)
        if hit is None:
            hit = line_search(-g)
            if hit is None:
                ls_failed = True
                break
        xt, ft = hit
        _, gt = evaluator(xt, True)
        n_evals += 1
        if not np.all(np.isfinite(gt)):
            ls_failed = True
            break
        s = xt - x
        y = gt - g
        sy = s.dot(y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
        else:
            # negative/zero curvature: stale pairs would poison the
            # direction, so restart the approximation
            s_hist.clear()
            y_hist.clear()
            rho_hist.clear()
        improvement = f - ft
        x, f, g = xt, ft, gt
        iterations += 1
        if f < best_f:
            best_x, best_f, best_g = x.copy(), f, g.copy()
        pg = _pg_norm(x, g, lower, upper)
        if pg <= grad_tol:
            converged = True
            break
        # piecewise-smooth objectives can pin the minimum on a kink where
        # the gradient never meets the tolerance; stop once accepted steps
        # no longer move f beyond rounding noise
        if improvement <= 10.0 * np.finfo(float).eps * (abs(f) + 1.0):
            tiny_steps += 1
            if tiny_steps >= 3:
                stalled = True
                break
        else:
            tiny_steps = 0

    # hand back the converged iterate; fall back to the best f seen only
    # when the search stopped without meeting the tolerance
    if not converged and best_f < f:
        x, f, g = best_x, best_f, best_g
        pg = _pg_norm(x, g, lower, upper)
    return LbfgsResult(x, f, g, pg, iterations, n_evals, converged, ls_failed,
                       stalled)


# ----------------------------------------------------------------------
# taped objectives
# ----------------------------------------------------------------------

def _tracking_cost(median_2d, v_col, reference, q, r, tracked_dims, n_states,
                   prev_input, penalize_increments):
    """Taped J: Q-weighted tracking error plus R-weighted input term.

    median_2d is an on-tape (1, N*D) tensor in physical units; v_col is
    the (N, nu) input tensor.
    """
    n = v_col.shape[0]
    cols = [i * n_states + d for i in range(n) for d in tracked_dims]
    err = ad.reshape(ad.gather_columns(median_2d, cols), (n, len(tracked_dims)))
    err = ad.sub(err, reference.reshape(n, len(tracked_dims)))
    track = ad.tensor_sum(ad.mul(ad.matmul(err, q), err))
    if penalize_increments:
        flat = ad.reshape(v_col, (1, n))
        shifted = ad.concat(
            [Tensor([[float(prev_input)]]), ad.gather_columns(flat, list(range(n - 1)))],
            axis=1)
        vin = ad.reshape(ad.sub(flat, shifted), (n, 1))
    else:
        vin = v_col
    inp = ad.tensor_sum(ad.mul(ad.matmul(vin, r), vin))
    return ad.add(track, inp)


class ForecastObjective:
    """Phi evaluator for the quantile (robust) and median (nominal) MPC."""

    def __init__(self, model: Forecaster, past_targets, past_covariates,
                 problem: MpcProblem, reference, prev_input=0.0,
                 future_extras=None):
        self.model = model
        self.problem = problem
        self.past_targets = np.asarray(past_targets, dtype=float)
        self.past_covariates = np.asarray(past_covariates, dtype=float)
        self.reference = np.asarray(reference, dtype=float)
        self.prev_input = float(prev_input)
        self.future_extras = None if future_extras is None \
            else np.asarray(future_extras, dtype=float)
        c = model.config
        norm = model.normalization
        self.n = problem.horizon
        self.d = c.n_targets
        self._std_row = np.tile(norm.target_std, self.n)
        self._mean_row = np.tile(norm.target_mean, self.n)
        self.faces = problem.constraint_faces()
        # bounds in normalized units per face
        self._face_bounds = []
        for kind, dim in self.faces:
            bound = problem.state_upper[dim] if kind == "ub" \
                else problem.state_lower[dim]
            self._face_bounds.append(
                (bound - norm.target_mean[dim]) / norm.target_std[dim])
        self.n_constraints = len(self.faces) * self.n

    def evaluate(self, v, mu, lam, active_idx=None, need_grad=True):
        """Returns (phi, grad or None, active residuals, tracking cost)."""
        c = self.model.config
        tape = Tape()
        v_col = tape.leaf(np.asarray(v, dtype=float).reshape(self.n, 1))
        if self.future_extras is not None:
            fc = ad.concat([v_col, Tensor(self.future_extras)], axis=1)
        else:
            fc = v_col
        levels = self.model.forecast_graph(
            self.past_targets, self.past_covariates, fc)
        median_n = levels[c.median_index]
        median_phys = ad.add(ad.mul(median_n, self._std_row), self._mean_row)
        cost = _tracking_cost(
            median_phys, v_col, self.reference, self.problem.q, self.problem.r,
            self.problem.tracked_dims, self.d, self.prev_input,
            self.problem.penalize_increments)

        upper_t = median_n if not self.problem.robust else levels[-1]
        lower_t = median_n if not self.problem.robust else levels[0]
        residual_rows = []
        for (kind, dim), bound_n in zip(self.faces, self._face_bounds):
            cols = [i * self.d + dim for i in range(self.n)]
            if kind == "ub":
                row = ad.sub(ad.gather_columns(upper_t, cols), bound_n)
            else:
                row = ad.sub(bound_n, ad.gather_columns(lower_t, cols))
            residual_rows.append(row)

        if residual_rows:
            cvec = ad.concat(residual_rows, axis=1)
            if active_idx is not None and len(active_idx) != self.n_constraints:
                cvec = ad.gather_columns(cvec, list(active_idx))
            rc = ad.relu(cvec)
            pen = ad.add(ad.mul(0.5 * mu, ad.tensor_sum(ad.square(rc))),
                         ad.tensor_sum(ad.mul(Tensor(lam.reshape(1, -1)), rc)))
            phi = ad.add(cost, pen)
            residuals = cvec.data.ravel().copy()
        else:
            phi = cost
            residuals = np.empty(0)

        phi_val = phi.item()
        grad = None
        if need_grad:
            grad = tape.backward(phi).wrt(v_col).ravel().copy()
        return phi_val, grad, residuals, cost.item()


class LinearRolloutObjective:
    """Same Phi structure over an exact linear model x+ = A x + B v.

    Used by the tube baseline: the prediction is affine in the stacked
    inputs, x = G v + f(x0), and residuals are physical units against
    already-tightened bounds.
    """

    def __init__(self, a, b, x0, horizon, q, r, tracked_dims, reference,
                 state_lower, state_upper, prev_input=0.0,
                 penalize_increments=False):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float).reshape(-1, 1)
        d = a.shape[0]
        self.n = horizon
        self.d = d
        self.q = np.atleast_2d(q)
        self.r = np.atleast_2d(r)
        self.tracked_dims = tuple(tracked_dims)
        self.reference = np.asarray(reference, dtype=float)
        self.state_lower = np.asarray(state_lower, dtype=float)
        self.state_upper = np.asarray(state_upper, dtype=float)
        self.prev_input = float(prev_input)
        self.penalize_increments = penalize_increments
        powers = [np.eye(d)]
        for _ in range(horizon):
            powers.append(a @ powers[-1])
        g = np.zeros((horizon * d, horizon))
        f = np.zeros(horizon * d)
        x0 = np.asarray(x0, dtype=float)
        for i in range(horizon):            # row block: state after step i
            f[i * d:(i + 1) * d] = powers[i + 1] @ x0
            for j in range(i + 1):
                g[i * d:(i + 1) * d, j] = (powers[i - j] @ b).ravel()
        self._g = g
        self._f = f.reshape(1, -1)
        self.faces = []
        self._face_bounds = []
        for dim in range(d):
            if np.isfinite(self.state_upper[dim]):
                self.faces.append(("ub", dim))
                self._face_bounds.append(self.state_upper[dim])
            if np.isfinite(self.state_lower[dim]):
                self.faces.append(("lb", dim))
                self._face_bounds.append(self.state_lower[dim])
        self.n_constraints = len(self.faces) * self.n

    def evaluate(self, v, mu, lam, active_idx=None, need_grad=True):
        tape = Tape()
        v_col = tape.leaf(np.asarray(v, dtype=float).reshape(self.n, 1))
        x_row = ad.add(ad.reshape(ad.matmul(Tensor(self._g), v_col),
                                  (1, self.n * self.d)), self._f)
        cost = _tracking_cost(
            x_row, v_col, self.reference, self.q, self.r, self.tracked_dims,
            self.d, self.prev_input, self.penalize_increments)

        residual_rows = []
        for (kind, dim), bound in zip(self.faces, self._face_bounds):
            cols = [i * self.d + dim for i in range(self.n)]
            picked = ad.gather_columns(x_row, cols)
            row = ad.sub(picked, bound) if kind == "ub" else ad.sub(bound, picked)
            residual_rows.append(row)
        if residual_rows:
            cvec = ad.concat(residual_rows, axis=1)
            if active_idx is not None and len(active_idx) != self.n_constraints:
                cvec = ad.gather_columns(cvec, list(active_idx))
            rc = ad.relu(cvec)
            pen = ad.add(ad.mul(0.5 * mu, ad.tensor_sum(ad.square(rc))),
                         ad.tensor_sum(ad.mul(Tensor(lam.reshape(1, -1)), rc)))
            phi = ad.add(cost, pen)
            residuals = cvec.data.ravel().copy()
        else:
            phi = cost
            residuals = np.empty(0)
        phi_val = phi.item()
        grad = None
        if need_grad:
            grad = tape.backward(phi).wrt(v_col).ravel().copy()
        return phi_val, grad, residuals, cost.item()

    def predict(self, v):
        """Deterministic rollout used for the nominal-state update."""
        x = self._g @ np.asarray(v, dtype=float) + self._f.ravel()
        return x.reshape(self.n, self.d)


# ----------------------------------------------------------------------
# augmented Lagrangian outer loop
# ----------------------------------------------------------------------

@dataclass
class ALResult:
    v: np.ndarray
    phi: float
    cost: float
    residuals: np.ndarray
    feasible: bool
    outer_iters: int
    inner_iters: int
    grad_norm: float
    relaxed: tuple = ()
    mu: float = 0.0
    lam: np.ndarray | None = None


def _al_loop(objective, cfg: PenaltyLoopConfig, v0, lower, upper,
             active_idx, mu0, lam0):
    mu = mu0
    lam = lam0.copy()
    v = np.asarray(v0, dtype=float).copy()
    inner_total = 0
    outer = 0
    viol_history = []
    res = None
    for outer in range(1, cfg.max_outer_iters + 1):
        def evaluator(x, need_grad, _mu=mu, _lam=lam):
            phi, grad, _, _ = objective.evaluate(
                x, _mu, _lam, active_idx, need_grad)
            return phi, grad

        inner = lbfgs_minimize(
            evaluator, v, lower, upper, memory=cfg.lbfgs_memory,
            grad_tol=cfg.grad_tol, max_iters=cfg.max_inner_iters)
        inner_total += inner.iterations
        v = inner.x
        phi, _, residuals, cost = objective.evaluate(
            v, mu, lam, active_idx, need_grad=False)
        if not np.isfinite(phi):
            raise SolverAborted("non-finite augmented loss")
        viol = np.maximum(residuals, 0.0)
        viol_history.append(viol)
        res = ALResult(v, phi, cost, residuals,
                       feasible=bool(np.all(viol <= cfg.constraint_tol)),
                       outer_iters=outer, inner_iters=inner_total,
                       grad_norm=inner.pg_norm, mu=mu, lam=lam.copy())
        if res.feasible and inner.pg_norm <= cfg.grad_tol:
            break
        # strictly feasible point with a stalled inner solve: the penalty
        # terms are identically zero, so further outer iterations would
        # re-solve the exact same problem
        if res.feasible and viol.max(initial=0.0) == 0.0 and \
                (inner.stalled or inner.converged):
            break
        lam = lam + viol
        mu = cfg.alpha_mu * mu
    return res, viol_history


def augmented_lagrangian_solve(objective, cfg: PenaltyLoopConfig, v0,
                               lower=None, upper=None, multipliers=None,
                               allow_relaxation: bool = True) -> ALResult:
    """Outer multiplier/penalty loop around the quasi-Newton inner solver.

    ``multipliers`` optionally warm-starts (mu, lambda) for a repeated
    solve of an unchanged problem. If the iteration budget is exhausted
    and some constraints never moved (violation reduced by less than 1%
    from the first outer iteration), those constraints are treated as
    structurally infeasible, dropped, and the solve repeats once; the
    dropped indices are reported in ``relaxed``.
    """
    n_c = objective.n_constraints
    active_idx = np.arange(n_c)
    if multipliers is not None:
        mu0, lam0 = multipliers
        lam0 = np.asarray(lam0, dtype=float)
    else:
        mu0, lam0 = cfg.mu0, np.zeros(n_c)
    n = objective.n
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)

    res, history = _al_loop(objective, cfg, v0, lower, upper, active_idx,
                            mu0, lam0)
    if res.feasible or not allow_relaxation or len(history) < 2:
        return res
    first, last = history[0], history[-1]
    tol = cfg.constraint_tol
    stuck = (last > tol) & (last >= 0.99 * first)
    if not np.any(stuck):
        return res
    keep = active_idx[~stuck]
    relaxed = tuple(int(i) for i in active_idx[stuck])
    res2, _ = _al_loop(objective, cfg, res.v, lower, upper, keep,
                       cfg.mu0, np.zeros(keep.size))
    res2.relaxed = relaxed
    res2.inner_iters += res.inner_iters
    res2.outer_iters += res.outer_iters
    return res2


# ----------------------------------------------------------------------
# receding-horizon controller
# ----------------------------------------------------------------------

class RecedingHorizonController:
    """Warm-started receding-horizon loop over the forecast objective.

    Call ``step(x_measured, reference)`` to obtain the input to apply,
    then ``observe(u_applied, x_next)`` once the plant has moved. Until
    the lookback window is filled the controller applies a constant
    startup input. On solver failure or infeasibility the shifted
    previous plan's first entry is applied and flagged.
    """

    def __init__(self, model: Forecaster, problem: MpcProblem,
                 penalty: PenaltyLoopConfig | None = None,
                 startup_input: float = 0.0, allow_relaxation: bool = True):
        self.model = model
        self.problem = problem
        self.penalty = penalty if penalty is not None else PenaltyLoopConfig()
        self.startup_input = float(
            np.clip(startup_input, *problem.input_bounds))
        self.allow_relaxation = allow_relaxation
        self._x_hist: list = []
        self._u_hist: list = []
        self._last_plan: np.ndarray | None = None
        self._one_step_median: np.ndarray | None = None

    @property
    def ready(self) -> bool:
        return len(self._x_hist) >= self.model.config.window_w

    def observe(self, u_applied: float, x_next) -> None:
        w = self.model.config.window_w
        self._u_hist.append(float(u_applied))
        self._x_hist.append(np.asarray(x_next, dtype=float).copy())
        if len(self._x_hist) > w:
            self._x_hist.pop(0)
            self._u_hist.pop(0)

    def _window_arrays(self):
        return np.stack(self._x_hist), np.array(self._u_hist).reshape(-1, 1)

    def step(self, x_measured, reference) -> SolveResult:
        t0 = time.perf_counter()
        n = self.problem.horizon
        if not self.ready:
            u = self.startup_input
            return SolveResult(
                v_opt=np.full(n, u), u_applied=u, forecast=None,
                feasible=True, outer_iters=0, inner_iters=0,
                wall_time=time.perf_counter() - t0, fallback_used=False,
                startup=True)

        pt, pc = self._window_arrays()
        if self._last_plan is None:
            warm = np.full(n, self.startup_input)
        else:
            warm = np.concatenate([self._last_plan[1:], self._last_plan[-1:]])
        fallback_input = warm[0]

        lo = np.full(n, self.problem.input_bounds[0])
        hi = np.full(n, self.problem.input_bounds[1])
        pre_infeasible = False
        if self.problem.robust and self.problem.tighten_inputs:
            probe = self._forecast_at(pt, pc, warm)
            lo, hi, empty = tighten_input_bounds(
                self.problem.input_bounds, self.problem.ancillary_gain, probe)
            pre_infeasible = bool(np.any(empty))

        objective = ForecastObjective(
            self.model, pt, pc, self.problem, np.asarray(reference),
            prev_input=self._u_hist[-1])
        aborted = False
        try:
            al = augmented_lagrangian_solve(
                objective, self.penalty, warm, lo, hi,
                allow_relaxation=self.allow_relaxation)
        except SolverAborted:
            aborted = True
            al = None

        if aborted:
            plan = warm
            feasible = False
            fallback = True
            u_applied = float(np.clip(fallback_input, *self.problem.input_bounds))
            result = SolveResult(
                v_opt=plan.copy(), u_applied=u_applied, forecast=None,
                feasible=False, outer_iters=0, inner_iters=0,
                wall_time=0.0, fallback_used=True)
        else:
            feasible = al.feasible and not pre_infeasible
            fallback = not feasible
            if fallback:
                plan = warm
                u_applied = float(np.clip(fallback_input,
                                          *self.problem.input_bounds))
            else:
                plan = al.v
                e = np.zeros_like(self.problem.ancillary_gain)
                if self._one_step_median is not None:
                    e = np.asarray(x_measured, dtype=float) - self._one_step_median
                u_applied = apply_ancillary(
                    plan[0], e, self.problem.ancillary_gain,
                    self.problem.input_bounds)
            result = SolveResult(
                v_opt=al.v.copy(), u_applied=u_applied, forecast=None,
                feasible=feasible, outer_iters=al.outer_iters,
                inner_iters=al.inner_iters, wall_time=0.0,
                fallback_used=fallback, residuals=al.residuals,
                cost=al.cost, relaxed=al.relaxed)

        forecast = self._forecast_at(pt, pc, plan)
        result.forecast = forecast
        self._one_step_median = forecast.median[0].copy()
        self._last_plan = plan.copy()
        result.wall_time = time.perf_counter() - t0
        return result

    def _forecast_at(self, pt, pc, plan) -> QuantileForecast:
        window = TimeSeriesWindow(
            past_targets=pt, past_covariates=pc,
            future_covariates=np.asarray(plan, dtype=float).reshape(-1, 1))
        return self.model.forecast(window)
