"""Closed-loop Monte-Carlo campaigns and comparison statistics.

Episodes roll a controller against an independently seeded plant; a
campaign runs many replicates, then aggregates per-step constraint
violation rates (the failure rate is the maximum any-constraint rate
over the trajectory), cross-replicate median and quantile bands, tracking
r-squared, and solve-time summaries. Violation statistics and trajectory
bands describe the measured states reached after each applied input.

Reports serialize to JSON with the wall-clock timing summary held in a
separate section, since everything outside it is bitwise reproducible
for a fixed master seed.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import plant as pl
from .config import RunConfig, seed_stream
from .forecaster import Forecaster
from .mpc import MpcProblem, PenaltyLoopConfig, RecedingHorizonController
from .tube import TubeMpcController, compute_tube

CONTROLLER_KINDS = ("nominal", "robust", "tube")


@dataclass
class ClosedLoopTrace:
    kind: str
    seed: int
    states: np.ndarray        # (T, D), state reached after each step
    v0: np.ndarray            # (T,) first nominal input of each plan
    u_applied: np.ndarray     # (T,)
    reference: np.ndarray     # (T,) target for the tracked state
    feasible: np.ndarray      # (T,) bool
    fallback_used: np.ndarray
    startup: np.ndarray
    wall_time: np.ndarray     # (T,) seconds
    outer_iters: np.ndarray
    inner_iters: np.ndarray
    cost: np.ndarray
    relaxed_steps: int = 0

    def __len__(self):
        return self.states.shape[0]


def build_plant(plant_cfg, rng) -> pl.LtiPlant:
    cls = pl.SaturatingPlant if plant_cfg.kind == "saturating" else pl.LtiPlant
    kwargs = {}
    if plant_cfg.kind == "saturating":
        kwargs["saturation"] = plant_cfg.saturation
    return cls(a=plant_cfg.a, b=plant_cfg.b, sigma_eps=plant_cfg.sigma_eps,
               x0=plant_cfg.x0, rng=rng, **kwargs)


def build_problem(mpc_cfg, robust: bool) -> MpcProblem:
    return MpcProblem(
        horizon=mpc_cfg.horizon, q=mpc_cfg.q, r=mpc_cfg.r,
        tracked_dims=tuple(mpc_cfg.tracked_dims),
        state_lower=np.asarray(mpc_cfg.state_lower, dtype=float),
        state_upper=np.asarray(mpc_cfg.state_upper, dtype=float),
        input_bounds=tuple(mpc_cfg.input_bounds), robust=robust,
        ancillary_gain=np.asarray(mpc_cfg.ancillary_gain, dtype=float),
        tighten_inputs=robust and mpc_cfg.tighten_inputs,
        penalize_increments=mpc_cfg.penalize_increments)


def build_penalty(penalty_cfg) -> PenaltyLoopConfig:
    return PenaltyLoopConfig(
        mu0=penalty_cfg.mu0, alpha_mu=penalty_cfg.growth,
        max_outer_iters=penalty_cfg.max_outer,
        max_inner_iters=penalty_cfg.max_inner,
        grad_tol=penalty_cfg.grad_tol,
        constraint_tol=penalty_cfg.constraint_tol,
        lbfgs_memory=penalty_cfg.lbfgs_memory)


def build_controller(kind: str, model: Forecaster | None, cfg: RunConfig):
    if kind not in CONTROLLER_KINDS:
        raise ValueError(f"unknown controller kind {kind!r}")
    penalty = build_penalty(cfg.mpc.penalty)
    if kind == "tube":
        problem = build_problem(cfg.mpc, robust=True)
        spec = compute_tube(cfg.plant.a, cfg.plant.b, cfg.mpc.ancillary_gain,
                            cfg.plant.sigma_eps, cfg.campaign.tube_confidence)
        return TubeMpcController(cfg.plant.a, cfg.plant.b, spec, problem,
                                 penalty)
    if model is None:
        raise ValueError(f"{kind} controller requires a trained forecaster")
    problem = build_problem(cfg.mpc, robust=(kind == "robust"))
    return RecedingHorizonController(model, problem, penalty,
                                     startup_input=cfg.mpc.startup_input)


def run_episode(controller, plant, reference, episode_length: int,
                kind: str = "", seed: int = -1,
                plan_sink=None) -> ClosedLoopTrace:
    """Roll one closed-loop episode; the controller sees the reference
    slice for the states its plan covers. ``plan_sink(k, result)`` is
    invoked after every step when provided (plan dumps)."""
    reference = np.asarray(reference, dtype=float)
    horizon = controller.problem.horizon
    padded = np.concatenate(
        [reference, np.full(horizon + 1, reference[-1])])
    d = plant.n_states
    states = np.empty((episode_length, d))
    v0 = np.empty(episode_length)
    u_applied = np.empty(episode_length)
    feasible = np.empty(episode_length, dtype=bool)
    fallback = np.empty(episode_length, dtype=bool)
    startup = np.empty(episode_length, dtype=bool)
    wall = np.empty(episode_length)
    outer = np.empty(episode_length, dtype=int)
    inner = np.empty(episode_length, dtype=int)
    cost = np.empty(episode_length)
    relaxed = 0

    x = plant.state.copy()
    for k in range(episode_length):
        ref_slice = padded[k + 1:k + 1 + horizon].reshape(horizon, 1)
        res = controller.step(x, ref_slice)
        x = plant.step(res.u_applied)
        controller.observe(res.u_applied, x)
        states[k] = x
        v0[k] = res.v_opt[0]
        u_applied[k] = res.u_applied
        feasible[k] = res.feasible
        fallback[k] = res.fallback_used
        startup[k] = res.startup
        wall[k] = res.wall_time
        outer[k] = res.outer_iters
        inner[k] = res.inner_iters
        cost[k] = res.cost
        relaxed += len(res.relaxed)
        if plan_sink is not None:
            plan_sink(k, res)
    return ClosedLoopTrace(
        kind=kind, seed=seed, states=states, v0=v0, u_applied=u_applied,
        reference=padded[1:episode_length + 1].copy(), feasible=feasible,
        fallback_used=fallback, startup=startup, wall_time=wall,
        outer_iters=outer, inner_iters=inner, cost=cost,
        relaxed_steps=relaxed)


# ----------------------------------------------------------------------
# statistics
# ----------------------------------------------------------------------

def violation_rate(state_arrays, lower, upper):
    """Per-step fraction of replicates with any state outside bounds.

    Returns (per_step_any, max_rate, per_face) where per_face maps
    'x{j}_ub'/'x{j}_lb' to per-step rates. Values exactly on a bound are
    satisfied.
    """
    stack = np.stack([np.asarray(s) for s in state_arrays])  # (R, T, D)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    above = stack > upper
    below = stack < lower
    per_face = {}
    for j in range(stack.shape[2]):
        per_face[f"x{j + 1}_ub"] = above[:, :, j].mean(axis=0)
        per_face[f"x{j + 1}_lb"] = below[:, :, j].mean(axis=0)
    any_out = (above | below).any(axis=2)
    per_step = any_out.mean(axis=0)
    return per_step, float(per_step.max()), per_face


def tracking_r2(states, reference, tracked_dim: int = 0) -> float:
    """1 - SS_res/SS_tot of the tracked state against the reference.

    Returns nan for a constant reference (undefined total variance).
    """
    states = np.asarray(states)
    y = states[:, tracked_dim] if states.ndim == 2 else states
    r = np.asarray(reference, dtype=float)
    ss_tot = float(((r - r.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return float("nan")
    ss_res = float(((y - r) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def timing_histogram(wall_times, n_bins: int = 20):
    """Fixed-width histogram plus mean and max of solve times."""
    w = np.asarray(wall_times, dtype=float).ravel()
    if w.size == 0:
        raise ValueError("no solve times recorded")
    lo, hi = float(w.min()), float(w.max())
    if lo == hi:
        return {"edges": [lo, hi], "counts": [int(w.size)],
                "mean": lo, "max": hi}
    counts, edges = np.histogram(w, bins=n_bins, range=(lo, hi))
    return {"edges": edges.tolist(), "counts": counts.tolist(),
            "mean": float(w.mean()), "max": hi}


@dataclass
class CampaignReport:
    kind: str
    n_replicates: int
    n_aborted: int
    episode_length: int
    campaign_seed: int
    failure_rate: float
    per_step_any_rate: list
    per_face_rates: dict
    per_face_max: dict
    state_median: list          # (T, D)
    state_q05: list
    state_q95: list
    reference: list
    mean_r2: float
    margins: dict               # face -> mean median-trajectory margin
    fallback_rate: float
    relaxed_steps: int
    timing: dict

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "kind", "n_replicates", "n_aborted", "episode_length",
            "campaign_seed", "failure_rate", "per_step_any_rate",
            "per_face_rates", "per_face_max", "state_median", "state_q05",
            "state_q95", "reference", "mean_r2", "margins", "fallback_rate",
            "relaxed_steps")}
        return {"results": out, "timing": self.timing}

    @classmethod
    def from_dict(cls, data: dict) -> "CampaignReport":
        return cls(**data["results"], timing=data["timing"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "CampaignReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _nan_to_none(x):
    return None if isinstance(x, float) and np.isnan(x) else x


def summarize_campaign(kind, traces, aborted, cfg: RunConfig, reference,
                       campaign_seed) -> CampaignReport:
    lower = np.asarray(cfg.mpc.state_lower, dtype=float)
    upper = np.asarray(cfg.mpc.state_upper, dtype=float)
    states = [t.states for t in traces]
    per_step, failure, per_face = violation_rate(states, lower, upper)
    stack = np.stack(states)
    med = np.median(stack, axis=0)
    q05 = np.quantile(stack, 0.05, axis=0)
    q95 = np.quantile(stack, 0.95, axis=0)
    ref = traces[0].reference
    r2s = [tracking_r2(t.states, t.reference,
                       tracked_dim=cfg.mpc.tracked_dims[0]) for t in traces]
    tracked = cfg.mpc.tracked_dims[0]
    margins = {}
    for face, bound in ((f"x{tracked + 1}_lb", lower[tracked]),
                        (f"x{tracked + 1}_ub", upper[tracked])):
        on_bound = np.isclose(ref, bound)
        if np.any(on_bound):
            traj = med[on_bound, tracked]
            margin = (traj - bound) if face.endswith("lb") else (bound - traj)
            margins[face] = float(margin.mean())
    solve_times = np.concatenate(
        [t.wall_time[~t.startup] for t in traces]) if traces else np.empty(0)
    fallback_rate = float(np.mean(
        np.concatenate([t.fallback_used[~t.startup] for t in traces])))
    return CampaignReport(
        kind=kind, n_replicates=len(traces) + aborted, n_aborted=aborted,
        episode_length=len(traces[0]), campaign_seed=int(campaign_seed),
        failure_rate=failure, per_step_any_rate=per_step.tolist(),
        per_face_rates={k: v.tolist() for k, v in per_face.items()},
        per_face_max={k: float(v.max()) for k, v in per_face.items()},
        state_median=med.tolist(), state_q05=q05.tolist(),
        state_q95=q95.tolist(), reference=ref.tolist(),
        mean_r2=_nan_to_none(float(np.mean(r2s))),
        margins=margins, fallback_rate=fallback_rate,
        relaxed_steps=int(sum(t.relaxed_steps for t in traces)),
        timing=timing_histogram(solve_times))


def _replicate_task(args):
    (kind, model, cfg, reference, episode_length, rep) = args
    try:
        rng = seed_stream(cfg.master_seed, "campaign", rep)
        plant = build_plant(cfg.plant, rng)
        controller = build_controller(kind, model, cfg)
        trace = run_episode(controller, plant, reference, episode_length,
                            kind=kind, seed=rep)
        return rep, trace, None
    except Exception as exc:  # noqa: BLE001 - aborts are reported, not fatal
        return rep, None, repr(exc)


def run_campaign(kind: str, model: Forecaster | None, cfg: RunConfig,
                 n_replicates: int | None = None,
                 episode_length: int | None = None,
                 reference=None, workers: int = 1):
    """Independent closed-loop replicates plus their aggregate report.

    Returns (report, aborted_messages). Replicate seeds derive from the
    master seed and the replicate index alone, so results do not depend
    on the worker count.
    """
    n_replicates = cfg.campaign.replicates if n_replicates is None \
        else n_replicates
    episode_length = cfg.campaign.episode_length if episode_length is None \
        else episode_length
    if reference is None:
        reference = cfg.campaign.reference.build(episode_length)
    tasks = [(kind, model, cfg, reference, episode_length, rep)
             for rep in range(n_replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunk = max(1, n_replicates // (4 * workers))
            results = list(pool.map(_replicate_task, tasks, chunksize=chunk))
    else:
        results = [_replicate_task(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    traces = [t for _, t, _ in results if t is not None]
    errors = [(rep, err) for rep, t, err in results if t is None]
    if not traces:
        raise RuntimeError(f"all {n_replicates} replicates aborted: {errors[:3]}")
    report = summarize_campaign(kind, traces, len(errors), cfg, reference,
                                campaign_seed=cfg.master_seed)
    return report, errors


# ----------------------------------------------------------------------
# csv writers
# ----------------------------------------------------------------------

def write_aggregates_csv(path, report: CampaignReport) -> None:
    """Per-step aggregates: rates then median/quantile bands per state."""
    med = np.asarray(report.state_median)
    q05 = np.asarray(report.state_q05)
    q95 = np.asarray(report.state_q95)
    d = med.shape[1]
    face_names = [f"x{j + 1}_{side}" for j in range(d) for side in ("ub", "lb")]
    header = ["step"] + [f"rate_{n}" for n in face_names] + ["rate_any"]
    for j in range(d):
        header += [f"med_x{j + 1}", f"q05_x{j + 1}", f"q95_x{j + 1}"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(med.shape[0]):
            row = [t]
            row += [repr(report.per_face_rates[n][t]) for n in face_names]
            row.append(repr(report.per_step_any_rate[t]))
            for j in range(d):
                row += [repr(med[t, j]), repr(q05[t, j]), repr(q95[t, j])]
            writer.writerow(row)


def write_episode_csv(path, trace: ClosedLoopTrace) -> None:
    """Full per-step record of one closed-loop episode."""
    d = trace.states.shape[1]
    header = ["time"] + [f"x{j + 1}" for j in range(d)] + [
        "reference", "v0", "u_applied", "feasible", "fallback_used",
        "startup", "wall_time_ms"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(len(trace)):
            writer.writerow(
                [t] + [repr(v) for v in trace.states[t]]
                + [repr(float(trace.reference[t])), repr(float(trace.v0[t])),
                   repr(float(trace.u_applied[t])),
                   int(trace.feasible[t]), int(trace.fallback_used[t]),
                   int(trace.startup[t]),
                   repr(float(trace.wall_time[t] * 1e3))])


def write_solve_log_csv(path, trace: ClosedLoopTrace) -> None:
    """Solve log: step, wall_time_ms, outer_iters, inner_iters, feasible,
    fallback_used, loss."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "wall_time_ms", "outer_iters", "inner_iters",
                         "feasible", "fallback_used", "loss"])
        for t in range(len(trace)):
            writer.writerow(
                [t, repr(float(trace.wall_time[t] * 1e3)),
                 int(trace.outer_iters[t]), int(trace.inner_iters[t]),
                 int(trace.feasible[t]), int(trace.fallback_used[t]),
                 repr(float(trace.cost[t]))])
