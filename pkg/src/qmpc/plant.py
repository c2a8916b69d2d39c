"""Ground-truth dynamical systems for data generation and closed-loop runs.

The benchmark is a two-state discrete LTI system driven by a scalar input
with additive Gaussian input noise:

    x+ = A x + B (u + eps),   eps ~ N(0, sigma_eps^2)

so the state disturbance is w = B eps. A mildly saturating nonlinear
variant is included for exercising the solver beyond the linear case; it
is not part of any benchmark-number comparison.
"""

from __future__ import annotations

import csv

import numpy as np

BENCHMARK_A = np.array([[0.3, 0.1], [0.1, 0.2]])
BENCHMARK_B = np.array([0.5, 1.0])
BENCHMARK_SIGMA_EPS = 0.1
BENCHMARK_INPUT_BOUNDS = (-5.0, 5.0)


class LtiPlant:
    """x+ = A x + B (u + eps) with seeded noise; single-threaded."""

    def __init__(self, a=None, b=None, sigma_eps=BENCHMARK_SIGMA_EPS,
                 x0=(0.0, 0.0), rng=None):
        self.a = np.array(BENCHMARK_A if a is None else a, dtype=float)
        self.b = np.array(BENCHMARK_B if b is None else b, dtype=float).reshape(-1)
        if self.a.shape[0] != self.a.shape[1] or self.a.shape[0] != self.b.size:
            raise ValueError(f"inconsistent A {self.a.shape} / B {self.b.shape}")
        radius = np.max(np.abs(np.linalg.eigvals(self.a)))
        if radius >= 1.0:
            raise ValueError(f"open-loop unstable A (spectral radius {radius:.3f})")
        self.sigma_eps = float(sigma_eps)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.state = np.array(x0, dtype=float)
        self.last_eps = 0.0

    @property
    def n_states(self) -> int:
        return self.b.size

    def reset(self, x0):
        self.state = np.array(x0, dtype=float)

    def step(self, u: float) -> np.ndarray:
        """Advance one step with noise drawn from the plant's stream."""
        if not np.isfinite(u):
            raise ValueError(f"non-finite input {u!r}")
        eps = self.rng.normal(0.0, self.sigma_eps)
        self.last_eps = eps
        self.state = self.a @ self.state + self.b * (float(u) + eps)
        return self.state.copy()

    def step_noiseless(self, u: float) -> np.ndarray:
        if not np.isfinite(u):
            raise ValueError(f"non-finite input {u!r}")
        self.last_eps = 0.0
        self.state = self.a @ self.state + self.b * float(u)
        return self.state.copy()


class SaturatingPlant(LtiPlant):
    """Nonlinear variant: the effective input saturates smoothly.

    x+ = A x + B * c*tanh((u + eps)/c). Stands in for plants whose input
    authority rolls off near the actuator limits.
    """

    def __init__(self, *args, saturation=5.0, **kwargs):
        super().__init__(*args, **kwargs)
        self.saturation = float(saturation)

    def step(self, u: float) -> np.ndarray:
        if not np.isfinite(u):
            raise ValueError(f"non-finite input {u!r}")
        eps = self.rng.normal(0.0, self.sigma_eps)
        self.last_eps = eps
        c = self.saturation
        self.state = self.a @ self.state + self.b * (c * np.tanh((float(u) + eps) / c))
        return self.state.copy()

    def step_noiseless(self, u: float) -> np.ndarray:
        if not np.isfinite(u):
            raise ValueError(f"non-finite input {u!r}")
        self.last_eps = 0.0
        c = self.saturation
        self.state = self.a @ self.state + self.b * (c * np.tanh(float(u) / c))
        return self.state.copy()


def simulate_noiseless(plant: LtiPlant, x0, u_sequence) -> np.ndarray:
    """Deterministic rollout with eps = 0; does not touch the plant state.

    Returns the (len(u), n_states) array of states reached after each
    input, i.e. row t is the state produced by u_sequence[t].
    """
    u_sequence = np.asarray(u_sequence, dtype=float)
    if not np.all(np.isfinite(u_sequence)):
        raise ValueError("non-finite input sequence")
    x = np.array(x0, dtype=float)
    out = np.empty((u_sequence.size, plant.n_states))
    for t, u in enumerate(u_sequence):
        x = plant.a @ x + plant.b * u
        out[t] = x
    return out


def generate_excitation(n: int, u_bounds=BENCHMARK_INPUT_BOUNDS, rng=None) -> np.ndarray:
    """i.i.d. uniform excitation inputs over u_bounds."""
    rng = rng if rng is not None else np.random.default_rng(0)
    lo, hi = u_bounds
    return rng.uniform(lo, hi, size=n)


def rollout(plant: LtiPlant, u_sequence, noiseless: bool = False):
    """Apply a whole input sequence; returns (states, eps) arrays.

    Row t of states is the state reached after applying u_sequence[t]
    (matching the dataset convention that a row pairs an input with the
    state it produced).
    """
    u_sequence = np.asarray(u_sequence, dtype=float)
    states = np.empty((u_sequence.size, plant.n_states))
    eps = np.zeros(u_sequence.size)
    for t, u in enumerate(u_sequence):
        states[t] = plant.step_noiseless(u) if noiseless else plant.step(u)
        eps[t] = plant.last_eps
    return states, eps


def write_trajectory_csv(path, u_applied, eps, states) -> None:
    """Trajectory CSV: time, u_applied, eps, x1, x2, ..."""
    states = np.asarray(states)
    n_states = states.shape[1]
    header = ["time", "u_applied", "eps"] + [f"x{j+1}" for j in range(n_states)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(states.shape[0]):
            writer.writerow(
                [t, repr(float(u_applied[t])), repr(float(eps[t]))]
                + [repr(float(v)) for v in states[t]]
            )


def read_trajectory_csv(path):
    """Inverse of write_trajectory_csv; returns (u_applied, eps, states)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n_states = len(header) - 3
    u = np.array([float(r[1]) for r in body])
    eps = np.array([float(r[2]) for r in body])
    states = np.array([[float(v) for v in r[3:3 + n_states]] for r in body])
    return u, eps, states
