"""Empirical check that MoW iterates follow the gradient flow S' = -(k/n) grad C(S).

C is the expected full-batch cost over batches of ``n`` examples drawn with
replacement and a fresh prior sample. The oracle flow is integrated on a
fixed Monte-Carlo sample of ``oracle_samples`` batches; MoW paths are run for
several step sizes and averaged over seeds, with one optimizer step taking
``eta`` units of time.

Costs here use the raw sum of the per-example terms (``k_scaling="none"``),
the scaling under which the flow's ``k/n`` factor is a pure time rescale.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Literal

import numpy as np

from . import autodiff as ad
from .autoencoder import CostConfig, NetSpec, classical_cost, init_params
from .data import DataQueue, Dataset, make_synthetic, philox
from .distances import DistanceSpec, sample_unit_directions
from .optimizer import MowConfig, mow_init, mow_step

CSV_HEADER = ("eta", "sup_deviation", "endpoint_deviation", "seeds", "oracle_se_max")


@dataclass
class FlowProblem:
    dataset: Dataset
    spec: NetSpec
    cost: CostConfig
    theta0: ad.ParamVector
    n: int = 4
    k: int = 1
    horizon: float = 0.5
    oracle_samples: int = 4096
    flow_dt: float = 5e-4
    integrator: Literal["euler", "heun"] = "euler"
    oracle_seed: int = 12345

    def __post_init__(self):
        if self.oracle_samples < 1000:
            raise ValueError("oracle_samples must be >= 1000")
        if self.flow_dt <= 0 or self.horizon <= 0:
            raise ValueError("flow_dt and horizon must be positive")
        if not 1 <= self.k <= self.n:
            raise ValueError("need 1 <= k <= n")
        if self.integrator not in ("euler", "heun"):
            raise ValueError(f"unknown integrator {self.integrator!r}")


def default_toy_problem(**overrides) -> FlowProblem:
    """16 points of a two-Gaussian mixture in R^2, linear 2 -> 1 -> 2 autoencoder, MMD, lam = 0.1."""
    data = make_synthetic("gauss_mix", 16, {"components": 2, "radius": 1.5, "variance": 0.25}, seed=3)
    spec = NetSpec(2, 1, (), (), "linear")
    cost = CostConfig(lam=0.1, distance=DistanceSpec("mmd_imq"), k_scaling="none")
    theta0 = init_params(spec, philox(11, 0))
    problem = FlowProblem(data, spec, cost, theta0)
    return replace(problem, **overrides)


@dataclass
class Trajectory:
    times: np.ndarray
    thetas: np.ndarray  # (len(times), P)

    def __post_init__(self):
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("times must start at 0 and increase")

    def at(self, t: float) -> np.ndarray:
        """Affine interpolation between snapshots."""
        if t <= 0:
            return self.thetas[0]
        if t >= self.times[-1]:
            return self.thetas[-1]
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        t0, t1 = self.times[i], self.times[i + 1]
        w = (t - t0) / (t1 - t0)
        return (1 - w) * self.thetas[i] + w * self.thetas[i + 1]

    @property
    def endpoint(self) -> np.ndarray:
        return self.thetas[-1]


def _steps(horizon: float, dt: float) -> int:
    return int(math.floor(horizon / dt + 1e-9))


@dataclass
class OracleSample:
    """A fixed Monte-Carlo draw of batches, prior samples and direction sets."""

    x: np.ndarray  # (M, n, N)
    prior: np.ndarray  # (M, n, D)
    dirs: list  # per group: (s, D) or None
    groups: int

    @classmethod
    def draw(cls, problem: FlowProblem, rng: np.random.Generator, groups: int = 16) -> OracleSample:
        m, n = problem.oracle_samples, problem.n
        data = problem.dataset.examples
        idx = np.minimum((rng.random((m, n)) * len(data)).astype(np.int64), len(data) - 1)
        prior = rng.standard_normal((m, n, problem.spec.latent_dim))
        dist = problem.cost.distance
        dirs = [sample_unit_directions(dist.n_directions, problem.spec.latent_dim, rng)
                if dist.uses_directions else None for _ in range(groups)]
        return cls(data[idx], prior, dirs, groups)

    def group_gradients(self, theta: ad.ParamVector, problem: FlowProblem) -> np.ndarray:
        """Mean gradient of the full-batch cost within each of the groups, ``(groups, P)``."""
        out = []
        for xs, vs, d in zip(np.array_split(self.x, self.groups), np.array_split(self.prior, self.groups), self.dirs):
            res = classical_cost(theta, problem.spec, problem.cost, xs, vs, d)
            out.append(res.grad / xs.shape[0])
        return np.array(out)

    def gradient(self, theta: ad.ParamVector, problem: FlowProblem) -> np.ndarray:
        if self.groups == 1:
            res = classical_cost(theta, problem.spec, problem.cost, self.x, self.prior, self.dirs[0])
            return res.grad / self.x.shape[0]
        sizes = np.array([len(a) for a in np.array_split(self.x, self.groups)], dtype=np.float64)
        return (self.group_gradients(theta, problem) * sizes[:, None]).sum(axis=0) / sizes.sum()


def expected_cost_gradient(theta: ad.ParamVector, problem: FlowProblem, rng: np.random.Generator,
                           groups: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo estimate of grad C and its per-coordinate standard error.

    The standard error comes from the spread of ``groups`` equal-size batch
    means.
    """
    sample = OracleSample.draw(problem, rng, groups)
    per_group = sample.group_gradients(theta, problem)
    grad = per_group.mean(axis=0)
    se = per_group.std(axis=0, ddof=1) / math.sqrt(groups) if groups > 1 else np.zeros_like(grad)
    return grad, se


def integrate_flow(grad_fn: Callable[[np.ndarray], np.ndarray], theta0: np.ndarray, horizon: float,
                   dt: float, rate: float = 1.0, method: str = "euler") -> Trajectory:
    """Explicit Euler or Heun for ``S' = -rate * grad_fn(S)`` with snapshots every ``dt``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    steps = _steps(horizon, dt)
    thetas = np.empty((steps + 1, np.size(theta0)))
    thetas[0] = theta0
    s = np.array(theta0, dtype=np.float64)
    for i in range(steps):
        g = grad_fn(s)
        if method == "heun":
            trial = s - dt * rate * g
            s = s - 0.5 * dt * rate * (g + grad_fn(trial))
        else:
            s = s - dt * rate * g
        if not np.all(np.isfinite(s)):
            raise FloatingPointError(f"gradient flow diverged at t={(i + 1) * dt}")
        thetas[i + 1] = s
    return Trajectory(np.arange(steps + 1) * dt, thetas)


def integrate_gradient_flow(theta0: ad.ParamVector, problem: FlowProblem,
                            sample: OracleSample | None = None) -> Trajectory:
    """The (k/n)-scaled gradient flow of C, on a fixed oracle sample."""
    if sample is None:
        sample = OracleSample.draw(problem, philox(problem.oracle_seed, 5), groups=1)

    def grad_fn(values):
        return sample.gradient(theta0.with_values(values), problem)

    return integrate_flow(grad_fn, theta0.values, problem.horizon, problem.flow_dt,
                          problem.k / problem.n, problem.integrator)


def run_mow_trajectory(theta0: ad.ParamVector, problem: FlowProblem, eta: float, seed: int) -> Trajectory:
    """MoW with SGD from theta0 for floor(T / eta) steps, one snapshot per step."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    steps = _steps(problem.horizon, eta)
    cfg = MowConfig(n=problem.n, k=problem.k, eta=eta, cost=problem.cost, steps=steps, seed=seed)
    queue = DataQueue(problem.dataset, seed)
    state = mow_init(theta0, queue, cfg, problem.spec)
    thetas = [state.theta.values.copy()]
    for _ in range(steps):
        state, _ = mow_step(state, queue, cfg, problem.spec)
        thetas.append(state.theta.values.copy())
    return Trajectory(np.arange(steps + 1) * eta, np.array(thetas))


@dataclass
class StudyRow:
    eta: float
    sup_deviation: float
    endpoint_deviation: float
    seeds: int
    oracle_se_max: float


@dataclass
class ConvergenceReport:
    rows: list[StudyRow]
    passed: bool
    diagnostics: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([repr(r.eta), repr(r.sup_deviation), repr(r.endpoint_deviation), r.seeds,
                        repr(r.oracle_se_max)])
        return buf.getvalue()

    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def table(self) -> str:
        lines = [f"{'eta':>10} {'sup_dev':>12} {'end_dev':>12} {'sup_dev/eta':>12}"]
        for r in self.rows:
            lines.append(f"{r.eta:10.4g} {r.sup_deviation:12.5g} {r.endpoint_deviation:12.5g} "
                         f"{r.sup_deviation / r.eta:12.5g}")
        return "\n".join(lines)


def convergence_study(problem: FlowProblem, etas, seeds: int | list[int],
                      flow: Trajectory | None = None) -> ConvergenceReport:
    """Sup-norm deviation of the seed-averaged MoW path from the flow, per eta."""
    etas = sorted((float(e) for e in etas), reverse=True)
    if len(etas) < 3:
        raise ValueError("convergence study needs at least three step sizes")
    for big, small in zip(etas, etas[1:]):
        if small > big / 2 * (1 + 1e-12):
            raise ValueError(f"step sizes must at least halve: {big} -> {small}")
    if problem.flow_dt > etas[-1] / 10 * (1 + 1e-12):
        raise ValueError(f"flow_dt {problem.flow_dt} exceeds eta_min / 10")
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)

    theta0 = problem.theta0
    if flow is None:
        flow = integrate_gradient_flow(theta0, problem)
    _, se = expected_cost_gradient(theta0, problem, philox(problem.oracle_seed, 6))
    se_max = float(se.max())

    rows = []
    for eta in etas:
        paths = [run_mow_trajectory(theta0, problem, eta, s).thetas for s in seed_list]
        mean_path = np.mean(paths, axis=0)
        times = np.arange(mean_path.shape[0]) * eta
        dev = np.array([np.linalg.norm(mean_path[i] - flow.at(t)) for i, t in enumerate(times)])
        rows.append(StudyRow(eta, float(dev.max()), float(dev[-1]), len(seed_list), se_max))

    sup = [r.sup_deviation for r in rows]
    diagnostics = []
    for a, b in zip(rows, rows[1:]):
        if not b.sup_deviation < a.sup_deviation:
            diagnostics.append(f"deviation did not decrease from eta={a.eta:g} ({a.sup_deviation:.4g}) "
                               f"to eta={b.eta:g} ({b.sup_deviation:.4g})")
    return ConvergenceReport(rows, passed=all(b < a for a, b in zip(sup, sup[1:])), diagnostics=diagnostics)
