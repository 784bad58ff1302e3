"""Derivative-free Nelder-Mead simplex search with dimension-adaptive coefficients and restarts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimplexConfig:
    """Optimizer settings.

    ``tol`` is relative: a run stops once
    ``f_worst - f_best <= tol * |f_best| + atol`` across the whole simplex;
    ``atol`` only matters for objectives that approach zero.
    ``max_evals`` caps objective calls over all runs.
    Each restart rebuilds a simplex around the incumbent with seeded random
    step lengths; restarting stops early when a run fails to improve the
    incumbent by more than ``tol``.
    """

    tol: float = 1e-8
    atol: float = 1e-12
    max_evals: int = 200_000
    restarts: int = 5
    initial_step: float = 0.5
    seed: int = 0
    adaptive: bool = True


@dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    trace: list[float] = field(default_factory=list)
    n_evals: int = 0
    n_iterations: int = 0
    converged: bool = False
    runs: int = 0


class _Budget(Exception):
    pass


def _coefficients(n, adaptive):
    if adaptive and n > 1:
        return 1.0, 1.0 + 2.0 / n, 0.75 - 1.0 / (2.0 * n), 1.0 - 1.0 / n
    return 1.0, 2.0, 0.5, 0.5


def minimize(fun, x0, config: SimplexConfig = SimplexConfig()) -> SimplexResult:
    """Minimize ``fun`` from ``x0``.

    ``trace`` holds the best objective value seen so far after every
    iteration (and is therefore non-increasing).  Non-finite objective values
    are treated as +inf.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    rng = np.random.default_rng(config.seed)
    alpha, chi, psi, sigma = _coefficients(n, config.adaptive)
    state = {"evals": 0, "best_x": x0.copy(), "best_f": np.inf}
    trace: list[float] = []

    def f(x):
        if state["evals"] >= config.max_evals:
            raise _Budget
        state["evals"] += 1
        v = float(fun(x))
        if not np.isfinite(v):
            v = np.inf
        if v < state["best_f"]:
            state["best_f"], state["best_x"] = v, x.copy()
        return v

    def run(start, steps):
        sim = np.vstack([start, start + np.diag(steps)])
        fs = np.array([f(v) for v in sim])
        while True:
            order = np.argsort(fs, kind="stable")
            sim, fs = sim[order], fs[order]
            trace.append(state["best_f"])
            if np.isfinite(fs[-1]) and fs[-1] - fs[0] <= config.tol * abs(fs[0]) + config.atol:
                return True
            centroid = sim[:-1].mean(axis=0)
            xr = centroid + alpha * (centroid - sim[-1])
            fr = f(xr)
            if fr < fs[0]:
                xe = centroid + chi * (xr - centroid)
                fe = f(xe)
                sim[-1], fs[-1] = (xe, fe) if fe < fr else (xr, fr)
                continue
            if fr < fs[-2]:
                sim[-1], fs[-1] = xr, fr
                continue
            if fr < fs[-1]:
                xc = centroid + psi * (xr - centroid)
                fc = f(xc)
                if fc <= fr:
                    sim[-1], fs[-1] = xc, fc
                    continue
            else:
                xc = centroid - psi * (centroid - sim[-1])
                fc = f(xc)
                if fc < fs[-1]:
                    sim[-1], fs[-1] = xc, fc
                    continue
            sim[1:] = sim[0] + sigma * (sim[1:] - sim[0])
            for i in range(1, n + 1):
                fs[i] = f(sim[i])

    converged = False
    runs = 0
    try:
        f(x0)
        trace.append(state["best_f"])
        steps = np.full(n, config.initial_step)
        start = x0
        for attempt in range(config.restarts + 1):
            before = state["best_f"]
            runs += 1
            converged = run(start, steps)
            gain = before - state["best_f"]
            log.debug("simplex run %d: f=%.10g gain=%.3g evals=%d", runs, state["best_f"], gain, state["evals"])
            if attempt > 0 and gain <= config.tol * abs(state["best_f"]) + config.atol:
                break
            start = state["best_x"].copy()
            steps = config.initial_step * rng.uniform(0.25, 1.0, n) * rng.choice([-1.0, 1.0], n)
    except _Budget:
        converged = False
        trace.append(state["best_f"])
    return SimplexResult(
        x=state["best_x"],
        fun=state["best_f"],
        trace=trace,
        n_evals=state["evals"],
        n_iterations=len(trace),
        converged=converged,
        runs=runs,
    )
