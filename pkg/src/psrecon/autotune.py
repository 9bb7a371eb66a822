"""Regularization search by differential evolution (DE/rand/1/bin).

The population is updated generation-synchronously: all trial vectors of
a generation are built from the current population with one RNG stream,
evaluated (optionally in a thread pool), and then selected in agent
order. The random decisions therefore never depend on evaluation order,
and a seed reproduces a run exactly.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .field import Field2D, ThermogramStack
from .forward import DefectMap
from .metrics import penalty_mask, reconstruction_cost
from .psf import PsfStack
from .solver import InverseProblem, SolverConfig

DEGENERATE_WIDTH = 1e-9


@dataclass(frozen=True)
class SearchConfig:
    bounds: tuple = ((-2.0, 4.0), (-2.0, 4.0))
    n_agents: int = 15
    n_generations: int = 35
    f_weight: float = 0.8
    cr: float = 0.9
    seed: int = 0
    early_stop: int | None = None

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        object.__setattr__(self, "bounds", b)
        if not b:
            raise ValueError("SearchConfig.bounds must have at least one dimension")
        for i, (lo, hi) in enumerate(b):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"SearchConfig.bounds[{i}] needs finite lo < hi, got {(lo, hi)}")
        if self.n_agents < 4:
            raise ValueError("SearchConfig.n_agents must be >= 4")
        if self.n_generations < 0:
            raise ValueError("SearchConfig.n_generations must be >= 0")
        if not 0 < self.f_weight <= 2:
            raise ValueError("SearchConfig.f_weight must lie in (0, 2]")
        if not 0 < self.cr <= 1:
            raise ValueError("SearchConfig.cr must lie in (0, 1]")
        if self.early_stop is not None and self.early_stop < 1:
            raise ValueError("SearchConfig.early_stop must be >= 1 when set")

    @property
    def lo(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds])

    @property
    def hi(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds])


@dataclass
class TuneResult:
    x_best: np.ndarray
    cost_best: float
    evaluations: int
    history: np.ndarray
    generations: int
    evaluated: np.ndarray = field(repr=False, default_factory=lambda: np.empty((0, 0)))
    log: list = field(repr=False, default_factory=list)

    @property
    def lambda_best(self) -> tuple[float, ...]:
        """Best point mapped out of log10 space."""
        return tuple(float(10.0 ** v) for v in self.x_best)


def _finite_or_inf(v) -> float:
    try:
        v = float(v)
    except (TypeError, ValueError):
        return math.inf
    return v if math.isfinite(v) else math.inf


def differential_evolution(
    cost: Callable[[np.ndarray], float],
    cfg: SearchConfig = SearchConfig(),
    workers: int = 1,
    on_eval: Callable | None = None,
) -> TuneResult:
    """Minimize ``cost`` over the box ``cfg.bounds``.

    Parameters
    ----------
    cost : callable
        Maps a point (1D array) to a value; non-finite values and raised
        exceptions both count as ``+inf``.
    cfg : SearchConfig
    workers : int
        Threads used for evaluating one generation.
    on_eval : callable, optional
        Called as ``on_eval(generation, agent, x, value, seconds, error)``
        for every evaluation, in agent order.

    Returns
    -------
    TuneResult
        ``evaluations`` counts every cost call: the initial population plus
        one trial per agent and generation run. ``history`` rows are
        (best, mean) of the population after initialization and after each
        generation.
    """
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.lo, cfg.hi
    n, d = cfg.n_agents, lo.size
    evaluated = []

    def evaluate(points: np.ndarray, generation: int) -> np.ndarray:
        def one(x):
            t = time.perf_counter()
            try:
                v, err = _finite_or_inf(cost(x.copy())), None
            except Exception as exc:  # a failed solve is just a bad point
                v, err = math.inf, f"{type(exc).__name__}: {exc}"
            return v, time.perf_counter() - t, err

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                out = list(pool.map(one, points))
        else:
            out = [one(x) for x in points]
        for i, (x, (v, dt, err)) in enumerate(zip(points, out)):
            evaluated.append(x.copy())
            if on_eval is not None:
                on_eval(generation, i, x, v, dt, err)
        return np.array([o[0] for o in out])

    pop = lo + rng.random((n, d)) * (hi - lo)
    fit = evaluate(pop, 0)
    history = [(fit.min(), _mean(fit))]
    best = fit.min()
    generations = 0
    stall = 0

    if np.all(hi - lo < DEGENERATE_WIDTH):
        generations_cap = 0
    else:
        generations_cap = cfg.n_generations

    for g in range(1, generations_cap + 1):
        trials = np.empty_like(pop)
        for i in range(n):
            others = np.delete(np.arange(n), i)
            a, b, c = rng.choice(others, 3, replace=False)
            mutant = pop[a] + cfg.f_weight * (pop[b] - pop[c])
            cross = rng.random(d) < cfg.cr
            cross[rng.integers(d)] = True
            trials[i] = np.clip(np.where(cross, mutant, pop[i]), lo, hi)
        tfit = evaluate(trials, g)
        better = tfit <= fit
        pop[better] = trials[better]
        fit[better] = tfit[better]
        generations = g
        history.append((fit.min(), _mean(fit)))
        if fit.min() < best:
            best = fit.min()
            stall = 0
        else:
            stall += 1
        if cfg.early_stop is not None and stall >= cfg.early_stop:
            break

    k = int(np.argmin(fit))
    return TuneResult(
        x_best=pop[k].copy(),
        cost_best=float(fit[k]),
        evaluations=len(evaluated),
        history=np.array(history),
        generations=generations,
        evaluated=np.array(evaluated),
    )


def _mean(v: np.ndarray) -> float:
    finite = v[np.isfinite(v)]
    return float(finite.mean()) if finite.size else math.inf


def tune_regularization(
    T_diff_set: Sequence[ThermogramStack],
    psf: PsfStack,
    patterns: Sequence[Field2D],
    truth: DefectMap,
    solver_defaults: SolverConfig = SolverConfig(),
    cfg: SearchConfig = SearchConfig(),
    log_path=None,
    workers: int = 1,
    problem: InverseProblem | None = None,
) -> TuneResult:
    """Search ``(log10 lambda_21, log10 lambda_2)`` for the lowest
    reconstruction cost against ``truth``.

    The data transforms are computed once and shared by every solve.
    Every evaluation is appended to ``result.log`` and, when
    ``log_path`` is given, written there as one JSON line.
    """
    if len(cfg.bounds) != 2:
        raise ValueError("regularization search is two-dimensional (lambda_21, lambda_2)")
    problem = problem or InverseProblem(T_diff_set, psf, patterns)
    mask = penalty_mask(truth, psf)

    def cost(x):
        lam21, lam2 = 10.0 ** x
        res = problem.solve(replace(solver_defaults, lambda_21=lam21, lambda_2=lam2), track_objective=False)
        return reconstruction_cost(res.defect_map, truth, psf, mask)

    log = []
    fh = Path(log_path).open("a", encoding="utf-8") if log_path is not None else None

    def on_eval(gen, agent, x, value, seconds, error):
        rec = {
            "generation": gen, "agent": agent,
            "lambda_21": float(10.0 ** x[0]), "lambda_2": float(10.0 ** x[1]),
            "cost": value if math.isfinite(value) else None,
            "wall_s": seconds,
        }
        if error:
            rec["error"] = error
        log.append(rec)
        if fh is not None:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    try:
        result = differential_evolution(cost, cfg, workers=workers, on_eval=on_eval)
    finally:
        if fh is not None:
            fh.close()
    result.log = log
    return result
