"""Bounded Nelder-Mead simplex search and CDIs exponent tuning."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cdis import CdisConfig
from .metrics import PreparedCohort

log = logging.getLogger(__name__)


class ObjectiveDomainError(ValueError):
    def __init__(self, point, value):
        super().__init__(f"objective is not finite ({value!r}) at {list(map(float, point))}")
        self.point = np.array(point, dtype=float)
        self.value = value


class TrialEvaluationError(RuntimeError):
    def __init__(self, exponents, cause):
        super().__init__(f"evaluation failed at exponents {list(map(float, exponents))}: {cause}")
        self.exponents = np.array(exponents, dtype=float)


class Termination(str, enum.Enum):
    F_TOL = "f_tol"
    X_TOL = "x_tol"
    MAX_EVALS = "max_evals"


@dataclass(frozen=True)
class SimplexOptions:
    alpha: float = 1.0  # reflection
    gamma: float = 2.0  # expansion
    beta: float = 0.5  # contraction
    delta: float = 0.5  # shrink
    initial_step: float = 0.25
    max_evals: int = 2000
    f_tol: float = 1e-6
    x_tol: float = 1e-6
    bounds: tuple[float, float] | Sequence[tuple[float, float]] = (-5.0, 5.0)
    recheck: bool = True
    restarts: int = 0
    restart_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not self.gamma > 1:
            raise ValueError("gamma must be > 1")
        if not 0 < self.beta < 1:
            raise ValueError("beta must be in (0, 1)")
        if not 0 < self.delta < 1:
            raise ValueError("delta must be in (0, 1)")
        if self.initial_step == 0:
            raise ValueError("initial_step must be non-zero")
        if self.max_evals < 1:
            raise ValueError("max_evals must be >= 1")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")

    def box(self, dim: int) -> tuple[np.ndarray, np.ndarray]:
        b = np.asarray(self.bounds, dtype=float)
        if b.shape == (2,):
            b = np.tile(b, (dim, 1))
        if b.shape != (dim, 2):
            raise ValueError(f"bounds must be a (lo, hi) pair or {dim} such pairs")
        lo, hi = b[:, 0], b[:, 1]
        if np.any(lo >= hi):
            raise ValueError("each bound needs lo < hi")
        return lo, hi


@dataclass
class OptResult:
    best_x: np.ndarray
    best_f: float
    evals: int
    termination: Termination
    trace: list[tuple[int, float]] = field(default_factory=list)


class _Counter:
    """Projects, evaluates and records the best-so-far trace."""

    def __init__(self, fn, lo, hi, offset=0, best_f=np.inf):
        self.fn, self.lo, self.hi = fn, lo, hi
        self.evals = 0
        self.offset = offset
        self.best_f = best_f
        self.trace: list[tuple[int, float]] = []

    def project(self, x):
        return np.clip(x, self.lo, self.hi)

    def __call__(self, x):
        x = self.project(x)
        f = self.fn(x.copy())
        self.evals += 1
        try:
            f = float(f)
        except (TypeError, ValueError):
            raise ObjectiveDomainError(x, f) from None
        if not np.isfinite(f):
            raise ObjectiveDomainError(x, f)
        if f < self.best_f:
            self.best_f = f
            self.trace.append((self.offset + self.evals, f))
        return x, f


def _diameter(xs: np.ndarray) -> float:
    diffs = xs[:, None, :] - xs[None, :, :]
    return float(np.sqrt((diffs ** 2).sum(-1)).max())


def _run(objective, x0, opts: SimplexOptions, lo, hi, offset=0, best_f=np.inf):
    n = x0.size
    ev = _Counter(objective, lo, hi, offset, best_f)
    # Each vertex is (x, f, creation index); ties in f resolve by creation index.
    serial = 0
    verts = []

    def add(x):
        nonlocal serial
        x, f = ev(x)
        verts.append((x, f, serial))
        serial += 1

    def surround(base):
        for i in range(n):
            x = base.copy()
            x[i] += opts.initial_step
            # A step that projects back onto the base point goes the other way.
            if ev.project(x)[i] == base[i]:
                x[i] = base[i] - opts.initial_step
            add(x)

    add(x0)
    surround(verts[0][0])
    claimed = None
    while True:
        verts.sort(key=lambda v: (v[1], v[2]))
        xs = np.array([v[0] for v in verts])
        fs = np.array([v[1] for v in verts])
        term = None
        if fs[-1] - fs[0] < opts.f_tol:
            term = Termination.F_TOL
        elif _diameter(xs) < opts.x_tol:
            term = Termination.X_TOL
        elif ev.evals >= opts.max_evals:
            term = Termination.MAX_EVALS
            break
        if term is not None:
            # Re-check a claimed minimum with a fresh simplex: projection onto the
            # box can collapse vertices and fake convergence. Stop once a fresh
            # simplex no longer improves on the claim.
            if not opts.recheck or ev.evals >= opts.max_evals:
                break
            if claimed is not None and fs[0] > claimed - opts.f_tol:
                break
            claimed = fs[0]
            verts = verts[:1]
            surround(verts[0][0])
            continue

        centroid = xs[:-1].mean(axis=0)
        x_worst, f_worst = xs[-1], fs[-1]
        f_best, f_second = fs[0], fs[-2]

        xr, fr = ev(centroid + opts.alpha * (centroid - x_worst))
        if f_best <= fr < f_second:
            accepted = (xr, fr)
        elif fr < f_best:
            xe, fe = ev(centroid + opts.gamma * (xr - centroid))
            accepted = (xe, fe) if fe < fr else (xr, fr)
        elif fr < f_worst:
            xc, fc = ev(centroid + opts.beta * (xr - centroid))
            accepted = (xc, fc) if fc <= fr else None
        else:
            xc, fc = ev(centroid + opts.beta * (x_worst - centroid))
            accepted = (xc, fc) if fc < f_worst else None

        if accepted is not None:
            verts[-1] = (accepted[0], accepted[1], serial)
            serial += 1
        else:
            x_best = xs[0]
            verts = verts[:1]
            for x in xs[1:]:
                add(x_best + opts.delta * (x - x_best))

    best = verts[0]
    return best[0], best[1], ev.evals, term, ev.trace


def nelder_mead(objective: Callable[[np.ndarray], float], x0, opts: SimplexOptions | None = None) -> OptResult:
    """Minimize ``objective`` inside a box with the Nelder-Mead simplex method.

    Parameters
    ----------
    objective : callable
        Maps a 1-D float array to a finite float.
    x0 : array_like
        Starting point; the initial simplex adds ``initial_step`` along each axis.
    opts : SimplexOptions, optional

    Returns
    -------
    OptResult
        Trial points are clipped onto ``opts.bounds`` before evaluation.
        Stops when the spread of simplex values drops below ``f_tol``, the
        simplex diameter drops below ``x_tol``, or ``max_evals`` is reached.
        With ``recheck`` (default), a claimed minimum is re-tested from a
        fresh simplex and the search stops only once that no longer helps.
        With ``restarts > 0``, additional runs start from seeded perturbations
        of ``x0`` (each with its own budget) and the overall best is kept.
    """
    opts = opts or SimplexOptions()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    if x0.ndim != 1 or x0.size < 1:
        raise ValueError("x0 must be a non-empty vector")
    lo, hi = opts.box(x0.size)
    start = np.clip(x0, lo, hi)

    best_x, best_f, evals, term, trace = _run(objective, start, opts, lo, hi)
    rng = np.random.default_rng(opts.seed)
    for k in range(opts.restarts):
        xk = np.clip(x0 + rng.normal(scale=opts.restart_scale, size=x0.size), lo, hi)
        bx, bf, ek, tk, tr = _run(objective, xk, opts, lo, hi, offset=evals, best_f=best_f)
        log.debug("restart %d: f=%g after %d evals (%s)", k + 1, bf, ek, tk.value)
        evals += ek
        trace += tr
        if bf < best_f:
            best_x, best_f, term = bx, bf, tk
    return OptResult(best_x=best_x, best_f=float(best_f), evals=evals, termination=term, trace=trace)


def optimize_cdis_coefficients(
    cohort,
    base_config: CdisConfig,
    opts: SimplexOptions | None = None,
    jobs: int = 1,
) -> tuple[CdisConfig, OptResult]:
    """Tune the CDIs exponents to maximize cohort-mean delineation AUC.

    The simplex minimizes the negated mean AUC starting from
    ``base_config.exponents``. Since the start is part of the initial simplex,
    the returned config never scores below the starting one.

    Parameters
    ----------
    cohort : Cohort or sequence of Patient / (series, tumor, roi)
    base_config : CdisConfig
    opts : SimplexOptions, optional
    jobs : int
        Patients evaluated concurrently per objective call.

    Returns
    -------
    (CdisConfig, OptResult)
        Config carrying the best exponents, and the search result (``-best_f``
        is the achieved mean AUC).
    """
    opts = opts or SimplexOptions()
    patients = getattr(cohort, "patients", cohort)
    prepared = PreparedCohort(list(patients), base_config, jobs=jobs)

    def objective(rho):
        try:
            return -prepared.mean_auc(rho)
        except Exception as e:
            raise TrialEvaluationError(rho, e) from e

    result = nelder_mead(objective, np.asarray(base_config.exponents), opts)
    return base_config.with_exponents(result.best_x), result
