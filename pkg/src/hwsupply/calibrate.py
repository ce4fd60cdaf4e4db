"""Fit p_enter and the field-choice probabilities to observed field totals.

The objective is the weighted chi-squared distance

    chi2 = sum_i w_i * ((Z_i - M_i) / Z_i)**2,   w_i = Z_i / sum_j Z_j

between observed (Z) and model (M) field totals, evaluated at the last
observed year by default or summed over every observed year after t0.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .data_model import MINIMAL_FIELDS, ExitRates, Params, StockTable
from .demography import ReferenceDistribution, cohort_array
from .engine import InflowPlan, Trajectory, _field_totals, init_state, inflow_steps, simulate_totals, survival
from .errors import NonFinite, ZeroObservedTotal

log = logging.getLogger(__name__)

FINAL_YEAR = "final-year"
ALL_YEARS = "all-years"


def observed_totals(stocks: StockTable, fields, year: int, ages: np.ndarray) -> np.ndarray:
    """Observed field totals Z_i for one year (NaN where the field is absent)."""
    out = np.full(len(fields), np.nan)
    for i, f in enumerate(fields):
        arr = cohort_array(stocks, f, year, ages)
        if arr is not None:
            out[i] = _field_totals(arr[None])[0]
        else:
            v = stocks.stored_total(f, year)
            if v is not None:
                out[i] = v
    return out


def eval_years(stocks: StockTable, t0: int, last: int | None = None, mode: str = FINAL_YEAR) -> list[int]:
    last = stocks.years[-1] if last is None else last
    if mode == FINAL_YEAR:
        return [last]
    if mode == ALL_YEARS:
        return [y for y in stocks.years if t0 < y <= last]
    raise ValueError(f"unknown gof mode {mode!r}")


def chi2_from_totals(model: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """chi2 for model totals ``(..., year, field)`` against ``(year, field)``."""
    w = observed / observed.sum(axis=-1, keepdims=True)
    per_year = (w * ((observed - model) / observed) ** 2).sum(axis=-1)
    return per_year.sum(axis=-1)


def _target(stocks, fields, years, ages) -> np.ndarray:
    z = np.stack([observed_totals(stocks, fields, y, ages) for y in years])
    bad = np.argwhere(~(z > 0))
    if len(bad):
        t, i = bad[0]
        raise ZeroObservedTotal(f"observed total of {fields[i]} in {years[t]} is {z[t, i]!r}")
    return z


def gof_chi2(trajectory: Trajectory, stocks: StockTable, eval_years: list[int] | None = None) -> float:
    """Weighted chi2 between a trajectory and the data (default: last observed year)."""
    if eval_years is None:
        eval_years = [min(stocks.years[-1], int(trajectory.years[-1]))]
    z = _target(stocks, trajectory.fields, eval_years, trajectory.ages)
    idx = [int(y) - int(trajectory.years[0]) for y in eval_years]
    model = trajectory.totals()[idx]
    return float(chi2_from_totals(model, z))


class Objective:
    """chi2 as a function of the entry coefficients p_enter * p_i.

    Precomputes the initial state, survival factors, inflow slices and the
    observed targets so that many parameter settings can be evaluated as one
    batch.
    """

    def __init__(
        self,
        stocks: StockTable,
        rates: ExitRates,
        plan: InflowPlan,
        t0: int,
        fields: tuple | None = None,
        last: int | None = None,
        mode: str = FINAL_YEAR,
        reference: ReferenceDistribution | None = None,
    ):
        self.fields = tuple(stocks.fields if fields is None else fields)
        self.t0 = t0
        self.years = eval_years(stocks, t0, last, mode)
        if not self.years:
            raise ValueError("no evaluation years after the calibration year")
        self.ages = rates.ages
        state = init_state(stocks, t0, self.fields, self.ages, reference)
        self.init = state.stocks
        self.surv = survival(rates)
        self.inflows = inflow_steps(plan, range(t0 + 1, max(self.years) + 1), self.ages)
        self.target = _target(stocks, self.fields, self.years, self.ages)
        self._idx = [y - t0 for y in self.years]

    def coef_chi2(self, coef: np.ndarray) -> np.ndarray:
        coef = np.atleast_2d(coef)
        totals = simulate_totals(self.init, self.surv, self.inflows, coef)
        return chi2_from_totals(totals[:, self._idx, :], self.target)

    def __call__(self, params: Params) -> float:
        coef = params.p_enter * params.vector(self.fields)
        return float(self.coef_chi2(coef[None])[0])


@dataclass(frozen=True)
class GofSurface:
    p_enter: np.ndarray
    p_gp: np.ndarray
    chi2: np.ndarray  # indexed [p_enter, p_gp]
    argmin: Params

    @property
    def chi2_min(self) -> float:
        i, j = self.argmin_index
        return float(self.chi2[i, j])

    @property
    def argmin_index(self) -> tuple[int, int]:
        i, j = np.unravel_index(int(np.argmin(self.chi2)), self.chi2.shape)
        return int(i), int(j)

    def grid(self) -> dict:
        return {
            (float(pe), float(pg)): float(self.chi2[i, j])
            for i, pe in enumerate(self.p_enter)
            for j, pg in enumerate(self.p_gp)
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["p_enter", "p_GP", "chi2"])
            for i, pe in enumerate(self.p_enter.tolist()):
                for j, pg in enumerate(self.p_gp.tolist()):
                    w.writerow([repr(pe), repr(pg), repr(float(self.chi2[i, j]))])


def grid_points(step: float) -> np.ndarray:
    n = round(1.0 / step)
    if n < 1 or abs(n * step - 1.0) > 1e-9:
        raise ValueError(f"grid step {step} does not divide 1")
    return np.array([i / n for i in range(n + 1)])


def grid_search(
    stocks: StockTable,
    rates: ExitRates,
    plan: InflowPlan,
    t0: int,
    step: float = 0.01,
    last: int | None = None,
    mode: str = FINAL_YEAR,
    reference: ReferenceDistribution | None = None,
    chunk: int = 2048,
) -> GofSurface:
    """Brute-force chi2 over p_enter x p_GP in [0, 1]^2 for the two-field model.

    Ties go to the smaller p_enter, then the smaller p_GP.
    """
    if tuple(stocks.fields) != MINIMAL_FIELDS:
        raise ValueError(f"grid search needs fields GP and SP, got {stocks.fields}")
    pts = grid_points(step)
    obj = Objective(stocks, rates, plan, t0, MINIMAL_FIELDS, last, mode, reference)
    pe, pg = np.meshgrid(pts, pts, indexing="ij")
    pe, pg = pe.ravel(), pg.ravel()
    # Same arithmetic as Params.minimal(pe, pg) followed by p_enter * vector.
    coef = pe[:, None] * np.stack([pg, 1.0 - pg], axis=1)
    chi2 = np.concatenate([obj.coef_chi2(coef[k : k + chunk]) for k in range(0, len(coef), chunk)])
    chi2 = chi2.reshape(len(pts), len(pts))
    if not np.isfinite(chi2).all():
        raise NonFinite("chi2 surface has non-finite values")
    i, j = np.unravel_index(int(np.argmin(chi2)), chi2.shape)
    best = Params.minimal(float(pts[i]), float(pts[j]))
    log.info("grid argmin p_enter=%.2f p_GP=%.2f chi2=%.3g", best.p_enter, best.p_gp, chi2[i, j])
    return GofSurface(pts, pts.copy(), chi2, best)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum(x) = 1}."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, len(v) + 1)
    rho = np.count_nonzero(u - css / ind > 0)
    theta = css[rho - 1] / rho
    x = np.maximum(v - theta, 0.0)
    return x / x.sum()


def _project(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    out[0] = min(1.0, max(0.0, x[0]))
    out[1:] = project_simplex(x[1:])
    return out


@dataclass(frozen=True)
class DescentResult:
    params: Params
    chi2: float
    iterations: int
    start: int


def _descend(obj: Objective, x0: np.ndarray, max_iter: int, tol: float, h: float):
    def f_batch(xs):
        xs = np.atleast_2d(xs)
        return obj.coef_chi2(xs[:, :1] * xs[:, 1:])

    n = len(x0)
    eye = np.eye(n) * h

    def grad(x):
        vals = f_batch(np.vstack([x + eye, x - eye]))
        return (vals[:n] - vals[n:]) / (2.0 * h)

    x = _project(x0)
    f = float(f_batch(x)[0])
    if not math.isfinite(f):
        raise NonFinite(f"chi2 at start is {f!r}")
    it = 0
    if f == 0.0:
        return x, f, it
    g = grad(x)
    alpha = 1.0
    while it < max_iter:
        it += 1
        t = alpha
        while True:
            xn = _project(x - t * g)
            d = xn - x
            if not d.any():
                return x, f, it
            fn = float(f_batch(xn)[0])
            if math.isfinite(fn) and fn <= f + 1e-4 * float(g @ d):
                break
            t *= 0.5
            if t < 1e-30:
                return x, f, it
        gn = grad(xn)
        s, y = xn - x, gn - g
        sy = float(s @ y)
        alpha = float(np.clip(s @ s / sy, 1e-10, 1e10)) if sy > 0 else 1e3 * t
        rel = (f - fn) / f
        x, f, g = xn, fn, gn
        if f == 0.0 or rel < tol:
            break
    return x, f, it


def calibrate_extended(
    stocks: StockTable,
    rates: ExitRates,
    plan: InflowPlan,
    t0: int,
    init: Params,
    last: int | None = None,
    mode: str = FINAL_YEAR,
    reference: ReferenceDistribution | None = None,
    seeds=(0, 1, 2, 3, 4),
    max_iter: int = 10_000,
    tol: float = 1e-8,
    h: float = 1e-4,
) -> Params:
    return fit_extended(stocks, rates, plan, t0, init, last, mode, reference, seeds, max_iter, tol, h).params


def fit_extended(
    stocks: StockTable,
    rates: ExitRates,
    plan: InflowPlan,
    t0: int,
    init: Params,
    last: int | None = None,
    mode: str = FINAL_YEAR,
    reference: ReferenceDistribution | None = None,
    seeds=(0, 1, 2, 3, 4),
    max_iter: int = 10_000,
    tol: float = 1e-8,
    h: float = 1e-4,
) -> DescentResult:
    """Projected gradient descent on (p_enter, P) with multi-start.

    The gradient is a central finite difference; each step uses a
    Barzilai-Borwein trial length with Armijo backtracking, p_enter is
    clipped to [0, 1] and P is projected back onto the probability simplex.
    Starts from ``init`` and from one random point per seed; the best result
    wins, and ``init`` itself is kept if nothing beats it.
    """
    fields = init.fields
    obj = Objective(stocks, rates, plan, t0, fields, last, mode, reference)
    x_init = np.concatenate([[init.p_enter], init.vector(fields)])
    f_init = float(obj.coef_chi2((x_init[0] * x_init[1:])[None])[0])
    if not math.isfinite(f_init):
        raise NonFinite(f"chi2 at the initial parameters is {f_init!r}")
    best = DescentResult(init, f_init, 0, -1)
    if f_init == 0.0:
        return best

    starts = [x_init]
    for seed in seeds:
        rng = np.random.default_rng(seed)
        starts.append(np.concatenate([[rng.uniform(0.05, 1.0)], rng.dirichlet(np.ones(len(fields)))]))
    for k, x0 in enumerate(starts):
        x, f, it = _descend(obj, x0, max_iter, tol, h)
        log.debug("start %d: chi2=%.3g after %d iterations", k, f, it)
        if f < best.chi2:
            params = Params(float(x[0]), dict(zip(fields, x[1:].tolist())))
            best = DescentResult(params, f, it, k)
    log.info("extended fit chi2=%.3g (start %d, %d iterations)", best.chi2, best.start, best.iterations)
    return best
