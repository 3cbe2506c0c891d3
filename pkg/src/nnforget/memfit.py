"""Decay-model fitting for retention curves.

Four families are supported, all in epochs ``t >= 0``::

    exponential         a * exp(-t / tau) + c
    power_law           a * (1 + t) ** -b + c
    logarithmic         a - b * ln(1 + t)
    summed_exponential  a1 * exp(-t / tau1) + a2 * exp(-t / tau2) + c

Fits minimise the sum of squared errors inside a fixed parameter box with
multi-start Nelder-Mead; models are ranked by AICc.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import qmc

from .exceptions import ConfigurationError, DataError, FitError
from .io import atomic_write_text

EXPONENTIAL = "exponential"
POWER_LAW = "power_law"
LOGARITHMIC = "logarithmic"
SUMMED_EXPONENTIAL = "summed_exponential"

PARAM_NAMES = {
    EXPONENTIAL: ("a", "tau", "c"),
    POWER_LAW: ("a", "b", "c"),
    LOGARITHMIC: ("a", "b"),
    SUMMED_EXPONENTIAL: ("a1", "tau1", "a2", "tau2", "c"),
}
FAMILIES = tuple(PARAM_NAMES)

N_STARTS = 16
MAX_ITER = 2000
REL_TOL = 1e-10
# residuals below this fraction of the data scale count as an exact fit
EXACT_FIT_TOL = 1e-9


@dataclass
class CurveModel:
    family: str
    params: Dict[str, float]

    def __post_init__(self):
        if self.family not in PARAM_NAMES:
            raise ConfigurationError(f"unknown model family {self.family!r}", "family")
        names = PARAM_NAMES[self.family]
        if set(self.params) != set(names):
            raise ConfigurationError(f"{self.family} needs parameters {names}, got {sorted(self.params)}")
        self.params = {k: float(self.params[k]) for k in names}

    @property
    def n_params(self) -> int:
        return len(self.params)

    def vector(self) -> np.ndarray:
        return np.array([self.params[k] for k in PARAM_NAMES[self.family]])

    @classmethod
    def from_vector(cls, family: str, x) -> "CurveModel":
        return cls(family, dict(zip(PARAM_NAMES[family], map(float, x))))

    def validate(self) -> None:
        p = self.params
        for k, v in p.items():
            if not math.isfinite(v):
                raise ConfigurationError(f"{self.family}.{k} must be finite", k)
            if k in ("a", "a1", "a2", "b") and v < 0:
                raise ConfigurationError(f"{self.family}.{k} must be non-negative, got {v}", k)
            if k.startswith("tau") and v <= 0:
                raise ConfigurationError(f"{self.family}.{k} must be positive, got {v}", k)
            if k == "c" and not 0 <= v <= 1:
                raise ConfigurationError(f"{self.family}.c must lie in [0, 1], got {v}", k)
        if self.family == SUMMED_EXPONENTIAL and p["tau1"] > p["tau2"]:
            raise ConfigurationError("summed_exponential requires tau1 <= tau2", "tau1")

    def canonical(self) -> "CurveModel":
        """Swap the two summed-exponential terms so that ``tau1 <= tau2``."""
        if self.family != SUMMED_EXPONENTIAL or self.params["tau1"] <= self.params["tau2"]:
            return self
        p = self.params
        return CurveModel(self.family, {"a1": p["a2"], "tau1": p["tau2"], "a2": p["a1"],
                                        "tau2": p["tau1"], "c": p["c"]})

    def __call__(self, t):
        return _evaluate(self.family, self.vector(), np.asarray(t, dtype=np.float64))


def _evaluate(family: str, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    if family == EXPONENTIAL:
        a, tau, c = x
        return a * np.exp(-t / tau) + c
    if family == POWER_LAW:
        a, b, c = x
        return a * np.power(1.0 + t, -b) + c
    if family == LOGARITHMIC:
        a, b = x
        return a - b * np.log1p(t)
    a1, tau1, a2, tau2, c = x
    return a1 * np.exp(-t / tau1) + a2 * np.exp(-t / tau2) + c


def eval_model(model: CurveModel, t):
    """Evaluate ``model`` at ``t`` (scalar or array); ``t = inf`` gives the asymptote."""
    model.validate()
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise DataError("model time must be non-negative")
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = model(t_arr)
    if model.family == LOGARITHMIC:
        out = np.where(np.isinf(t_arr) & (model.params["b"] == 0), model.params["a"], out)
    return float(out) if np.ndim(out) == 0 else out


def parameter_box(family: str, t_max: float) -> List[Tuple[float, float]]:
    tau_hi = max(10.0 * t_max, 0.1)
    box = {"a": (0.0, 1.0), "a1": (0.0, 1.0), "a2": (0.0, 1.0), "b": (0.0, 5.0),
           "tau": (0.1, tau_hi), "tau1": (0.1, tau_hi), "tau2": (0.1, tau_hi), "c": (0.0, 1.0)}
    return [box[k] for k in PARAM_NAMES[family]]


class _BoxMap:
    """Maps the unit cube onto the parameter box; time constants on a log scale."""

    def __init__(self, family: str, t_max: float):
        self.names = PARAM_NAMES[family]
        self.bounds = parameter_box(family, t_max)
        self.log = np.array([n.startswith("tau") for n in self.names])
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        self.lo = np.where(self.log, np.log(lo, where=self.log, out=np.zeros_like(lo)), lo)
        self.hi = np.where(self.log, np.log(hi, where=self.log, out=np.zeros_like(hi)), hi)

    def to_params(self, u: np.ndarray) -> np.ndarray:
        v = self.lo + np.clip(u, 0.0, 1.0) * (self.hi - self.lo)
        return np.where(self.log, np.exp(v), v)

    def to_unit(self, x: np.ndarray) -> np.ndarray:
        v = np.where(self.log, np.log(np.maximum(x, 1e-300)), x)
        span = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        return np.clip((v - self.lo) / span, 0.0, 1.0)


def nelder_mead(fun, x0: np.ndarray, step: float = 0.1, max_iter: int = MAX_ITER,
                rel_tol: float = REL_TOL, lower: float = 0.0, upper: float = 1.0):
    """Box-projected Nelder-Mead on ``[lower, upper]^k``.

    Stops when the relative spread of SSE across the simplex falls below
    ``rel_tol`` or after ``max_iter`` iterations. Returns
    ``(x_best, f_best, f_initial_best, iterations, converged)``.
    """
    k = len(x0)
    clip = lambda x: np.clip(x, lower, upper)  # noqa: E731
    simplex = [clip(np.asarray(x0, dtype=np.float64))]
    for i in range(k):
        v = simplex[0].copy()
        # step away from the nearer wall so no vertex collapses onto the face
        v[i] = v[i] + step if v[i] + step <= upper else v[i] - step
        simplex.append(clip(v))
    simplex = np.array(simplex)
    fvals = np.array([fun(v) for v in simplex])
    f_start = float(fvals.min())

    converged = False
    it = 0
    while it < max_iter:
        order = np.argsort(fvals, kind="stable")
        simplex, fvals = simplex[order], fvals[order]
        best, worst = fvals[0], fvals[-1]
        # absolute floor: an exact fit leaves only rounding noise in the SSE
        if worst - best <= max(rel_tol * abs(best), 1e-30):
            converged = True
            break
        it += 1
        centroid = simplex[:-1].mean(axis=0)
        xr = clip(centroid + (centroid - simplex[-1]))
        fr = fun(xr)
        if fr < fvals[0]:
            xe = clip(centroid + 2.0 * (centroid - simplex[-1]))
            fe = fun(xe)
            if fe < fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
        elif fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
        else:
            if fr < fvals[-1]:
                xc = clip(centroid + 0.5 * (xr - centroid))
            else:
                xc = clip(centroid + 0.5 * (simplex[-1] - centroid))
            fc = fun(xc)
            if fc < min(fr, fvals[-1]):
                simplex[-1], fvals[-1] = xc, fc
            else:
                simplex[1:] = simplex[0] + 0.5 * (simplex[1:] - simplex[0])
                fvals[1:] = [fun(v) for v in simplex[1:]]
    i = int(np.argmin(fvals))
    return simplex[i], float(fvals[i]), f_start, it, converged


@dataclass
class FitResult:
    model: Optional[CurveModel]
    family: str
    sse: float
    r_squared: float
    aicc: float
    n_points: int
    converged: bool = True
    status: str = "ok"
    restarts: List[Tuple[float, float]] = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def n_params(self) -> int:
        return len(PARAM_NAMES[self.family])

    def to_dict(self) -> dict:
        def num(x):
            if x is None or math.isnan(x):
                return None
            return x if math.isfinite(x) else ("undefined" if x < 0 else "inf")
        return {
            "family": self.family,
            "status": self.status,
            "parameters": None if self.model is None else self.model.params,
            "sse": num(self.sse),
            "r_squared": num(self.r_squared),
            "aicc": num(self.aicc),
            "n_points": self.n_points,
            "converged": self.converged,
        }


def _points(series_points) -> Tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(series_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DataError("series points must be (t, value) pairs")
    t, y = pts[:, 0], pts[:, 1]
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
        raise DataError("series points must be finite")
    if np.any(t < 0):
        raise DataError("time values must be non-negative")
    if len(np.unique(t)) != len(t):
        raise DataError("time values must be distinct")
    return t, y


def sum_squares(model: CurveModel, t, y) -> float:
    r = model(t) - y
    return float(r @ r)


def r_squared(series_points, model: CurveModel) -> float:
    """``1 - SSE/SST``; a constant series gives 1 when fitted exactly, else ``-inf``."""
    t, y = _points(series_points)
    if len(t) < 2:
        raise DataError("r_squared needs at least two points")
    return _r2(sum_squares(model, t, y), y)


def _r2(sse: float, y: np.ndarray) -> float:
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0.0:
        return 1.0 if sse <= 1e-24 else -math.inf
    return 1.0 - sse / sst


def aicc(sse: float, n: int, k: int, sse_floor: float = 1e-300) -> float:
    """Small-sample AIC. ``sse_floor`` stops exact fits from ranking on rounding noise."""
    if n - k - 1 <= 0:
        return math.inf
    return n * math.log(max(sse, sse_floor) / n) + 2 * k + 2 * k * (k + 1) / (n - k - 1)


def sse_floor(y: np.ndarray) -> float:
    scale = max(float(np.abs(y).max()), 1e-12)
    return len(y) * (EXACT_FIT_TOL * scale) ** 2


def start_points(family: str, seed: int = 0, n: int = N_STARTS) -> np.ndarray:
    """Scrambled Sobol points in the unit cube, one row per restart."""
    sampler = qmc.Sobol(d=len(PARAM_NAMES[family]), scramble=True, seed=seed)
    return sampler.random(n)


def fit_curve(family: str, series_points, n_starts: int = N_STARTS, max_iter: int = MAX_ITER,
              rel_tol: float = REL_TOL, seed: int = 0) -> FitResult:
    """Least-squares fit of one family; best of ``n_starts`` Nelder-Mead runs."""
    if family not in PARAM_NAMES:
        raise ConfigurationError(f"unknown model family {family!r}", "family")
    t, y = _points(series_points)
    k = len(PARAM_NAMES[family])
    if len(t) < 2 * k:
        raise DataError(f"{family} needs at least {2 * k} points, got {len(t)}")
    box = _BoxMap(family, float(t.max()))

    def sse(u):
        r = _evaluate(family, box.to_params(u), t) - y
        val = float(r @ r)
        return val if math.isfinite(val) else math.inf

    best = None
    restarts = []
    with np.errstate(over="ignore", invalid="ignore"):
        for u0 in start_points(family, seed, n_starts):
            u, f, f0, _, conv = nelder_mead(sse, u0, max_iter=max_iter, rel_tol=rel_tol)
            restarts.append((f0, f))
            if math.isfinite(f) and (best is None or f < best[1]):
                best = (u, f, conv)
    if best is None:
        raise FitError(f"every {family} restart diverged")
    u, f, conv = best
    model = CurveModel.from_vector(family, box.to_params(u)).canonical()
    f = sum_squares(model, t, y)
    return FitResult(model, family, f, _r2(f, y), aicc(f, len(t), k, sse_floor(y)), len(t), conv,
                     restarts=restarts)


def compare_models(series_points, families: Sequence[str] = FAMILIES, seed: int = 0) -> List[FitResult]:
    """Fit every family and rank by AICc (ties go to the simpler model).

    Families that cannot be fitted are appended after the ranked ones with a
    non-``"ok"`` status instead of raising.
    """
    t, _ = _points(series_points)
    ranked, failed = [], []
    for fam in families:
        k = len(PARAM_NAMES[fam])
        if len(t) < 2 * k:
            failed.append(FitResult(None, fam, math.nan, math.nan, math.nan, len(t), False,
                                    "insufficient points"))
            continue
        try:
            ranked.append(fit_curve(fam, series_points, seed=seed))
        except (FitError, DataError) as exc:
            failed.append(FitResult(None, fam, math.nan, math.nan, math.nan, len(t), False,
                                    f"failed: {exc}"))
    ranked.sort(key=lambda r: (r.aicc, r.n_params))
    return ranked + failed


def fit_report(results: List[FitResult]) -> dict:
    ok = [r for r in results if r.ok]
    return {
        "fits": [r.to_dict() for r in results],
        "selected": ok[0].family if ok else None,
    }


def write_fit_report(results: List[FitResult], path, extra: Optional[dict] = None):
    doc = fit_report(results)
    if extra:
        doc.update(extra)
    return atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
