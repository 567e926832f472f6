"""Correlation metrics, the five-parameter logistic mapping, and trial aggregation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from hdrvqa.errors import UndefinedMetricError


def _pair(a, b, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {a.size}")
    return a, b


def _sum(v) -> float:
    # exactly rounded, so independent of summation order and memory layout
    return math.fsum(np.asarray(v, dtype=np.float64).ravel().tolist())


def _mean(v: np.ndarray) -> float:
    return _sum(v) / v.size


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da, db = a - _mean(a), b - _mean(b)
    na, nb = math.sqrt(_sum(da * da)), math.sqrt(_sum(db * db))
    if na == 0 or nb == 0:
        raise UndefinedMetricError("correlation is undefined for a constant input")
    return float(np.clip(_sum(da * db) / (na * nb), -1.0, 1.0))


def srocc(pred, gt) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks.

    Without ties the closed form 1 - 6*sum(d^2) / (n(n^2-1)) is used; it is
    the same quantity but computed from exact integers.
    """
    pred, gt = _pair(pred, gt, 3)
    rp, rg = rankdata(pred), rankdata(gt)
    if np.ptp(pred) == 0 or np.ptp(gt) == 0:
        raise UndefinedMetricError("rank correlation is undefined for a constant input")
    n = pred.size
    if np.unique(pred).size == n and np.unique(gt).size == n:
        d2 = int(np.sum((rp.astype(np.int64) - rg.astype(np.int64)) ** 2))
        return 1.0 - 6.0 * d2 / (n * (n * n - 1))
    return _pearson(rp, rg)


def lcc(fitted, mos) -> float:
    fitted, mos = _pair(fitted, mos, 3)
    return _pearson(fitted, mos)


def rmse(fitted, mos) -> float:
    fitted, mos = _pair(fitted, mos, 1)
    return math.sqrt(_mean((fitted - mos) ** 2))


@dataclass
class LogisticParams:
    beta: tuple[float, float, float, float, float]
    converged: bool = True
    offset_in_denominator: bool = False

    def __call__(self, x) -> np.ndarray:
        return logistic(x, *self.beta, offset_in_denominator=self.offset_in_denominator)


def _elementwise(fn, z: np.ndarray) -> np.ndarray:
    # scalar libm calls: the same bits for the same input wherever the array sits
    return np.array([fn(v) for v in z.ravel().tolist()], dtype=np.float64).reshape(z.shape)


def _exp(z: np.ndarray) -> np.ndarray:
    return _elementwise(math.exp, z)


def logistic(x, b1, b2, b3, b4, b5, offset_in_denominator: bool = False) -> np.ndarray:
    """(b1 - b2) / (1 + exp(-(x - b3) / b4)) + b5.

    With ``offset_in_denominator`` the offset sits inside the denominator instead:
    (b1 - b2) / (1 + exp(-(x - b3) / b4) + b5).
    """
    x = np.asarray(x, dtype=np.float64)
    e = _exp(np.clip(-(x - b3) / b4, -700.0, 700.0))
    if offset_in_denominator:
        return (b1 - b2) / (1 + e + b5)
    return (b1 - b2) / (1 + e) + b5


def _solve(m: list[list[float]], v: list[float]) -> list[float] | None:
    """Gaussian elimination with partial pivoting on a small dense system."""
    n = len(v)
    a = [row[:] + [v[i]] for i, row in enumerate(m)]
    for c in range(n):
        p = max(range(c, n), key=lambda r: abs(a[r][c]))
        if a[p][c] == 0 or not math.isfinite(a[p][c]):
            return None
        a[c], a[p] = a[p], a[c]
        for r in range(c + 1, n):
            f = a[r][c] / a[c][c]
            for k in range(c, n + 1):
                a[r][k] -= f * a[c][k]
    x = [0.0] * n
    for r in reversed(range(n)):
        x[r] = (a[r][n] - math.fsum(a[r][k] * x[k] for k in range(r + 1, n))) / a[r][r]
    return x


def _levenberg_marquardt(fun, theta, max_iter: int, gtol: float = 1e-10,
                         ftol: float = 1e-10, xtol: float = 1e-12, project=None) -> tuple[list[float], float, bool]:
    """Minimise 0.5 * |r|^2 where ``fun(theta)`` returns (r, Jacobian columns).

    All reductions go through ``math.fsum`` and the normal equations are
    solved in plain floats, so the path is bit-for-bit reproducible. Returns
    (theta, cost, converged); ``converged`` is False only when ``max_iter``
    runs out.
    """
    theta = [float(t) for t in theta]
    r, cols = fun(theta)
    cost = 0.5 * _sum(r * r)
    lam, nu, k = 1e-3, 2.0, len(theta)
    diag: list[float] = []
    for _ in range(max_iter):
        if cost == 0:
            return theta, cost, True
        a = [[_sum(cols[i] * cols[j]) for j in range(k)] for i in range(k)]
        g = [_sum(cols[i] * r) for i in range(k)]
        rnorm = math.sqrt(2 * cost)
        if max(abs(g[i]) / (math.sqrt(a[i][i]) * rnorm) if a[i][i] > 0 else 0.0 for i in range(k)) <= gtol:
            return theta, cost, True
        # damping scale never shrinks, as in MINPACK, so steps cannot balloon along flat directions
        diag = [max(d, a[i][i]) for i, d in enumerate(diag)] if diag else [a[i][i] if a[i][i] > 0 else 1.0 for i in range(k)]
        while True:
            damped = [[a[i][j] + (lam * diag[i] if i == j else 0.0) for j in range(k)] for i in range(k)]
            step = _solve(damped, [-gi for gi in g])
            if step is not None:
                trial = [t + d for t, d in zip(theta, step)]
                if project is not None:
                    trial = project(trial)
                    step = [t - p for t, p in zip(trial, theta)]
                r_new, cols_new = fun(trial)
                new_cost = 0.5 * _sum(r_new * r_new)
                if math.isfinite(new_cost) and new_cost < cost:
                    break
            lam *= nu
            nu *= 2.0
            if lam > 1e30:  # no downhill step left at working precision
                return theta, cost, True
        small = (cost - new_cost) <= ftol * cost or all(
            abs(d) <= xtol * (abs(t) + xtol) for d, t in zip(step, theta))
        # gain ratio of actual to predicted reduction sets the next damping
        predicted = 0.5 * math.fsum(d * (lam * di * d - gi) for d, di, gi in zip(step, diag, g))
        rho = (cost - new_cost) / predicted if predicted > 0 else 0.0
        lam = max(lam * max(1 / 3, 1 - (2 * rho - 1) ** 3), 1e-15)
        nu = 2.0
        theta, r, cols, cost = trial, r_new, cols_new, new_cost
        if small:
            return theta, cost, True
    return theta, cost, False


def logistic_fit(pred, mos, offset_in_denominator: bool = False, max_iter: int = 10000) -> LogisticParams:
    """Least-squares fit of the logistic mapping from predictions to MOS.

    A fixed start (b1=max mos, b2=min mos, b3=mean pred, b4=std pred / 4,
    b5=0) is refined by Levenberg-Marquardt with b2 held at its start value.
    Starts with a wide slope, where the curve is close to affine, are also
    tried and the lower-residual solution kept. The result is bit-for-bit
    reproducible for the same data.
    """
    pred, mos = _pair(pred, mos, 5)
    if np.ptp(pred) == 0:
        raise ValueError("cannot fit a logistic to constant predictions")

    centre = _mean(pred)
    dev = pred - centre
    spread = math.sqrt(_mean(dev * dev))
    b2 = float(mos.min())
    b1 = float(mos.max())
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if offset_in_denominator:
            fitted = _fit_denominator(pred, mos, b2, [b1, centre, spread / 4, 0.0], max_iter)
        else:
            fitted = _fit_outer(pred, mos, b2, b1, centre, dev, spread, max_iter)
    if fitted is None:
        return LogisticParams((b1, b2, centre, spread / 4, 0.0), converged=False,
                              offset_in_denominator=offset_in_denominator)
    (b1, b3, b4, b5), converged = fitted
    return LogisticParams((b1, b2, b3, b4, b5), converged=converged, offset_in_denominator=offset_in_denominator)


def _best(fits):
    best = None
    for theta, cost, converged in fits:
        if all(math.isfinite(t) for t in theta) and (best is None or cost < best[1]):
            best = (theta, cost, converged)
    return best


def _fit_outer(pred, mos, b2, b1, centre, dev, spread, max_iter):
    """Fit the outer-offset curve in coordinates that stay finite at both limits.

    With v = 1/b4 and k = 1/v + std(pred) the curve is written
    2 a k tanh(v (x - b3) / 2) + L, so amp = b1 - b2 = 4 a k and
    b5 = L - amp / 2. As v -> 0 it tends to the line a (x - b3) + L, and as
    v grows it tends to a step of height 4 a std(pred); in the original
    coordinates both limits are reached only at the end of a long valley.
    log v is fitted, and v is kept within a factor of 1e5 of 1 / std(pred)
    either way so that converting back loses few digits. The midpoint b3 is
    kept within 100 std(pred) of the mean prediction: data that favour the
    exponential tail of the curve otherwise send it off without end.
    """
    lo, hi = math.log(1 / (1e5 * spread)), math.log(1e5 / spread)

    def model(theta):
        a, b3, w, level = theta
        v = math.exp(w)
        k = 1 / v + spread
        t = pred - b3
        y = v * t / 2
        th = _elementwise(math.tanh, y)
        sech2 = 1 - th * th
        # v t sech^2 - 2 tanh, by series where it cancels
        gap = np.where(np.abs(y) < 1e-2,
                       y ** 3 * (-4 / 3 + y * y * (16 / 15 - y * y * 68 / 105)),
                       2 * y * sech2 - 2 * th)
        cols = [2 * k * th, -a * k * v * sech2, a * gap / v + a * spread * v * t * sech2, np.ones_like(pred)]
        return 2 * a * k * th + level - mos, cols

    def project(theta):
        a, b3, w, level = theta
        return [a, min(max(b3, centre - 100 * spread), centre + 100 * spread), min(max(w, lo), hi), level]

    # the fixed start, then wide-slope starts matched to the least-squares line
    v0 = 4 / spread
    starts = [[(b1 - b2) / (4 * (1 / v0 + spread)), centre, math.log(v0), (b1 - b2) / 2]]
    slope = _sum(dev * (mos - _mean(mos))) / _sum(dev * dev)
    starts += [[slope / (1 + math.exp(w) * spread), centre, w, _mean(mos)] for w in (math.log(1 / (1e2 * spread)), lo)]
    best = _best(_levenberg_marquardt(model, x0, max_iter, project=project) for x0 in starts)
    if best is None:
        return None
    (a, b3, w, level), _, converged = best
    v = math.exp(w)
    amp = 4 * a * (1 / v + spread)
    return (b2 + amp, b3, 1 / v, level - amp / 2), converged


def _fit_denominator(pred, mos, b2, x0, max_iter):
    def model(theta):
        b1, b3, b4, b5 = theta
        amp = b1 - b2
        u = -(pred - b3) / b4
        z = np.clip(u, -700.0, 700.0)
        e = _exp(z)
        live = (u == z).astype(np.float64)  # no slope where the exponent is clipped
        denom = 1 + e + b5
        dz = -amp * e * live / (denom * denom)  # df/dz
        cols = [1 / denom, dz / b4, dz * (pred - b3) / (b4 * b4), -amp / (denom * denom)]
        return amp / denom - mos, cols

    if x0[2] == 0:
        return None
    best = _best([_levenberg_marquardt(model, x0, max_iter)])
    return None if best is None else (best[0], best[2])


@dataclass
class TrialMetrics:
    srocc: float
    lcc: float
    rmse: float
    logistic: tuple[float, float, float, float, float]
    converged: bool = True


def score_trial(pred, mos, offset_in_denominator: bool = False) -> TrialMetrics:
    """SROCC on raw predictions; LCC and RMSE after the logistic mapping."""
    pred, mos = _pair(pred, mos, 5)
    params = logistic_fit(pred, mos, offset_in_denominator=offset_in_denominator)
    fitted = params(pred)
    return TrialMetrics(srocc=srocc(pred, mos), lcc=lcc(fitted, mos), rmse=rmse(fitted, mos),
                        logistic=params.beta, converged=params.converged)


def aggregate(values) -> tuple[float, float]:
    """Median and sample (n-1) standard deviation of one metric over trials."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("no trials to aggregate")
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(np.median(v)), std


@dataclass
class MetricsReport:
    per_trial: list[TrialMetrics] = field(default_factory=list)
    median_srocc: float = float("nan")
    median_lcc: float = float("nan")
    median_rmse: float = float("nan")
    std_srocc: float = float("nan")
    std_lcc: float = float("nan")
    std_rmse: float = float("nan")

    @classmethod
    def from_trials(cls, trials: list[TrialMetrics]) -> "MetricsReport":
        report = cls(per_trial=list(trials))
        for name in ("srocc", "lcc", "rmse"):
            med, std = aggregate([getattr(t, name) for t in trials])
            setattr(report, f"median_{name}", med)
            setattr(report, f"std_{name}", std)
        return report

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        trials = [TrialMetrics(**{**t, "logistic": tuple(t["logistic"])}) for t in d.pop("per_trial")]
        return cls(per_trial=trials, **d)
