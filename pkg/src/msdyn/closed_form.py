"""Exact minimizers of the two-step loss for the scalar linear model.

For data ``(s, o1, o2)`` the loss ``mean(alpha*(theta*s - o1)**2 +
(1-alpha)*(theta**2*s - o2)**2)`` has a derivative that is linear in theta
when ``alpha == 1`` and an odd-free depressed cubic otherwise, so every
stationary point is available in closed form.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


TIE_TOL = 1e-12


class EstimatorDoesNotExist(ValueError):
    """The alpha=0 minimizer needs ``sum(o2 * s) > 0``."""


@dataclass(frozen=True)
class TwoStepSample:
    s0: float
    o1: float
    o2: float


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(data, TwoStepSample):
        data = [data]
    if isinstance(data, tuple) and len(data) == 3 and not isinstance(data[0], TwoStepSample):
        s, o1, o2 = (np.atleast_1d(np.asarray(x, dtype=np.float64)) for x in data)
        return s, o1, o2
    data = list(data)
    return (np.array([d.s0 for d in data], dtype=np.float64),
            np.array([d.o1 for d in data], dtype=np.float64),
            np.array([d.o2 for d in data], dtype=np.float64))


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def two_step_loss(theta, alpha: float, data) -> float:
    """Empirical two-step loss (mean over samples; one sample gives the raw polynomial)."""
    _check_alpha(alpha)
    s, o1, o2 = _as_arrays(data)
    theta = np.asarray(theta, dtype=np.float64)[..., None]
    val = alpha * (theta * s - o1) ** 2 + (1.0 - alpha) * (theta * theta * s - o2) ** 2
    out = val.mean(axis=-1)
    return float(out) if out.ndim == 0 else out


def sufficient_stats(s, o1, o2):
    """Means of ``s**2``, ``o1*s`` and ``o2*s`` along the last axis."""
    return (s * s).mean(axis=-1), (o1 * s).mean(axis=-1), (o2 * s).mean(axis=-1)


def derivative_coefficients(alpha, s2, p1, p2):
    """Coefficients ``(c3, c1, c0)`` of ``dL/dtheta = c3*t**3 + c1*t + c0``."""
    c3 = 4.0 * (1.0 - alpha) * s2
    c1 = 2.0 * alpha * s2 - 4.0 * (1.0 - alpha) * p2
    c0 = -2.0 * alpha * p1
    return c3, c1, c0


# --- cubic solving ------------------------------------------------------------

def _cbrt(x):
    return np.cbrt(x)


def solve_depressed_cubic(p, q):
    """Real roots of ``t**3 + p*t + q = 0``, vectorized.

    Returns an array of shape ``(..., 3)`` with NaN where a root is not real.
    Three real roots use the trigonometric form; one real root uses Cardano.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p, q = np.broadcast_arrays(p, q)
    out = np.full(p.shape + (3,), np.nan)
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3  # < 0: three real roots

    three = (disc < 0) & (p < 0)
    if np.any(three):
        pp, qq = p[three], q[three]
        m = 2.0 * np.sqrt(-pp / 3.0)
        arg = np.clip(3.0 * qq / (pp * m), -1.0, 1.0)
        phi = np.arccos(arg) / 3.0
        k = np.arange(3)
        out[three] = m[:, None] * np.cos(phi[:, None] - 2.0 * np.pi * k[None, :] / 3.0)

    one = ~three
    if np.any(one):
        pp, qq, dd = p[one], q[one], np.maximum(disc[one], 0.0)
        sq = np.sqrt(dd)
        # pick the larger-magnitude branch first to avoid cancellation
        u = _cbrt(-qq / 2.0 + np.where(qq <= 0, sq, -sq))
        v = np.where(u != 0, -pp / (3.0 * np.where(u != 0, u, 1.0)), _cbrt(-qq / 2.0 - np.where(qq <= 0, sq, -sq)))
        r = out[one]
        r[:, 0] = u + v
        # repeated root when the discriminant vanishes exactly
        double = (dd == 0) & (pp != 0)
        r[double, 1] = -(u + v)[double] / 2.0
        out[one] = r
    return out


def solve_cubic(a, b, c, d) -> list[float]:
    """Real roots of ``a*x**3 + b*x**2 + c*x + d`` (lower degree when ``a == 0``), ascending."""
    if a == 0:
        if b == 0:
            if c == 0:
                return []
            return [-d / c]
        disc = c * c - 4 * b * d
        if disc < 0:
            return []
        sq = math.sqrt(disc)
        qv = -0.5 * (c + math.copysign(sq, c))
        roots = {qv / b}
        if qv != 0:
            roots.add(d / qv)
        return sorted(roots)
    shift = b / (3.0 * a)
    p = (3 * a * c - b * b) / (3 * a * a)
    q = (2 * b ** 3 - 9 * a * b * c + 27 * a * a * d) / (27 * a ** 3)
    t = solve_depressed_cubic(p, q)
    roots = sorted({float(x) - shift for x in t if np.isfinite(x)})
    return [_newton(lambda x: ((a * x + b) * x + c) * x + d,
                    lambda x: (3 * a * x + 2 * b) * x + c, r) for r in roots]


def _newton(f, df, x, steps: int = 1):
    for _ in range(steps):
        d = df(x)
        if d == 0:
            break
        x = x - f(x) / d
    return x


def derivative_value(theta, alpha, s2, p1, p2):
    c3, c1, c0 = derivative_coefficients(alpha, s2, p1, p2)
    return (c3 * theta * theta + c1) * theta + c0


def stationary_points(alpha, s2, p1, p2, newton_steps: int = 1) -> np.ndarray:
    """Vectorized real roots of ``dL/dtheta`` as ``(..., 3)`` (NaN padded)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    s2, p1, p2 = (np.asarray(x, dtype=np.float64) for x in (s2, p1, p2))
    alpha, s2, p1, p2 = np.broadcast_arrays(alpha, s2, p1, p2)
    c3, c1, c0 = derivative_coefficients(alpha, s2, p1, p2)
    out = np.full(alpha.shape + (3,), np.nan)
    lin = c3 == 0
    if np.any(lin):
        out[lin, 0] = -c0[lin] / c1[lin]
    cub = ~lin
    if np.any(cub):
        out[cub] = solve_depressed_cubic(c1[cub] / c3[cub], c0[cub] / c3[cub])
    for _ in range(newton_steps):
        f = (c3[..., None] * out * out + c1[..., None]) * out + c0[..., None]
        df = 3.0 * c3[..., None] * out * out + c1[..., None]
        safe = np.where(df != 0, df, 1.0)
        out = np.where(np.isfinite(out) & (df != 0), out - f / safe, out)
    return out


def loss_derivative_roots(alpha: float, data, newton_steps: int = 1) -> list[float]:
    """All real roots of ``dL_alpha/dtheta`` for a sample or dataset, ascending."""
    _check_alpha(alpha)
    s, o1, o2 = _as_arrays(data)
    r = stationary_points(alpha, *sufficient_stats(s, o1, o2), newton_steps=newton_steps)
    vals = sorted(float(x) for x in r[np.isfinite(r)])
    dedup: list[float] = []
    for v in vals:
        if not dedup or abs(v - dedup[-1]) > 1e-12 * max(1.0, abs(v)):
            dedup.append(v)
    return dedup


def grid_scan_roots(alpha: float, data, lo: float = -3.0, hi: float = 3.0, step: float = 1e-4) -> np.ndarray:
    """Independent oracle: approximate roots from sign changes of the derivative on a grid."""
    s, o1, o2 = _as_arrays(data)
    s2, p1, p2 = sufficient_stats(s, o1, o2)
    grid = np.arange(lo, hi + step / 2, step)
    # derivative evaluated directly from the loss definition, not from cubic coefficients
    d = (2 * alpha * ((grid[:, None] * s - o1) * s).mean(axis=1)
         + 4 * (1 - alpha) * ((grid[:, None] ** 2 * s - o2) * grid[:, None] * s).mean(axis=1))
    sg = np.sign(d)
    roots = list(grid[sg == 0])
    change = np.nonzero(sg[:-1] * sg[1:] < 0)[0]
    roots += list(0.5 * (grid[change] + grid[change + 1]))
    return np.sort(np.array(roots))


# --- estimators ---------------------------------------------------------------

@dataclass
class EstimatorResult:
    alpha: float
    theta_hat: float
    roots: list[float]
    selected: str  # "closed-form", "global" or "sign-hint"


def _sign(hint) -> float:
    if hint in ("+", 1, 1.0, "pos", "positive", None):
        return 1.0
    if hint in ("-", -1, -1.0, "neg", "negative"):
        return -1.0
    raise ValueError(f"bad sign hint {hint!r}")


def estimate_theta(alpha: float, data, sign_hint="+") -> EstimatorResult:
    """Minimizer of the empirical two-step loss.

    ``alpha == 1`` and ``alpha == 0`` use their closed forms (for alpha=0 the
    two symmetric minima tie and the sign hint picks one). Otherwise the
    stationary points come from the cubic and the lowest-loss root with the
    hinted sign is returned, or the global minimizer when no root has that
    sign. ``selected == "sign-hint"`` flags results where the hinted root is
    not also the global minimizer.
    """
    _check_alpha(alpha)
    s, o1, o2 = _as_arrays(data)
    if s.size == 0:
        raise ValueError("empty dataset")
    if np.any(s == 0) and s.size == 1:
        raise ValueError("initial state must be non-zero")
    sign = _sign(sign_hint)
    s2, p1, p2 = sufficient_stats(s, o1, o2)
    if alpha == 1.0:
        th = float(p1 / s2)
        return EstimatorResult(alpha, th, [th], "closed-form")
    if alpha == 0.0:
        if p2 <= 0:
            raise EstimatorDoesNotExist("alpha=0 estimator requires sum(o2 * s) > 0")
        r = math.sqrt(p2 / s2)
        return EstimatorResult(alpha, sign * r, [-r, 0.0, r], "closed-form")
    roots = loss_derivative_roots(alpha, (s, o1, o2))
    losses = np.array([two_step_loss(r, alpha, (s, o1, o2)) for r in roots])
    g = int(np.argmin(losses))
    hinted = [i for i in range(len(roots)) if np.sign(roots[i]) == sign]
    if not hinted:
        return EstimatorResult(alpha, roots[g], roots, "global")
    i = min(hinted, key=lambda k: losses[k])
    if losses[i] <= losses[g] + TIE_TOL * max(1.0, abs(losses[g])):
        return EstimatorResult(alpha, roots[i], roots, "global")
    return EstimatorResult(alpha, roots[i], roots, "sign-hint")


def estimate_batch(alpha: float, s: np.ndarray, o1: np.ndarray, o2: np.ndarray, sign: float = 1.0) -> np.ndarray:
    """Vectorized :func:`estimate_theta` over leading axes; NaN where alpha=0 has no estimator."""
    s2, p1, p2 = sufficient_stats(s, o1, o2)
    if alpha == 1.0:
        return p1 / s2
    if alpha == 0.0:
        with np.errstate(invalid="ignore"):
            return np.where(p2 > 0, sign * np.sqrt(np.where(p2 > 0, p2, 0.0) / s2), np.nan)
    roots = stationary_points(alpha, s2, p1, p2)
    t = roots
    # loss up to a constant: alpha*(t^2 s2 - 2 t p1) + (1-alpha)*(t^4 s2 - 2 t^2 p2)
    loss = (alpha * (t * t * s2[..., None] - 2 * t * p1[..., None])
            + (1 - alpha) * (t ** 4 * s2[..., None] - 2 * t * t * p2[..., None]))
    loss = np.where(np.isfinite(t), loss, np.inf)
    hinted = np.where(np.sign(t) == sign, loss, np.inf)
    has_hint = np.isfinite(hinted).any(axis=-1)
    idx = np.where(has_hint, np.argmin(hinted, axis=-1), np.argmin(loss, axis=-1))
    return np.take_along_axis(t, idx[..., None], axis=-1)[..., 0]


def augmented_estimate(s, o1, o2) -> np.ndarray:
    """alpha=1 fit on the pairs ``s -> o1`` and ``o1 -> o2``."""
    return (((s * o1).sum(axis=-1) + (o1 * o2).sum(axis=-1))
            / ((s * s).sum(axis=-1) + (o1 * o1).sum(axis=-1)))


def averaging_estimate(s, o1, o1_prime) -> np.ndarray:
    """alpha=1 fit on the averaged targets ``(o1 + o1') / 2``."""
    y = 0.5 * (o1 + o1_prime)
    return (y * s).sum(axis=-1) / (s * s).sum(axis=-1)


# --- Monte Carlo studies -------------------------------------------------------

@dataclass
class BiasVarianceRow:
    estimator: str
    sigma: float
    bias: float
    variance: float
    bias_lo: float
    bias_hi: float
    var_lo: float
    var_hi: float
    n: int
    dropped: int

    @property
    def drop_rate(self) -> float:
        total = self.n + self.dropped
        return self.dropped / total if total else 0.0


@dataclass
class BiasVarianceReport:
    rows: list[BiasVarianceRow] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def get(self, estimator: str, sigma: float) -> BiasVarianceRow:
        for r in self.rows:
            if r.estimator == estimator and math.isclose(r.sigma, sigma):
                return r
        raise KeyError((estimator, sigma))

    def estimators(self) -> list[str]:
        return list(dict.fromkeys(r.estimator for r in self.rows))

    def to_csv(self) -> str:
        """Long format: one row per (estimator, sigma, statistic)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "sigma", "statistic", "value", "ci_lo", "ci_hi", "n", "dropped"])
        for r in self.rows:
            w.writerow([r.estimator, repr(r.sigma), "bias", repr(r.bias), repr(r.bias_lo), repr(r.bias_hi), r.n, r.dropped])
            w.writerow([r.estimator, repr(r.sigma), "variance", repr(r.variance), repr(r.var_lo), repr(r.var_hi), r.n, r.dropped])
        return buf.getvalue()


def _fsum_mean(x: np.ndarray) -> float:
    return math.fsum(x.tolist()) / len(x)


def summarize(deviations: np.ndarray, estimator: str, sigma: float, rng: np.random.Generator,
              n_boot: int = 1000, dropped: int = 0) -> BiasVarianceRow:
    """Bias/variance of ``theta_hat - theta_true`` with percentile bootstrap 95% CIs."""
    d = np.asarray(deviations, dtype=np.float64)
    n = len(d)
    if n < 2:
        raise ValueError("need at least two estimates")
    bias = _fsum_mean(d)
    var = math.fsum(((d - bias) ** 2).tolist()) / (n - 1)
    idx = rng.integers(0, n, size=(n_boot, n))
    res = d[idx]
    bmeans = res.mean(axis=1)
    bvars = res.var(axis=1, ddof=1)
    blo, bhi = np.percentile(bmeans, [2.5, 97.5])
    vlo, vhi = np.percentile(bvars, [2.5, 97.5])
    # percentile intervals need not contain the point estimate; widen to keep lo <= point <= hi
    return BiasVarianceRow(estimator, float(sigma), bias, var,
                           float(min(blo, bias)), float(max(bhi, bias)),
                           float(min(vlo, var)), float(max(vhi, var)), n, dropped)


@dataclass
class LinearStudyConfig:
    theta_true: Sequence[float] = tuple(np.linspace(0.3, 0.95, 10))
    sigmas: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0)
    alphas: Sequence[float] = (0.0, 0.5, 1.0)
    s0: Sequence[float] = (0.5,)
    n_mc: int = 100
    n_boot: int = 1000
    seed: int = 0


def sample_theta_true(n: int = 10, lo: float = 0.3, hi: float = 0.95, seed: int = 0) -> list[float]:
    return sorted(float(x) for x in np.random.default_rng(seed).uniform(lo, hi, n))


def _draw(theta, s, sigma, n_mc, rng):
    noise = rng.standard_normal((3, n_mc, len(s))) * sigma
    o1 = theta * s + noise[0]
    o2 = theta * theta * s + noise[1]
    o1b = theta * s + noise[2]
    return o1, o2, o1b


def bias_variance_study(theta_true_list: Iterable[float] = None, sigma_list: Iterable[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
                        alpha_list: Iterable[float] = (0.0, 0.5, 1.0), n_mc: int = 100, seed: int = 0,
                        s0: Sequence[float] = (0.5,), n_boot: int = 1000,
                        baselines: Sequence[str] = ()) -> BiasVarianceReport:
    """Monte Carlo bias/variance of ``theta_hat(alpha)`` pooled over ``theta_true`` values.

    For every theta_true and Monte Carlo draw the initial states ``s0`` stay
    fixed and fresh observation noise is sampled. Deviations
    ``theta_hat - theta_true`` are pooled across theta_true values. Draws for
    which the alpha=0 estimator does not exist are dropped and counted.
    ``baselines`` may include ``"augmented"`` and ``"averaging"``.
    """
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2")
    thetas = list(theta_true_list) if theta_true_list is not None else sample_theta_true(seed=seed)
    alpha_list = list(alpha_list)
    for a in alpha_list:
        _check_alpha(a)
    s = np.asarray(s0, dtype=np.float64)
    if np.any(s == 0):
        raise ValueError("initial states must be non-zero")
    root = np.random.SeedSequence(seed)
    sigma_list = list(sigma_list)
    sigma_seeds = root.spawn(len(sigma_list) + 1)
    boot_rng = np.random.default_rng(sigma_seeds[-1])
    report = BiasVarianceReport(config=dict(theta_true=thetas, sigmas=sigma_list, alphas=alpha_list,
                                            n_mc=n_mc, seed=seed, s0=list(map(float, s)),
                                            baselines=list(baselines)))
    labels = [f"alpha={a:g}" for a in alpha_list] + list(baselines)
    for sigma, ss in zip(sigma_list, sigma_seeds):
        rng = np.random.default_rng(ss)
        devs: dict[str, list[np.ndarray]] = {k: [] for k in labels}
        for th in thetas:
            o1, o2, o1b = _draw(th, s, sigma, n_mc, rng)
            sign = 1.0 if th >= 0 else -1.0
            for a, lab in zip(alpha_list, labels):
                devs[lab].append(estimate_batch(a, s, o1, o2, sign) - th)
            if "augmented" in devs:
                devs["augmented"].append(augmented_estimate(s, o1, o2) - th)
            if "averaging" in devs:
                devs["averaging"].append(averaging_estimate(s, o1, o1b) - th)
        for lab in labels:
            d = np.concatenate(devs[lab])
            ok = np.isfinite(d)
            report.rows.append(summarize(d[ok], lab, sigma, boot_rng, n_boot, dropped=int((~ok).sum())))
    return report


def augmented_baseline_study(**kwargs) -> BiasVarianceReport:
    kwargs.setdefault("s0", tuple([1.0] * 50))
    return bias_variance_study(baselines=("augmented",), **kwargs)


def averaging_baseline_study(**kwargs) -> BiasVarianceReport:
    kwargs.setdefault("s0", tuple([1.0] * 50))
    return bias_variance_study(baselines=("averaging",), **kwargs)


def single_sample_variance(alpha_or_kind, theta_true: float, s: float, sigma: float,
                           n_mc: int = 100_000, seed: int = 0) -> dict:
    """Empirical variance of a single-transition estimator.

    ``alpha_or_kind`` is an alpha value or ``"averaging"``/``"augmented"``.
    """
    rng = np.random.default_rng(seed)
    sv = np.array([float(s)])
    o1, o2, o1b = _draw(theta_true, sv, sigma, n_mc, rng)
    if alpha_or_kind == "averaging":
        est = averaging_estimate(sv, o1, o1b)
    elif alpha_or_kind == "augmented":
        est = augmented_estimate(sv, o1, o2)
    else:
        est = estimate_batch(float(alpha_or_kind), sv, o1, o2, 1.0 if theta_true >= 0 else -1.0)
    est = est[np.isfinite(est)]
    return {"empirical": float(np.var(est, ddof=1)), "mean": float(np.mean(est)), "n": int(len(est)),
            "dropped": int(n_mc - len(est))}


def taylor_variance_check(theta_true: float, s: float, sigma: float, n_mc: int = 100_000,
                          seed: int = 0, regime_threshold: float = 0.1) -> dict:
    """Compare the first-order approximation ``sigma^2 / (4 theta^2 s^2)`` with Monte Carlo.

    The approximation is only meaningful while ``sigma / (theta^2 |s|)`` is small;
    ``in_regime`` reports whether that holds at ``regime_threshold``.
    """
    approx = sigma ** 2 / (4.0 * theta_true ** 2 * s ** 2)
    ratio = sigma / (theta_true ** 2 * abs(s))
    if sigma == 0:
        return {"approx": 0.0, "empirical": 0.0, "relative_error": 0.0, "in_regime": True,
                "regime_ratio": 0.0, "dropped": 0}
    emp = single_sample_variance(0.0, theta_true, s, sigma, n_mc, seed)
    return {"approx": approx, "empirical": emp["empirical"],
            "relative_error": abs(emp["empirical"] - approx) / approx,
            "in_regime": ratio < regime_threshold, "regime_ratio": ratio, "dropped": emp["dropped"]}
