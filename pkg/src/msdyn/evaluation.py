"""Static evaluation: R2 of recursive predictions, beta grid search, loss landscapes."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .models import DynamicsModel, init_model
from .multistep import (LossConfig, TrainConfig, TrainingDiverged, effective_horizon,
                        exp_weights, rollout, train)
from .systems import TrajectoryDataset, kfold_episodes
from .systems import _sigmoid as _sigmoid_np

log = logging.getLogger(__name__)

BETA_GRID = (0.1, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 5.0, 20.0)


def bootstrap_mean_ci(x, rng: np.random.Generator, n_boot: int = 1000, level: float = 0.95):
    """Percentile bootstrap interval for the mean of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return math.nan, math.nan
    means = x[rng.integers(0, len(x), size=(n_boot, len(x)))].mean(axis=1)
    q = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [q, 1.0 - q])
    return float(lo), float(hi)


def millesimal(x: float) -> int:
    """R2 rendered as an integer in thousandths (0.972 -> 972)."""
    return int(round(1000.0 * x))


# --- R2 ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    H: int
    r2: list[float]                   # R2(h) for h = 1..H
    r2_dims: list[list[float]]        # per-dimension components, NaN where excluded
    counts: list[int]                 # number of sub-trajectories per horizon
    excluded_dims: list[list[int]] = field(default_factory=list)
    channel: str = "observations"
    config_digest: str = ""

    @property
    def r2bar(self) -> float:
        return math.fsum(self.r2) / self.H

    def to_csv(self) -> str:
        d = len(self.r2_dims[0]) if self.r2_dims else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["h", "r2"] + [f"r2_dim_{j}" for j in range(d)] + ["n_subtrajectories"])
        for h in range(self.H):
            w.writerow([h + 1, repr(self.r2[h])] + [repr(v) for v in self.r2_dims[h]] + [self.counts[h]])
        return buf.getvalue()

    def summary(self, millesimal_scale: bool = False) -> dict:
        bar = millesimal(self.r2bar) if millesimal_scale else self.r2bar
        return {"H": self.H, "r2bar": bar, "channel": self.channel,
                "r2_at_1": self.r2[0], "r2_at_H": self.r2[-1],
                "n_subtrajectories_at_H": self.counts[-1], "config_digest": self.config_digest,
                "excluded_dims": sorted({j for ex in self.excluded_dims for j in ex})}


def _r2_dims(pred: np.ndarray, target: np.ndarray):
    """Per-dimension R2 plus the list of zero-variance dimensions."""
    resid = ((target - pred) ** 2).sum(axis=0)
    centered = ((target - target.mean(axis=0)) ** 2).sum(axis=0)
    out = np.full(target.shape[1], np.nan)
    excluded = []
    for j in range(target.shape[1]):
        if centered[j] <= 1e-300:
            excluded.append(j)
            continue
        out[j] = 1.0 - resid[j] / centered[j]
    return out, excluded, resid


def _rollout_all(model: DynamicsModel, dataset: TrajectoryDataset, H: int, channel: str):
    """Rollouts of length H from every time step of every episode.

    Returns ``(preds (N, H, d_s), targets (N, H, d_s), avail (N,), episode (N,))``
    where ``avail`` counts the real future steps behind each start; predictions
    past that point are padding and must be masked.
    """
    if H < 1:
        raise ValueError("H must be >= 1")
    starts, acts, targs, avail, eps = [], [], [], [], []
    d_a = dataset.action_dim
    for ep, tr in enumerate(dataset.trajectories):
        x = tr.channel(channel)
        T = len(x)
        if T < 2:
            continue
        n = T - 1
        t = np.arange(n)
        # pad past the episode end by repeating the last entry; those steps are masked
        tidx = np.minimum(t[:, None] + np.arange(1, H + 1)[None, :], T - 1)
        aidx = np.minimum(t[:, None] + np.arange(H)[None, :], n - 1)
        starts.append(x[t])
        targs.append(x[tidx])
        acts.append(tr.actions[aidx] if d_a else np.zeros((n, H, 0)))
        avail.append(n - t)
        eps.append(np.full(n, ep))
    if not starts:
        raise ValueError("no episode has at least two states")
    avail = np.concatenate(avail)
    if avail.max() < H:
        raise ValueError(f"H={H} exceeds every episode (longest allows {avail.max()} steps)")
    s0 = np.concatenate(starts)
    preds = rollout(model, model.constants(), s0, np.concatenate(acts) if d_a else H)
    if model.gaussian:
        preds = preds[1]
    return np.stack([p.value for p in preds], axis=1), np.concatenate(targs), avail, np.concatenate(eps)


def r2_curve(model: DynamicsModel, dataset: TrajectoryDataset, H: int,
             channel: str = "observations") -> EvalReport:
    """R2(h) for every h in 1..H over all length-h windows of every episode.

    One rollout of length up to H is started from every time step; the
    prediction at step h is scored only where the episode still has a target.
    """
    preds, targ, avail, _ = _rollout_all(model, dataset, H, channel)
    r2, dims, counts, excluded = [], [], [], []
    for h in range(1, H + 1):
        m = avail >= h
        comp, ex, resid = _r2_dims(preds[m, h - 1], targ[m, h - 1])
        if ex:
            log.warning("horizon %d: zero target variance in dims %s, excluded from the average", h, ex)
        kept = comp[~np.isnan(comp)]
        if len(kept):
            val = float(np.mean(kept))
        else:
            val = 1.0 if np.all(resid == 0) else -math.inf
        r2.append(val)
        dims.append([float(v) for v in comp])
        counts.append(int(m.sum()))
        excluded.append(ex)
    return EvalReport(H, r2, dims, counts, excluded, channel)


@dataclass
class EpisodeStats:
    """Per-episode sums from which pooled R2 can be rebuilt for any episode resample.

    Arrays are ``(episodes, H, d_s)``: counts, target sums, target square sums
    and residual square sums.
    """

    n: np.ndarray
    t: np.ndarray
    tt: np.ndarray
    rss: np.ndarray

    def r2bar(self, weights: np.ndarray | None = None) -> float:
        w = np.ones(len(self.n)) if weights is None else np.asarray(weights, dtype=np.float64)
        n, t, tt, rss = (np.tensordot(w, a, axes=1) for a in (self.n, self.t, self.tt, self.rss))
        centered = tt - t * t / np.maximum(n, 1)
        ok = centered > 1e-12 * np.maximum(tt, 1e-300)
        r2 = np.where(ok, 1.0 - rss / np.where(ok, centered, 1.0), np.nan)
        per_h = np.nanmean(r2, axis=1)
        return float(np.mean(per_h))


def r2_episode_stats(model: DynamicsModel, dataset: TrajectoryDataset, H: int,
                     channel: str = "observations") -> EpisodeStats:
    preds, targ, avail, eps = _rollout_all(model, dataset, H, channel)
    E = len(dataset.trajectories)
    d = targ.shape[-1]
    mask = (avail[:, None] >= np.arange(1, H + 1)[None, :])[..., None]
    out = {k: np.zeros((E, H, d)) for k in ("n", "t", "tt", "rss")}
    for name, val in (("n", np.broadcast_to(mask, targ.shape).astype(float)), ("t", targ * mask),
                      ("tt", targ * targ * mask), ("rss", (targ - preds) ** 2 * mask)):
        np.add.at(out[name], eps, val)
    return EpisodeStats(**out)


def bootstrap_r2bar_ci(stats_per_fold: list[EpisodeStats], rng: np.random.Generator,
                       n_boot: int = 1000, level: float = 0.95) -> tuple[float, float, float]:
    """Fold-averaged R2-bar with an episode-resampling percentile interval.

    Episodes are resampled with replacement inside each fold; each replicate
    averages the per-fold pooled R2-bar.
    """
    point = float(np.mean([s.r2bar() for s in stats_per_fold]))
    reps = np.empty(n_boot)
    for b in range(n_boot):
        vals = []
        for s in stats_per_fold:
            E = len(s.n)
            w = np.bincount(rng.integers(0, E, E), minlength=E).astype(float)
            vals.append(s.r2bar(w))
        reps[b] = np.mean(vals)
    q = (1.0 - level) / 2.0
    lo, hi = np.quantile(reps, [q, 1.0 - q])
    return point, float(lo), float(hi)


def r2_at_horizon(model: DynamicsModel, dataset: TrajectoryDataset, h: int,
                  channel: str = "observations") -> float:
    return r2_curve(model, dataset, h, channel).r2[-1]


def r2_bar(model: DynamicsModel, dataset: TrajectoryDataset, H: int = 50,
           channel: str = "observations") -> float:
    return r2_curve(model, dataset, H, channel).r2bar


def relative_improvement(multi, base) -> float:
    """Percent change of R2-bar over a baseline: ``100 (multi - base) / |base|``."""
    m = multi.r2bar if isinstance(multi, EvalReport) else float(multi)
    b = base.r2bar if isinstance(base, EvalReport) else float(base)
    if abs(b) < 1e-9:
        raise ValueError("baseline R2-bar is zero; relative improvement undefined")
    return 100.0 * (m - b) / abs(b)


# --- beta grid search -----------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Picklable recipe for a fresh model (grid cells build their own)."""

    kind: str = "mlp"
    init: str = "default"
    seed: int = 0
    hidden: int = 64
    dropout: float = 0.1
    theta0: float | None = None

    def build(self, dataset: TrajectoryDataset) -> DynamicsModel:
        if self.kind == "mlp":
            return init_model("mlp", self.seed, self.init, d_s=dataset.state_dim, d_a=dataset.action_dim,
                              hidden=self.hidden, dropout=self.dropout)
        model = init_model(self.kind, self.seed, self.init)
        if self.theta0 is not None and self.kind == "linear":
            model.params["theta"] = np.asarray(self.theta0, dtype=np.float64)
        return model


@dataclass
class GridCell:
    h: int
    beta: float | None     # None marks the one-step baseline
    fold: int
    r2bar: float | None    # None when training failed
    error: str = ""
    stats: EpisodeStats | None = field(default=None, repr=False, compare=False)


@dataclass
class GridSearchRecord:
    h: int
    betas: tuple[float, ...]
    cells: list[GridCell]
    H: int
    folds: int
    tie_tol: float = 1e-6

    def fold_scores(self, beta) -> list[float]:
        return [c.r2bar for c in self.cells
                if c.beta == beta and c.h == (1 if beta is None else self.h) and c.r2bar is not None]

    def fold_stats(self, beta) -> list[EpisodeStats]:
        h = 1 if beta is None else self.h
        cells = sorted((c for c in self.cells if c.beta == beta and c.h == h and c.stats is not None),
                       key=lambda c: c.fold)
        return [c.stats for c in cells]

    def mean_std(self, beta) -> tuple[float, float]:
        x = self.fold_scores(beta)
        if not x:
            return math.nan, math.nan
        return float(np.mean(x)), float(np.std(x))

    @property
    def selected_beta(self) -> float | None:
        best, best_val = None, -math.inf
        for b in sorted(self.betas):
            m, _ = self.mean_std(b)
            if math.isnan(m):
                continue
            # strict improvement beyond the tolerance; ties keep the smaller beta
            if m > best_val + self.tie_tol:
                best, best_val = b, m
        return best

    @property
    def effective_horizon(self) -> float | None:
        b = self.selected_beta
        return None if b is None else effective_horizon(exp_weights(self.h, b))

    @property
    def baseline(self) -> float:
        return self.mean_std(None)[0]

    def improvement(self) -> float | None:
        b = self.selected_beta
        if b is None or math.isnan(self.baseline):
            return None
        return relative_improvement(self.mean_std(b)[0], self.baseline)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["h", "beta", "fold", "r2bar"])
        for c in sorted(self.cells, key=lambda c: (c.h, -1.0 if c.beta is None else c.beta, c.fold)):
            w.writerow([c.h, "" if c.beta is None else repr(c.beta), c.fold,
                        "failed" if c.r2bar is None else repr(c.r2bar)])
        return buf.getvalue()

    def summary(self, millesimal_scale: bool = False) -> dict:
        fmt = millesimal if millesimal_scale else (lambda v: v)
        per_beta = []
        for b in sorted(self.betas):
            m, s = self.mean_std(b)
            per_beta.append({"beta": b, "effective_horizon": effective_horizon(exp_weights(self.h, b)),
                             "r2bar_mean": None if math.isnan(m) else fmt(m),
                             "r2bar_std": None if math.isnan(s) else s,
                             "n_folds": len(self.fold_scores(b))})
        base = self.baseline
        return {"h": self.h, "H": self.H, "folds": self.folds, "betas": list(self.betas),
                "selected_beta": self.selected_beta, "effective_horizon": self.effective_horizon,
                "baseline_r2bar": None if math.isnan(base) else fmt(base),
                "relative_improvement_percent": self.improvement(),
                "failed_cells": sum(c.r2bar is None for c in self.cells), "per_beta": per_beta}


def _run_cell(args) -> GridCell:
    dataset, train_idx, valid_idx, h, beta, fold, spec, tcfg, H, channel = args
    train_ds, valid_ds = dataset.subset(train_idx), dataset.subset(valid_idx)
    profile = exp_weights(h, beta) if beta is not None else None
    lc = LossConfig(h, profile)
    cfg = replace(tcfg, loss=lc)
    model = spec.build(train_ds)
    try:
        train(model, train_ds, cfg)
        score = r2_curve(model, valid_ds, H, channel).r2bar
        stats = r2_episode_stats(model, valid_ds, H, channel)
    except (TrainingDiverged, FloatingPointError) as e:
        return GridCell(h, beta, fold, None, str(e))
    if not math.isfinite(score):
        return GridCell(h, beta, fold, None, "non-finite R2")
    return GridCell(h, beta, fold, score, stats=stats)


def fold_partition(n_episodes: int, folds: int, seed: int) -> list[tuple[list[int], list[int]]]:
    groups = kfold_episodes(n_episodes, folds, seed)
    out = []
    for k, valid in enumerate(groups):
        train_idx = sorted(i for j, g in enumerate(groups) if j != k for i in g)
        out.append((train_idx, valid))
    return out


def grid_search_beta(dataset: TrajectoryDataset, h: int, betas=BETA_GRID, folds: int = 3, H: int = 50,
                     seed: int = 42, spec: ModelSpec | None = None, train_config: TrainConfig | None = None,
                     channel: str = "observations", baseline: bool = True, jobs: int = 1,
                     tie_tol: float = 1e-6, progress=None) -> GridSearchRecord:
    """Cross-validated selection of the exponential-weight beta at horizon ``h``.

    One model is trained per (beta, fold) on the other folds' episodes and
    scored by R2-bar(H) on the held-out fold. With ``baseline`` the one-step
    model is trained on the same folds for the relative improvement.
    """
    if h < 1:
        raise ValueError("h must be >= 1")
    spec = spec or ModelSpec(seed=seed)
    tcfg = train_config or TrainConfig(seed=seed)
    parts = fold_partition(len(dataset), folds, seed)
    tasks = []
    for fold, (tr, va) in enumerate(parts):
        if baseline:
            tasks.append((dataset, tr, va, 1, None, fold, spec, tcfg, H, channel))
        for b in betas:
            tasks.append((dataset, tr, va, h, float(b), fold, spec, tcfg, H, channel))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            cells = list(ex.map(_run_cell, tasks))
    else:
        cells = []
        for t in tasks:
            cells.append(_run_cell(t))
            if progress is not None:
                progress(cells[-1])
    for c in cells:
        if c.r2bar is None:
            log.warning("grid cell h=%d beta=%s fold=%d failed: %s", c.h, c.beta, c.fold, c.error)
    return GridSearchRecord(h, tuple(float(b) for b in betas), cells, H, folds, tie_tol)


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# --- loss landscape ---------------------------------------------------------------------

@dataclass
class LandscapeResult:
    theta1: np.ndarray          # grid axis
    theta2: np.ndarray          # grid axis
    mean_loss: np.ndarray       # (len(theta1), len(theta2))
    argmins: np.ndarray         # (n_draws, 2)
    alpha: float
    sigma: float
    theta_true: tuple[float, float]

    @property
    def mean_argmin(self) -> np.ndarray:
        return self.argmins.mean(axis=0)

    def mean_distance(self) -> float:
        return float(np.mean(np.linalg.norm(self.argmins - np.asarray(self.theta_true), axis=1)))

    def surface_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["theta1", "theta2", "mean_loss"])
        for i, a in enumerate(self.theta1):
            for j, b in enumerate(self.theta2):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(self.mean_loss[i, j]))])
        return buf.getvalue()

    def minima_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["draw", "theta1", "theta2"])
        for k, (a, b) in enumerate(self.argmins):
            w.writerow([k, repr(float(a)), repr(float(b))])
        return buf.getvalue()


def loss_landscape_scan(system, alpha: float, sigma: float, bounds=((1.0, 3.0), (0.0, 1.0)),
                        steps=(101, 101), n_draws: int = 10, n_samples: int = 200, seed: int = 42,
                        noisy_inputs: bool = False) -> LandscapeResult:
    """Two-step loss of the sigmoid model on a parameter grid, one surface per noise draw.

    Initial states are drawn once; each draw resamples the observation noise
    on the two future observations (``sigma`` is an absolute std).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    t1 = np.linspace(bounds[0][0], bounds[0][1], steps[0])
    t2 = np.linspace(bounds[1][0], bounds[1][1], steps[1])
    ss = np.random.SeedSequence(seed)
    state_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    s0 = np.concatenate([system.initial_state(state_rng) for _ in range(n_samples)])
    s1 = system.theta1_true * _sigmoid_np(system.theta2_true * s0)
    s2 = system.theta1_true * _sigmoid_np(system.theta2_true * s1)
    A, B = t1[:, None, None], t2[None, :, None]
    total = np.zeros((len(t1), len(t2)))
    argmins = np.empty((n_draws, 2))
    for k in range(n_draws):
        e = noise_rng.standard_normal((3, n_samples))
        o0 = s0 + sigma * e[0] if noisy_inputs else s0
        o1, o2 = s1 + sigma * e[1], s2 + sigma * e[2]
        p1 = A * _sigmoid_np(B * o0)
        p2 = A * _sigmoid_np(B * p1)
        loss = alpha * ((p1 - o1) ** 2).mean(-1) + (1 - alpha) * ((p2 - o2) ** 2).mean(-1)
        total += loss
        i, j = np.unravel_index(np.argmin(loss), loss.shape)
        argmins[k] = (t1[i], t2[j])
    return LandscapeResult(t1, t2, total / n_draws, argmins, float(alpha), float(sigma),
                           (system.theta1_true, system.theta2_true))
