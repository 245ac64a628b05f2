"""Ablation of the two-step loss weight on the two-parameter sigmoid system.

Every combination of optimizer, initialization distribution, starting point,
noise level and Monte Carlo data draw is trained for each alpha. All runs of
one (optimizer, alpha) pair share a single vectorized training loop.
"""

from __future__ import annotations

import csv
import io
import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from .evaluation import bootstrap_mean_ci
from .models import SigmoidModel
from .multistep import WeightProfile, train_replicas
from .systems import SigmoidSystem, _sigmoid, generate_dataset

INITS = ("default", "uniform", "xavier-uniform")


@dataclass
class SigmoidLabConfig:
    alphas: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    optimizers: tuple[tuple[str, float], ...] = (("adam", 0.01), ("sgd", 0.2))
    inits: tuple[str, ...] = INITS
    n_starts: int = 10
    noise_levels: tuple[float, ...] = (0.0, 0.2, 0.4)   # fractions of the state-space width
    n_mc: int = 10
    epochs: int = 60
    batch_size: int = 64
    n_train: int = 1024
    n_valid: int = 2000
    theta1_true: float = 2.0
    theta2_true: float = 0.5
    init_range: float = 1.0
    seed: int = 42
    n_boot: int = 1000


@dataclass
class SigmoidLabResult:
    config: SigmoidLabConfig
    runs: list[dict]
    curves: list[dict] = field(default_factory=list)

    def column(self, key: str, alpha: float) -> np.ndarray:
        return np.array([r[key] for r in self.runs if r["alpha"] == alpha])

    def summary(self) -> list[dict]:
        """Per-alpha mean validation losses with bootstrap 95% intervals."""
        rng = np.random.default_rng(self.config.seed)
        rows = []
        for a in self.config.alphas:
            row = {"alpha": a}
            l1, l2 = self.column("valid_one_step", a), self.column("valid_two_step", a)
            for key, x in (("one_step", l1), ("two_step", l2), ("average", 0.5 * (l1 + l2))):
                lo, hi = bootstrap_mean_ci(x, rng, self.config.n_boot)
                row.update({f"{key}_mean": float(x.mean()), f"{key}_lo": lo, f"{key}_hi": hi})
            row["param_dist_mean"] = float(self.column("param_dist", a).mean())
            row["n"] = int(len(l1))
            rows.append(row)
        return rows

    def argmin_alpha(self, key: str) -> float:
        rows = self.summary()
        return min(rows, key=lambda r: r[f"{key}_mean"])["alpha"]

    @staticmethod
    def _csv(rows: list[dict]) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = list(rows[0])
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (r[k] for k in keys)])
        return buf.getvalue()

    def runs_csv(self) -> str:
        return self._csv(self.runs)

    def summary_csv(self) -> str:
        return self._csv(self.summary())

    def curves_csv(self) -> str:
        return self._csv(self.curves)


def _triples(system: SigmoidSystem, n: int, seed: int, noise: float):
    """Noisy ``(o_t, o_t+1, o_t+2)`` from ``n`` two-step episodes."""
    ds = generate_dataset(system, episodes=n, horizon=2, seed=seed, noise_percent=noise)
    o = np.stack([tr.observations[:, 0] for tr in ds.trajectories])  # (n, 3)
    return o[:, 0], o[:, 1], o[:, 2]


def run_sigmoid_lab(cfg: SigmoidLabConfig | None = None, progress=None) -> SigmoidLabResult:
    cfg = cfg or SigmoidLabConfig()
    system = SigmoidSystem(cfg.theta1_true, cfg.theta2_true, init_range=cfg.init_range)
    root = np.random.SeedSequence(cfg.seed)
    data_seeds = [int(s.generate_state(1)[0]) for s in root.spawn(cfg.n_mc)]
    valid_seed = int(root.spawn(1)[0].generate_state(1)[0])

    # replica layout: noise x mc x init x start
    layout = list(itertools.product(range(len(cfg.noise_levels)), range(cfg.n_mc),
                                    range(len(cfg.inits)), range(cfg.n_starts)))
    R = len(layout)
    x0 = np.empty((R, cfg.n_train))
    tg = np.empty((R, cfg.n_train, 2))
    v0 = np.empty((R, cfg.n_valid))
    v1 = np.empty_like(v0)
    v2 = np.empty_like(v0)
    cache = {}
    for r, (ni, m, _, _) in enumerate(layout):
        if (ni, m) not in cache:
            noise = cfg.noise_levels[ni]
            o0, o1, o2 = _triples(system, cfg.n_train, data_seeds[m], noise)
            # validation draws are independent of the training draws but shared across alphas
            w = _triples(system, cfg.n_valid, valid_seed + m, noise)
            cache[ni, m] = (o0, np.stack([o1, o2], axis=-1), w)
        o0, t, w = cache[ni, m]
        x0[r], tg[r] = o0, t
        v0[r], v1[r], v2[r] = w

    # starting points depend only on (init, start)
    starts = {}
    for di, dist in enumerate(cfg.inits):
        init = SigmoidModel.init(seed=cfg.seed + 1000 * di, dist=dist, shape=(cfg.n_starts,))
        starts[di] = (init.params["theta1"], init.params["theta2"])
    th1_0 = np.array([starts[di][0][k] for (_, _, di, k) in layout])
    th2_0 = np.array([starts[di][1][k] for (_, _, di, k) in layout])

    runs, curves = [], []
    truth = np.array([cfg.theta1_true, cfg.theta2_true])
    for opt, lr in cfg.optimizers:
        for a in cfg.alphas:
            t0 = time.perf_counter()
            model = SigmoidModel(th1_0[:, None, None].copy(), th2_0[:, None, None].copy())
            epoch_log = []

            def evaluate(epoch):
                p1, p2 = _valid_predictions(model, v0)
                epoch_log.append({"optimizer": opt, "alpha": a, "epoch": epoch,
                                  "valid_one_step": float(((p1 - v1) ** 2).mean()),
                                  "valid_two_step": float(((p2 - v2) ** 2).mean())})

            train_curve = train_replicas(model, x0[..., None], tg[..., None], WeightProfile.two_step(a),
                                         optimizer=opt, lr=lr, epochs=cfg.epochs,
                                         batch_size=cfg.batch_size, seed=cfg.seed, on_epoch=evaluate)
            for rec, tl in zip(epoch_log, train_curve):
                rec["train_loss"] = tl
            curves.extend(epoch_log)
            p1, p2 = _valid_predictions(model, v0)
            l1 = ((p1 - v1) ** 2).mean(axis=1)
            l2 = ((p2 - v2) ** 2).mean(axis=1)
            th1 = model.params["theta1"].reshape(-1)
            th2 = model.params["theta2"].reshape(-1)
            for r, (ni, m, di, k) in enumerate(layout):
                runs.append({"optimizer": opt, "init": cfg.inits[di], "start": k,
                             "noise": cfg.noise_levels[ni], "mc": m, "alpha": a,
                             "valid_one_step": float(l1[r]), "valid_two_step": float(l2[r]),
                             "theta1": float(th1[r]), "theta2": float(th2[r]),
                             "param_dist": float(np.hypot(th1[r] - truth[0], th2[r] - truth[1]))})
            if progress is not None:
                progress(opt, a, time.perf_counter() - t0)
    return SigmoidLabResult(cfg, runs, curves)


def _valid_predictions(model: SigmoidModel, s0: np.ndarray):
    th1 = model.params["theta1"].reshape(-1, 1)
    th2 = model.params["theta2"].reshape(-1, 1)
    p1 = th1 * _sigmoid(th2 * s0)
    return p1, th1 * _sigmoid(th2 * p1)
