"""Desk-scale experiment presets shared by the scripts and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evaluation import BETA_GRID, GridSearchRecord, ModelSpec, bootstrap_r2bar_ci, grid_search_beta
from .models import MlpDeltaModel
from .multistep import LossConfig, TrainConfig, nll_multistep_loss, train
from .systems import CartpoleSwingup, LinearSystem, generate_dataset


@dataclass
class CartpoleStudyConfig:
    episodes: int = 50
    horizon: int = 200          # steps per episode; 1000 in the full-size setting
    data_seed: int = 7
    seed: int = 42
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    hidden: int = 64
    dropout: float = 0.1
    folds: int = 3
    H: int = 50
    betas: tuple[float, ...] = BETA_GRID
    n_boot: int = 1000

    def dataset(self, noise: float):
        return generate_dataset(CartpoleSwingup(), "random-uniform", self.episodes, self.horizon,
                                self.data_seed, noise)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed)

    def spec(self) -> ModelSpec:
        return ModelSpec("mlp", seed=self.seed, hidden=self.hidden, dropout=self.dropout)


@dataclass
class CartpoleComparison:
    noise: float
    records: dict[int, GridSearchRecord]
    best_h: int
    best_beta: float
    best: tuple[float, float, float]       # fold-mean R2-bar with bootstrap interval
    baseline: tuple[float, float, float]
    table: list[dict] = field(default_factory=list)

    @property
    def separated(self) -> bool:
        return self.best[1] > self.baseline[2]


def cartpole_grid(cfg: CartpoleStudyConfig, noise: float, hs=(2, 3, 4), progress=None,
                  jobs: int = 1) -> CartpoleComparison:
    """Grid over (h, beta) with the one-step baseline on the same folds."""
    ds = cfg.dataset(noise)
    records = {}
    for i, h in enumerate(hs):
        records[h] = grid_search_beta(ds, h, cfg.betas, cfg.folds, cfg.H, cfg.seed, cfg.spec(),
                                      cfg.train_config(), baseline=(i == 0), jobs=jobs, progress=progress)
    base_rec = records[hs[0]]
    # the baseline cells live in the first record; share them with the others
    for h in hs[1:]:
        records[h].cells.extend(c for c in base_rec.cells if c.beta is None)
    table = []
    best = None
    for h in hs:
        for b in cfg.betas:
            m, s = records[h].mean_std(b)
            table.append({"h": h, "beta": b, "r2bar_mean": m, "r2bar_std": s})
            if best is None or m > best[0]:
                best = (m, h, b)
    rng = np.random.default_rng(cfg.seed)
    _, bh, bb = best
    best_ci = bootstrap_r2bar_ci(records[bh].fold_stats(bb), rng, cfg.n_boot)
    base_ci = bootstrap_r2bar_ci(base_rec.fold_stats(None), rng, cfg.n_boot)
    return CartpoleComparison(noise, records, bh, bb, best_ci, base_ci, table)


def nll_implicit_weights(h: int = 2, noise: float = 0.0, episodes: int = 30, horizon: int = 30,
                         epochs: int = 300, seed: int = 42, sampling: str = "stochastic") -> dict:
    """Train a Gaussian-head MLP with the joint NLL on linear-system data and read its weights."""
    ds = generate_dataset(LinearSystem(0.78), episodes=episodes, horizon=horizon, seed=seed,
                          noise_percent=noise)
    model = MlpDeltaModel(1, 0, hidden=32, gaussian=True, dropout=0.0, seed=seed)
    cfg = TrainConfig(LossConfig(h, base_loss="nll", sampling=sampling), epochs=epochs, seed=seed, lr=3e-3)
    result = train(model, ds, cfg)
    s0, acts, targ = ds.segments(h)
    _, info = nll_multistep_loss(model, model.constants(), s0, acts, targ, stochastic=False,
                                 scale=model.normalizer.s_std)
    return {"implicit_weights": info["implicit_weights"], "mse": info["mse"],
            "final_train_loss": result.history[-1]["train_loss"]}
