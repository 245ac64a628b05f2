"""Weighted multi-step loss, recursive rollouts and the training loop.

The model is applied to its own predictions and the loss compares every
intermediate prediction with the recorded future observation. Gradients flow
through all compositions of the model.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Tape, Tensor, optimizer_step
from .models import DynamicsModel, MlpDeltaModel, Normalizer
from .systems import TrajectoryDataset

log = logging.getLogger(__name__)


class RolloutError(FloatingPointError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite prediction at rollout step {step}")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, history: list):
        self.epoch, self.batch, self.history = epoch, batch, history
        super().__init__(f"loss became NaN at epoch {epoch}, batch {batch}")


# --- weight profiles ---------------------------------------------------------------

@dataclass(frozen=True)
class WeightProfile:
    alphas: tuple[float, ...]
    beta: float | None = None

    def __post_init__(self):
        a = tuple(float(x) for x in self.alphas)
        object.__setattr__(self, "alphas", a)
        if len(a) < 1:
            raise ValueError("profile needs at least one weight")
        if any(x < 0 for x in a):
            raise ValueError(f"weights must be non-negative: {a}")
        if abs(math.fsum(a) - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {math.fsum(a)!r}")

    @property
    def h(self) -> int:
        return len(self.alphas)

    @classmethod
    def one_step(cls) -> "WeightProfile":
        return cls((1.0,))

    @classmethod
    def uniform(cls, h: int) -> "WeightProfile":
        return cls(tuple([1.0 / h] * h), beta=1.0)

    @classmethod
    def two_step(cls, alpha: float) -> "WeightProfile":
        return cls((alpha, 1.0 - alpha))


def exp_weights(h: int, beta: float) -> WeightProfile:
    """``alpha_i = beta**i / sum_j beta**j`` for ``i = 1..h``."""
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if h < 1:
        raise ValueError("h must be >= 1")
    if beta == 1.0:
        return WeightProfile.uniform(h)
    # exponents shifted by the largest one so nothing overflows for big beta or h
    logs = np.arange(1, h + 1) * math.log(beta)
    w = np.exp(logs - logs.max())
    w = w / math.fsum(w.tolist())
    # fold the rounding residue into the largest weight so the sum is exactly 1
    w[np.argmax(w)] += 1.0 - math.fsum(w.tolist())
    return WeightProfile(tuple(w.tolist()), beta=float(beta))


def effective_horizon(profile: WeightProfile) -> float:
    """Weighted mean horizon ``sum_i alpha_i * i``."""
    return math.fsum(a * (i + 1) for i, a in enumerate(profile.alphas))


# --- rollouts and losses ----------------------------------------------------------

def rollout(model: DynamicsModel, params, s0, actions, training: bool = False,
            rng: np.random.Generator | None = None, stochastic: bool = False):
    """Recursive predictions ``s_hat[t+1..t+h]``.

    ``s0`` is ``(..., d_s)``; ``actions`` is ``(..., h, d_a)`` or ``None``/an
    integer horizon for action-free systems. Gaussian models return
    ``(predictions, mus, sigmas)``; ``stochastic`` feeds reparametrized samples
    forward instead of means.
    """
    if isinstance(actions, int):
        h, actions = actions, None
    else:
        actions = np.asarray(actions, dtype=np.float64)
        h = actions.shape[-2]
        if actions.shape[-1] == 0:
            actions = None
    s = s0 if isinstance(s0, Tensor) else Tensor(s0)
    preds, mus, sigmas = [], [], []
    for j in range(h):
        a = None if actions is None else Tensor(actions[..., j, :])
        out = model.forward(params, s, a, training=training, rng=rng)
        if isinstance(out, tuple):
            mu, sigma = out
            mus.append(mu)
            sigmas.append(sigma)
            s = ad.gaussian_sample(mu, sigma, rng) if stochastic else mu
        else:
            s = out
        if not np.all(np.isfinite(s.value)):
            raise RolloutError(j + 1)
        preds.append(s)
    if model.gaussian:
        return preds, mus, sigmas
    return preds


def _mse(pred: Tensor, target, scale, replicas: bool) -> Tensor:
    r = pred - target
    if scale is not None:
        r = r / scale
    sq = ad.square(r)
    if replicas:
        axes = tuple(range(1, sq.value.ndim))
        return ad.mean(sq, axis=axes)
    return ad.mean(sq)


def multistep_loss(model: DynamicsModel, params, s0, actions, targets, profile: WeightProfile,
                   scale=None, training: bool = False, rng=None, replicas: bool = False):
    """``sum_j alpha_j * MSE(target_j, s_hat_j)`` with per-horizon terms.

    ``targets`` is ``(..., h, d_s)``. With ``replicas`` the leading axis
    indexes independent problems: each replica's loss is averaged over its own
    data and the replica losses are summed, so gradients stay per-replica.
    """
    targets = np.asarray(targets, dtype=np.float64)
    h = targets.shape[-2]
    if profile.h != h:
        raise ValueError(f"profile horizon {profile.h} does not match segment horizon {h}")
    acts = actions if actions is not None and np.asarray(actions).shape[-1] else h
    preds = rollout(model, params, s0, acts, training=training, rng=rng)
    if model.gaussian:
        preds = preds[1]
    terms = [_mse(p, targets[..., j, :], scale, replicas) for j, p in enumerate(preds)]
    total = None
    for a, t in zip(profile.alphas, terms):
        if a == 0.0:
            continue
        total = t * a if total is None else total + t * a
    if total is None:
        total = terms[0] * 0.0
    if replicas:
        total = ad.tsum(total)
    return total, terms


def nll_multistep_loss(model: DynamicsModel, params, s0, actions, targets, rng=None,
                       stochastic: bool = True, training: bool = False, scale=None):
    """Joint Gaussian negative log-likelihood over horizons ``1..h``.

    Returns ``(loss, info)`` where ``info["implicit_weights"]`` holds the
    normalized per-horizon weights ``mean(1 / (2 sigma_j^2))`` and
    ``info["mse"]`` the per-horizon squared errors of the means.
    """
    targets = np.asarray(targets, dtype=np.float64)
    h = targets.shape[-2]
    acts = actions if actions is not None and np.asarray(actions).shape[-1] else h
    if stochastic and rng is None:
        raise ValueError("stochastic sampling needs an rng")
    out = rollout(model, params, s0, acts, training=training, rng=rng, stochastic=stochastic)
    if not isinstance(out, tuple):
        raise TypeError("NLL loss requires a Gaussian-head model")
    _, mus, sigmas = out
    total = None
    raw_w, mses = [], []
    const = 0.5 * math.log(2.0 * math.pi)
    for j, (mu, sigma) in enumerate(zip(mus, sigmas)):
        if np.any(sigma.value <= 0):
            raise ValueError(f"non-positive sigma at horizon {j + 1}")
        r = targets[..., j, :] - mu
        sig = sigma
        if scale is not None:
            r, sig = r / scale, sigma / scale
        term = ad.mean(ad.log(sig) + ad.square(r) / (ad.square(sig) * 2.0)) + const
        total = term if total is None else total + term
        raw_w.append(float(np.mean(1.0 / (2.0 * sig.value ** 2))))
        mses.append(float(np.mean(r.value ** 2)))
    w = np.array(raw_w)
    return total, {"implicit_weights": (w / w.sum()).tolist(), "raw_weights": raw_w, "mse": mses}


# --- training ----------------------------------------------------------------------

@dataclass
class LossConfig:
    h: int = 1
    profile: WeightProfile | None = None
    base_loss: str = "mse"       # "mse" or "nll"
    sampling: str = "deterministic"  # or "stochastic"

    def __post_init__(self):
        if self.profile is None:
            self.profile = WeightProfile.uniform(self.h) if self.h > 1 else WeightProfile.one_step()
        if self.profile.h != self.h:
            raise ValueError(f"profile horizon {self.profile.h} != h={self.h}")
        if self.base_loss not in ("mse", "nll"):
            raise ValueError(f"unknown base loss {self.base_loss!r}")
        if self.sampling not in ("deterministic", "stochastic"):
            raise ValueError(f"unknown sampling {self.sampling!r}")
        if self.sampling == "stochastic" and self.base_loss != "nll":
            raise ValueError("stochastic sampling is only used with the NLL loss")


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 20
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    seed: int = 42
    channel: str = "observations"
    normalize: bool = True
    max_valid_segments: int = 20000

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"]["profile"] = {"alphas": list(self.loss.profile.alphas), "beta": self.loss.profile.beta}
        return d


@dataclass
class TrainResult:
    model: DynamicsModel
    history: list[dict]
    wall_time: float
    config: TrainConfig

    def record(self) -> dict:
        """Deterministic JSON-ready summary (timing is kept out on purpose)."""
        return {"config": self.config.to_dict(), "history": self.history,
                "params_sha256": params_digest(self.model)}


def params_digest(model: DynamicsModel) -> str:
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes())
    return h.hexdigest()


def fit_normalizer(model: MlpDeltaModel, dataset: TrajectoryDataset, channel: str = "observations") -> None:
    s, a, t = dataset.segments(1, channel)
    model.normalizer = Normalizer.fit(s, a[:, 0, :], t[:, 0, :])


def loss_scale(model: DynamicsModel):
    """Per-dimension residual scale: state std for MLPs, none for scalar models."""
    if isinstance(model, MlpDeltaModel):
        return model.normalizer.s_std
    return None


def _batch_loss(model, params, cfg: TrainConfig, s0, acts, targ, rng, training=True):
    lc = cfg.loss
    scale = loss_scale(model)
    if lc.base_loss == "nll":
        loss, _ = nll_multistep_loss(model, params, s0, acts, targ, rng=rng,
                                     stochastic=lc.sampling == "stochastic", training=training, scale=scale)
        return loss
    loss, _ = multistep_loss(model, params, s0, acts, targ, lc.profile, scale=scale,
                             training=training, rng=rng)
    return loss


def validation_losses(model: DynamicsModel, dataset: TrajectoryDataset, h: int,
                      channel: str = "observations", max_segments: int | None = None,
                      seed: int = 0) -> dict:
    """One-step and ``h``-step MSE of the (mean) rollout on held-out episodes."""
    s0, acts, targ = dataset.segments(max(h, 1), channel)
    if max_segments and len(s0) > max_segments:
        idx = np.sort(np.random.default_rng(seed).choice(len(s0), max_segments, replace=False))
        s0, acts, targ = s0[idx], acts[idx], targ[idx]
    scale = loss_scale(model)
    preds = rollout(model, model.constants(), s0, acts if acts.shape[-1] else targ.shape[-2])
    if model.gaussian:
        preds = preds[1]

    def mse(j):
        r = preds[j].value - targ[:, j, :]
        if scale is not None:
            r = r / scale
        return float(np.mean(r * r))

    return {"valid_one_step": mse(0), "valid_h_step": mse(h - 1)}


def train(model: DynamicsModel, dataset: TrajectoryDataset, config: TrainConfig,
          valid: TrajectoryDataset | None = None, on_epoch=None) -> TrainResult:
    """Minimize the configured multi-step loss over all length-h windows.

    Each epoch visits every window once in an order shuffled by the epoch seed.
    Parameters are updated in place on ``model``.
    """
    lc = config.loss
    h = lc.h
    if config.normalize and isinstance(model, MlpDeltaModel):
        fit_normalizer(model, dataset, config.channel)
    s0_all, acts_all, targ_all = dataset.segments(h, config.channel)
    opt = OptimizerState(kind=config.optimizer, lr=config.lr)
    root = np.random.SeedSequence(config.seed)
    shuffle_rng, noise_rng = (np.random.default_rng(s) for s in root.spawn(2))
    history: list[dict] = []
    n = len(s0_all)
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            tape = Tape()
            params = model.bind(tape)
            loss = _batch_loss(model, params, config, s0_all[idx], acts_all[idx], targ_all[idx], noise_rng)
            lv = float(loss.value)
            if not math.isfinite(lv):
                raise TrainingDiverged(epoch, b, history)
            grads = tape.backward(loss)
            optimizer_step(opt, model.params, grads)
            total += lv * len(idx)
            count += len(idx)
        rec = {"epoch": epoch, "train_loss": total / count}
        if valid is not None and len(valid):
            rec.update(validation_losses(model, valid, h, config.channel, config.max_valid_segments))
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %d %s", epoch, rec)
    return TrainResult(model, history, time.perf_counter() - t0, config)


def train_replicas(model: DynamicsModel, s0, targets, profile: WeightProfile, optimizer: str = "adam",
                   lr: float = 1e-3, epochs: int = 60, batch_size: int = 64, seed: int = 0,
                   on_epoch=None) -> list[float]:
    """Train ``R`` independent replicas of a scalar model in one vectorized pass.

    ``model`` parameters have shape ``(R, 1, 1)``; ``s0`` is ``(R, N, d_s)`` and
    ``targets`` ``(R, N, h, d_s)``. Minibatches use the same sample indices for
    every replica. Returns the per-epoch mean training loss over replicas.
    """
    s0 = np.asarray(s0, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    R, n = s0.shape[:2]
    opt = OptimizerState(kind=optimizer, lr=lr)
    rng = np.random.default_rng(seed)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            tape = Tape()
            params = model.bind(tape)
            loss, _ = multistep_loss(model, params, s0[:, idx], None, targets[:, idx], profile, replicas=True)
            lv = float(loss.value)
            if not math.isfinite(lv):
                raise TrainingDiverged(epoch, b, curve)
            optimizer_step(opt, model.params, tape.backward(loss))
            total += lv * len(idx)
        curve.append(total / (n * R))
        if on_epoch is not None:
            on_epoch(epoch)
    return curve
