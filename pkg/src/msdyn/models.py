"""One-step dynamics models: scalar linear, two-parameter sigmoid net, MLP delta model.

Every model keeps its parameters as a dict of numpy arrays and exposes
``forward(params, s, a, ...)`` written with :mod:`msdyn.autodiff` ops, so the
same code path serves taped training and plain evaluation.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

INIT_DISTRIBUTIONS = ("default", "uniform", "xavier-uniform")


def _init_weight(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dist: str) -> np.ndarray:
    if dist == "default":
        bound = 1.0 / math.sqrt(fan_in)
    elif dist == "uniform":
        bound = 1.0
    elif dist in ("xavier-uniform", "xavier_uniform", "xavier"):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
    else:
        raise ValueError(f"unknown init distribution {dist!r}")
    return rng.uniform(-bound, bound, size=shape)


class DynamicsModel:
    kind = "base"
    gaussian = False
    delta = False

    params: dict[str, np.ndarray]

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        return {k: tape.leaf(v, name=k) for k, v in self.params.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}

    def forward(self, p, s, a=None, training: bool = False, rng=None):
        raise NotImplementedError

    def predict(self, s, a=None):
        """Numpy in, numpy out; returns ``(mu, sigma)`` for Gaussian heads."""
        out = self.forward(self.constants(), Tensor(s), None if a is None else Tensor(a))
        if isinstance(out, tuple):
            return out[0].value, out[1].value
        return out.value

    def architecture(self) -> dict:
        return {"kind": self.kind}

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new


class LinearModel(DynamicsModel):
    """``s' = theta * s``."""

    kind = "linear"

    def __init__(self, theta: float = 0.0):
        self.params = {"theta": np.array(theta, dtype=np.float64)}

    @property
    def theta(self) -> float:
        return float(self.params["theta"])

    def forward(self, p, s, a=None, training=False, rng=None):
        return p["theta"] * s

    @classmethod
    def init(cls, seed: int = 0, dist: str = "default"):
        rng = np.random.default_rng(seed)
        return cls(float(_init_weight(rng, (), 1, 1, dist)))


class SigmoidModel(DynamicsModel):
    """``s' = theta1 * sigmoid(theta2 * s)``; single neuron, no biases.

    Parameters may carry a leading batch axis to train many independent
    replicas in one pass (their gradients do not interact).
    """

    kind = "sigmoid"

    def __init__(self, theta1=1.0, theta2=1.0, init: str = "default"):
        self.params = {"theta1": np.array(theta1, dtype=np.float64),
                       "theta2": np.array(theta2, dtype=np.float64)}
        self.init_dist = init

    def forward(self, p, s, a=None, training=False, rng=None):
        return p["theta1"] * ad.sigmoid(p["theta2"] * s)

    @classmethod
    def init(cls, seed: int = 0, dist: str = "default", shape=()):
        rng = np.random.default_rng(seed)
        # theta2 is the hidden layer (fan 1 -> 1), theta1 the output layer (fan 1 -> 1)
        t2 = _init_weight(rng, shape, 1, 1, dist)
        t1 = _init_weight(rng, shape, 1, 1, dist)
        return cls(t1, t2, init=dist)

    def architecture(self):
        return {"kind": self.kind, "init": self.init_dist}


@dataclass
class Normalizer:
    """Affine standardization of inputs and scale-only normalization of deltas."""

    s_mean: np.ndarray
    s_std: np.ndarray
    a_mean: np.ndarray
    a_std: np.ndarray
    delta_std: np.ndarray

    @staticmethod
    def _stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if x.shape[-1] == 0:
            return np.zeros(0), np.ones(0)
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        # constant dimensions: shift only
        sd = np.where(sd > 1e-12, sd, 1.0)
        return mu, sd

    @classmethod
    def fit(cls, states: np.ndarray, actions: np.ndarray, next_states: np.ndarray) -> "Normalizer":
        if len(states) == 0:
            raise ValueError("cannot fit a normalizer on an empty split")
        sm, ss = cls._stats(states)
        am, as_ = cls._stats(actions)
        d = next_states - states
        dsd = np.sqrt((d * d).mean(axis=0))
        dsd = np.where(dsd > 1e-12, dsd, 1.0)
        return cls(sm, ss, am, as_, dsd)

    @classmethod
    def identity(cls, d_s: int, d_a: int) -> "Normalizer":
        return cls(np.zeros(d_s), np.ones(d_s), np.zeros(d_a), np.ones(d_a), np.ones(d_s))

    def normalize_states(self, s):
        return (np.asarray(s) - self.s_mean) / self.s_std

    def denormalize_states(self, z):
        return np.asarray(z) * self.s_std + self.s_mean

    def to_dict(self) -> dict:
        return {k: [float(x) for x in getattr(self, k)] for k in
                ("s_mean", "s_std", "a_mean", "a_std", "delta_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


class MlpDeltaModel(DynamicsModel):
    """Two tanh hidden layers predicting a bounded, normalized state delta.

    ``s' = s + delta_std * out_range * tanh(head(h))``. With ``gaussian=True``
    a second head gives ``sigma = delta_std * exp(log_sigma)`` with
    ``log_sigma`` squashed by tanh into ``[log(sigma_min), log(sigma_max)]``.
    """

    kind = "mlp"
    delta = True

    def __init__(self, d_s: int, d_a: int, hidden: int = 64, gaussian: bool = False,
                 dropout: float = 0.1, out_range: float = 3.0, sigma_min: float = 1e-4,
                 sigma_max: float = 2.0, normalizer: Normalizer | None = None,
                 seed: int = 0, init: str = "default"):
        self.d_s, self.d_a, self.hidden = d_s, d_a, hidden
        self.gaussian = gaussian
        self.dropout = dropout
        self.out_range = out_range
        self.sigma_min, self.sigma_max = sigma_min, sigma_max
        self.normalizer = normalizer or Normalizer.identity(d_s, d_a)
        self.init_dist = init
        rng = np.random.default_rng(seed)
        H = hidden

        def layer(name, fi, fo):
            self.params[f"W{name}"] = _init_weight(rng, (fi, fo), fi, fo, init)
            self.params[f"b{name}"] = (np.zeros(fo) if init == "xavier-uniform"
                                       else _init_weight(rng, (fo,), fi, fo, init))

        self.params = {}
        layer("1", d_s + d_a, H)
        # first layer kept as separate state / action blocks
        W1 = self.params.pop("W1")
        self.params["W1s"] = W1[:d_s]
        if d_a:
            self.params["W1a"] = W1[d_s:]
        layer("2", H, H)
        layer("mu", H, d_s)
        if gaussian:
            layer("sd", H, d_s)

    def architecture(self) -> dict:
        return {"kind": self.kind, "d_s": self.d_s, "d_a": self.d_a, "hidden": self.hidden,
                "gaussian": self.gaussian, "dropout": self.dropout, "out_range": self.out_range,
                "sigma_min": self.sigma_min, "sigma_max": self.sigma_max, "init": self.init_dist}

    def _input(self, p, s, a):
        nz = self.normalizer
        xs = (s - nz.s_mean) / nz.s_std
        z = xs @ p["W1s"] + p["b1"]
        if self.d_a:
            z = z + ((a - nz.a_mean) / nz.a_std) @ p["W1a"]
        return z

    def features(self, p, s, a=None, training=False, rng=None):
        h = ad.tanh(self._input(p, s, a))
        h = ad.dropout(h, self.dropout, rng, training)
        h = ad.tanh(h @ p["W2"] + p["b2"])
        return ad.dropout(h, self.dropout, rng, training)

    def forward(self, p, s, a=None, training=False, rng=None):
        if self.d_a and a is None:
            raise ValueError(f"model expects {self.d_a}-dim actions")
        if s.shape[-1] != self.d_s:
            raise ValueError(f"state has dimension {s.shape[-1]}, model expects {self.d_s}")
        h = self.features(p, s, a, training, rng)
        scale = self.normalizer.delta_std
        delta = ad.tanh(h @ p["Wmu"] + p["bmu"]) * (self.out_range * scale)
        mu = s + delta
        if not self.gaussian:
            return mu
        lo, hi = math.log(self.sigma_min), math.log(self.sigma_max)
        log_sigma = (ad.tanh(h @ p["Wsd"] + p["bsd"]) + 1.0) * (0.5 * (hi - lo)) + lo
        return mu, ad.exp(log_sigma) * scale

    def zero_output_layer(self):
        self.params["Wmu"][:] = 0.0
        self.params["bmu"][:] = 0.0
        return self


MODELS = {"linear": LinearModel, "sigmoid": SigmoidModel, "mlp": MlpDeltaModel}


def init_model(kind: str, seed: int = 0, dist: str = "default", **kwargs) -> DynamicsModel:
    if kind == "linear":
        return LinearModel.init(seed, dist)
    if kind == "sigmoid":
        return SigmoidModel.init(seed, dist, **kwargs)
    if kind == "mlp":
        return MlpDeltaModel(seed=seed, init=dist, **kwargs)
    raise ValueError(f"unknown model kind {kind!r}")


# --- checkpoints ----------------------------------------------------------------

_MAGIC = b"MSDYNCK1"


def save_model(model: DynamicsModel, path) -> None:
    """JSON header (architecture, normalizer, parameter layout) + little-endian float64 block."""
    names = sorted(model.params)
    header = {"architecture": model.architecture(),
              "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names]}
    if isinstance(model, MlpDeltaModel):
        header["normalizer"] = model.normalizer.to_dict()
    hb = json.dumps(header, sort_keys=True).encode()
    block = b"".join(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n in names)
    Path(path).write_bytes(_MAGIC + struct.pack("<Q", len(hb)) + hb + block)


def load_model(path) -> DynamicsModel:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    arch = dict(header["architecture"])
    kind = arch.pop("kind")
    if kind == "linear":
        model = LinearModel()
    elif kind == "sigmoid":
        model = SigmoidModel(init=arch.get("init", "default"))
    elif kind == "mlp":
        model = MlpDeltaModel(normalizer=Normalizer.from_dict(header["normalizer"]), **arch)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    off = 16 + n
    params = {}
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 8 * count
        params[spec["name"]] = arr
    if off != len(raw):
        raise ValueError(f"{path}: checkpoint size mismatch")
    model.params = params
    return model
