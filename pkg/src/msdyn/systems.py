"""Ground-truth systems, observation noise, trajectory datasets and their file format."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np


class SimulationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, line: int, msg: str):
        self.line = line
        super().__init__(f"line {line}: {msg}")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


# --- systems ----------------------------------------------------------------

@dataclass(frozen=True)
class LinearSystem:
    """``s' = theta_true * s``; stable only for ``|theta_true| < 1``."""

    theta_true: float = 0.78
    sigma: float = 0.0
    name = "linear"
    state_dim = 1
    action_dim = 0

    def __post_init__(self):
        if not abs(self.theta_true) < 1.0:
            raise ValueError(f"theta_true must lie in (-1, 1), got {self.theta_true}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def step(self, state, action=None):
        state = _check_state(state, self.state_dim)
        return self.theta_true * state

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(0.5, 2.0, size=1) * rng.choice([-1.0, 1.0])


@dataclass(frozen=True)
class SigmoidSystem:
    """``s' = theta1 * sigmoid(theta2 * s)``."""

    theta1_true: float = 2.0
    theta2_true: float = 0.5
    sigma: float = 0.0
    init_range: float = 1.0
    name = "sigmoid"
    state_dim = 1
    action_dim = 0

    def step(self, state, action=None):
        state = _check_state(state, self.state_dim)
        return self.theta1_true * _sigmoid(self.theta2_true * state)

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-self.init_range, self.init_range, size=1)


@dataclass(frozen=True)
class CartpoleSwingup:
    """Frictionless cart-pole with swing-up observation encoding.

    State is ``(x, cos(phi), sin(phi), x_dot, phi_dot)`` with ``phi = 0`` upright.
    The angle is integrated internally and re-encoded every substep, so the
    cos/sin pair stays on the unit circle to machine precision.
    """

    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_length: float = 0.5  # half-length, to the pole's centre of mass
    gravity: float = 9.81
    force_scale: float = 10.0
    dt: float = 0.01
    substeps: int = 10
    name = "cartpole"
    state_dim = 5
    action_dim = 1

    def _accel(self, phi, phi_dot, force):
        mc, mp, l, g = self.cart_mass, self.pole_mass, self.pole_length, self.gravity
        total = mc + mp
        sin, cos = math.sin(phi), math.cos(phi)
        tmp = (force + mp * l * phi_dot * phi_dot * sin) / total
        phi_acc = (g * sin - cos * tmp) / (l * (4.0 / 3.0 - mp * cos * cos / total))
        x_acc = tmp - mp * l * phi_acc * cos / total
        return x_acc, phi_acc

    def step(self, state, action=None):
        state = _check_state(state, self.state_dim)
        a = 0.0 if action is None else float(np.clip(np.asarray(action).reshape(-1)[0], -1.0, 1.0))
        force = self.force_scale * a
        x, c, s, x_dot, phi_dot = (float(v) for v in state)
        phi = math.atan2(s, c)
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            # semi-implicit Euler: velocities first, positions with new velocities
            x_acc, phi_acc = self._accel(phi, phi_dot, force)
            x_dot += h * x_acc
            phi_dot += h * phi_acc
            x += h * x_dot
            phi += h * phi_dot
        return np.array([x, math.cos(phi), math.sin(phi), x_dot, phi_dot])

    def energy(self, state) -> float:
        """Mechanical energy (pole potential measured from the pivot)."""
        x, c, s, x_dot, phi_dot = (float(v) for v in state)
        mc, mp, l, g = self.cart_mass, self.pole_mass, self.pole_length, self.gravity
        vx = x_dot + l * phi_dot * c
        vy = -l * phi_dot * s
        inertia = mp * (2 * l) ** 2 / 12.0
        return (0.5 * mc * x_dot ** 2 + 0.5 * mp * (vx ** 2 + vy ** 2)
                + 0.5 * inertia * phi_dot ** 2 + mp * g * l * c)

    def reward(self, state, action) -> float:
        x, c, _, x_dot, _ = (float(v) for v in state)
        a = float(np.asarray(action).reshape(-1)[0]) if action is not None else 0.0
        upright = (1.0 + c) / 2.0
        centered = (1.0 + math.exp(-0.25 * math.log(10.0) * x * x)) / 2.0
        small_control = 1.0 - a * a / 5.0
        small_velocity = (1.0 + math.exp(-0.04 * math.log(10.0) * x_dot * x_dot)) / 2.0
        return upright * centered * small_control * small_velocity

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        phi = math.pi + 0.05 * rng.standard_normal()
        x = 0.05 * rng.standard_normal()
        return np.array([x, math.cos(phi), math.sin(phi), 0.0, 0.0])


SYSTEMS: dict[str, type] = {"linear": LinearSystem, "sigmoid": SigmoidSystem,
                            "cartpole": CartpoleSwingup}


def make_system(name: str, **kwargs):
    try:
        cls = SYSTEMS[name]
    except KeyError:
        raise ValueError(f"unknown env {name!r}; choose from {sorted(SYSTEMS)}") from None
    return cls(**kwargs)


def _check_state(state, dim: int) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64).reshape(-1)
    if state.shape[0] != dim:
        raise ValueError(f"state has dimension {state.shape[0]}, system expects {dim}")
    if not np.all(np.isfinite(state)):
        raise SimulationError(f"non-finite state {state}")
    return state


def step(system, state, action=None) -> np.ndarray:
    return system.step(state, action)


def observe(state, sigma_abs, rng: np.random.Generator) -> np.ndarray:
    """``o = s + eps`` with independent Gaussian noise of per-dimension std ``sigma_abs``."""
    state = np.asarray(state, dtype=np.float64)
    sigma_abs = np.broadcast_to(np.asarray(sigma_abs, dtype=np.float64), state.shape[-1:])
    if np.any(sigma_abs < 0):
        raise ValueError("sigma_abs must be non-negative")
    return state + rng.standard_normal(state.shape) * sigma_abs


# --- trajectories -----------------------------------------------------------

@dataclass
class Trajectory:
    states: np.ndarray                      # (T+1, d_s)
    actions: np.ndarray                     # (T, d_a); d_a may be 0
    observations: np.ndarray | None = None  # (T+1, d_s)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64).reshape(len(self.states), -1)
        n = len(self.states)
        acts = np.asarray(self.actions, dtype=np.float64)
        self.actions = acts.reshape(-1, 1) if acts.ndim == 1 else acts
        if self.observations is not None:
            self.observations = np.asarray(self.observations, dtype=np.float64).reshape(self.states.shape)
        if n and len(self.actions) != n - 1:
            raise ValueError(f"{len(self.actions)} actions for {n} states")
        for arr in (self.states, self.actions, self.observations):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError("trajectory contains non-finite values")

    def __len__(self) -> int:
        return len(self.states)

    def channel(self, which: str = "observations") -> np.ndarray:
        if which in ("observations", "obs") and self.observations is not None:
            return self.observations
        if which in ("observations", "obs", "states", "true-state"):
            return self.states
        raise ValueError(f"unknown channel {which!r}")


@dataclass
class TrajectoryDataset:
    trajectories: list[Trajectory] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def state_dim(self) -> int:
        return int(self.meta.get("d_s", self.trajectories[0].states.shape[1] if self.trajectories else 0))

    @property
    def action_dim(self) -> int:
        return int(self.meta.get("d_a", self.trajectories[0].actions.shape[1] if self.trajectories else 0))

    def subset(self, episodes) -> "TrajectoryDataset":
        return TrajectoryDataset([self.trajectories[i] for i in episodes], dict(self.meta))

    def segments(self, h: int, channel: str = "observations"):
        """All length-``h`` windows, stride 1, never crossing episodes.

        Returns ``(start, actions, targets)`` of shapes ``(N, d_s)``,
        ``(N, h, d_a)`` and ``(N, h, d_s)``.
        """
        if h < 1:
            raise ValueError("h must be >= 1")
        starts, acts, targs = [], [], []
        for ep, tr in enumerate(self.trajectories):
            x = tr.channel(channel)
            T = len(x)
            if T < h + 1:
                continue
            idx = np.arange(T - h)[:, None] + np.arange(h + 1)[None, :]
            w = x[idx]
            starts.append(w[:, 0])
            targs.append(w[:, 1:])
            aidx = np.arange(T - h)[:, None] + np.arange(h)[None, :]
            acts.append(tr.actions[aidx])
        if not starts:
            longest = max((len(t) for t in self.trajectories), default=0)
            raise ValueError(f"horizon {h} exceeds every episode (longest has {longest} states)")
        return np.concatenate(starts), np.concatenate(acts), np.concatenate(targs)

    def state_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        allstates = np.concatenate([t.states for t in self.trajectories])
        return allstates.min(axis=0), allstates.max(axis=0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryDataset) or self.meta != other.meta:
            return False
        if len(self) != len(other):
            return False
        for a, b in zip(self.trajectories, other.trajectories):
            if not (np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)):
                return False
            if (a.observations is None) != (b.observations is None):
                return False
            if a.observations is not None and not np.array_equal(a.observations, b.observations):
                return False
        return True


def noise_scale_to_sigma(dataset: TrajectoryDataset, percent: float) -> np.ndarray:
    """Per-dimension noise std as a fraction of the state-space width.

    ``percent`` is a fraction (0.02 means 2% of ``max - min``).
    """
    if percent < 0:
        raise ValueError("noise percent must be >= 0")
    lo = np.asarray(dataset.meta["state_min"], dtype=np.float64)
    hi = np.asarray(dataset.meta["state_max"], dtype=np.float64)
    return percent * (hi - lo)


def _episode_seeds(seed: int, episodes: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(episodes)


def random_uniform_policy(d_a: int) -> Callable:
    def policy(state, t, rng):
        return rng.uniform(-1.0, 1.0, size=d_a)
    return policy


def scripted_policy(d_a: int) -> Callable:
    """Sinusoidal pumping with a per-episode frequency/phase drawn from ``rng``."""
    params = {}

    def policy(state, t, rng):
        if t == 0 or "f" not in params:
            params["f"] = rng.uniform(0.2, 1.5)
            params["phase"] = rng.uniform(0, 2 * np.pi)
        return np.full(d_a, math.sin(2 * math.pi * params["f"] * 0.01 * t + params["phase"]))
    return policy


POLICIES = {"random-uniform": random_uniform_policy, "random": random_uniform_policy,
            "scripted": scripted_policy}


def generate_dataset(system, policy: str = "random-uniform", episodes: int = 50,
                     horizon: int = 1000, seed: int = 42, noise_percent: float = 0.0) -> TrajectoryDataset:
    """Simulate ``episodes`` rollouts of ``horizon`` steps and add observation noise.

    Each episode draws from its own child seed, so episode contents do not
    depend on generation order. The noise std is ``noise_percent`` times the
    per-dimension width of the clean states of the whole dataset.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    d_s, d_a = system.state_dim, system.action_dim
    children = _episode_seeds(seed, episodes)
    clean = []
    for ep, ss in enumerate(children):
        dyn_rng, _ = (np.random.default_rng(s) for s in ss.spawn(2))
        pol = POLICIES[policy](d_a)
        states = np.empty((horizon + 1, d_s))
        actions = np.empty((horizon, d_a))
        states[0] = system.initial_state(dyn_rng)
        for t in range(horizon):
            a = pol(states[t], t, dyn_rng) if d_a else np.zeros(0)
            actions[t] = a
            try:
                nxt = system.step(states[t], a if d_a else None)
            except SimulationError as e:
                raise SimulationError(f"episode {ep}, step {t}: {e}") from None
            if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > 1e8:
                raise SimulationError(f"episode {ep}, step {t}: simulation diverged")
            states[t + 1] = nxt
        clean.append((states, actions))
    allstates = np.concatenate([s for s, _ in clean])
    meta = {
        "env": system.name, "d_s": d_s, "d_a": d_a, "noise_percent": float(noise_percent),
        "seed": int(seed), "policy": policy,
        "state_min": [float(v) for v in allstates.min(axis=0)],
        "state_max": [float(v) for v in allstates.max(axis=0)],
    }
    ds = TrajectoryDataset([], meta)
    sigma_abs = noise_scale_to_sigma(ds, noise_percent)
    for (states, actions), ss in zip(clean, children):
        noise_rng = np.random.default_rng(ss.spawn(2)[1])
        obs = observe(states, sigma_abs, noise_rng) if noise_percent > 0 else states.copy()
        ds.trajectories.append(Trajectory(states, actions, obs))
    return ds


# --- splits -----------------------------------------------------------------

def split_episodes(n: int, ratios=(36, 4, 10), seed: int = 0) -> tuple[list[int], list[int], list[int]]:
    """Episode-level train/valid/test partition, proportional to ``ratios``."""
    total = sum(ratios)
    perm = np.random.default_rng(seed).permutation(n)
    n_valid = int(round(n * ratios[1] / total))
    n_test = int(round(n * ratios[2] / total))
    if n >= 3:
        n_valid, n_test = max(n_valid, 1), max(n_test, 1)
    n_train = n - n_valid - n_test
    if n_train < 1:
        raise ValueError(f"cannot split {n} episodes with ratios {ratios}")
    idx = [int(i) for i in perm]
    return idx[:n_train], idx[n_train:n_train + n_valid], idx[n_train + n_valid:]


def kfold_episodes(n: int, folds: int, seed: int = 0) -> list[list[int]]:
    """``folds`` disjoint validation groups covering every episode once."""
    if folds < 2 or folds > n:
        raise ValueError(f"cannot make {folds} folds from {n} episodes")
    perm = np.random.default_rng(seed).permutation(n)
    return [sorted(int(i) for i in chunk) for chunk in np.array_split(perm, folds)]


# --- file format --------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(dataset: TrajectoryDataset, path) -> None:
    """JSON metadata line, then CSV: ``episode,t,s_*,a_*,o_*``."""
    d_s, d_a = dataset.state_dim, dataset.action_dim
    meta = dict(dataset.meta)
    meta.setdefault("d_s", d_s)
    meta.setdefault("d_a", d_a)
    buf = io.StringIO()
    buf.write(json.dumps(meta, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "t"] + [f"s_{j}" for j in range(d_s)]
               + [f"a_{j}" for j in range(d_a)] + [f"o_{j}" for j in range(d_s)])
    for ep, tr in enumerate(dataset.trajectories):
        for t in range(len(tr)):
            row = [str(ep), str(t)] + [_fmt(v) for v in tr.states[t]]
            row += [_fmt(v) for v in tr.actions[t]] if t < len(tr.actions) else [""] * d_a
            row += [_fmt(v) for v in tr.observations[t]] if tr.observations is not None else [""] * d_s
            w.writerow(row)
    Path(path).write_text(buf.getvalue())


def load_dataset(path) -> TrajectoryDataset:
    text = Path(path).read_text()
    lines = text.split("\n")
    if not lines or not lines[0].strip():
        raise DatasetFormatError(1, "missing metadata header")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(1, f"bad metadata JSON: {e}") from None
    if not isinstance(meta, dict) or "d_s" not in meta or "d_a" not in meta:
        raise DatasetFormatError(1, "metadata must be an object with d_s and d_a")
    d_s, d_a = int(meta["d_s"]), int(meta["d_a"])
    width = 2 + 2 * d_s + d_a
    if len(lines) < 2 or not lines[1].strip():
        raise DatasetFormatError(2, "missing CSV header")
    header = lines[1].split(",")
    if len(header) != width or header[:2] != ["episode", "t"]:
        raise DatasetFormatError(2, f"expected {width} columns starting with episode,t")
    episodes: dict[int, dict] = {}
    order: list[int] = []
    if text.endswith("\n"):
        lines = lines[:-1]
    elif len(lines) > 2:
        # writers always terminate rows; a missing newline means the file was cut
        raise DatasetFormatError(len(lines), "truncated final line")
    for lineno, line in enumerate(lines[2:], start=3):
        fields = line.split(",")
        if len(fields) != width:
            raise DatasetFormatError(lineno, f"expected {width} fields, got {len(fields)}")
        try:
            ep, t = int(fields[0]), int(fields[1])
            s = [float(v) for v in fields[2:2 + d_s]]
            a_raw = fields[2 + d_s:2 + d_s + d_a]
            o_raw = fields[2 + d_s + d_a:]
            a = None if all(v == "" for v in a_raw) or d_a == 0 else [float(v) for v in a_raw]
            o = None if all(v == "" for v in o_raw) else [float(v) for v in o_raw]
        except ValueError as e:
            raise DatasetFormatError(lineno, str(e)) from None
        rec = episodes.get(ep)
        if rec is None:
            rec = episodes[ep] = {"s": [], "a": [], "o": []}
            order.append(ep)
        if t != len(rec["s"]):
            raise DatasetFormatError(lineno, f"episode {ep}: expected t={len(rec['s'])}, got {t}")
        rec["s"].append(s)
        if a is not None:
            rec["a"].append(a)
        rec["o"].append(o)
    trajs = []
    for ep in order:
        rec = episodes[ep]
        n = len(rec["s"])
        acts = np.array(rec["a"], dtype=np.float64).reshape(-1, d_a) if d_a else np.zeros((n - 1, 0))
        if len(acts) != n - 1:
            raise DatasetFormatError(len(lines), f"episode {ep}: {len(acts)} actions for {n} states (truncated file?)")
        obs = None if any(o is None for o in rec["o"]) else np.array(rec["o"])
        trajs.append(Trajectory(np.array(rec["s"]), acts, obs))
    return TrajectoryDataset(trajs, meta)
