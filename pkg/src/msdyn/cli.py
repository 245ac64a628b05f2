"""Command-line front end: ``msdyn <command> [options]``.

Options come from (lowest to highest precedence) built-in defaults, an INI
config file given with ``--config`` and explicit flags. The seed additionally
falls back to ``MSDYN_SEED`` before the default of 42. Every command writes
its resolved configuration as ``config.ini`` next to its outputs.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import closed_form as cf
from .evaluation import (BETA_GRID, ModelSpec, config_digest, grid_search_beta, loss_landscape_scan,
                         r2_curve)
from .models import MlpDeltaModel, init_model, load_model, save_model
from .multistep import (LossConfig, TrainConfig, TrainingDiverged, WeightProfile, exp_weights,
                        params_digest, train)
from .sigmoid_lab import SigmoidLabConfig, run_sigmoid_lab
from .systems import (DatasetFormatError, SigmoidSystem, SimulationError, generate_dataset, load_dataset,
                      make_system, save_dataset, split_episodes)

log = logging.getLogger("msdyn")
DEFAULT_SEED = 42


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# (name, type, default, help); names become --flags with dashes
COMMON = [
    ("out", str, None, "output directory (required)"),
    ("force", _bool, False, "overwrite existing outputs"),
    ("jobs", int, 1, "worker processes for parallel cells"),
]
TRAINING = [
    ("model", str, "mlp", "linear | sigmoid | mlp"),
    ("init", str, "default", "default | uniform | xavier-uniform"),
    ("hidden", int, 64, "MLP hidden width"),
    ("dropout", float, 0.1, "MLP dropout rate"),
    ("gaussian", _bool, False, "MLP with a Gaussian head"),
    ("epochs", int, 20, "training epochs"),
    ("batch_size", int, 64, "minibatch size"),
    ("optimizer", str, "adam", "adam | sgd"),
    ("lr", float, 1e-3, "learning rate"),
    ("channel", str, "observations", "training channel: observations | true-state"),
]
COMMANDS = {
    "gen": [
        ("env", str, "cartpole", "linear | sigmoid | cartpole"),
        ("episodes", int, 50, "number of episodes"),
        ("horizon", int, 1000, "steps per episode"),
        ("noise", float, 0.0, "observation noise as a fraction of state width"),
        ("policy", str, "random-uniform", "random-uniform | scripted"),
        ("theta", float, 0.78, "linear system coefficient"),
        ("theta1", float, 2.0, "sigmoid system output weight"),
        ("theta2", float, 0.5, "sigmoid system input weight"),
    ],
    "train": [
        ("data", str, None, "dataset file"),
        ("h", int, 1, "loss horizon"),
        ("beta", float, None, "exponential weight parameter (default uniform)"),
        ("alphas", str, None, "explicit comma-separated weights, overrides beta"),
        ("loss", str, "mse", "mse | nll"),
        ("sampling", str, "deterministic", "deterministic | stochastic"),
    ] + TRAINING,
    "eval": [
        ("data", str, None, "dataset file"),
        ("checkpoint", str, None, "model checkpoint"),
        ("H", int, 50, "maximum horizon"),
        ("target", str, "observations", "observations | true-state"),
        ("split", str, "test", "test | all"),
        ("millesimal", _bool, False, "report R2-bar in thousandths"),
    ],
    "gridsearch": [
        ("data", str, None, "dataset file"),
        ("h", str, "2", "comma-separated horizons"),
        ("betas", str, ",".join(repr(b) for b in BETA_GRID), "comma-separated beta grid"),
        ("folds", int, 3, "cross-validation folds"),
        ("H", int, 50, "R2-bar horizon"),
        ("target", str, "observations", "observations | true-state"),
        ("millesimal", _bool, False, "report R2-bar in thousandths"),
    ] + TRAINING,
    "linear-lab": [
        ("study", str, "all", "bias-variance | baselines | variance | all"),
        ("n_mc", int, 100, "Monte Carlo draws per theta_true"),
        ("sigmas", str, "0,0.25,0.5,0.75,1", "noise std values"),
        ("alphas", str, "0,0.5,1", "loss weights on the one-step term"),
        ("n_theta", int, 10, "number of sampled theta_true values"),
        ("s0", float, 0.5, "initial state for the bias/variance sweep"),
        ("baseline_states", int, 50, "states per dataset for the baseline study"),
        ("n_boot", int, 1000, "bootstrap resamples"),
        ("n_mc_variance", int, 100000, "draws for the single-sample variance checks"),
    ],
    "sigmoid-lab": [
        ("alphas", str, "0,0.25,0.5,0.75,1", "loss weights on the one-step term"),
        ("epochs", int, 60, "training epochs"),
        ("n_starts", int, 10, "starting points per init distribution"),
        ("n_mc", int, 10, "Monte Carlo data draws"),
        ("noise_levels", str, "0,0.2,0.4", "noise as fractions of the state width"),
        ("n_train", int, 1024, "training triples per run"),
        ("batch_size", int, 64, "minibatch size"),
        ("landscape", _bool, True, "also write loss-landscape scans"),
        ("landscape_steps", int, 101, "grid points per parameter axis"),
    ],
}
SECTION_RUN = "run"


# --- configuration ------------------------------------------------------------------

def _options(command: str):
    return COMMON + COMMANDS[command]


def read_config(path: str, command: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except configparser.Error as e:
        raise UsageError(f"{path}: {e}") from None
    known = {name for name, *_ in _options(command)}
    out = {}
    for section in cp.sections():
        if section not in (SECTION_RUN, command):
            raise UsageError(f"{path}: unknown section [{section}]")
        for key, val in cp.items(section):
            k = key.replace("-", "_")
            if section == SECTION_RUN and k == "seed":
                out["seed"] = val
                continue
            if k not in known:
                raise UsageError(f"{path}: unknown key '{key}' in [{section}]")
            out[k] = val
    return out


def resolve(command: str, flags: dict, env=None) -> dict:
    """Merge defaults, config file and flags; apply the seed precedence chain."""
    env = os.environ if env is None else env
    conf = read_config(flags["config"], command) if flags.get("config") else {}
    cfg = {}
    for name, typ, default, _ in _options(command):
        val = flags.get(name)
        if val is None and name in conf:
            try:
                val = typ(conf[name])
            except ValueError as e:
                raise UsageError(f"config key '{name}': {e}") from None
        cfg[name] = default if val is None else val
    if flags.get("seed") is not None:
        seed = flags["seed"]
    elif "seed" in conf:
        seed = conf["seed"]
    elif env.get("MSDYN_SEED"):
        seed = env["MSDYN_SEED"]
    else:
        seed = DEFAULT_SEED
    try:
        cfg["seed"] = int(seed)
    except ValueError:
        raise UsageError(f"seed must be an integer, got {seed!r}") from None
    if not cfg.get("out"):
        raise UsageError("--out is required")
    return cfg


def write_config(cfg: dict, command: str, out: Path) -> None:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp[SECTION_RUN] = {"seed": str(cfg["seed"])}
    body = {}
    for name, *_ in COMMANDS[command]:
        v = cfg[name]
        if v is None:
            continue
        body[name] = repr(v) if isinstance(v, float) else str(v)
    cp[command] = body
    with open(out / "config.ini", "w") as fh:
        cp.write(fh)


def _prepare_out(cfg: dict, outputs: list[str]) -> Path:
    out = Path(cfg["out"])
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    clash = [o for o in outputs if (out / o).exists()]
    if clash and not cfg["force"]:
        raise UsageError(f"refusing to overwrite {out / clash[0]} (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _load_data(path) -> "TrajectoryDataset":  # noqa: F821
    if not path:
        raise UsageError("--data is required")
    if not Path(path).exists():
        raise UsageError(f"dataset not found: {path}")
    try:
        return load_dataset(path)
    except DatasetFormatError as e:
        raise RuntimeFailure(f"{path}: {e}") from None


# --- commands --------------------------------------------------------------------

def cmd_gen(cfg: dict) -> None:
    out = _prepare_out(cfg, ["dataset.csv"])
    env = cfg["env"]
    kwargs = {}
    if env == "linear":
        kwargs["theta_true"] = cfg["theta"]
    elif env == "sigmoid":
        kwargs.update(theta1_true=cfg["theta1"], theta2_true=cfg["theta2"])
    try:
        system = make_system(env, **kwargs)
        ds = generate_dataset(system, cfg["policy"], cfg["episodes"], cfg["horizon"], cfg["seed"], cfg["noise"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    except SimulationError as e:
        raise RuntimeFailure(str(e)) from None
    save_dataset(ds, out / "dataset.csv")
    write_config(cfg, "gen", out)
    if hasattr(system, "reward"):
        for ep, tr in enumerate(ds.trajectories):
            ret = math.fsum(system.reward(tr.states[t + 1], tr.actions[t]) for t in range(len(tr.actions)))
            print(f"episode {ep}: return {ret:.3f}")
    print(f"wrote {out / 'dataset.csv'} ({len(ds)} episodes)")


def _profile(cfg: dict) -> WeightProfile | None:
    h = cfg["h"]
    if cfg.get("alphas"):
        alphas = _floats(cfg["alphas"])
        if len(alphas) != h:
            raise UsageError(f"--alphas has {len(alphas)} weights for h={h}")
        return WeightProfile(tuple(alphas))
    if cfg.get("beta") is not None:
        return exp_weights(h, cfg["beta"])
    return None


def _train_config(cfg: dict, loss: LossConfig) -> TrainConfig:
    return TrainConfig(loss=loss, epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                       optimizer=cfg["optimizer"], lr=cfg["lr"], seed=cfg["seed"], channel=cfg["channel"])


def _model_spec(cfg: dict) -> ModelSpec:
    return ModelSpec(cfg["model"], cfg["init"], cfg["seed"], cfg["hidden"], cfg["dropout"])


def cmd_train(cfg: dict) -> None:
    out = _prepare_out(cfg, ["model.ckpt", "train_record.json"])
    ds = _load_data(cfg["data"])
    try:
        loss = LossConfig(cfg["h"], _profile(cfg), cfg["loss"], cfg["sampling"])
        tcfg = _train_config(cfg, loss)
        if cfg["optimizer"] not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {cfg['optimizer']!r}")
        tr_idx, va_idx, te_idx = split_episodes(len(ds), seed=cfg["seed"])
        if cfg["model"] == "mlp":
            model = MlpDeltaModel(ds.state_dim, ds.action_dim, hidden=cfg["hidden"], gaussian=cfg["gaussian"],
                                  dropout=cfg["dropout"], seed=cfg["seed"], init=cfg["init"])
        else:
            model = init_model(cfg["model"], cfg["seed"], cfg["init"])
        if loss.base_loss == "nll" and not model.gaussian:
            raise ValueError("the NLL loss needs --gaussian true")
    except ValueError as e:
        raise UsageError(str(e)) from None
    write_config(cfg, "train", out)
    record = {"config": tcfg.to_dict(), "split": {"train": tr_idx, "valid": va_idx, "test": te_idx}}
    t0 = time.perf_counter()
    try:
        result = train(model, ds.subset(tr_idx), tcfg, valid=ds.subset(va_idx))
    except TrainingDiverged as e:
        record.update(history=e.history, status="diverged", error=str(e))
        _dump_json(record, out / "train_record.json")
        raise RuntimeFailure(str(e)) from None
    except (ValueError, FloatingPointError) as e:
        record.update(status="failed", error=str(e))
        _dump_json(record, out / "train_record.json")
        raise RuntimeFailure(str(e)) from None
    record.update(history=result.history, status="ok", params_sha256=params_digest(model))
    save_model(model, out / "model.ckpt")
    _dump_json(record, out / "train_record.json")
    last = result.history[-1]
    print(f"trained {cfg['model']} h={cfg['h']}: final train loss {last['train_loss']:.6g}"
          f" in {time.perf_counter() - t0:.1f}s")


def cmd_eval(cfg: dict) -> None:
    out = _prepare_out(cfg, ["r2_curve.csv", "summary.json"])
    ds = _load_data(cfg["data"])
    ck = cfg["checkpoint"]
    if not ck:
        raise UsageError("--checkpoint is required")
    if not Path(ck).exists():
        raise UsageError(f"checkpoint not found: {ck}")
    try:
        model = load_model(ck)
    except ValueError as e:
        raise RuntimeFailure(str(e)) from None
    if cfg["split"] == "test":
        ds = ds.subset(split_episodes(len(ds), seed=cfg["seed"])[2])
    elif cfg["split"] != "all":
        raise UsageError(f"unknown split {cfg['split']!r}")
    try:
        rep = r2_curve(model, ds, cfg["H"], cfg["target"])
    except ValueError as e:
        raise RuntimeFailure(str(e)) from None
    rep.config_digest = config_digest({k: cfg[k] for k in sorted(cfg) if k not in ("out", "force", "jobs")})
    (out / "r2_curve.csv").write_text(rep.to_csv())
    _dump_json(rep.summary(cfg["millesimal"]), out / "summary.json")
    write_config(cfg, "eval", out)
    print(f"R2bar({cfg['H']}) = {rep.r2bar:.4f}")


def cmd_gridsearch(cfg: dict) -> None:
    out = _prepare_out(cfg, ["gridsearch.csv", "summary.json"])
    ds = _load_data(cfg["data"])
    try:
        hs = _ints(cfg["h"])
        betas = _floats(cfg["betas"])
        if not hs or not betas:
            raise ValueError("need at least one horizon and one beta")
        if any(b <= 0 for b in betas):
            raise ValueError("betas must be > 0")
        tcfg = _train_config(cfg, LossConfig())
    except ValueError as e:
        raise UsageError(str(e)) from None
    write_config(cfg, "gridsearch", out)
    rows, summaries = [], []
    for i, h in enumerate(hs):
        rec = grid_search_beta(ds, h, betas, cfg["folds"], cfg["H"], cfg["seed"], _model_spec(cfg), tcfg,
                               channel=cfg["target"], baseline=True, jobs=cfg["jobs"])
        lines = rec.to_csv().splitlines()
        rows.extend(lines if i == 0 else [ln for ln in lines[1:] if not ln.split(",")[1] == ""])
        summaries.append(rec.summary(cfg["millesimal"]))
        print(f"h={h}: selected beta {rec.selected_beta} (h_e={rec.effective_horizon})")
    (out / "gridsearch.csv").write_text("\n".join(rows) + "\n")
    _dump_json({"records": summaries}, out / "summary.json")


def cmd_linear_lab(cfg: dict) -> None:
    study = cfg["study"]
    if study not in ("bias-variance", "baselines", "variance", "all"):
        raise UsageError(f"unknown study {study!r}")
    outputs = []
    if study in ("bias-variance", "all"):
        outputs.append("bias_variance.csv")
    if study in ("baselines", "all"):
        outputs += ["baseline_augmented.csv", "baseline_averaging.csv"]
    if study in ("variance", "all"):
        outputs.append("variance_checks.json")
    out = _prepare_out(cfg, outputs)
    seed = cfg["seed"]
    thetas = cf.sample_theta_true(cfg["n_theta"], seed=seed)
    sigmas = _floats(cfg["sigmas"])
    alphas = _floats(cfg["alphas"])
    write_config(cfg, "linear-lab", out)
    common = dict(theta_true_list=thetas, sigma_list=sigmas, n_mc=cfg["n_mc"], seed=seed, n_boot=cfg["n_boot"])
    if study in ("bias-variance", "all"):
        rep = cf.bias_variance_study(alpha_list=alphas, s0=(cfg["s0"],), **common)
        (out / "bias_variance.csv").write_text(rep.to_csv())
    if study in ("baselines", "all"):
        states = tuple([1.0] * cfg["baseline_states"])
        aug = cf.augmented_baseline_study(alpha_list=(0.5, 1.0), s0=states, **common)
        avg = cf.averaging_baseline_study(alpha_list=(0.5, 1.0), s0=states, **common)
        (out / "baseline_augmented.csv").write_text(aug.to_csv())
        (out / "baseline_averaging.csv").write_text(avg.to_csv())
    if study in ("variance", "all"):
        n = cfg["n_mc_variance"]
        checks = {"alpha1": [], "averaging": [], "taylor": []}
        for sigma in (0.05, 0.1, 0.5, 1.0):
            v = cf.single_sample_variance(1.0, 0.78, 1.0, sigma, n, seed)
            checks["alpha1"].append({"sigma": sigma, "predicted": sigma ** 2, **v})
            v = cf.single_sample_variance("averaging", 0.78, 1.0, sigma, n, seed)
            checks["averaging"].append({"sigma": sigma, "predicted": sigma ** 2 / 2, **v})
            checks["taylor"].append({"sigma": sigma, **cf.taylor_variance_check(0.78, 1.0, sigma, n, seed)})
        _dump_json(checks, out / "variance_checks.json")
    print(f"wrote {', '.join(outputs)} to {out}")


def cmd_sigmoid_lab(cfg: dict) -> None:
    outputs = ["sigmoid_runs.csv", "sigmoid_summary.csv", "sigmoid_convergence.csv"]
    if cfg["landscape"]:
        outputs += ["landscape_surface.csv", "landscape_minima.csv"]
    out = _prepare_out(cfg, outputs)
    lab = SigmoidLabConfig(alphas=tuple(_floats(cfg["alphas"])), epochs=cfg["epochs"], n_starts=cfg["n_starts"],
                           n_mc=cfg["n_mc"], noise_levels=tuple(_floats(cfg["noise_levels"])),
                           n_train=cfg["n_train"], batch_size=cfg["batch_size"], seed=cfg["seed"])
    write_config(cfg, "sigmoid-lab", out)
    res = run_sigmoid_lab(lab, progress=lambda o, a, dt: log.info("%s alpha=%g done in %.1fs", o, a, dt))
    (out / "sigmoid_runs.csv").write_text(res.runs_csv())
    (out / "sigmoid_summary.csv").write_text(res.summary_csv())
    (out / "sigmoid_convergence.csv").write_text(res.curves_csv())
    if cfg["landscape"]:
        system = SigmoidSystem(lab.theta1_true, lab.theta2_true, init_range=lab.init_range)
        width = 2.0 * lab.init_range
        surf, mins = ["alpha,noise,theta1,theta2,mean_loss"], ["alpha,noise,draw,theta1,theta2"]
        n = cfg["landscape_steps"]
        for a in lab.alphas:
            for noise in lab.noise_levels:
                res_l = loss_landscape_scan(system, a, noise * width, steps=(n, n), seed=cfg["seed"],
                                            noisy_inputs=True)
                pre = f"{a!r},{noise!r},"
                surf += [pre + ln for ln in res_l.surface_csv().splitlines()[1:]]
                mins += [pre + ln for ln in res_l.minima_csv().splitlines()[1:]]
        (out / "landscape_surface.csv").write_text("\n".join(surf) + "\n")
        (out / "landscape_minima.csv").write_text("\n".join(mins) + "\n")
    best = {k: res.argmin_alpha(k) for k in ("one_step", "two_step", "average")}
    print("alpha minimizing validation loss: " + ", ".join(f"{k}={v:g}" for k, v in best.items()))


HANDLERS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "gridsearch": cmd_gridsearch,
            "linear-lab": cmd_linear_lab, "sigmoid-lab": cmd_sigmoid_lab}


# --- argument parsing ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msdyn", description="Multi-step dynamics-model training and evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for command in COMMANDS:
        p = sub.add_parser(command, help=f"{command} command")
        p.add_argument("--config", help="INI config file ([run] and [%s] sections)" % command)
        p.add_argument("--seed", type=int, help="global seed (default: config, MSDYN_SEED, then 42)")
        for name, typ, default, help_ in _options(command):
            flag = "--" + name.replace("_", "-")
            kind = str if typ in (_floats, _ints) else typ
            if typ is _bool:
                p.add_argument(flag, type=_bool, nargs="?", const=True, default=None,
                               help=f"{help_} (default {default})")
            else:
                p.add_argument(flag, dest=name, type=kind, default=None, help=f"{help_} (default {default})")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.command:
        parser.print_help()
        return 1
    try:
        cfg = resolve(args.command, vars(args))
        np.seterr(over="ignore", under="ignore")
        HANDLERS[args.command](cfg)
    except UsageError as e:
        print(f"msdyn {args.command}: error: {e}", file=sys.stderr)
        return 1
    except RuntimeFailure as e:
        print(f"msdyn {args.command}: failed: {e}", file=sys.stderr)
        return 2
    except (OSError, FloatingPointError) as e:
        print(f"msdyn {args.command}: failed: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
