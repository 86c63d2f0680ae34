"""Command-line interface: generate, train, predict, evaluate, experiment.

Settings come from built-in defaults, then an optional flat ``key = value``
config file, then command-line flags.  Exit codes: 0 success, 2 input
error, 3 numerical error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from djgp import __version__
from djgp.datagen import ExpansionSpec, apply_expansion, gen_l2, gen_lh, make_expansion
from djgp.dataset import Dataset, Standardizer, read_csv, write_csv
from djgp.elbo import (
    LocalInducing, RegionParams, RegionState, TrainConfig, VariationalState, init_state, train,
)
from djgp.errors import DjgpError, InputError, StorageError
from djgp.jump import LocalRegion, select_neighborhood
from djgp.metrics import roughness, score
from djgp.predict import djgp_predict_all
from djgp.projection import GlobalInducing, ThetaW

log = logging.getLogger("djgp")

MODEL_SCHEMA = "djgp-model"
MODEL_VERSION = 1

# name -> (type, default); n = 0 means "25 below 30 input columns, else 35"
SETTINGS = {
    "Q": (int, 5),
    "n": (int, 0),
    "L1": (int, 4),
    "L2": (int, 40),
    "Mc": (int, 5),
    "n_q": (int, 50),
    "steps": (int, 300),
    "rate": (float, 0.01),
    "seed": (int, None),
    "workers": (int, 0),
}


# --- settings -----------------------------------------------------------------------

def read_config(path) -> dict:
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def resolve_settings(args) -> dict:
    """Defaults < config file < flags; DJGP_SEED fills an unset seed."""
    raw = {k: d for k, (_, d) in SETTINGS.items()}
    file_vals = read_config(args.config) if getattr(args, "config", None) else {}
    for key, value in file_vals.items():
        if key not in SETTINGS:
            raise InputError(f"unknown config key {key!r}")
        raw[key] = value
    for key in SETTINGS:
        flag = getattr(args, key, None)
        if flag is not None:
            raw[key] = flag
    if raw["seed"] is None and os.environ.get("DJGP_SEED"):
        raw["seed"] = os.environ["DJGP_SEED"]
    out = {}
    for key, (typ, _) in SETTINGS.items():
        value = raw[key]
        if value is None:
            out[key] = 0 if key == "seed" else None
            continue
        try:
            out[key] = typ(value)
        except (TypeError, ValueError):
            raise InputError(f"setting {key}={value!r} is not a valid {typ.__name__}") from None
    for key in ("Q", "L1", "L2", "Mc", "n_q"):
        if out[key] < 1:
            raise InputError(f"{key} must be at least 1")
    if out["n"] != 0 and out["n"] < 2:
        raise InputError("n must be at least 2")
    if out["steps"] < 0 or out["rate"] < 0:
        raise InputError("steps and rate must be nonnegative")
    if out["workers"] <= 0:
        out["workers"] = os.cpu_count() or 1
    return out


def default_neighbors(D: int) -> int:
    return 25 if D < 30 else 35


# --- files ----------------------------------------------------------------------

def write_json(path, obj) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None


def write_predictions(path, preds) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("index,mean,variance\n")
            for i, p in enumerate(preds):
                fh.write(f"{i},{float(p.mean)!r},{float(p.variance)!r}\n")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read_predictions(path):
    import csv

    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    with fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["index", "mean", "variance"]:
        raise InputError(f"{path}:1: expected header index,mean,variance")
    idx, mean, var = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise InputError(f"{path}:{lineno}: expected 3 fields")
        try:
            idx.append(int(row[0]))
            mean.append(float(row[1]))
            var.append(float(row[2]))
        except ValueError:
            raise InputError(f"{path}:{lineno}: non-numeric field") from None
    if idx != list(range(len(idx))):
        raise InputError(f"{path}: indices must run 0..{len(idx) - 1} in order")
    return np.array(mean), np.array(var)


def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def state_to_json(state: VariationalState, std: Standardizer, settings: dict, trace) -> dict:
    g, tw = state.global_inducing, state.theta_w
    return {
        "schema": MODEL_SCHEMA,
        "version": MODEL_VERSION,
        "settings": settings,
        "standardizer": {"mean": _arr(std.mean), "scale": _arr(std.scale)},
        "theta_w": {"signal_std": float(tw.signal_std), "row_lengthscales": _arr(tw.row_lengthscales)},
        "global_inducing": {
            "inputs": _arr(g.inputs), "post_mean": _arr(g.post_mean), "post_var": _arr(g.post_var),
        },
        "train_config": {
            "steps": state.config.steps, "rate": state.config.rate, "n_q": state.config.n_q,
            "rel_tol": state.config.rel_tol, "patience": state.config.patience,
            "train_outlier_level": state.config.train_outlier_level,
        },
        "regions": [
            {
                "x_star": _arr(r.region.x_star),
                "indices": [int(i) for i in r.region.indices],
                "inputs": _arr(r.region.inputs),
                "targets": _arr(r.region.targets),
                "local_inducing": {
                    "inputs": _arr(r.inducing.inputs),
                    "post_mean": _arr(r.inducing.post_mean),
                    "post_root": _arr(r.inducing.post_root),
                },
                "params": {
                    "boundary": _arr(r.params.boundary),
                    "noise_variance": float(r.params.noise_variance),
                    "mean": float(r.params.mean),
                    "amplitude": float(r.params.amplitude),
                    "outlier_level": float(r.params.outlier_level),
                    "rho": _arr(r.params.rho),
                },
            }
            for r in state.regions
        ],
        "trace": [[int(s), float(v)] for s, v in trace],
    }


def state_from_json(doc: dict):
    if doc.get("schema") != MODEL_SCHEMA or doc.get("version") != MODEL_VERSION:
        raise InputError("not a version-1 model file")
    try:
        std = Standardizer(np.array(doc["standardizer"]["mean"]), np.array(doc["standardizer"]["scale"]))
        tw = ThetaW(doc["theta_w"]["signal_std"], doc["theta_w"]["row_lengthscales"])
        gd = doc["global_inducing"]
        g = GlobalInducing(gd["inputs"], gd["post_mean"], gd["post_var"])
        regions = []
        for r in doc["regions"]:
            reg = LocalRegion(r["x_star"], r["inputs"], r["targets"], np.array(r["indices"], dtype=int))
            li = LocalInducing(**r["local_inducing"])
            params = RegionParams(**r["params"])
            regions.append(RegionState(reg, li, params))
        state = VariationalState(g, tw, regions, TrainConfig(**doc["train_config"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed model file: {exc}") from None
    return state, std, doc.get("settings", {})


# --- pipeline pieces --------------------------------------------------------------------

def generate(kind: str, seed: int, n_train: int, n_test: int, K: int,
             expansion: str | None, dim: int | None):
    rng = np.random.default_rng(seed)
    if kind == "L2":
        tr, te = gen_l2(n_train, n_test, rng)
    elif kind == "LH":
        tr, te = gen_lh(K, n_train, n_test, rng)
    else:
        raise InputError(f"unknown generator {kind!r}")
    meta = dict(tr.meta)
    meta.update({"seed": seed, "n_train": n_train, "n_test": n_test})
    Xtr, Xte = tr.Z, te.Z
    if expansion and expansion != "none":
        if dim is None:
            raise InputError("an expansion needs --dim")
        spec = ExpansionSpec(expansion, dim, seed)
        params = make_expansion(spec, Xtr.shape[1], np.random.default_rng([seed, 1]))
        Xtr, Xte = apply_expansion(Xtr, params), apply_expansion(Xte, params)
        meta["expansion"] = {"kind": expansion, "D": dim}
    meta["D"] = int(Xtr.shape[1])
    return Dataset(Xtr, tr.y), Dataset(Xte, te.y), meta


def build_and_train(train_ds: Dataset, test_X: np.ndarray, s: dict, progress=None):
    if test_X.shape[1] != train_ds.dim:
        raise InputError(
            f"test inputs have {test_X.shape[1]} columns but training inputs have {train_ds.dim}"
        )
    n = s["n"] or default_neighbors(train_ds.dim)
    if n > len(train_ds):
        raise InputError(f"n = {n} exceeds the {len(train_ds)} training rows")
    std = Standardizer.fit(train_ds.X)
    data = Dataset(std(train_ds.X), train_ds.y)
    regions = [select_neighborhood(data, x, n) for x in std(test_X)]
    cfg = TrainConfig(steps=s["steps"], rate=s["rate"], n_q=s["n_q"])
    state = init_state(
        regions, s["Q"], s["L1"], s["L2"], np.random.default_rng([s["seed"], 2]), cfg,
        pool_inputs=data.X,
    )
    torch.set_num_threads(max(1, s["workers"]))
    result = train(state, progress=progress)
    settings = dict(s, n=n)
    settings.pop("workers", None)
    return result, std, settings


def _progress(step, value, rate):
    log.info("step %d elbo %.10g rate %.4g", step, value, rate)


def check_test_rows(state, std, test_X):
    X = std(test_X)
    if X.shape[0] != len(state.regions):
        raise InputError(f"model has {len(state.regions)} regions but the test file has {X.shape[0]} rows")
    if X.shape[1] != state.D:
        raise InputError(f"model expects {state.D} input columns, test file has {X.shape[1]}")
    ref = np.stack([r.region.x_star for r in state.regions])
    if not np.allclose(X, ref, rtol=1e-10, atol=1e-10):
        raise InputError("test inputs differ from the locations the model was trained for")


# --- commands -----------------------------------------------------------------------

def cmd_generate(args) -> int:
    seed = _seed(args)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {out}: {exc}") from exc
    tr, te, meta = generate(args.kind, seed, args.n_train, args.n_test, args.K, args.expansion, args.dim)
    write_csv(out / "train.csv", tr)
    write_csv(out / "test.csv", te)
    meta["model_defaults"] = {k: d for k, (_, d) in SETTINGS.items() if k not in ("seed", "workers")}
    write_json(out / "meta.json", meta)
    return 0


def cmd_train(args) -> int:
    s = resolve_settings(args)
    tr = read_csv(args.train)
    te = read_csv(args.test, require_y=False)
    result, std, settings = build_and_train(tr, te.X, s, _progress)
    write_json(args.out, state_to_json(result.state, std, settings, result.trace))
    if args.trace:
        write_json(args.trace, {"trace": [[int(a), float(b)] for a, b in result.trace]})
    return 0


def cmd_predict(args) -> int:
    state, std, settings = state_from_json(read_json(args.model))
    s = resolve_settings(args)
    te = read_csv(args.test, require_y=False)
    check_test_rows(state, std, te.X)
    preds = djgp_predict_all(state, s["Mc"], s["seed"], s["workers"])
    write_predictions(args.out, preds)
    return 0


def evaluate(mean, var, truth: Dataset, train_ds: Dataset | None = None) -> dict:
    if mean.shape[0] != len(truth):
        raise InputError(f"{mean.shape[0]} predictions but {len(truth)} truth rows")
    if np.any(np.isnan(truth.y)):
        raise InputError("truth file lacks targets")
    var = np.maximum(var, np.finfo(float).tiny)
    out = {"score": score(mean, var, truth.y).to_dict()}
    if train_ds is not None:
        out["roughness"] = roughness(train_ds).to_dict()
    return out


def cmd_evaluate(args) -> int:
    mean, var = read_predictions(args.predictions)
    truth = read_csv(args.truth)
    train_ds = read_csv(args.train) if args.train else None
    write_json(args.out, evaluate(mean, var, truth, train_ds))
    return 0


def cmd_experiment(args) -> int:
    s = resolve_settings(args)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {out}: {exc}") from exc
    t0 = time.perf_counter()
    if args.train:
        if not args.test:
            raise InputError("--train needs --test")
        tr, te = read_csv(args.train), read_csv(args.test)
        meta = {"train": str(args.train), "test": str(args.test)}
    else:
        tr, te, meta = generate(args.kind, s["seed"], args.n_train, args.n_test, args.K,
                                args.expansion, args.dim)
        write_csv(out / "train.csv", tr)
        write_csv(out / "test.csv", te)
    t1 = time.perf_counter()
    result, std, settings = build_and_train(tr, te.X, s, _progress)
    write_json(out / "model.json", state_to_json(result.state, std, settings, result.trace))
    t2 = time.perf_counter()
    preds = djgp_predict_all(result.state, s["Mc"], s["seed"], s["workers"])
    write_predictions(out / "predictions.csv", preds)
    t3 = time.perf_counter()
    scores = evaluate(np.array([p.mean for p in preds]), np.array([p.variance for p in preds]), te)
    results = {
        "config": settings,
        "data": meta,
        "trace": [[int(a), float(b)] for a, b in result.trace],
        "initial_elbo": result.initial_elbo,
        "best_elbo": result.best_elbo,
        "steps_taken": result.steps_taken,
        **scores,
        "version": __version__,
    }
    write_json(out / "results.json", results)
    # wall-clock numbers live apart so that results.json is reproducible
    write_json(out / "timing.json", {
        "data_s": t1 - t0, "train_s": t2 - t1, "predict_s": t3 - t2, "total_s": t3 - t0,
    })
    return 0


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("DJGP_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise InputError(f"DJGP_SEED={env!r} is not an integer") from None
    return 0


# --- parser ----------------------------------------------------------------------

def _model_flags(p, predict_only=False):
    p.add_argument("--config", help="flat key = value settings file")
    p.add_argument("--seed", type=int, help="random seed (falls back to DJGP_SEED, then 0)")
    p.add_argument("--workers", type=int, help="parallel workers (default: all CPUs)")
    p.add_argument("--Mc", type=int, help="Monte-Carlo projection samples per test point (5)")
    if predict_only:
        return
    p.add_argument("--Q", type=int, help="latent dimension (5)")
    p.add_argument("--n", type=int, help="neighborhood size (25 below 30 columns, else 35)")
    p.add_argument("--L1", type=int, help="local inducing points (4)")
    p.add_argument("--L2", type=int, help="global inducing points (40)")
    p.add_argument("--n-q", dest="n_q", type=int, help="Gauss-Hermite nodes (50)")
    p.add_argument("--steps", type=int, help="gradient steps (300)")
    p.add_argument("--rate", type=float, help="learning rate (0.01)")


def _generator_flags(p):
    p.add_argument("--kind", choices=["L2", "LH"], default="L2")
    p.add_argument("--K", type=int, default=4, help="LH latent dimension")
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--expansion", choices=["none", "RP", "RF", "PE"], default="none")
    p.add_argument("--dim", type=int, help="expanded dimension D")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="djgp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every training step")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic train/test pair")
    _generator_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit the variational model")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True, help="test inputs (the transductive locations)")
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--trace", help="optional (step, elbo) trace file")
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="Monte-Carlo predictions from a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="predictions CSV")
    _model_flags(p, predict_only=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against targets")
    p.add_argument("--predictions", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--train", help="training file for roughness statistics")
    p.add_argument("--out", required=True, help="results JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="generate or read data, train, predict and score")
    _generator_flags(p)
    p.add_argument("--train", help="training CSV instead of a generator")
    p.add_argument("--test", help="test CSV with targets")
    p.add_argument("--out", required=True, help="output directory")
    _model_flags(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s", stream=sys.stderr,
    )
    try:
        return args.func(args)
    except DjgpError as exc:
        print(f"djgp: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"djgp: error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
