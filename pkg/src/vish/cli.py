"""Command-line front end: ``vish train|predict|eval|spectrum``.

Exit codes: 0 success, 2 usage or input error, 1 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import sys
from pathlib import Path

import numpy as np
import yaml

from .datasets import read_csv, write_csv
from .errors import InvalidArgumentError, NumericalError, TargetTypeError, VishError
from .harmonics import num_harmonics
from .io import ModelFile, Normalization, load_model, save_model
from .kernels import KernelSpec, build_spectrum
from .sphere_map import ambient_dim_for
from .svgp import BERNOULLI, GAUSSIAN, Likelihood, build_model, predict_f, predict_y
from .train import TrainConfig, auc, fit, mse, nlpd_bernoulli, nlpd_gaussian

SECTIONS = ("kernel", "model", "likelihood", "train", "data")


# ---------------------------------------------------------------------------
# Config handling


def load_config(path) -> dict:
    path = Path(path)
    try:
        cfg = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise InvalidArgumentError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise InvalidArgumentError("config must be a mapping")
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise InvalidArgumentError(f"unknown config sections {sorted(unknown)}")
    cfg = copy.deepcopy(cfg)
    for section in SECTIONS:
        cfg.setdefault(section, {})
    data = cfg["data"]
    for key in ("train_csv", "test_csv"):
        if data.get(key):
            data[key] = str((path.parent / data[key]).resolve())
    return cfg


def level_for_count(d: int, m: int) -> int:
    """Max level ``L`` whose cumulative harmonic count equals ``m`` exactly."""
    total, level = 0, 0
    while total < m:
        total += num_harmonics(d, level)
        level += 1
    if total != m:
        raise InvalidArgumentError(f"M={m} is not a whole number of levels in dimension {d}")
    return level - 1


def _kernel_from(cfg, d):
    k = dict(cfg["kernel"])
    k.setdefault("family", "matern")
    if k["family"] == "matern":
        k.setdefault("nu", 1.5)
    return KernelSpec.from_dict({**k, "ambient_dim": d})


def _max_level(cfg, d):
    m = cfg["model"]
    if m.get("num_features") is not None:
        level = level_for_count(d, int(m["num_features"]))
        if m.get("max_level") is not None and int(m["max_level"]) != level:
            raise InvalidArgumentError("max_level and num_features disagree")
        return level
    return int(m.get("max_level", 4))


def _likelihood_from(cfg):
    return Likelihood.from_dict(cfg["likelihood"] or {"type": GAUSSIAN})


def _standardise(X):
    mean = X.mean(axis=0) if len(X) else np.zeros(X.shape[1])
    std = X.std(axis=0) if len(X) else np.ones(X.shape[1])
    std = np.where(std > 0, std, 1.0)
    return mean, std


def _split(table, target):
    if target not in table.header:
        raise InvalidArgumentError(f"target column {target!r} not in CSV header {table.header}")
    names = [h for h in table.header if h != target]
    return names, table.features(names), table.column(target)


# ---------------------------------------------------------------------------
# Commands


def cmd_train(config_path, model_out, trace_out=None, seed=None, out=print):
    cfg = load_config(config_path)
    if seed is not None:
        cfg["model"]["seed"] = seed
        cfg["train"]["seed"] = seed
    data = cfg["data"]
    if not data.get("train_csv"):
        raise InvalidArgumentError("data.train_csv is required")
    target = data.get("target_column", "y")
    names, X, y = _split(read_csv(data["train_csv"]), target)
    d = ambient_dim_for(len(names))
    likelihood = _likelihood_from(cfg)
    if likelihood.kind == BERNOULLI and not np.all((y == 0) | (y == 1)):
        raise TargetTypeError("bernoulli likelihood requires 0/1 targets")
    norm = Normalization()
    if data.get("normalize_inputs"):
        mean, std = _standardise(X)
        norm.input_mean, norm.input_std = mean.tolist(), std.tolist()
    if data.get("normalize_targets") and likelihood.kind == GAUSSIAN:
        norm.target_mean = float(y.mean())
        norm.target_std = float(y.std()) or 1.0
    Xn = norm.apply_inputs(X)
    yn = (y - norm.target_mean) / norm.target_std
    kernel = _kernel_from(cfg, d)
    m = cfg["model"]
    model = build_model(
        len(names),
        kernel,
        _max_level(cfg, d),
        likelihood,
        radial_mode=m.get("radial_mode"),
        normalize=bool(m.get("normalize_spectrum", True)),
        prior_degree=m.get("prior_level"),
        seed=int(m.get("seed", 0)),
        bias=float(m.get("bias", 1.0)),
    )
    train_cfg = TrainConfig.from_dict(cfg["train"])
    model, trace = fit(model, Xn, yn, train_cfg)
    mf = ModelFile(model, norm, names, target, cfg)
    save_model(model_out, mf)
    trace_out = trace_out or str(Path(model_out).with_suffix("")) + ".trace.csv"
    trace.write_csv(trace_out)
    out(f"features: {model.num_features}")
    out(f"final_elbo: {trace.elbo[-1]!r}")
    for key, value in _metrics(mf, X, y).items():
        out(f"train_{key}: {value!r}")
    return mf


def _predict(mf: ModelFile, X):
    Xn = mf.normalization.apply_inputs(X)
    norm = mf.normalization
    if mf.model.likelihood.kind == BERNOULLI:
        return {"probability": predict_y(mf.model, Xn)}
    mean, var = predict_f(mf.model, Xn)
    return {"mean": mean * norm.target_std + norm.target_mean, "variance": var * norm.target_std**2}


def _metrics(mf: ModelFile, X, y):
    pred = _predict(mf, X)
    if mf.model.likelihood.kind == BERNOULLI:
        if not np.all((y == 0) | (y == 1)):
            raise TargetTypeError("classification model evaluated on non-binary targets")
        result = {"nlpd": nlpd_bernoulli(pred["probability"], y)}
        if 0 < y.sum() < len(y):
            result["auc"] = auc(pred["probability"], y)
        return result
    noise = mf.model.likelihood.noise * mf.normalization.target_std**2
    return {"mse": mse(pred["mean"], y), "nlpd": nlpd_gaussian(pred["mean"], pred["variance"], noise, y)}


def _inputs_for(mf: ModelFile, table):
    missing = [n for n in mf.feature_names if n not in table.header]
    if missing:
        raise InvalidArgumentError(f"input CSV lacks feature columns {missing}")
    extra = [h for h in table.header if h not in mf.feature_names and h != mf.target_column]
    if extra:
        raise InvalidArgumentError(f"input CSV has unexpected columns {extra}")
    return table.features(mf.feature_names)


def cmd_predict(model_path, csv_in, csv_out):
    mf = load_model(model_path)
    X = _inputs_for(mf, read_csv(csv_in))
    pred = _predict(mf, X)
    write_csv(csv_out, list(pred), list(pred.values()))
    return pred


def cmd_eval(model_path, csv_in, out=print):
    mf = load_model(model_path)
    table = read_csv(csv_in)
    X = _inputs_for(mf, table)
    if mf.target_column not in table.header:
        raise InvalidArgumentError(f"evaluation CSV lacks target column {mf.target_column!r}")
    y = table.column(mf.target_column)
    if len(y) == 0:
        raise InvalidArgumentError("evaluation CSV has no rows")
    metrics = _metrics(mf, X, y)
    for key, value in metrics.items():
        out(f"{key}: {value!r}")
    return metrics


def spectrum_table(cfg: dict):
    """Rows ``(level, k, a_hat, count, cumulative_M)`` for every harmonic up to the cap."""
    m = cfg["model"]
    if m.get("ambient_dim") is not None:
        d = int(m["ambient_dim"])
    elif m.get("input_dim") is not None:
        d = ambient_dim_for(int(m["input_dim"]))
    elif cfg["data"].get("train_csv"):
        table = read_csv(cfg["data"]["train_csv"])
        d = ambient_dim_for(len(table.header) - 1)
    else:
        raise InvalidArgumentError("spectrum needs model.ambient_dim, model.input_dim or data.train_csv")
    kernel = _kernel_from(cfg, d)
    max_level = _max_level(cfg, d)
    spectrum = build_spectrum(kernel, d, max_level, bool(m.get("normalize_spectrum", True)))
    rows, cumulative = [], 0
    for level in range(max_level + 1):
        count = num_harmonics(d, level)
        for k in range(1, count + 1):
            cumulative += 1
            rows.append((level, k, float(spectrum.coeffs[level]), count, cumulative))
    return rows


def cmd_spectrum(config_path, csv_out, seed=None):
    cfg = load_config(config_path)
    rows = spectrum_table(cfg)
    cols = list(zip(*rows)) if rows else [[]] * 5
    write_csv(csv_out, ["level", "k", "a_hat", "count", "cumulative_m"], cols)
    return rows


# ---------------------------------------------------------------------------
# Entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="vish", description="Spherical-harmonic variational GPs")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="fit a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--trace", help="trace CSV (default: <out>.trace.csv)")
    p.add_argument("--seed", type=int)
    p = sub.add_parser("predict", help="predict on a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="csv_in", required=True)
    p.add_argument("--out", required=True)
    p = sub.add_parser("eval", help="print metrics on a labelled CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="csv_in", required=True)
    p = sub.add_parser("spectrum", help="export the per-feature variance table")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cmd_train(args.config, args.out, args.trace, args.seed)
        elif args.command == "predict":
            cmd_predict(args.model, args.csv_in, args.out)
        elif args.command == "eval":
            cmd_eval(args.model, args.csv_in)
        else:
            cmd_spectrum(args.config, args.out, args.seed)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 1
    except (VishError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
