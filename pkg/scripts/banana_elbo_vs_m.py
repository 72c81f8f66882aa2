"""ELBO of a probit classifier on the banana data as the number of harmonic levels grows.

Usage: python scripts/banana_elbo_vs_m.py [--levels 2 4 8 14] [--out elbo_vs_m.csv]
"""

import argparse
import time

import numpy as np

from vish.datasets import bundled_banana, write_csv
from vish.kernels import KernelSpec
from vish.svgp import Likelihood, build_model, predict_y
from vish.train import TrainConfig, auc, fit, nlpd_bernoulli

FROZEN = {k: False for k in ("variance", "lengthscale", "weights", "bias", "noise")}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--levels", type=int, nargs="+", default=[2, 4, 8, 14])
    parser.add_argument("--lengthscale", type=float, default=0.1)
    parser.add_argument("--max-iters", type=int, default=3000)
    parser.add_argument("--out", default="elbo_vs_m.csv")
    args = parser.parse_args()

    X, y = bundled_banana()
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    kernel = KernelSpec("matern", lengthscale=args.lengthscale, nu=1.5)
    cfg = TrainConfig(optimizer="lbfgs", max_iters=args.max_iters, tolerance=1e-12, trainable=FROZEN, eval_every=10**6)
    prior_degree = max(args.levels)
    rows = []
    for level in args.levels:
        model = build_model(2, kernel, level, Likelihood("bernoulli", link="probit"), prior_degree=prior_degree)
        start = time.perf_counter()
        model, trace = fit(model, X, y, cfg)
        p = predict_y(model, X)
        rows.append((level, model.num_features, trace.elbo[-1], nlpd_bernoulli(p, y), auc(p, y), time.perf_counter() - start))
        print("L={:3d} M={:4d} elbo={:.4f} nlpd={:.4f} auc={:.4f} ({:.1f}s)".format(*rows[-1]))
    write_csv(args.out, ["level", "m", "elbo", "train_nlpd", "train_auc", "seconds"], list(zip(*rows)))


if __name__ == "__main__":
    main()
