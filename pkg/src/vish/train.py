"""Training loop, evaluation metrics, gradient checks and the dense GPR oracle."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.linalg
import scipy.optimize
import torch
from scipy.special import xlogy
from scipy.stats import rankdata

from .errors import ConditioningError, DiagnosticsError, InvalidArgumentError, NumericalError
from .kernels import ZonalSpectrum, kernel_eval_truncated
from .sphere_map import SphereMapping, feature_scale, project_batch
from .svgp import GAUSSIAN, PARAM_NAMES, VishModel, VishModule, _as_tensor, _check_inputs, _check_targets

ADAM = "adam"
LBFGS = "lbfgs"
FULL_BATCH_LIMIT = 10_000
DEFAULT_BATCH = 1024
EVAL_CHUNK = 4096


@dataclass(frozen=True)
class WarmStart:
    """Optional first phase on a random subset before the full run."""

    subset_size: int
    iters: int


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = ADAM
    step: float = 1e-2
    iters: int = 2000
    batch_size: int | None = None
    seed: int = 0
    max_iters: int = 100
    tolerance: float = 1e-9
    collapsed: bool = False
    trainable: dict = field(default_factory=dict)
    eval_every: int = 1
    warm_start: WarmStart | None = None

    def __post_init__(self):
        if self.optimizer not in (ADAM, LBFGS):
            raise InvalidArgumentError(f"optimizer must be adam or lbfgs, got {self.optimizer!r}")
        if not self.step > 0:
            raise InvalidArgumentError("step must be positive")
        if self.iters < 0 or self.max_iters < 0:
            raise InvalidArgumentError("iteration counts must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise InvalidArgumentError("eval_every must be >= 1")
        unknown = set(self.trainable) - set(PARAM_NAMES)
        if unknown:
            raise InvalidArgumentError(f"unknown trainable flags {sorted(unknown)}; choose from {PARAM_NAMES}")

    def trainable_names(self):
        return [n for n in PARAM_NAMES if self.trainable.get(n, True)]

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["trainable"] = dict(self.trainable)
        out["warm_start"] = None if self.warm_start is None else vars(self.warm_start).copy()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidArgumentError(f"unknown train options {sorted(unknown)}")
        if data.get("warm_start") is not None:
            data["warm_start"] = WarmStart(**data["warm_start"])
        return cls(**data)


@dataclass
class FitTrace:
    steps: list = field(default_factory=list)
    elbo: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    metrics: list = field(default_factory=list)

    def record(self, step, value, seconds, metrics=None):
        if self.steps and step <= self.steps[-1]:
            raise InvalidArgumentError("trace steps must be strictly increasing")
        self.steps.append(int(step))
        self.elbo.append(float(value))
        self.seconds.append(float(seconds))
        self.metrics.append(dict(metrics or {}))

    def __len__(self):
        return len(self.steps)

    def write_csv(self, path):
        names = sorted({k for m in self.metrics for k in m})
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "elbo", "seconds", *names])
            for s, e, t, m in zip(self.steps, self.elbo, self.seconds, self.metrics):
                writer.writerow([s, repr(e), repr(t), *(repr(m.get(k, float("nan"))) for k in names)])


# ---------------------------------------------------------------------------
# Optimisation


def _objective(module, X, y, total_n, collapsed):
    if collapsed:
        return module.collapsed(X, y)[0]
    return module.elbo(X, y, total_n)


def _full_objective(module, X, y, collapsed):
    with torch.no_grad():
        if collapsed or X.shape[0] <= EVAL_CHUNK:
            return float(_objective(module, X, y, X.shape[0], collapsed))
        total = -module.kl()
        for start in range(0, X.shape[0], EVAL_CHUNK):
            xb, yb = X[start : start + EVAL_CHUNK], y[start : start + EVAL_CHUNK]
            mean, var = module.predict_f(xb)
            total = total + torch.sum(module.expected_loglik(mean, var, yb))
        return float(total)


def _finalise(module, X, y, collapsed):
    model = module.snapshot()
    if collapsed:
        from .svgp import collapsed_gaussian_fit

        state, _ = collapsed_gaussian_fit(model, X.numpy(), y.numpy())
        model = model.replace(variational=state)
    return model


def _run_phase(module, X, y, config, trace, step0, clock, evaluate, collapsed):
    n = X.shape[0]
    params = module.trainable_parameters()
    step = step0
    last_good = module.snapshot()

    def check(value):
        if not math.isfinite(value):
            err = DiagnosticsError(f"non-finite objective at step {step}", module.parameter_snapshot())
            err.trace = trace
            err.model = last_good
            raise err

    if config.optimizer == ADAM:
        iters = config.iters
        if not params or iters == 0:
            return step
        batch = config.batch_size or (n if n <= FULL_BATCH_LIMIT else DEFAULT_BATCH)
        batch = min(batch, n)
        rng = np.random.default_rng(config.seed)
        opt = torch.optim.Adam(params, lr=config.step)
        order, pos = rng.permutation(n), 0
        for _ in range(iters):
            if batch == n:
                xb, yb = X, y
            else:
                if pos + batch > n:
                    order, pos = rng.permutation(n), 0
                idx = torch.as_tensor(order[pos : pos + batch])
                pos += batch
                xb, yb = X[idx], y[idx]
            opt.zero_grad()
            loss = -_objective(module, xb, yb, n, collapsed)
            check(float(loss.detach()))
            loss.backward()
            opt.step()
            step += 1
            if step % config.eval_every == 0:
                value = _full_objective(module, X, y, collapsed)
                check(value)
                last_good = module.snapshot()
                trace.record(step, value, time.perf_counter() - clock, evaluate(module))
        return step

    if not params or config.max_iters == 0:
        return step
    state = {"step": step, "good": module.get_flat().numpy().copy()}

    def fun(v):
        module.set_flat(v)
        try:
            loss = -_objective(module, X, y, n, collapsed)
        except NumericalError:
            # trial point outside the usable region; the line search backs off
            return math.inf, np.zeros_like(v)
        if not torch.isfinite(loss):
            return math.inf, np.zeros_like(v)
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        flat = torch.cat([torch.zeros(p.numel(), dtype=p.dtype) if g is None else g.reshape(-1) for p, g in zip(params, grads)])
        return float(loss.detach()), flat.numpy()

    def callback(intermediate_result):
        state["step"] += 1
        module.set_flat(intermediate_result.x)
        value = -float(intermediate_result.fun)
        if not math.isfinite(value):
            module.set_flat(state["good"])
            err = DiagnosticsError(f"non-finite objective at step {state['step']}", module.parameter_snapshot())
            err.trace, err.model = trace, module.snapshot()
            raise err
        state["good"] = intermediate_result.x.copy()
        if state["step"] % config.eval_every == 0:
            trace.record(state["step"], value, time.perf_counter() - clock, evaluate(module))

    result = scipy.optimize.minimize(
        fun, state["good"], jac=True, method="L-BFGS-B", callback=callback,
        options={"maxiter": config.max_iters, "ftol": config.tolerance, "gtol": 1e-10, "maxcor": 20},
    )
    module.set_flat(result.x if np.isfinite(result.fun) else state["good"])
    step = state["step"]
    if step > step0 and trace.steps[-1] != step:
        value = _full_objective(module, X, y, collapsed)
        check(value)
        trace.record(step, value, time.perf_counter() - clock, evaluate(module))
    return step


def fit(model: VishModel, X, y, config: TrainConfig = TrainConfig(), X_test=None, y_test=None):
    """Maximise the ELBO (or the collapsed bound); returns ``(model, trace)``.

    On a non-finite objective a :class:`DiagnosticsError` is raised carrying
    ``trace`` and ``model`` (the last finite snapshot).
    """
    X = _check_inputs(model, X)
    y = _check_targets(model, y, X.shape[0])
    if X.shape[0] == 0:
        raise InvalidArgumentError("no training data")
    collapsed = config.collapsed
    if collapsed and model.likelihood.kind != GAUSSIAN:
        raise InvalidArgumentError("the collapsed objective needs a Gaussian likelihood")
    trainable = config.trainable_names()
    if collapsed:
        trainable = [n for n in trainable if n not in ("q_mu", "q_sqrt")]
    torch.manual_seed(config.seed)
    module = VishModule(model, trainable)
    Xt, yt = _as_tensor(X), _as_tensor(y)

    def evaluate(mod):
        if X_test is None:
            return {}
        return evaluate_model(mod.snapshot(), X_test, y_test)

    clock = time.perf_counter()
    trace = FitTrace()
    trace.record(0, _full_objective(module, Xt, yt, collapsed), 0.0, evaluate(module))
    if not math.isfinite(trace.elbo[0]):
        raise DiagnosticsError("non-finite objective at the initial state", module.parameter_snapshot())
    step = 0
    if config.warm_start is not None:
        rng = np.random.default_rng(config.seed)
        k = min(config.warm_start.subset_size, X.shape[0])
        idx = torch.as_tensor(np.sort(rng.choice(X.shape[0], k, replace=False)))
        phase = TrainConfig(**{**config.to_dict(), "iters": config.warm_start.iters, "max_iters": config.warm_start.iters,
                               "warm_start": None, "batch_size": None})
        step = _run_phase(module, Xt[idx], yt[idx], phase, FitTrace(), step, clock, lambda m: {}, collapsed)
    _run_phase(module, Xt, yt, config, trace, step, clock, evaluate, collapsed)
    return _finalise(module, Xt, yt, collapsed), trace


# ---------------------------------------------------------------------------
# Metrics


def _pair(a, b):
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.size != b.size:
        raise InvalidArgumentError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise InvalidArgumentError("empty inputs")
    return a, b


def mse(pred_mean, y) -> float:
    m, y = _pair(pred_mean, y)
    return float(np.mean((m - y) ** 2))


def nlpd_gaussian(pred_mean, pred_var, noise, y) -> float:
    """Mean negative log density of ``y`` under ``N(mean, var + noise)``."""
    m, y = _pair(pred_mean, y)
    v, _ = _pair(pred_var, y)
    total = v + noise
    return float(np.mean(0.5 * np.log(2 * np.pi * total) + 0.5 * (y - m) ** 2 / total))


def _check_probs(p, y):
    p, y = _pair(p, y)
    if np.any((p < 0) | (p > 1)):
        raise InvalidArgumentError("probabilities must lie in [0, 1]")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidArgumentError("labels must be 0 or 1")
    return p, y


def nlpd_bernoulli(pred_prob, y) -> float:
    p, y = _check_probs(pred_prob, y)
    return float(-np.mean(xlogy(y, p) + xlogy(1 - y, 1 - p)))


def auc(pred_prob, y) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties averaged)."""
    p, y = _check_probs(pred_prob, y)
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise InvalidArgumentError("AuC needs both classes present")
    ranks = rankdata(p)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate_model(model: VishModel, X, y) -> dict:
    from .svgp import predict_f, predict_y

    if model.likelihood.kind == GAUSSIAN:
        mean, var = predict_f(model, X)
        return {"mse": mse(mean, y), "nlpd": nlpd_gaussian(mean, var, model.likelihood.noise, y)}
    prob = predict_y(model, X)
    return {"nlpd": nlpd_bernoulli(prob, y), "auc": auc(prob, y)}


# ---------------------------------------------------------------------------
# Gradient checking


def gradient_check(fn, grad, x0, step: float = 1e-5) -> float:
    """Max relative error between ``grad(x0)`` and central differences of ``fn``.

    Entries with tiny gradients are compared against a floor of
    ``1e-6 * max(1, max |g|)`` instead of their own magnitude.
    """
    if not 1e-7 <= step <= 1e-3:
        raise InvalidArgumentError(f"step must lie in [1e-7, 1e-3], got {step}")
    x0 = np.array(x0, dtype=float)
    g = np.asarray(grad(x0), dtype=float)
    fd = np.empty_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = step
        fd[i] = (fn(x0 + e) - fn(x0 - e)) / (2 * step)
    if fd.size == 0:
        return 0.0
    floor = 1e-6 * max(1.0, float(np.max(np.abs(fd))))
    return float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), floor)))


def finite_diff_check(model: VishModel, X, y, step: float = 1e-5, trainable=None, total_n=None) -> float:
    """Central-difference check of ELBO gradients over every trainable scalar."""
    X = _check_inputs(model, X)
    y = _check_targets(model, y, X.shape[0])
    module = VishModule(model, trainable)
    Xt, yt = _as_tensor(X), _as_tensor(y)
    total_n = X.shape[0] if total_n is None else total_n

    def fn(v):
        module.set_flat(v)
        with torch.no_grad():
            return float(module.elbo(Xt, yt, total_n))

    def grad(v):
        module.set_flat(v)
        value = module.elbo(Xt, yt, total_n)
        gs = torch.autograd.grad(value, module.trainable_parameters(), allow_unused=True)
        return np.concatenate(
            [np.zeros(p.numel()) if g is None else g.reshape(-1).numpy() for p, g in zip(module.trainable_parameters(), gs)]
        )

    return gradient_check(fn, grad, module.get_flat().numpy(), step)


# ---------------------------------------------------------------------------
# Dense oracle


def exact_gpr_truncated(spectrum: ZonalSpectrum, mapping: SphereMapping, X, y, noise: float):
    """Exact GP regression under the truncated zonal kernel (dense N x N solve)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] > 2000:
        raise InvalidArgumentError("dense oracle limited to N <= 2000")

    def gram(A, B):
        ua, ra = project_batch(mapping, A)
        ub, rb = project_batch(mapping, B)
        sa = np.broadcast_to(feature_scale(mapping, ra), ra.shape)
        sb = np.broadcast_to(feature_scale(mapping, rb), rb.shape)
        return kernel_eval_truncated(spectrum, np.clip(ua @ ub.T, -1.0, 1.0)) * np.outer(sa, sb)

    K = gram(X, X) + noise * np.eye(X.shape[0])
    try:
        factor = scipy.linalg.cho_factor(K, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("dense GPR Gram matrix is not positive definite") from exc
    alpha = scipy.linalg.cho_solve(factor, y)

    def mean_fn(Xs):
        return gram(np.asarray(Xs, dtype=float), X) @ alpha

    def var_fn(Xs):
        Xs = np.asarray(Xs, dtype=float)
        Ks = gram(Xs, X)
        _, rs = project_batch(mapping, Xs)
        prior = np.broadcast_to(feature_scale(mapping, rs), rs.shape) ** 2 * kernel_eval_truncated(spectrum, 1.0)
        return prior - np.sum(Ks * scipy.linalg.cho_solve(factor, Ks.T).T, axis=1)

    return mean_fn, var_fn
