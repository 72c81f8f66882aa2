"""Variational GP with spherical-harmonic inducing features.

The inducing variables are RKHS projections onto the harmonics, so
``Kuu = diag(1 / a_m)`` and ``k_u(x) = phi(x)``: prediction and the ELBO need
matrix products only. The collapsed Gaussian bound is the one place an
M x M factorisation appears.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    ConditioningError,
    DegenerateFeatureError,
    DiagnosticsError,
    InvalidArgumentError,
    NumericalConsistencyError,
)
from .harmonics import HarmonicBasis, build_basis
from .kernels import (
    ARC_COSINE,
    KernelSpec,
    ZonalSpectrum,
    build_spectrum,
    level_multiplicities,
    spectrum_coefficients,
    zonal_kernel_torch,
)
from .sphere_map import CONSTANT, LINEAR, SphereMapping, project_torch

GAUSSIAN = "gaussian"
BERNOULLI = "bernoulli"
PROBIT = "probit"
LOGIT = "logit"
VAR_CLAMP = -1e-8
DEGENERATE_COEFF = 1e-300
PARAM_NAMES = ("variance", "lengthscale", "weights", "bias", "noise", "q_mu", "q_sqrt")


# ---------------------------------------------------------------------------
# Model state


@dataclass(frozen=True, eq=False)
class InducingBasis:
    """Harmonic features (active levels only) plus the prior spectrum.

    ``spectrum`` may extend past the highest feature level; the extra levels
    only contribute to the prior variance.
    """

    harmonic_basis: HarmonicBasis
    spectrum: ZonalSpectrum

    def __post_init__(self):
        for level in self.harmonic_basis.levels:
            if level.degree > self.spectrum.max_degree:
                raise InvalidArgumentError("spectrum must cover every feature level")

    @property
    def degrees(self) -> tuple:
        return tuple(level.degree for level in self.harmonic_basis.levels)

    @property
    def num_features(self) -> int:
        return self.harmonic_basis.total_count

    @property
    def a_hat_per_feature(self) -> np.ndarray:
        return np.repeat(self.spectrum.coeffs[list(self.degrees)], [lv.count for lv in self.harmonic_basis.levels])

    def feature_index(self) -> np.ndarray:
        """Degree of every feature column."""
        return np.repeat(self.degrees, [lv.count for lv in self.harmonic_basis.levels])


def make_inducing_basis(kernel: KernelSpec, max_degree: int, seed: int = 0, normalize: bool = True, prior_degree=None):
    d = kernel.ambient_dim
    prior_degree = max_degree if prior_degree is None else prior_degree
    if prior_degree < max_degree:
        raise InvalidArgumentError("prior_degree must be >= max_degree")
    spectrum = build_spectrum(kernel, d, prior_degree, normalize)
    # structurally zero levels (odd l >= 3 for arc-cosine) carry no signal
    active = [l for l in range(max_degree + 1) if not (kernel.family == ARC_COSINE and l >= 3 and l % 2)]
    basis = InducingBasis(build_basis(d, max_degree, seed, degrees=active), spectrum)
    kuu_diag(basis)
    return basis


@dataclass(frozen=True, eq=False)
class VariationalState:
    mean: np.ndarray
    cov_factor: np.ndarray

    def __post_init__(self):
        m = np.array(self.mean, dtype=float).reshape(-1)
        L = np.array(self.cov_factor, dtype=float)
        if L.shape != (m.size, m.size):
            raise InvalidArgumentError(f"cov_factor must be {m.size}x{m.size}, got {L.shape}")
        if np.any(np.triu(L, 1) != 0) or np.any(np.diag(L) <= 0):
            raise InvalidArgumentError("cov_factor must be lower triangular with positive diagonal")
        m.setflags(write=False)
        L.setflags(write=False)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov_factor", L)

    @property
    def cov(self) -> np.ndarray:
        return self.cov_factor @ self.cov_factor.T

    @classmethod
    def prior(cls, a_hat):
        a_hat = np.asarray(a_hat, dtype=float)
        return cls(np.zeros_like(a_hat), np.diag(a_hat**-0.5))


@dataclass(frozen=True)
class Likelihood:
    kind: str = GAUSSIAN
    noise: float = 1.0
    link: str = PROBIT
    quadrature: int = 20

    def __post_init__(self):
        if self.kind not in (GAUSSIAN, BERNOULLI):
            raise InvalidArgumentError(f"likelihood must be gaussian or bernoulli, got {self.kind!r}")
        if self.kind == GAUSSIAN and not (math.isfinite(self.noise) and self.noise > 0):
            raise InvalidArgumentError(f"noise variance must be positive, got {self.noise}")
        if self.kind == BERNOULLI:
            if self.link not in (PROBIT, LOGIT):
                raise InvalidArgumentError(f"link must be probit or logit, got {self.link!r}")
            if self.quadrature < 10:
                raise InvalidArgumentError(f"quadrature order must be >= 10, got {self.quadrature}")

    def to_dict(self) -> dict:
        if self.kind == GAUSSIAN:
            return {"type": GAUSSIAN, "noise": self.noise}
        return {"type": BERNOULLI, "link": self.link, "quadrature": self.quadrature}

    @classmethod
    def from_dict(cls, data: dict) -> "Likelihood":
        kind = data.get("type", GAUSSIAN)
        if kind == GAUSSIAN:
            return cls(GAUSSIAN, noise=float(data.get("noise", 1.0)))
        return cls(BERNOULLI, link=data.get("link", PROBIT), quadrature=int(data.get("quadrature", 20)))


@dataclass(frozen=True, eq=False)
class VishModel:
    kernel: KernelSpec
    mapping: SphereMapping
    basis: InducingBasis
    variational: VariationalState
    likelihood: Likelihood = field(default_factory=Likelihood)

    def __post_init__(self):
        if self.basis.harmonic_basis.ambient_dim != self.mapping.ambient_dim:
            raise InvalidArgumentError("basis and mapping disagree on the ambient dimension")
        if self.kernel.ambient_dim != self.mapping.ambient_dim:
            raise InvalidArgumentError("kernel and mapping disagree on the ambient dimension")
        if self.basis.spectrum.kernel != self.kernel:
            raise InvalidArgumentError("basis spectrum was built for a different kernel")
        if self.variational.mean.size != self.basis.num_features:
            raise InvalidArgumentError("variational state size does not match the number of features")

    @property
    def num_features(self) -> int:
        return self.basis.num_features

    @property
    def spectrum(self) -> ZonalSpectrum:
        return self.basis.spectrum

    def replace(self, **changes) -> "VishModel":
        values = dict(
            kernel=self.kernel,
            mapping=self.mapping,
            basis=self.basis,
            variational=self.variational,
            likelihood=self.likelihood,
        )
        values.update(changes)
        return VishModel(**values)


def build_model(
    input_dim: int,
    kernel: KernelSpec,
    max_degree: int,
    likelihood: Likelihood | None = None,
    *,
    radial_mode: str | None = None,
    normalize: bool = True,
    prior_degree: int | None = None,
    seed: int = 0,
    bias: float = 1.0,
    weight: float = 1.0,
) -> VishModel:
    """A freshly initialised model with ``q(u) = p(u)``."""
    if radial_mode is None:
        radial_mode = LINEAR if kernel.family == ARC_COSINE else CONSTANT
    mapping = SphereMapping.default(input_dim, radial_mode, bias=bias, weight=weight)
    kernel = kernel.replace(ambient_dim=mapping.ambient_dim)
    basis = make_inducing_basis(kernel, max_degree, seed, normalize, prior_degree)
    return VishModel(kernel, mapping, basis, VariationalState.prior(basis.a_hat_per_feature), likelihood or Likelihood())


# ---------------------------------------------------------------------------
# Differentiable view


def _softplus_inv(x):
    x = np.asarray(x, dtype=float)
    return x + np.log(-np.expm1(-x))


class VishModule(torch.nn.Module):
    """Unconstrained float64 parameters of a :class:`VishModel` for autodiff.

    Positive quantities are log-parameterised; the covariance factor keeps a
    softplus-positive diagonal.
    """

    def __init__(self, model: VishModel, trainable=None):
        super().__init__()
        self.model = model
        kernel, mapping = model.kernel, model.mapping
        values = {
            "variance": np.log(kernel.variance),
            "weights": np.log(mapping.weights),
            "bias": np.log(mapping.bias),
            "q_mu": model.variational.mean,
        }
        raw = np.tril(model.variational.cov_factor, -1) + np.diag(_softplus_inv(np.diag(model.variational.cov_factor)))
        values["q_sqrt"] = raw
        if kernel.has_lengthscale:
            values["lengthscale"] = np.log(kernel.lengthscale)
        if model.likelihood.kind == GAUSSIAN:
            values["noise"] = np.log(model.likelihood.noise)
        trainable = set(values) if trainable is None else {k for k in trainable if k in values}
        self.names = [n for n in PARAM_NAMES if n in values]
        for name in self.names:
            t = torch.tensor(np.array(values[name], dtype=float), dtype=torch.float64)
            self.register_parameter(name, torch.nn.Parameter(t, requires_grad=name in trainable))
        self.trainable_names = [n for n in self.names if n in trainable]
        basis = model.basis
        self.degrees = list(basis.degrees)
        self.counts = [lv.count for lv in basis.harmonic_basis.levels]
        self.prior_degree = basis.spectrum.max_degree
        self.d = mapping.ambient_dim
        self.multiplicities = torch.as_tensor(level_multiplicities(self.d, self.prior_degree), dtype=torch.float64)
        self.ones_mask = torch.tril(torch.ones(basis.num_features, basis.num_features, dtype=torch.float64), -1)

    # -- parameters --------------------------------------------------------

    def trainable_parameters(self):
        return [getattr(self, n) for n in self.trainable_names]

    def get_flat(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.trainable_parameters()])

    def set_flat(self, vec):
        vec = torch.as_tensor(vec, dtype=torch.float64)
        i = 0
        with torch.no_grad():
            for p in self.trainable_parameters():
                p.copy_(vec[i : i + p.numel()].reshape(p.shape))
                i += p.numel()

    def coeffs(self):
        kernel = self.model.kernel
        lengthscale = torch.exp(self.lengthscale) if kernel.has_lengthscale else 1.0
        return spectrum_coefficients(
            kernel.family,
            kernel.nu,
            self.d,
            self.prior_degree,
            torch.exp(self.variance),
            lengthscale,
            self.model.basis.spectrum.normalized,
        )

    def a_hat(self, coeffs):
        sel = coeffs[self.degrees]
        bad = torch.nonzero(sel <= DEGENERATE_COEFF)
        if bad.numel():
            raise DegenerateFeatureError(
                f"Mercer coefficient underflow at level(s) {[self.degrees[i] for i in bad.reshape(-1).tolist()]}"
            )
        return torch.repeat_interleave(sel, torch.as_tensor(self.counts))

    def cov_factor(self):
        raw = self.q_sqrt
        return raw * self.ones_mask + torch.diag(F.softplus(torch.diagonal(raw)))

    def noise_var(self):
        return torch.exp(self.noise)

    # -- model pieces --------------------------------------------------------

    def project(self, X):
        return project_torch(self.weights, self.bias, X, self.d)

    def scale(self, r):
        return r if self.model.mapping.radial_mode == LINEAR else torch.ones_like(r)

    def features(self, X):
        """``(Phi, scale, u)`` with ``Phi[n, m] = scale_n * phi_m(u_n)``."""
        u, r = self.project(X)
        s = self.scale(r)
        blocks = [lv.evaluate(u) for lv in self.model.basis.harmonic_basis.levels]
        phi = torch.cat(blocks, dim=1) if blocks else torch.zeros((u.shape[0], 0), dtype=torch.float64)
        return phi * s[:, None], s, u

    def predict_f(self, X, full_cov=False):
        coeffs = self.coeffs()
        a = self.a_hat(coeffs)
        phi, s, u = self.features(X)
        phi_t = phi * a
        mean = phi_t @ self.q_mu
        proj = phi_t @ self.cov_factor()
        q_diag = torch.sum(a * phi**2, dim=1)
        if full_cov:
            k = (s[:, None] * s[None, :]) * zonal_kernel_torch(coeffs, self.d, u @ u.T)
            cov = k + proj @ proj.T - (phi * a) @ phi.T
            return mean, cov
        prior = s**2 * torch.sum(coeffs * self.multiplicities)
        var = prior + torch.sum(proj**2, dim=1) - q_diag
        return mean, _clamp_variance(var)

    def kl(self):
        a = self.a_hat(self.coeffs())
        L = self.cov_factor()
        m = self.q_mu
        trace = torch.sum(a * torch.sum(L**2, dim=1))
        maha = torch.sum(a * m**2)
        logdet_s = 2.0 * torch.sum(torch.log(torch.diagonal(L)))
        return 0.5 * (trace + maha - a.numel() - torch.sum(torch.log(a)) - logdet_s)

    def expected_loglik(self, mean, var, y):
        lik = self.model.likelihood
        if lik.kind == GAUSSIAN:
            tau2 = self.noise_var()
            return -0.5 * torch.log(2 * math.pi * tau2) - 0.5 * ((y - mean) ** 2 + var) / tau2
        x, w = np.polynomial.hermite.hermgauss(lik.quadrature)
        x = torch.as_tensor(x, dtype=torch.float64)
        w = torch.as_tensor(w / math.sqrt(math.pi), dtype=torch.float64)
        f = mean[:, None] + torch.sqrt(2.0 * var.clamp_min(1e-300))[:, None] * x[None, :]
        sign = (2.0 * y - 1.0)[:, None]
        if lik.link == PROBIT:
            logp = torch.special.log_ndtr(sign * f)
        else:
            logp = -F.softplus(-sign * f)
        return logp @ w

    def elbo(self, X, y, total_n=None):
        mean, var = self.predict_f(X)
        ell = self.expected_loglik(mean, var, y)
        scale = 1.0 if total_n is None else total_n / X.shape[0]
        return scale * torch.sum(ell) - self.kl()

    def collapsed(self, X, y):
        """Collapsed variational bound and the optimal ``(m*, L*)`` (Gaussian likelihood)."""
        coeffs = self.coeffs()
        a = self.a_hat(coeffs)
        phi, s, _ = self.features(X)
        tau2 = self.noise_var()
        n, M = phi.shape
        sqrt_a = torch.sqrt(a)
        A = phi * sqrt_a / torch.sqrt(tau2)
        B = torch.eye(M, dtype=torch.float64) + A.T @ A
        c = A.T @ y / torch.sqrt(tau2)
        # factor the order-reversed matrix so that B = U U^T with U upper;
        # then U^{-T} is a lower-triangular factor of B^{-1}.
        Lr = _cholesky_with_jitter(torch.flip(B, (0, 1)))
        U = torch.flip(Lr, (0, 1))
        w = torch.linalg.solve_triangular(U, c[:, None], upper=True)
        z = torch.linalg.solve_triangular(U.T, w, upper=False)[:, 0]
        logdet_b = 2.0 * torch.sum(torch.log(torch.diagonal(Lr)))
        quad = torch.sum(y**2) / tau2 - torch.dot(c, z)
        log_marginal = -0.5 * (n * math.log(2 * math.pi) + n * torch.log(tau2) + logdet_b + quad)
        prior = s**2 * torch.sum(coeffs * self.multiplicities)
        trace = torch.sum(prior - torch.sum(a * phi**2, dim=1))
        bound = log_marginal - 0.5 * trace / tau2
        U_inv_T = torch.linalg.solve_triangular(U, torch.eye(M, dtype=torch.float64), upper=True).T
        m_opt = z / sqrt_a
        L_opt = U_inv_T / sqrt_a[:, None]
        return bound, m_opt, L_opt

    # -- snapshots -------------------------------------------------------------

    def snapshot(self) -> VishModel:
        """Freeze current parameter values into a new :class:`VishModel`."""
        model = self.model
        with torch.no_grad():
            kernel_changes = {"variance": float(torch.exp(self.variance))}
            if model.kernel.has_lengthscale:
                kernel_changes["lengthscale"] = float(torch.exp(self.lengthscale))
            kernel = model.kernel.replace(**kernel_changes)
            mapping = model.mapping.replace(
                weights=torch.exp(self.weights).numpy().copy(), bias=float(torch.exp(self.bias))
            )
            spectrum = build_spectrum(kernel, kernel.ambient_dim, self.prior_degree, model.basis.spectrum.normalized)
            basis = InducingBasis(model.basis.harmonic_basis, spectrum)
            variational = VariationalState(self.q_mu.numpy().copy(), self.cov_factor().numpy().copy())
            likelihood = model.likelihood
            if likelihood.kind == GAUSSIAN:
                likelihood = Likelihood(GAUSSIAN, noise=float(self.noise_var()))
        return VishModel(kernel, mapping, basis, variational, likelihood)

    def parameter_snapshot(self) -> dict:
        return {n: getattr(self, n).detach().numpy().copy() for n in self.names}


def _clamp_variance(var):
    worst = float(var.detach().min()) if var.numel() else 0.0
    if worst < VAR_CLAMP:
        raise NumericalConsistencyError(f"predictive variance {worst:.3e} is below the rounding tolerance")
    return var.clamp_min(0.0)


def _cholesky_with_jitter(B):
    if not bool(torch.isfinite(B.detach()).all()):
        raise ConditioningError("collapsed system has non-finite entries; check the noise and kernel variances")
    try:
        return torch.linalg.cholesky(B)
    except RuntimeError:
        jitter = 1e-10 * float(torch.trace(B.detach())) / B.shape[0]
    try:
        return torch.linalg.cholesky(B + jitter * torch.eye(B.shape[0], dtype=B.dtype))
    except RuntimeError as exc:
        raise ConditioningError(
            f"collapsed system is not positive definite even with jitter {jitter:.1e}; "
            f"try a larger noise variance or jitter around {100 * jitter:.1e}"
        ) from exc


# ---------------------------------------------------------------------------
# numpy-facing operations


def _as_tensor(x):
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=torch.float64)


def _check_inputs(model, X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, model.mapping.input_dim)
    if X.ndim != 2 or X.shape[1] != model.mapping.input_dim:
        raise InvalidArgumentError(f"expected inputs of shape (N, {model.mapping.input_dim}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        bad = np.flatnonzero(~np.all(np.isfinite(X), axis=1))
        raise InvalidArgumentError(f"non-finite inputs at rows {bad[:20].tolist()}")
    return X


def features(model: VishModel, X) -> np.ndarray:
    X = _check_inputs(model, X)
    with torch.no_grad():
        phi, _, _ = VishModule(model).features(_as_tensor(X))
    return phi.numpy()


def kuu_diag(basis: InducingBasis) -> np.ndarray:
    a = basis.a_hat_per_feature
    bad = a <= DEGENERATE_COEFF
    if np.any(bad):
        raise DegenerateFeatureError(f"Mercer coefficient underflow at level(s) {sorted(set(basis.feature_index()[bad]))}")
    return 1.0 / a


def predict_f(model: VishModel, X, full_cov: bool = False):
    X = _check_inputs(model, X)
    with torch.no_grad():
        mean, var = VishModule(model).predict_f(_as_tensor(X), full_cov=full_cov)
    return mean.numpy(), var.numpy()


def predict_y(model: VishModel, X):
    """Gaussian: ``(mean, variance)`` of y. Bernoulli: ``P(y = 1)``."""
    mean, var = predict_f(model, X)
    lik = model.likelihood
    if lik.kind == GAUSSIAN:
        return mean, var + lik.noise
    if lik.link == PROBIT:
        from scipy.special import ndtr

        return ndtr(mean / np.sqrt(1.0 + var))
    x, w = np.polynomial.hermite.hermgauss(max(lik.quadrature, 50))
    f = mean[:, None] + np.sqrt(2.0 * var)[:, None] * x[None, :]
    return (1.0 / (1.0 + np.exp(-f))) @ (w / math.sqrt(math.pi))


def kl_qu_pu(model: VishModel) -> float:
    with torch.no_grad():
        # exact zero at q = p can round to -1e-14
        return max(float(VishModule(model).kl()), 0.0)


def _check_targets(model, y, n):
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != n:
        raise InvalidArgumentError(f"{n} inputs but {y.size} targets")
    if model.likelihood.kind == BERNOULLI and not np.all((y == 0) | (y == 1)):
        from .errors import TargetTypeError

        raise TargetTypeError("Bernoulli likelihood needs 0/1 labels")
    return y


def elbo_stochastic(model: VishModel, X, y, total_n=None, *, trainable=None, with_grad: bool = True):
    """Minibatch ELBO estimate; returns ``(value, grads)``.

    ``grads`` maps parameter names to gradients in the unconstrained
    parameterisation (log for positive scalars, softplus diagonal for the
    covariance factor).
    """
    X = _check_inputs(model, X)
    y = _check_targets(model, y, X.shape[0])
    if X.shape[0] == 0:
        raise InvalidArgumentError("empty batch")
    total_n = X.shape[0] if total_n is None else int(total_n)
    if total_n < X.shape[0]:
        raise InvalidArgumentError("total_n must be at least the batch size")
    module = VishModule(model, trainable)
    value = module.elbo(_as_tensor(X), _as_tensor(y), total_n)
    if not torch.isfinite(value):
        raise DiagnosticsError("non-finite ELBO", module.parameter_snapshot())
    grads = {}
    if with_grad and module.trainable_names:
        params = module.trainable_parameters()
        g = torch.autograd.grad(value, params, allow_unused=True)
        grads = {
            n: (np.zeros(p.shape) if gi is None else gi.numpy())
            for n, p, gi in zip(module.trainable_names, params, g)
        }
    return float(value.detach()), grads


def collapsed_gaussian_fit(model: VishModel, X, y):
    """Optimal Gaussian ``q(u)`` and the collapsed evidence bound."""
    if model.likelihood.kind != GAUSSIAN:
        raise InvalidArgumentError("collapsed bound requires a Gaussian likelihood")
    X = _check_inputs(model, X)
    y = _check_targets(model, y, X.shape[0])
    with torch.no_grad():
        bound, m, L = VishModule(model).collapsed(_as_tensor(X), _as_tensor(y))
    return VariationalState(m.numpy(), np.tril(L.numpy())), float(bound)


def embed_variational(state: VariationalState, small: InducingBasis, large: InducingBasis) -> VariationalState:
    """Extend ``state`` from a nested smaller basis with prior-matched new features.

    The ELBO is unchanged by the embedding, which makes it a natural warm start
    when growing the level cap.
    """
    small_levels = small.harmonic_basis.levels
    large_levels = large.harmonic_basis.levels
    if len(small_levels) > len(large_levels) or any(
        a.degree != b.degree or not np.array_equal(a.fundamental_points, b.fundamental_points)
        for a, b in zip(small_levels, large_levels)
    ):
        raise InvalidArgumentError("bases are not nested")
    if not np.array_equal(small.spectrum.coeffs, large.spectrum.coeffs[: small.spectrum.max_degree + 1]):
        raise InvalidArgumentError("bases use different spectra")
    m_small = small.num_features
    a_new = large.a_hat_per_feature[m_small:]
    mean = np.concatenate([state.mean, np.zeros(a_new.size)])
    factor = np.zeros((large.num_features, large.num_features))
    factor[:m_small, :m_small] = state.cov_factor
    factor[m_small:, m_small:] = np.diag(a_new**-0.5)
    return VariationalState(mean, factor)
