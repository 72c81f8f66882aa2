"""Zonal kernels on S^{d-1} and their Mercer coefficients.

Arc-cosine coefficients are computed exactly: every integral in the Funk-Hecke
reduction is a rational multiple of a power of pi, so the level sums are
carried out in ``fractions.Fraction`` and only converted to binary64 at the
end. Matern and squared-exponential kernels are *defined* on the sphere by
evaluating their Euclidean spectral density at the Laplace-Beltrami
frequencies ``sqrt(l (l + d - 2))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import mpmath
import numpy as np
import torch

from .errors import InvalidArgumentError, NumericalError
from .harmonics import (
    MAX_DIM,
    MIN_DIM,
    SphereGeometry,
    alpha_for_dim,
    clamp_inner,
    gauss_gegenbauer_rule,
    gegenbauer,
    gegenbauer_all,
    gegenbauer_at_one,
    num_harmonics,
)

ARC_COSINE = "arc_cosine"
MATERN = "matern"
SQUARED_EXPONENTIAL = "squared_exponential"
FAMILIES = (ARC_COSINE, MATERN, SQUARED_EXPONENTIAL)
MATERN_NUS = (0.5, 1.5, 2.5)
SHAPE_DEGREE = 200


@dataclass(frozen=True)
class KernelSpec:
    family: str
    variance: float = 1.0
    lengthscale: float = 1.0
    ambient_dim: int = 3
    nu: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidArgumentError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if not (math.isfinite(self.variance) and self.variance > 0):
            raise InvalidArgumentError(f"variance must be positive, got {self.variance}")
        if self.family != ARC_COSINE and not (math.isfinite(self.lengthscale) and self.lengthscale > 0):
            raise InvalidArgumentError(f"lengthscale must be positive, got {self.lengthscale}")
        if self.family == MATERN and self.nu not in MATERN_NUS:
            raise InvalidArgumentError(f"Matern nu must be one of {MATERN_NUS}, got {self.nu}")
        if not MIN_DIM <= self.ambient_dim <= MAX_DIM:
            raise InvalidArgumentError(f"ambient dimension must satisfy 3 <= d <= 10, got {self.ambient_dim}")

    @property
    def has_lengthscale(self) -> bool:
        return self.family != ARC_COSINE

    def replace(self, **changes) -> "KernelSpec":
        values = dict(
            family=self.family,
            variance=self.variance,
            lengthscale=self.lengthscale,
            ambient_dim=self.ambient_dim,
            nu=self.nu,
        )
        values.update(changes)
        return KernelSpec(**values)

    def to_dict(self) -> dict:
        out = {"family": self.family, "variance": self.variance, "ambient_dim": self.ambient_dim}
        if self.has_lengthscale:
            out["lengthscale"] = self.lengthscale
        if self.family == MATERN:
            out["nu"] = self.nu
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "KernelSpec":
        nu = data.get("nu")
        return cls(
            family=data["family"],
            variance=float(data.get("variance", 1.0)),
            lengthscale=float(data.get("lengthscale", 1.0)),
            ambient_dim=int(data["ambient_dim"]),
            nu=None if nu is None else float(nu),
        )


# ---------------------------------------------------------------------------
# Shape functions


def arc_cosine_shape(t, variance=1.0):
    """``(variance / pi) * (sin(theta) + (pi - theta) cos(theta))`` with ``theta = arccos(t)``."""
    t = np.asarray(t, dtype=float)
    theta = np.arccos(t)
    return variance / np.pi * (np.sin(theta) + (np.pi - theta) * t)


def shape_function(kernel: KernelSpec, t):
    if not np.all(np.isfinite(t)):
        raise InvalidArgumentError("non-finite argument to shape function")
    t = clamp_inner(t)
    if kernel.family == ARC_COSINE:
        out = arc_cosine_shape(t, kernel.variance)
    else:
        # On the sphere these kernels are defined through their spectrum.
        spectrum = build_spectrum(kernel, kernel.ambient_dim, SHAPE_DEGREE, normalize=False)
        out = kernel_eval_truncated(spectrum, t)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Exact trigonometric integrals.  Values live in Q[pi]: {power_of_pi: Fraction}.


def _qp_add(a, b):
    out = dict(a)
    for p, v in b.items():
        out[p] = out.get(p, 0) + v
    return {p: v for p, v in out.items() if v != 0}


def _qp_scale(a, c, pi_power=0):
    return {p + pi_power: v * c for p, v in a.items() if v * c != 0}


def _qp_float(a) -> float:
    with mpmath.workdps(60):
        total = mpmath.mpf(0)
        for p, v in a.items():
            total += mpmath.mpf(v.numerator) / v.denominator * mpmath.pi**p
        return float(total)


def _double_factorial(n: int) -> int:
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


@lru_cache(maxsize=None)
def _sin_cos_exact(n: int, m: int):
    """int_0^pi sin^n(x) cos^m(x) dx."""
    if m % 2:
        return {}
    c = Fraction(_double_factorial(n - 1) * _double_factorial(m - 1), _double_factorial(n + m))
    return {1: c} if n % 2 == 0 else {0: 2 * c}


@lru_cache(maxsize=None)
def _weighted_exact(n: int, m: int):
    """int_0^pi (pi - x) sin^n(x) cos^m(x) dx."""
    if m % 2 == 0:
        # x -> pi - x leaves the integrand's trig part unchanged, so the
        # integral is half of pi times the unweighted one.
        return _qp_scale(_sin_cos_exact(n, m), Fraction(1, 2), 1)
    # m odd: integrate by parts, v(x) = int_0^x sin^n cos^m is a sine polynomial.
    half = (m - 1) // 2
    out = {}
    for i in range(half + 1):
        c = Fraction((-1) ** i * math.comb(half, i), n + 2 * i + 1)
        out = _qp_add(out, _qp_scale(_sin_cos_exact(n + 2 * i + 1, 0), c))
    return out


def _check_nm(n, m):
    if n < 0 or m < 0 or int(n) != n or int(m) != m:
        raise InvalidArgumentError(f"n and m must be non-negative integers, got n={n}, m={m}")


def integral_sin_cos(n: int, m: int) -> float:
    _check_nm(n, m)
    return _qp_float(_sin_cos_exact(int(n), int(m)))


def integral_weighted(n: int, m: int) -> float:
    _check_nm(n, m)
    return _qp_float(_weighted_exact(int(n), int(m)))


def _pochhammer(a: Fraction, n: int) -> Fraction:
    out = Fraction(1)
    for i in range(n):
        out *= a + i
    return out


def _gamma_half(twice_x: int):
    """Gamma(twice_x / 2) as (rational, power of sqrt(pi))."""
    if twice_x % 2 == 0:
        return Fraction(math.factorial(twice_x // 2 - 1)), 0
    return _pochhammer(Fraction(1, 2), (twice_x - 1) // 2), 1


@lru_cache(maxsize=None)
def arc_cosine_coeff_exact(d: int, degree: int):
    """Exact Mercer coefficient of the unit-variance arc-cosine kernel, in Q[pi]."""
    alpha = Fraction(d - 2, 2)
    integral = {}
    for k in range(degree // 2 + 1):
        p = degree - 2 * k
        c = (
            (-1) ** k
            * _pochhammer(alpha, degree - k)
            / (math.factorial(k) * math.factorial(p))
            * 2**p
        )
        term = _qp_add(_sin_cos_exact(d - 1, p), _weighted_exact(d - 2, p + 1))
        integral = _qp_add(integral, _qp_scale(term, c))
    c_at_one = _pochhammer(2 * alpha, degree) / math.factorial(degree)
    # omega_d = Gamma(d/2) / (sqrt(pi) Gamma((d-1)/2))
    r1, p1 = _gamma_half(d)
    r2, p2 = _gamma_half(d - 1)
    sqrt_pi_power = p1 - p2 - 1
    omega = r1 / r2
    # the shape function carries an extra 1/pi
    return _qp_scale(integral, omega / c_at_one, sqrt_pi_power // 2 - 1)


def _check_level(d, degree):
    if not MIN_DIM <= d <= MAX_DIM:
        raise InvalidArgumentError(f"ambient dimension must satisfy 3 <= d <= 10, got {d}")
    if degree < 0 or int(degree) != degree:
        raise InvalidArgumentError(f"degree must be a non-negative integer, got {degree}")


def coeff_arc_cosine(d: int, degree: int) -> float:
    """Mercer coefficient of the unit-variance order-1 arc-cosine kernel on S^{d-1}.

    Odd levels above 1 vanish identically (the shape is an even function plus
    ``t / 2``), and the exact arithmetic returns 0.0 for them.
    """
    _check_level(d, degree)
    value = _qp_float(arc_cosine_coeff_exact(int(d), int(degree)))
    if not math.isfinite(value):
        raise OverflowError(f"arc-cosine coefficient overflow for d={d}, l={degree}")
    return value


# ---------------------------------------------------------------------------
# Spectral densities


def _log_matern_density(nu, d, variance, lengthscale, omega_sq):
    """Works on floats and on torch tensors (variance / lengthscale)."""
    log = torch.log if torch.is_tensor(variance) or torch.is_tensor(lengthscale) else np.log
    const = d * math.log(2.0) + 0.5 * d * math.log(math.pi) + math.lgamma(nu + 0.5 * d) + nu * math.log(2 * nu) - math.lgamma(nu)
    base = 2 * nu / lengthscale**2 + 4 * math.pi**2 * omega_sq
    return log(variance) + const - 2 * nu * log(lengthscale) - (nu + 0.5 * d) * log(base)


def _log_se_density(d, variance, lengthscale, omega_sq):
    log = torch.log if torch.is_tensor(variance) or torch.is_tensor(lengthscale) else np.log
    return (
        log(variance)
        + 0.5 * d * (math.log(2 * math.pi) + 2 * log(lengthscale))
        - 2 * math.pi**2 * lengthscale**2 * omega_sq
    )


def matern_spectral_density(kernel: KernelSpec, omega: float) -> float:
    if kernel.family != MATERN:
        raise InvalidArgumentError(f"Matern density requested for a {kernel.family} kernel")
    if omega < 0:
        raise InvalidArgumentError(f"omega must be non-negative, got {omega}")
    return float(
        np.exp(_log_matern_density(kernel.nu, kernel.ambient_dim, kernel.variance, kernel.lengthscale, omega**2))
    )


def se_spectral_density(kernel: KernelSpec, omega: float) -> float:
    if kernel.family != SQUARED_EXPONENTIAL:
        raise InvalidArgumentError(f"SE density requested for a {kernel.family} kernel")
    if omega < 0:
        raise InvalidArgumentError(f"omega must be non-negative, got {omega}")
    return float(np.exp(_log_se_density(kernel.ambient_dim, kernel.variance, kernel.lengthscale, omega**2)))


def laplace_beltrami_eigenvalue(d: int, degree: int) -> int:
    return degree * (degree + d - 2)


def coeff_spectral(kernel: KernelSpec, d: int, degree: int) -> float:
    _check_level(d, degree)
    omega = math.sqrt(laplace_beltrami_eigenvalue(d, degree))
    kernel = kernel if kernel.ambient_dim == d else kernel.replace(ambient_dim=d)
    if kernel.family == MATERN:
        return matern_spectral_density(kernel, omega)
    if kernel.family == SQUARED_EXPONENTIAL:
        return se_spectral_density(kernel, omega)
    raise InvalidArgumentError("spectral-density coefficients are defined for Matern and SE kernels only")


def level_multiplicities(d: int, max_degree: int) -> np.ndarray:
    """``((l + a) / a) C_l(1)``, which equals ``N_l^d``."""
    return np.array([num_harmonics(d, l) for l in range(max_degree + 1)], dtype=float)


def spectrum_coefficients(family, nu, d, max_degree, variance, lengthscale=1.0, normalize=False):
    """Differentiable coefficients ``a_0..a_L`` (torch in, torch out).

    ``variance`` / ``lengthscale`` may be float64 tensors requiring grad.
    """
    variance = torch.as_tensor(variance, dtype=torch.float64)
    lengthscale = torch.as_tensor(lengthscale, dtype=torch.float64)
    degrees = np.arange(max_degree + 1)
    lam = torch.as_tensor(degrees * (degrees + d - 2), dtype=torch.float64)
    if family == ARC_COSINE:
        base = torch.as_tensor([coeff_arc_cosine(d, int(l)) for l in degrees], dtype=torch.float64)
        coeffs = variance * base
    elif family == MATERN:
        coeffs = torch.exp(_log_matern_density(nu, d, variance, lengthscale, lam))
    elif family == SQUARED_EXPONENTIAL:
        coeffs = torch.exp(_log_se_density(d, variance, lengthscale, lam))
    else:
        raise InvalidArgumentError(f"unknown kernel family {family!r}")
    if normalize:
        mult = torch.as_tensor(level_multiplicities(d, max_degree), dtype=torch.float64)
        coeffs = coeffs * (variance / torch.sum(coeffs * mult))
    return coeffs


# ---------------------------------------------------------------------------
# Funk-Hecke quadrature oracle


def funk_hecke_quadrature(shape, d: int, degree: int, n_nodes: int | None = None) -> float:
    """``(omega_d / C_l(1)) * int s(t) C_l(t) (1 - t^2)^((d-3)/2) dt`` by Gauss-Gegenbauer."""
    if n_nodes is None:
        n_nodes = max(degree + 8, 400)
    if n_nodes < degree + 8:
        raise InvalidArgumentError(f"need at least degree + 8 = {degree + 8} nodes, got {n_nodes}")
    alpha = alpha_for_dim(d)
    nodes, weights = gauss_gegenbauer_rule(alpha, n_nodes)
    values = np.asarray(shape(nodes), dtype=float) * gegenbauer(alpha, degree, nodes)
    geom = SphereGeometry.of(d)
    return float(geom.funk_hecke_const / gegenbauer_at_one(alpha, degree) * np.sum(weights * values))


# ---------------------------------------------------------------------------
# Spectra


@dataclass(frozen=True, eq=False)
class ZonalSpectrum:
    kernel: KernelSpec
    max_degree: int
    coeffs: np.ndarray
    normalized: bool = False

    @property
    def ambient_dim(self) -> int:
        return self.kernel.ambient_dim

    def prior_variance(self) -> float:
        return float(kernel_eval_truncated(self, 1.0))


def build_spectrum(kernel: KernelSpec, d: int, max_degree: int, normalize: bool = False) -> ZonalSpectrum:
    _check_level(d, max_degree)
    if kernel.ambient_dim != d:
        kernel = kernel.replace(ambient_dim=d)
    coeffs = spectrum_coefficients(
        kernel.family, kernel.nu, d, max_degree, kernel.variance, kernel.lengthscale, normalize
    ).numpy()
    if np.any(coeffs < -1e-12) or not np.all(np.isfinite(coeffs)):
        raise NumericalError(f"invalid Mercer coefficients for {kernel.family}: {coeffs}")
    coeffs = np.maximum(coeffs, 0.0)
    coeffs.setflags(write=False)
    return ZonalSpectrum(kernel, int(max_degree), coeffs, bool(normalize))


def kernel_eval_truncated(spectrum: ZonalSpectrum, t):
    """``sum_l a_l ((l + a) / a) C_l(t)`` for scalar or array ``t``."""
    if not np.all(np.isfinite(t)):
        raise InvalidArgumentError("non-finite argument to kernel evaluation")
    t = clamp_inner(t)
    d = spectrum.ambient_dim
    alpha = alpha_for_dim(d)
    L = spectrum.max_degree
    polys = gegenbauer_all(alpha, L, t)
    weights = spectrum.coeffs * (np.arange(L + 1) + alpha) / alpha
    out = np.tensordot(weights, polys, axes=1)
    return float(out) if np.ndim(out) == 0 else out


def zonal_kernel_torch(coeffs, d: int, inner):
    """Truncated kernel at torch inner products with torch coefficients."""
    alpha = alpha_for_dim(d)
    out = 0.0 * inner
    for l in range(coeffs.shape[0]):
        out = out + coeffs[l] * ((l + alpha) / alpha) * gegenbauer(alpha, l, inner)
    return out
