"""Gegenbauer polynomials and orthonormal spherical-harmonic bases on S^{d-1}.

Each harmonic level is spanned by the zonal functions ``x -> c * C_l(v_i . x)``
attached to a *fundamental system* of points ``v_i``; orthonormalising them
with the Cholesky factor of their Gram matrix gives an explicit basis in any
ambient dimension ``3 <= d <= 10``. Inner products on the sphere use the
normalised surface measure, so the constant function has unit norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
import scipy.linalg
import scipy.special

from .errors import ConstructionError, InvalidArgumentError, NumericalError

MIN_DIM = 3
MAX_DIM = 10
# Above this degree the explicit monomial sum loses more than ~1e-11 relative
# accuracy near |z| = 1, so evaluation switches to the three-term recurrence.
EXPLICIT_MAX_DEGREE = 12
CLAMP_TOL = 1e-9
UNIT_NORM_TOL = 1e-8
# Largest level built by default: the pool Gram factor is O(count^2) memory.
MAX_LEVEL_COUNT = 4000
COND_THRESHOLD = 1e8
MAX_RETRIES = 50


def _is_tensor(z):
    return type(z).__module__.startswith("torch")


def alpha_for_dim(d: int) -> float:
    return (d - 2) / 2.0


# ---------------------------------------------------------------------------
# Gegenbauer polynomials


@dataclass(frozen=True)
class GegenbauerPoly:
    """``C_l^{(alpha)}`` stored as coefficients of ``(2z)^{l-2k}``, k = 0..l//2."""

    alpha: float
    degree: int
    monomial_coeffs: tuple

    def __call__(self, z):
        # Horner in y = (2z)^2, highest power first (k = 0).
        two_z = 2.0 * z
        y = two_z * two_z
        acc = self.monomial_coeffs[0] + 0.0 * z
        for c in self.monomial_coeffs[1:]:
            acc = acc * y + c
        if self.degree % 2:
            acc = acc * two_z
        return acc

    def at_one(self) -> float:
        return gegenbauer_at_one(self.alpha, self.degree)


@lru_cache(maxsize=512)
def gegenbauer_poly(alpha: float, degree: int) -> GegenbauerPoly:
    _check_alpha_degree(alpha, degree)
    coeffs = []
    lg_alpha = math.lgamma(alpha)
    for k in range(degree // 2 + 1):
        log_mag = (
            math.lgamma(degree - k + alpha)
            - lg_alpha
            - math.lgamma(k + 1)
            - math.lgamma(degree - 2 * k + 1)
        )
        coeffs.append((-1.0) ** k * math.exp(log_mag))
    return GegenbauerPoly(float(alpha), int(degree), tuple(coeffs))


def _check_alpha_degree(alpha, degree):
    if not (math.isfinite(alpha) and alpha > 0):
        raise InvalidArgumentError(f"alpha must be positive and finite, got {alpha}")
    if int(degree) != degree or degree < 0:
        raise InvalidArgumentError(f"degree must be a non-negative integer, got {degree}")


def _gegenbauer_recurrence(alpha, degree, z):
    prev = 1.0 + 0.0 * z
    if degree == 0:
        return prev
    cur = 2.0 * alpha * z
    for n in range(2, degree + 1):
        prev, cur = cur, (2.0 * z * (n + alpha - 1.0) * cur - (n + 2.0 * alpha - 2.0) * prev) / n
    return cur


def gegenbauer(alpha: float, degree: int, z):
    """Vectorised ``C_l^{(alpha)}(z)`` for numpy arrays or torch tensors.

    No clamping or validation; callers are expected to pass values in [-1, 1].
    """
    if degree <= EXPLICIT_MAX_DEGREE:
        return gegenbauer_poly(alpha, degree)(z)
    return _gegenbauer_recurrence(alpha, degree, z)


def gegenbauer_all(alpha: float, max_degree: int, z):
    """Stack ``[C_0(z), ..., C_L(z)]`` along a new leading axis (numpy only)."""
    z = np.asarray(z, dtype=float)
    out = np.empty((max_degree + 1,) + z.shape)
    for l in range(min(max_degree, EXPLICIT_MAX_DEGREE) + 1):
        out[l] = gegenbauer_poly(alpha, l)(z)
    for l in range(EXPLICIT_MAX_DEGREE + 1, max_degree + 1):
        n = l
        out[l] = (2.0 * z * (n + alpha - 1.0) * out[l - 1] - (n + 2.0 * alpha - 2.0) * out[l - 2]) / n
    return out


def clamp_inner(z, tol: float = CLAMP_TOL):
    """Clip inner products into [-1, 1]; violations larger than ``tol`` are errors."""
    if _is_tensor(z):
        import torch

        with torch.no_grad():
            worst = float(z.abs().max()) if z.numel() else 0.0
        if worst > 1.0 + tol:
            raise InvalidArgumentError(f"inner product {worst!r} outside [-1, 1]")
        return z.clamp(-1.0, 1.0)
    z = np.asarray(z, dtype=float)
    if z.size and np.max(np.abs(z)) > 1.0 + tol:
        raise InvalidArgumentError(f"inner product {np.max(np.abs(z))!r} outside [-1, 1]")
    return np.clip(z, -1.0, 1.0)


def gegenbauer_eval(alpha: float, degree: int, z: float) -> float:
    _check_alpha_degree(alpha, degree)
    if not math.isfinite(z):
        raise InvalidArgumentError(f"non-finite argument z={z}")
    z = float(clamp_inner(z))
    return float(gegenbauer(alpha, int(degree), z))


def gegenbauer_at_one(alpha: float, degree: int) -> float:
    """``C_l^{(alpha)}(1) = Gamma(2 alpha + l) / (Gamma(2 alpha) l!)``."""
    _check_alpha_degree(alpha, degree)
    return math.exp(math.lgamma(2 * alpha + degree) - math.lgamma(2 * alpha) - math.lgamma(degree + 1))


def gauss_gegenbauer_rule(alpha: float, n_nodes: int):
    """Gauss nodes and weights for the weight ``(1 - t^2)^(alpha - 1/2)`` on [-1, 1]."""
    if n_nodes < 1:
        raise InvalidArgumentError(f"n_nodes must be >= 1, got {n_nodes}")
    try:
        nodes, weights = scipy.special.roots_gegenbauer(int(n_nodes), float(alpha))
    except Exception as exc:  # scipy raises ValueError / LinAlgError variants
        raise NumericalError(f"Gauss-Gegenbauer rule failed for alpha={alpha}, n={n_nodes}: {exc}") from exc
    if not (np.all(np.isfinite(nodes)) and np.all(weights > 0)):
        raise NumericalError(f"Gauss-Gegenbauer rule failed for alpha={alpha}, n={n_nodes}")
    return nodes, weights


# ---------------------------------------------------------------------------
# Sphere geometry


def num_harmonics(d: int, degree: int) -> int:
    """Dimension of the space of degree-``l`` spherical harmonics on S^{d-1}."""
    if d < MIN_DIM or degree < 0:
        raise InvalidArgumentError(f"need d >= 3 and degree >= 0, got d={d}, degree={degree}")
    n = (2 * degree + d - 2) * math.comb(degree + d - 3, degree) // (d - 2)
    if n >= 2**63:
        raise OverflowError(f"N_l^d overflows 64 bits for d={d}, degree={degree}")
    return n


def surface_area(d: int) -> float:
    """Surface area of the unit sphere S^{d-1} in R^d."""
    if d < 1:
        raise InvalidArgumentError(f"d must be >= 1, got {d}")
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


@dataclass(frozen=True)
class SphereGeometry:
    ambient_dim: int
    surface_area: float
    funk_hecke_const: float

    @classmethod
    def of(cls, d: int) -> "SphereGeometry":
        if d < MIN_DIM:
            raise InvalidArgumentError(f"ambient dimension must be >= 3, got {d}")
        return cls(d, surface_area(d), surface_area(d - 1) / surface_area(d))


# ---------------------------------------------------------------------------
# Harmonic levels


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def level_rng(d: int, degree: int, seed: int, retry: int) -> np.random.Generator:
    """Counter-based generator keyed by (d, degree, seed, retry)."""
    key = np.random.SeedSequence([int(seed) % 2**64, d, degree, retry]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _zonal(alpha, degree, inner):
    return (degree + alpha) / alpha * gegenbauer(alpha, degree, inner)


@dataclass(frozen=True, eq=False)
class HarmonicLevel:
    """Orthonormal basis of the degree-``l`` harmonics built from a fundamental system.

    ``phi_k(x) = sum_i [L^{-1}]_{k,i} * ((l + a) / a) * C_l^{(a)}(v_i . x)`` where
    ``L L^T`` is the Gram matrix of the zonal functions at ``fundamental_points``.
    """

    ambient_dim: int
    degree: int
    count: int
    fundamental_points: np.ndarray
    gram_factor: np.ndarray
    rng_seed: int
    condition_number: float = field(default=float("nan"), compare=False)

    @property
    def alpha(self) -> float:
        return alpha_for_dim(self.ambient_dim)

    @cached_property
    def projection(self) -> np.ndarray:
        """``L^{-1}``; evaluation becomes a plain matrix product."""
        eye = np.eye(self.count)
        return _readonly(scipy.linalg.solve_triangular(self.gram_factor, eye, lower=True))

    @cached_property
    def _torch_consts(self):
        import torch

        return (
            torch.as_tensor(np.array(self.fundamental_points), dtype=torch.float64),
            torch.as_tensor(np.array(self.projection), dtype=torch.float64),
        )

    def evaluate(self, points):
        """Evaluate on unit vectors without validation (numpy or torch)."""
        if _is_tensor(points):
            V, P = self._torch_consts
            inner = clamp_inner(points @ V.T)
            return _zonal(self.alpha, self.degree, inner) @ P.T
        inner = clamp_inner(points @ self.fundamental_points.T)
        return _zonal(self.alpha, self.degree, inner) @ self.projection.T


def _gram(alpha, degree, A, B):
    return _zonal(alpha, degree, np.clip(A @ B.T, -1.0, 1.0))


def _greedy_select(alpha, degree, pool, n):
    """Pivoted partial Cholesky on the pool Gram; returns indices of ``n`` pivots."""
    P = pool.shape[0]
    diag = np.full(P, (degree + alpha) / alpha * gegenbauer_at_one(alpha, degree))
    L = np.zeros((P, n))
    chosen = []
    for k in range(n):
        j = int(np.argmax(diag))
        if diag[j] <= 0:
            break
        chosen.append(j)
        col = _gram(alpha, degree, pool, pool[j : j + 1])[:, 0]
        col -= L[:, :k] @ L[j, :k]
        piv = math.sqrt(diag[j])
        L[:, k] = col / piv
        diag -= L[:, k] ** 2
        diag[j] = -np.inf
    return np.array(chosen, dtype=int)


def _factor_and_condition(G):
    try:
        factor = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        return None, np.inf
    anorm = np.max(np.sum(np.abs(G), axis=0))
    rcond, info = scipy.linalg.lapack.dpocon(factor, anorm, uplo="L")
    if info != 0 or rcond <= 0:
        return factor, np.inf
    return factor, 1.0 / rcond


def level_from_points(d: int, degree: int, points, seed: int = 0) -> HarmonicLevel:
    """Rebuild a level from stored fundamental points (used on model reload)."""
    _check_dim(d)
    points = np.asarray(points, dtype=float)
    n = num_harmonics(d, degree)
    if points.shape != (n, d):
        raise InvalidArgumentError(f"expected {n} points in R^{d}, got array of shape {points.shape}")
    factor, cond = _factor_and_condition(_gram(alpha_for_dim(d), degree, points, points))
    if factor is None:
        raise ConstructionError(f"stored fundamental system for d={d}, l={degree} is not positive definite")
    return HarmonicLevel(d, degree, n, _readonly(points), _readonly(factor), int(seed), float(cond))


def _check_dim(d):
    if not MIN_DIM <= d <= MAX_DIM:
        raise InvalidArgumentError(f"ambient dimension must satisfy 3 <= d <= 10, got {d}")


def build_level(
    d: int,
    degree: int,
    seed: int = 0,
    *,
    oversample: float = 2.0,
    max_retries: int = MAX_RETRIES,
    cond_threshold: float = COND_THRESHOLD,
    max_count: int = MAX_LEVEL_COUNT,
) -> HarmonicLevel:
    """Construct a well-conditioned fundamental system for level ``degree``.

    Candidates are Gaussian vectors pushed to the sphere; ``count`` of them are
    picked from an oversampled pool by pivoted Cholesky. Retries reseed the
    pool, keeping the best-conditioned system seen.
    """
    _check_dim(d)
    n = num_harmonics(d, degree)
    if n > max_count:
        raise ConstructionError(
            f"level d={d}, l={degree} has {n} harmonics, above the construction cap of {max_count}"
        )
    alpha = alpha_for_dim(d)
    if n == 1:
        pts = np.zeros((1, d))
        pts[0, -1] = 1.0
        return level_from_points(d, degree, pts, seed)

    best = None
    for retry in range(max_retries):
        rng = level_rng(d, degree, seed, retry)
        pool = rng.standard_normal((max(int(math.ceil(oversample * n)), n + 1), d))
        pool /= np.linalg.norm(pool, axis=1, keepdims=True)
        idx = _greedy_select(alpha, degree, pool, n)
        if idx.size < n:
            continue
        pts = pool[np.sort(idx)]
        factor, cond = _factor_and_condition(_gram(alpha, degree, pts, pts))
        if factor is not None and (best is None or cond < best[2]):
            best = (pts, factor, cond)
        if best is not None and best[2] < cond_threshold:
            break
    if best is None or best[2] >= cond_threshold:
        achieved = np.inf if best is None else best[2]
        raise ConstructionError(
            f"no well-conditioned fundamental system for d={d}, l={degree}: "
            f"best condition number {achieved:.3e} after {max_retries} attempts"
        )
    pts, factor, cond = best
    return HarmonicLevel(d, degree, n, _readonly(pts), _readonly(factor), int(seed), float(cond))


def check_unit_rows(points, tol: float = UNIT_NORM_TOL):
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise InvalidArgumentError(f"expected a 2-D batch of points, got shape {points.shape}")
    norms = np.linalg.norm(points, axis=1)
    bad = np.flatnonzero(~(np.abs(norms - 1.0) <= tol))
    if bad.size:
        raise InvalidArgumentError(f"points are not unit-norm at rows {bad[:20].tolist()}")
    return points


def eval_level(level: HarmonicLevel, points) -> np.ndarray:
    points = check_unit_rows(points)
    if points.shape[1] != level.ambient_dim:
        raise InvalidArgumentError(f"points live in R^{points.shape[1]}, level is on S^{level.ambient_dim - 1}")
    return level.evaluate(points)


@dataclass(frozen=True, eq=False)
class HarmonicBasis:
    ambient_dim: int
    max_degree: int
    levels: tuple

    @property
    def total_count(self) -> int:
        return sum(level.count for level in self.levels)

    def level_slices(self):
        start = 0
        for level in self.levels:
            yield level, slice(start, start + level.count)
            start += level.count


def build_basis(d: int, max_degree: int, seed: int = 0, degrees=None) -> HarmonicBasis:
    """Levels ``0..max_degree`` (or just ``degrees``), ordered by increasing degree."""
    degrees = range(max_degree + 1) if degrees is None else sorted(degrees)
    return HarmonicBasis(d, max_degree, tuple(build_level(d, l, seed) for l in degrees))


def eval_basis(basis: HarmonicBasis, points) -> np.ndarray:
    points = check_unit_rows(points)
    if not basis.levels:
        return np.zeros((points.shape[0], 0))
    return np.concatenate([level.evaluate(points) for level in basis.levels], axis=1)
