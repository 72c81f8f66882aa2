"""Bias-augmented linear map from data space onto the unit hypersphere."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidArgumentError, UnsupportedDimensionError

LINEAR = "linear"
CONSTANT = "constant"
RADIAL_MODES = (LINEAR, CONSTANT)
MAX_INPUT_DIM = 8


def ambient_dim_for(input_dim: int) -> int:
    if not 1 <= input_dim <= MAX_INPUT_DIM:
        raise UnsupportedDimensionError(
            f"{input_dim} input dimensions not supported: the sphere construction is capped at "
            f"ambient dimension 10 (at most {MAX_INPUT_DIM} inputs plus the bias)"
        )
    # one-dimensional inputs are embedded in S^2 with a zero coordinate
    return max(input_dim + 1, 3)


@dataclass(frozen=True, eq=False)
class SphereMapping:
    input_dim: int
    weights: np.ndarray
    bias: float = 1.0
    radial_mode: str = LINEAR

    def __post_init__(self):
        ambient_dim_for(self.input_dim)
        w = np.array(self.weights, dtype=float).reshape(-1)
        if w.shape != (self.input_dim,) or not np.all(w > 0) or not np.all(np.isfinite(w)):
            raise InvalidArgumentError(f"weights must be {self.input_dim} positive finite values, got {w}")
        if not (math.isfinite(self.bias) and self.bias > 0):
            raise InvalidArgumentError(f"bias must be positive, got {self.bias}")
        if self.radial_mode not in RADIAL_MODES:
            raise InvalidArgumentError(f"radial_mode must be one of {RADIAL_MODES}, got {self.radial_mode!r}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))

    @classmethod
    def default(cls, input_dim: int, radial_mode: str = LINEAR, bias: float = 1.0, weight: float = 1.0):
        return cls(input_dim, np.full(input_dim, float(weight)), bias, radial_mode)

    @property
    def ambient_dim(self) -> int:
        return ambient_dim_for(self.input_dim)

    def replace(self, **changes) -> "SphereMapping":
        values = dict(input_dim=self.input_dim, weights=self.weights, bias=self.bias, radial_mode=self.radial_mode)
        values.update(changes)
        return SphereMapping(**values)


def augment(weights, bias, X, ambient_dim):
    """``(w * x, [0,] b)`` for a batch; numpy or torch (``weights``/``bias`` as tensors)."""
    if torch.is_tensor(X) or torch.is_tensor(weights):
        X = torch.as_tensor(X, dtype=torch.float64)
        n = X.shape[0]
        parts = [X * weights]
        pad = ambient_dim - X.shape[1] - 1
        if pad:
            parts.append(torch.zeros((n, pad), dtype=torch.float64))
        parts.append(bias * torch.ones((n, 1), dtype=torch.float64))
        return torch.cat(parts, dim=1)
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    pad = ambient_dim - X.shape[1] - 1
    return np.concatenate([X * weights, np.zeros((n, pad)), np.full((n, 1), bias)], axis=1)


def project_batch(mapping: SphereMapping, X):
    """Rows of unit vectors ``u`` and radii ``r`` for a batch ``X`` (N x d_in)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != mapping.input_dim:
        raise InvalidArgumentError(f"expected inputs of shape (N, {mapping.input_dim}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        bad = np.flatnonzero(~np.all(np.isfinite(X), axis=1))
        raise InvalidArgumentError(f"non-finite inputs at rows {bad[:20].tolist()}")
    x_aug = augment(mapping.weights, mapping.bias, X, mapping.ambient_dim)
    r = np.linalg.norm(x_aug, axis=1)
    return x_aug / r[:, None], r


def project(mapping: SphereMapping, x):
    """Project one input vector; returns ``(u, r)``."""
    u, r = project_batch(mapping, np.asarray(x, dtype=float).reshape(1, -1))
    return u[0], float(r[0])


def project_torch(log_weights, log_bias, X, ambient_dim):
    x_aug = augment(torch.exp(log_weights), torch.exp(log_bias), X, ambient_dim)
    r = torch.linalg.vector_norm(x_aug, dim=1)
    return x_aug / r[:, None], r


def feature_scale(mapping: SphereMapping, r):
    """Multiplier applied to harmonic features: ``r`` (linear mode) or 1 (constant mode)."""
    if mapping.radial_mode == CONSTANT:
        return 1.0 if np.ndim(r) == 0 and not torch.is_tensor(r) else r * 0 + 1.0
    return r
