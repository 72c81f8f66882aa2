"""Model persistence as a self-describing JSON document.

Floats are written with Python's shortest round-trip repr, so a
load-save-load cycle is value-identical. Harmonic levels are stored as their
fundamental points; the Gram factors are recomputed on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .harmonics import HarmonicBasis, level_from_points
from .kernels import KernelSpec, ZonalSpectrum
from .sphere_map import SphereMapping
from .svgp import InducingBasis, Likelihood, VariationalState, VishModel

FORMAT_VERSION = 1


@dataclass
class Normalization:
    input_mean: list | None = None
    input_std: list | None = None
    target_mean: float = 0.0
    target_std: float = 1.0

    def apply_inputs(self, X):
        if self.input_mean is None:
            return X
        return (X - np.asarray(self.input_mean)) / np.asarray(self.input_std)

    def to_dict(self):
        return dict(vars(self))


@dataclass
class ModelFile:
    model: VishModel
    normalization: Normalization = field(default_factory=Normalization)
    feature_names: list = field(default_factory=list)
    target_column: str | None = None
    config: dict = field(default_factory=dict)


def _array(a):
    return np.asarray(a, dtype=float).tolist()


def model_to_dict(mf: ModelFile) -> dict:
    m = mf.model
    basis = m.basis.harmonic_basis
    return {
        "format_version": FORMAT_VERSION,
        "config": mf.config,
        "feature_names": list(mf.feature_names),
        "target_column": mf.target_column,
        "normalization": mf.normalization.to_dict(),
        "kernel": m.kernel.to_dict(),
        "mapping": {
            "input_dim": m.mapping.input_dim,
            "weights": _array(m.mapping.weights),
            "bias": m.mapping.bias,
            "radial_mode": m.mapping.radial_mode,
        },
        "basis": {
            "ambient_dim": basis.ambient_dim,
            "max_degree": basis.max_degree,
            "levels": [
                {"degree": lv.degree, "seed": lv.rng_seed, "fundamental_points": _array(lv.fundamental_points)}
                for lv in basis.levels
            ],
        },
        "spectrum": {
            "max_degree": m.spectrum.max_degree,
            "normalized": m.spectrum.normalized,
            "coeffs": _array(m.spectrum.coeffs),
        },
        "variational": {"mean": _array(m.variational.mean), "cov_factor": _array(m.variational.cov_factor)},
        "likelihood": m.likelihood.to_dict(),
    }


def model_from_dict(data: dict) -> ModelFile:
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise InvalidArgumentError(f"unsupported model format version {version!r}")
    try:
        kernel = KernelSpec.from_dict(data["kernel"])
        mp = data["mapping"]
        mapping = SphereMapping(int(mp["input_dim"]), np.array(mp["weights"]), float(mp["bias"]), mp["radial_mode"])
        b = data["basis"]
        d = int(b["ambient_dim"])
        levels = tuple(
            level_from_points(d, int(lv["degree"]), np.array(lv["fundamental_points"]).reshape(-1, d), int(lv["seed"]))
            for lv in b["levels"]
        )
        harmonic_basis = HarmonicBasis(d, int(b["max_degree"]), levels)
        sp = data["spectrum"]
        coeffs = np.array(sp["coeffs"], dtype=float)
        coeffs.setflags(write=False)
        spectrum = ZonalSpectrum(kernel, int(sp["max_degree"]), coeffs, bool(sp["normalized"]))
        var = data["variational"]
        variational = VariationalState(np.array(var["mean"]), np.array(var["cov_factor"]))
        model = VishModel(kernel, mapping, InducingBasis(harmonic_basis, spectrum), variational,
                          Likelihood.from_dict(data["likelihood"]))
    except (KeyError, TypeError) as exc:
        raise InvalidArgumentError(f"malformed model file: {exc!r}") from None
    return ModelFile(
        model,
        Normalization(**data.get("normalization", {})),
        list(data.get("feature_names", [])),
        data.get("target_column"),
        data.get("config", {}),
    )


def save_model(path, mf: ModelFile):
    with open(path, "w") as fh:
        json.dump(model_to_dict(mf), fh, indent=1)
        fh.write("\n")


def load_model(path) -> ModelFile:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidArgumentError(f"model file is not valid JSON: {exc}") from None
    return model_from_dict(data)
