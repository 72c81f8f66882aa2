"""Print how kernel variance spreads over harmonic levels for several kernels.

Usage: python scripts/export_spectrum.py [--dim 3] [--levels 10]
"""

import argparse

import numpy as np

from vish.harmonics import num_harmonics
from vish.kernels import KernelSpec, build_spectrum


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--dim", type=int, default=3, help="ambient sphere dimension d")
    parser.add_argument("--levels", type=int, default=10)
    args = parser.parse_args()

    kernels = {
        "arc_cosine": KernelSpec("arc_cosine"),
        "matern32_l0.1": KernelSpec("matern", lengthscale=0.1, nu=1.5),
        "matern52_l0.3": KernelSpec("matern", lengthscale=0.3, nu=2.5),
        "se_l0.3": KernelSpec("squared_exponential", lengthscale=0.3),
    }
    counts = np.array([num_harmonics(args.dim, l) for l in range(args.levels + 1)])
    print("level  count  " + "  ".join(f"{name:>14s}" for name in kernels))
    spectra = {name: build_spectrum(k, args.dim, args.levels) for name, k in kernels.items()}
    for l in range(args.levels + 1):
        mass = "  ".join(f"{spectra[n].coeffs[l] * counts[l]:14.3e}" for n in kernels)
        print(f"{l:5d}  {counts[l]:5d}  {mass}")
    print("variance captured up to the last level (unnormalised spectra):")
    for name, sp in spectra.items():
        print(f"  {name:>14s}: {float(np.sum(sp.coeffs * counts)):.6f}")


if __name__ == "__main__":
    main()
