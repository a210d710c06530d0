"""Influence kernels: radial communication weights and their tail integrals.

A kernel is the nonincreasing, strictly positive radial profile that weighs
pairwise interactions by distance, normalized to 1 at distance zero.  Two
families are provided: the algebraic ``1/(1+r^2)^beta`` profile and a
tabulated profile interpolated monotonically from sample points.  Kernels are
immutable and all methods are pure, so instances are safe to share across
threads.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import PchipInterpolator

__all__ = [
    "CuckerSmaleKernel",
    "TabulatedKernel",
    "UnsupportedKernelError",
    "kernel_from_config",
]

# Relative size of the analytic remainder at which the tail quadrature stops.
_TAIL_REMAINDER_REL = 1e-10


class UnsupportedKernelError(Exception):
    """The requested operation needs a kernel capability this family lacks."""


def _check_radii(r):
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("kernel radius must be nonnegative")
    return r


def _as_input_shape(values, r):
    if np.ndim(r) == 0:
        return float(values)
    return values


class CuckerSmaleKernel:
    """Algebraic profile ``(1 + r^2)^{-beta}`` with ``beta >= 0``.

    ``beta = 0`` gives the flat kernel (identically 1).  The profile is
    normalized, nonincreasing and strictly positive, and its log-derivative
    is bounded: ``|d/dr psi| <= 2 beta psi`` everywhere.
    """

    def __init__(self, beta: float):
        beta = float(beta)
        if beta < 0 or not math.isfinite(beta):
            raise ValueError(f"beta must be a finite nonnegative real, got {beta}")
        self.beta = beta

    def __repr__(self):
        return f"CuckerSmaleKernel(beta={self.beta})"

    @property
    def log_deriv_bound(self) -> float:
        """Constant C with ``|psi'| <= C psi``; 2*beta for this family."""
        return 2.0 * self.beta

    def eval(self, r):
        """Profile value at radius ``r`` (scalar or array), in (0, 1]."""
        r = _check_radii(r)
        if self.beta == 0.0:
            out = np.ones_like(r)
        else:
            out = (1.0 + r * r) ** (-self.beta)
        return _as_input_shape(out, r)

    def eval_deriv(self, r):
        """Radial derivative of the profile; nonpositive everywhere."""
        r = _check_radii(r)
        if self.beta == 0.0:
            out = np.zeros_like(r)
        else:
            out = -2.0 * self.beta * r * (1.0 + r * r) ** (-self.beta - 1.0)
        return _as_input_shape(out, r)

    def tail_integral(self, R: float) -> float:
        """Integral of the profile from ``R`` to infinity.

        Returns ``math.inf`` for ``beta <= 1/2`` (divergent tail, the
        unconditional-flocking regime).  Otherwise integrates adaptively over
        geometrically growing panels ``[a, 2a]`` until the analytic remainder
        bound ``a^(1-2 beta) / (2 beta - 1)`` drops below 1e-10 of the partial
        sum, then adds that bound (the true remainder is just below it, so
        adding it keeps the relative error under 1e-10).
        """
        R = float(R)
        if R < 0:
            raise ValueError(f"tail integral lower limit must be nonnegative, got {R}")
        if self.beta <= 0.5:
            return math.inf

        def profile(s):
            return (1.0 + s * s) ** (-self.beta)

        def remainder_bound(a):
            return a ** (1.0 - 2.0 * self.beta) / (2.0 * self.beta - 1.0)

        total = 0.0
        lo = R
        hi = max(2.0 * R, R + 1.0)
        while True:
            piece, _ = quad(profile, lo, hi, epsabs=1e-14, epsrel=1e-12, limit=200)
            total += piece
            if remainder_bound(hi) < _TAIL_REMAINDER_REL * total:
                return total + remainder_bound(hi)
            lo, hi = hi, 2.0 * hi

    def to_config(self) -> dict:
        return {"family": "cucker-smale", "beta": self.beta}


class TabulatedKernel:
    """Monotone piecewise-cubic profile through ``(radii, values)`` samples.

    The table must start at radius 0 with value 1 (normalization) and the
    values must be positive and nonincreasing.  Beyond the last node the
    profile extends as a constant, which keeps it positive and nonincreasing;
    the derivative there is 0.  Tail integrals are unsupported (a tabulated
    profile carries no tail model).
    """

    def __init__(self, radii, values):
        radii = np.asarray(radii, dtype=float)
        values = np.asarray(values, dtype=float)
        if radii.ndim != 1 or radii.shape != values.shape or radii.size < 2:
            raise ValueError("radii and values must be equal-length 1-d arrays with >= 2 nodes")
        if np.any(np.diff(radii) <= 0):
            raise ValueError("radii must be strictly increasing")
        if radii[0] != 0.0 or values[0] != 1.0:
            raise ValueError("tabulated profile must start at radius 0 with value 1")
        if np.any(values <= 0):
            raise ValueError("tabulated values must be strictly positive")
        if np.any(np.diff(values) > 0):
            raise ValueError("tabulated values must be nonincreasing")
        self.radii = radii.copy()
        self.values = values.copy()
        self.radii.flags.writeable = False
        self.values.flags.writeable = False
        self._interp = PchipInterpolator(radii, values, extrapolate=False)
        self._interp_deriv = self._interp.derivative()

    def __repr__(self):
        return f"TabulatedKernel({self.radii.size} nodes, last radius {self.radii[-1]})"

    @property
    def log_deriv_bound(self):
        """No certified log-derivative bound for a tabulated profile."""
        return None

    def eval(self, r):
        r = _check_radii(r)
        inside = np.minimum(r, self.radii[-1])
        out = self._interp(inside)
        return _as_input_shape(np.asarray(out, dtype=float), r)

    def eval_deriv(self, r):
        r = _check_radii(r)
        inside = np.minimum(r, self.radii[-1])
        out = np.asarray(self._interp_deriv(inside), dtype=float)
        out = np.where(r >= self.radii[-1], 0.0, out)
        return _as_input_shape(out, r)

    def tail_integral(self, R: float) -> float:
        raise UnsupportedKernelError(
            "tail integral of a tabulated kernel is undefined (no tail model)"
        )

    def to_config(self) -> dict:
        return {
            "family": "tabulated",
            "radii": [float(x) for x in self.radii],
            "values": [float(x) for x in self.values],
        }


def kernel_from_config(spec: dict):
    """Build a kernel from its config mapping (see README for the schema)."""
    if not isinstance(spec, dict) or "family" not in spec:
        raise ValueError("kernel config must be a mapping with a 'family' key")
    family = spec["family"]
    if family == "cucker-smale":
        return CuckerSmaleKernel(spec["beta"])
    if family == "tabulated":
        return TabulatedKernel(spec["radii"], spec["values"])
    raise ValueError(f"unknown kernel family {family!r}")
