"""Kernel profile, derivative and tail-integral checks against closed forms."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from flockdde.kernel import (
    CuckerSmaleKernel,
    TabulatedKernel,
    UnsupportedKernelError,
    kernel_from_config,
)


def test_eval_normalization_at_zero():
    for beta in (0.0, 0.25, 1.0, 3.7):
        assert CuckerSmaleKernel(beta).eval(0.0) == 1.0


def test_flat_kernel_is_identically_one():
    k = CuckerSmaleKernel(0.0)
    assert k.eval(17.3) == 1.0
    assert k.eval_deriv(123.4) == 0.0


def test_eval_beta_one_closed_form():
    k = CuckerSmaleKernel(1.0)
    assert k.eval(1.0) == pytest.approx(0.5, abs=0, rel=1e-15)


def test_eval_rejects_negative_radius():
    k = CuckerSmaleKernel(1.0)
    with pytest.raises(ValueError):
        k.eval(-0.1)
    with pytest.raises(ValueError):
        k.eval_deriv(np.array([0.5, -1e-9]))
    with pytest.raises(ValueError):
        k.tail_integral(-1.0)


def test_eval_deriv_closed_forms():
    assert CuckerSmaleKernel(1.0).eval_deriv(1.0) == pytest.approx(-0.5, rel=1e-14)
    # d/dr (1+r^2)^(-1/4) at r=2 via the chain rule
    expected = -2.0 * 0.25 * 2.0 * 5.0 ** (-1.25)
    assert CuckerSmaleKernel(0.25).eval_deriv(2.0) == pytest.approx(expected, rel=1e-14)


def test_eval_deriv_matches_central_difference_with_order_two():
    k = CuckerSmaleKernel(1.3)
    rng = np.random.default_rng(7)
    radii = rng.uniform(0.3, 3.0, size=20)
    errs = {}
    for h in (1e-3, 1e-4):
        fd = (k.eval(radii + h) - k.eval(radii - h)) / (2 * h)
        errs[h] = np.max(np.abs(fd - k.eval_deriv(radii)))
    order = math.log10(errs[1e-3] / errs[1e-4])
    assert order >= 1.9


def test_monotone_nonincreasing_sampled():
    rng = np.random.default_rng(3)
    for kernel in (
        CuckerSmaleKernel(0.0),
        CuckerSmaleKernel(0.6),
        TabulatedKernel([0.0, 1.0, 2.0, 5.0], [1.0, 0.5, 0.2, 0.1]),
    ):
        r = np.sort(rng.uniform(0.0, 8.0, size=200))
        v = kernel.eval(r)
        assert np.all(np.diff(v) <= 1e-15)
        assert np.all(v > 0)
        assert np.all(v <= 1.0)


def test_log_derivative_bound_sampled():
    for beta in (0.25, 1.0, 2.0):
        k = CuckerSmaleKernel(beta)
        r = np.random.default_rng(11).uniform(0.0, 50.0, size=10_000)
        ratio = np.abs(k.eval_deriv(r)) / k.eval(r)
        assert ratio.max() <= 2 * beta + 1e-12


def test_tail_integral_divergent_for_heavy_tails():
    assert CuckerSmaleKernel(0.25).tail_integral(0.0) == math.inf
    assert CuckerSmaleKernel(0.5).tail_integral(3.0) == math.inf
    assert CuckerSmaleKernel(0.0).tail_integral(0.0) == math.inf


def test_tail_integral_beta_one_closed_form():
    k = CuckerSmaleKernel(1.0)
    for R in (0.0, 1.0, 10.0):
        exact = math.pi / 2 - math.atan(R)
        assert abs(k.tail_integral(R) - exact) <= 1e-9 * exact


def test_tail_integral_quadrature_oracle():
    # independent oracle: adaptive quadrature on a split finite range plus the
    # same analytic remainder at a far larger cutoff
    k = CuckerSmaleKernel(0.8)
    R = 0.5
    cut = 1e9
    oracle = 0.0
    lo = R
    for hi in (R + 1, 10.0, 1e3, 1e6, cut):
        part, _ = quad(lambda s: (1 + s * s) ** -0.8, lo, hi, epsabs=1e-14, epsrel=1e-13)
        oracle += part
        lo = hi
    oracle += cut ** (1 - 1.6) / 0.6
    assert k.tail_integral(R) == pytest.approx(oracle, rel=1e-9)


def test_tail_additivity():
    for beta in (0.75, 1.0, 2.0):
        k = CuckerSmaleKernel(beta)
        r1, r2 = 0.3, 4.2
        middle, _ = quad(k.eval, r1, r2, epsabs=1e-14, epsrel=1e-13)
        lhs = k.tail_integral(r1)
        rhs = k.tail_integral(r2) + middle
        assert lhs == pytest.approx(rhs, rel=1e-9)


def test_tabulated_interpolation_and_extension():
    k = TabulatedKernel([0.0, 1.0, 2.0], [1.0, 0.4, 0.2])
    assert k.eval(0.0) == 1.0
    assert k.eval(1.0) == pytest.approx(0.4, rel=1e-15)
    # constant extension beyond the last node
    assert k.eval(2.0) == pytest.approx(0.2, rel=1e-15)
    assert k.eval(10.0) == pytest.approx(0.2, rel=1e-15)
    assert k.eval_deriv(10.0) == 0.0
    assert np.all(np.asarray(k.eval_deriv(np.linspace(0, 5, 50))) <= 1e-15)


def test_tabulated_validation():
    with pytest.raises(ValueError):
        TabulatedKernel([0.5, 1.0], [1.0, 0.5])  # must start at r=0
    with pytest.raises(ValueError):
        TabulatedKernel([0.0, 1.0], [0.9, 0.5])  # must be normalized
    with pytest.raises(ValueError):
        TabulatedKernel([0.0, 1.0, 2.0], [1.0, 0.2, 0.5])  # increasing segment
    with pytest.raises(ValueError):
        TabulatedKernel([0.0, 1.0], [1.0, -0.1])  # nonpositive value


def test_tabulated_tail_unsupported():
    k = TabulatedKernel([0.0, 1.0], [1.0, 0.5])
    with pytest.raises(UnsupportedKernelError):
        k.tail_integral(0.0)


def test_config_round_trip():
    k = kernel_from_config({"family": "cucker-smale", "beta": 0.25})
    assert isinstance(k, CuckerSmaleKernel) and k.beta == 0.25
    t = kernel_from_config({"family": "tabulated", "radii": [0, 1], "values": [1, 0.5]})
    assert isinstance(t, TabulatedKernel)
    assert kernel_from_config(k.to_config()).beta == k.beta
    with pytest.raises(ValueError):
        kernel_from_config({"family": "morse"})
