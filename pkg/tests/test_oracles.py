"""Sanity checks for the test-suite oracles themselves."""

import numpy as np
import pytest

from oracles import OracleReport, compare_volumes, oracle_f1, oracle_grad, oracle_resample


def test_oracle_grad_exact_on_quadratic():
    # central differences are exact for quadratics up to roundoff
    (grad,) = oracle_grad(lambda v: v[0] ** 2, [3.0], step=1e-4)
    assert abs(grad - 6.0) < 1e-6


def test_oracle_grad_multivariate():
    grad = oracle_grad(lambda v: v[0] * v[1] + 2 * v[1], [2.0, 5.0], step=1e-5)
    assert abs(grad[0] - 5.0) < 1e-6
    assert abs(grad[1] - 4.0) < 1e-6


def test_oracle_grad_rejects_non_finite():
    with pytest.raises(ValueError):
        oracle_grad(lambda v: float("nan"), [0.0])


def test_oracle_resample_constant_exact():
    volume = np.full((3, 5, 5), 0.6).tolist()
    out = np.array(oracle_resample(volume, (2, 4, 4)))
    assert np.abs(out - 0.6).max() < 1e-12


def test_oracle_resample_identity():
    rng = np.random.default_rng(8)
    volume = rng.random((4, 6, 6))
    out = np.array(oracle_resample(volume.tolist(), (4, 6, 6)))
    assert np.abs(out - volume).max() < 1e-6


def test_oracle_f1_perfect_and_disjoint():
    assert oracle_f1([1, 2, 1], [1, 2, 1]) == 1.0
    assert oracle_f1([1, 1, 1], [2, 2, 2]) == 0.0


def test_compare_volumes_reports_max():
    a = [[[0.0, 0.5]]]
    b = [[[0.25, 0.5]]]
    max_abs, max_rel = compare_volumes(a, b)
    assert max_abs == 0.25 and max_rel == 1.0


def test_oracle_report_text():
    report = OracleReport("demo", 10, 1e-7, 2e-7, 1e-5, True)
    assert "PASS" in str(report) and "demo" in str(report)
