"""Rule construction, cumulative-hazard evaluation, and the error bound."""

import math
from fractions import Fraction

import numpy as np
import pytest

from quadsurv.errors import ContractError, InvalidOrderError, NumericDomainError
from quadsurv.quadrature import (build_rule, cumulative_hazard,
                                 cumulative_hazard_hp, error_bound,
                                 legendre_eval)


# --- independent oracles -------------------------------------------------------

def p5(x):
    return (63 * x**5 - 70 * x**3 + 15 * x) / 8


def p5_prime(x):
    return (315 * x**4 - 210 * x**2 + 15) / 8


def bisect_root(f, lo, hi, iters=200):
    flo = f(lo)
    for _ in range(iters):
        mid = (lo + hi) / 2
        fm = f(mid)
        if fm == 0.0:
            return mid
        if (flo < 0) == (fm < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return (lo + hi) / 2


def oracle_rule_5():
    """Bisection root finder on the explicit degree-5 polynomial."""
    # brackets from the Chebyshev angles, padded
    brackets = [(-0.95, -0.85), (-0.6, -0.45), (-0.1, 0.1), (0.45, 0.6), (0.85, 0.95)]
    nodes = [bisect_root(p5, lo, hi) for lo, hi in brackets]
    weights = [2.0 / ((1 - x * x) * p5_prime(x) ** 2) for x in nodes]
    return np.array(nodes), np.array(weights)


# --- build_rule ------------------------------------------------------------------

def test_k1_analytic():
    rule = build_rule(1)
    assert rule.canonical_nodes.tolist() == [0.0]
    assert rule.weights.tolist() == [2.0]
    assert rule.unit_nodes.tolist() == [0.5]


def test_k2_analytic():
    rule = build_rule(2)
    root = 1.0 / math.sqrt(3.0)
    np.testing.assert_allclose(rule.canonical_nodes, [-root, root], atol=1e-15)
    np.testing.assert_allclose(rule.weights, [1.0, 1.0], atol=1e-15)


def test_k5_matches_bisection_oracle():
    rule = build_rule(5)
    nodes, weights = oracle_rule_5()
    np.testing.assert_allclose(rule.canonical_nodes, nodes, atol=1e-12)
    np.testing.assert_allclose(rule.weights, weights, atol=1e-12)
    # frozen reference values for the positive half
    np.testing.assert_allclose(
        rule.canonical_nodes[3:], [0.5384693101056831, 0.9061798459386640], atol=1e-12)
    np.testing.assert_allclose(
        rule.weights[2:], [0.5688888888888889, 0.4786286704993665,
                           0.2369268850561891], atol=1e-12)


@pytest.mark.parametrize("k", [1, 2, 3, 5, 8, 13, 16, 33, 64])
def test_rule_invariants(k):
    rule = build_rule(k)
    xi, w = rule.canonical_nodes, rule.weights
    assert abs(w.sum() - 2.0) < 1e-12
    assert np.all(np.diff(xi) > 0)
    assert np.all((xi > -1) & (xi < 1))
    assert np.all(w > 0)
    # roots of P_K
    for x in xi:
        p, _ = legendre_eval(k, x)
        assert abs(p) < 1e-12
    # symmetry about zero
    np.testing.assert_allclose(xi, -xi[::-1], atol=1e-12)
    # weight formula
    for x, weight in zip(xi, w):
        _, dp = legendre_eval(k, x)
        assert abs(weight - 2.0 / ((1 - x * x) * dp * dp)) < 1e-12
    # unit nodes are the affine image
    np.testing.assert_allclose(rule.unit_nodes, (xi + 1) / 2, atol=1e-15)


def test_rule_is_cached_and_deterministic():
    assert build_rule(7) is build_rule(7)
    a = build_rule(9)
    build_rule.cache_clear()
    b = build_rule(9)
    assert np.array_equal(a.canonical_nodes, b.canonical_nodes)
    assert np.array_equal(a.weights, b.weights)


def test_rule_arrays_immutable():
    rule = build_rule(4)
    with pytest.raises(ValueError):
        rule.weights[0] = 0.0


@pytest.mark.parametrize("bad", [0, -1, 65, 1000])
def test_invalid_order_rejected(bad):
    with pytest.raises(InvalidOrderError):
        build_rule(bad)


# --- legendre_eval ----------------------------------------------------------------

def test_legendre_trivial_cases():
    assert legendre_eval(0, 0.7) == (1.0, 0.0)
    p, dp = legendre_eval(2, 0.5)
    assert abs(p - (-0.125)) < 1e-15
    assert abs(dp - 1.5) < 1e-15


def test_legendre_endpoints_exact():
    for k in range(1, 20):
        p, _ = legendre_eval(k, 1.0)
        assert p == 1.0
        p, _ = legendre_eval(k, -1.0)
        assert p == (-1.0) ** k


def test_legendre_degree6_vs_monomial_expansion():
    # P_6(x) = (231 x^6 - 315 x^4 + 105 x^2 - 5) / 16, exact in rationals
    x = Fraction(3, 10)
    exact = (231 * x**6 - 315 * x**4 + 105 * x**2 - 5) / 16
    exact_dp = (6 * 231 * x**5 - 4 * 315 * x**3 + 2 * 105 * x) / 16
    p, dp = legendre_eval(6, 0.3)
    assert abs(p - float(exact)) < 1e-14
    assert abs(dp - float(exact_dp)) < 1e-13


# --- cumulative_hazard ---------------------------------------------------------------

def test_constant_hazard():
    for k in (1, 2, 5, 10):
        rule = build_rule(k)
        assert abs(cumulative_hazard(rule, lambda s: 3.0, 2.0) - 6.0) < 1e-12


def test_zero_time_is_exact_zero():
    rule = build_rule(4)
    assert cumulative_hazard(rule, lambda s: 1e300, 0.0) == 0.0


def test_cubic_exact_at_k2():
    rule = build_rule(2)
    # degree 3 = 2K - 1, so the rule integrates s^3 exactly: t^4 / 4
    assert abs(cumulative_hazard(rule, lambda s: s**3, 1.0) - 0.25) < 1e-15


def test_exponential_hazard_within_bound():
    rule = build_rule(3)
    val = cumulative_hazard(rule, np.exp, 1.0)
    err = abs(val - (math.e - 1.0))
    assert err <= error_bound(rule, 1.0, math.e)
    assert err < 2e-6


def test_polynomial_exactness_property():
    for k in range(1, 9):
        rule = build_rule(k)
        for d in range(0, 2 * k):
            for t in (0.5, 1.0, 3.0):
                approx = cumulative_hazard(rule, lambda s, d=d: s**d, t)
                exact = t ** (d + 1) / (d + 1)
                assert abs(approx - exact) < 1e-10, (k, d, t)


def test_bound_validity_for_exponential():
    # the bound certifies truncation error, so measure it above float64
    # round-off: the extended-precision evaluator keeps the comparison clean
    # even where the bound is below one ulp of the result
    for k in (2, 3, 4, 5):
        rule = build_rule(k)
        for t in (0.5, 1.0, 2.0):
            approx = cumulative_hazard_hp(rule, np.exp, t)
            exact = np.expm1(np.longdouble(t))
            assert abs(float(approx - exact)) <= error_bound(rule, t, math.exp(t)), (k, t)


def test_monotone_convergence_on_sinusoid():
    # anti-phase oscillating hazard from the node study, x = 0 group
    def lam(s):
        return 1.0 + 0.8 * np.sin(4.0 * s)

    t = 2.0
    exact = t + 0.2 * (1.0 - np.cos(4.0 * t))
    errors = [abs(cumulative_hazard(build_rule(k), lam, t) - exact)
              for k in (3, 5, 7, 10)]
    assert all(e1 >= e2 for e1, e2 in zip(errors, errors[1:]))


def test_scale_covariance():
    rule = build_rule(6)
    base = cumulative_hazard(rule, lambda s: math.sin(s) + 1.5, 2.5)
    scaled = cumulative_hazard(rule, lambda s: 7.25 * (math.sin(s) + 1.5), 2.5)
    assert abs(scaled - 7.25 * base) < 1e-12 * abs(scaled)


def test_nonfinite_hazard_raises_with_node_time():
    rule = build_rule(3)

    def bad(s):
        return math.inf if s > 0.5 else 1.0

    with pytest.raises(NumericDomainError) as exc:
        cumulative_hazard(rule, bad, 1.0)
    assert exc.value.node_time is not None
    assert exc.value.node_time > 0.5


def test_negative_time_rejected():
    rule = build_rule(2)
    with pytest.raises(ContractError):
        cumulative_hazard(rule, lambda s: 1.0, -1.0)


# --- error_bound -------------------------------------------------------------------

def test_bound_zero_cases():
    rule = build_rule(1)
    assert error_bound(rule, 1.0, 0.0) == 0.0
    assert error_bound(rule, 0.0, 5.0) == 0.0


def test_bound_k3_exact_fraction():
    # t = 1: coefficient is (3!)^4 / (7 * (6!)^3), times deriv_max = e
    coeff = Fraction(math.factorial(3) ** 4,
                     7 * math.factorial(6) ** 3)
    rule = build_rule(3)
    expected = float(coeff) * math.e
    assert abs(error_bound(rule, 1.0, math.e) - expected) < 1e-18


def test_bound_k2_t2_exact_fraction():
    # 2^5 * (2!)^4 / (5 * (4!)^3) = 512 / 69120
    expected = float(Fraction(512, 69120))
    rule = build_rule(2)
    assert abs(error_bound(rule, 2.0, 1.0) - expected) < 1e-15


def test_bound_no_overflow_at_k64():
    rule = build_rule(64)
    b = error_bound(rule, 2.0, 1e6)
    assert b >= 0.0
    assert math.isfinite(b)
    # log-space check against lgamma arithmetic
    k = 64
    log_expected = (129 * math.log(2.0) + 4 * math.lgamma(65) - math.log(129)
                    - 3 * math.lgamma(129) + math.log(1e6))
    assert abs(math.log(b) - log_expected) < 1e-9


def test_rule_json_dump_schema():
    rule = build_rule(3)
    d = rule.as_dict()
    assert set(d) == {"K", "nodes", "weights"}
    assert d["K"] == 3
    assert len(d["nodes"]) == len(d["weights"]) == 3
