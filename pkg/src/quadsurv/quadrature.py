"""Gauss-Legendre rules and cumulative-hazard evaluation over [0, t].

A K-point rule integrates the hazard over a subject-specific interval by
mapping the canonical nodes to (0, 1) and scaling by t/2.  Rule construction
uses Newton iteration on the Legendre recurrence; the reference evaluator
accumulates in 80-bit extended precision so that the polynomial-exactness
guarantee survives at large integral magnitudes, where plain float64
round-off exceeds the certified truncation error.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, InvalidOrderError, NumericDomainError

MAX_ORDER = 64

_LD = np.longdouble


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights of a K-point Gauss-Legendre rule.

    ``canonical_nodes`` are the roots of the K-th Legendre polynomial in
    ascending order, ``unit_nodes`` their images under x -> (x + 1) / 2,
    and ``weights`` the standard weights summing to 2.  The ``*_hp``
    fields hold extended-precision copies used by the reference evaluator.
    """

    order: int
    canonical_nodes: np.ndarray
    unit_nodes: np.ndarray
    weights: np.ndarray
    unit_nodes_hp: np.ndarray = field(repr=False)
    weights_hp: np.ndarray = field(repr=False)

    def __post_init__(self):
        for arr in (self.canonical_nodes, self.unit_nodes, self.weights,
                    self.unit_nodes_hp, self.weights_hp):
            arr.setflags(write=False)

    def as_dict(self) -> dict:
        return {
            "K": self.order,
            "nodes": [float(x) for x in self.canonical_nodes],
            "weights": [float(w) for w in self.weights],
        }


def legendre_eval(k: int, x: float) -> tuple[float, float]:
    """Value and derivative of the k-th Legendre polynomial at x.

    Uses the three-term recurrence together with the derivative
    recurrence P'_n = P'_{n-2} + (2n - 1) P_{n-1}, which stays finite at
    the interval endpoints.
    """
    if k < 0:
        raise ContractError("Legendre degree must be nonnegative")
    if k == 0:
        return 1.0, 0.0
    p_prev, p = 1.0, float(x)
    dp_prev, dp = 0.0, 1.0
    for n in range(2, k + 1):
        p_next = ((2 * n - 1) * x * p - (n - 1) * p_prev) / n
        dp_next = dp_prev + (2 * n - 1) * p
        p_prev, p = p, p_next
        dp_prev, dp = dp, dp_next
    return p, dp


def _legendre_eval_hp(k, x):
    one = _LD(1.0)
    if k == 0:
        return one, _LD(0.0)
    p_prev, p = one, x
    dp_prev, dp = _LD(0.0), one
    for n in range(2, k + 1):
        n_ld = _LD(n)
        p_next = ((2 * n_ld - 1) * x * p - (n_ld - 1) * p_prev) / n_ld
        dp_next = dp_prev + (2 * n_ld - 1) * p
        p_prev, p = p, p_next
        dp_prev, dp = dp, dp_next
    return p, dp


@functools.lru_cache(maxsize=None)
def build_rule(k: int) -> QuadratureRule:
    """Construct (and cache) the K-point rule.

    Roots are found by Newton iteration seeded with the Chebyshev-angle
    approximation cos(pi (j - 1/4) / (K + 1/2)); each positive root is
    mirrored to its negative partner so the node set is exactly symmetric.
    """
    if not isinstance(k, (int, np.integer)) or isinstance(k, bool):
        raise InvalidOrderError(f"quadrature order must be an integer, got {k!r}")
    if k < 1 or k > MAX_ORDER:
        raise InvalidOrderError(f"quadrature order must be in [1, {MAX_ORDER}], got {k}")

    nodes = np.empty(k, dtype=_LD)
    weights = np.empty(k, dtype=_LD)
    for j in range(k // 2):
        # seed for the (j+1)-th largest root
        x = _LD(math.cos(math.pi * (j + 0.75) / (k + 0.5)))
        for _ in range(100):
            p, dp = _legendre_eval_hp(k, x)
            delta = -p / dp
            x = x + delta
            if abs(float(delta)) < 1e-18:
                break
        _, dp = _legendre_eval_hp(k, x)
        w = 2 / ((1 - x * x) * dp * dp)
        nodes[k - 1 - j] = x
        nodes[j] = -x
        weights[j] = w
        weights[k - 1 - j] = w
    if k % 2 == 1:
        mid = k // 2
        nodes[mid] = _LD(0.0)
        _, dp = _legendre_eval_hp(k, _LD(0.0))
        weights[mid] = 2 / (dp * dp)

    unit_hp = (nodes + 1) / 2
    return QuadratureRule(
        order=int(k),
        canonical_nodes=nodes.astype(np.float64),
        unit_nodes=unit_hp.astype(np.float64),
        weights=weights.astype(np.float64),
        unit_nodes_hp=unit_hp,
        weights_hp=weights.copy(),
    )


def cumulative_hazard_hp(rule: QuadratureRule,
                         hazard_at: Callable[[float], float],
                         t: float):
    """Extended-precision quadrature sum (t/2) sum_k w_k hazard(t tau_k).

    Node times are passed to ``hazard_at`` as longdouble scalars, so
    callables built from numpy ufuncs keep the extra precision.
    """
    if not math.isfinite(t) or t < 0:
        raise ContractError(f"time must be finite and nonnegative, got {t}")
    if t == 0:
        return _LD(0.0)
    t_hp = _LD(t)
    total = _LD(0.0)
    for tau, w in zip(rule.unit_nodes_hp, rule.weights_hp):
        s = t_hp * tau
        lam = hazard_at(s)
        if not math.isfinite(float(lam)) or float(lam) < 0:
            raise NumericDomainError(
                f"hazard value {float(lam)!r} at node time {float(s)}",
                node_time=float(s))
        total = total + w * _LD(lam)
    return (t_hp / 2) * total


def cumulative_hazard(rule: QuadratureRule,
                      hazard_at: Callable[[float], float],
                      t: float) -> float:
    """Approximate integral of the hazard over [0, t]; 0 exactly at t = 0."""
    return float(cumulative_hazard_hp(rule, hazard_at, t))


def error_bound(rule: QuadratureRule, t: float, deriv_max: float) -> float:
    """Certified truncation bound t^(2K+1) (K!)^4 / ((2K+1) ((2K)!)^3) * deriv_max.

    ``deriv_max`` bounds the 2K-th time derivative of the hazard on [0, t].
    Evaluated through log-gamma so the factorial ratio neither overflows
    nor underflows for any supported order.
    """
    if not math.isfinite(t) or t < 0:
        raise ContractError(f"time must be finite and nonnegative, got {t}")
    if deriv_max < 0:
        raise ContractError(f"derivative bound must be nonnegative, got {deriv_max}")
    if t == 0.0 or deriv_max == 0.0:
        return 0.0
    k = rule.order
    log_coeff = ((2 * k + 1) * math.log(t)
                 + 4 * math.lgamma(k + 1)
                 - math.log(2 * k + 1)
                 - 3 * math.lgamma(2 * k + 1))
    return math.exp(log_coeff + math.log(deriv_max))
