"""Censoring-aware evaluation metrics.

The censoring survival function G is estimated by Kaplan-Meier on the
training split with the event indicator flipped.  All inverse-probability
weights are capped at 10.  G is evaluated at its left limit for
event-subject weights, the standard convention that keeps a subject from
weighting itself through its own censoring mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, HorizonError, UndefinedMetricError

IPCW_CAP = 10.0
SURVIVAL_CLAMP = 1e-7


# --- step functions and Kaplan-Meier -----------------------------------------

@dataclass
class StepFunction:
    """Right-continuous step function; value before the first jump is 1."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(np.diff(self.times) <= 0):
            raise ContractError("step function times must be strictly increasing")

    def __call__(self, t, side: str = "right"):
        """Value at t; ``side='left'`` gives the left limit."""
        t = np.asarray(t, dtype=np.float64)
        where = "right" if side == "right" else "left"
        idx = np.searchsorted(self.times, t, side=where) - 1
        out = np.where(idx >= 0, self.values[np.clip(idx, 0, None)], 1.0)
        return out if out.ndim else float(out)


def kaplan_meier(times, events) -> StepFunction:
    """Product-limit estimator of the survival function of the indicated event."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events)
    if len(times) == 0:
        raise ContractError("kaplan_meier requires a nonempty sample")
    if np.any(times < 0):
        raise ContractError("times must be nonnegative")
    order = np.argsort(times, kind="mergesort")
    t_sorted = times[order]
    e_sorted = events[order].astype(np.int64)
    uniq, start = np.unique(t_sorted, return_index=True)
    counts = np.diff(np.append(start, len(t_sorted)))
    deaths = np.add.reduceat(e_sorted, start)
    at_risk = len(t_sorted) - np.append(0, np.cumsum(counts))[:-1]
    surv = np.cumprod(1.0 - deaths / at_risk)
    jumps = deaths > 0
    if not np.any(jumps):
        return StepFunction(uniq[-1:], np.array([1.0]))
    return StepFunction(uniq[jumps], surv[jumps])


def censoring_survival(times, events) -> StepFunction:
    """Kaplan-Meier estimate of the censoring distribution (flipped indicator)."""
    events = np.asarray(events)
    return kaplan_meier(times, 1 - events)


# --- prediction container -----------------------------------------------------

class SurvivalCurves:
    """Per-subject survival probabilities over a shared ascending grid."""

    def __init__(self, grid, values):
        self.grid = np.asarray(grid, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64)
        if self.grid.ndim != 1 or np.any(np.diff(self.grid) <= 0):
            raise ContractError("prediction grid must be strictly ascending")
        if self.values.ndim != 2 or self.values.shape[1] != len(self.grid):
            raise ContractError(
                f"prediction matrix {self.values.shape} does not match grid "
                f"length {len(self.grid)}")

    @property
    def n_subjects(self):
        return self.values.shape[0]

    def at_times(self, ts):
        """Linear interpolation at arbitrary times, shape (n_subjects, len(ts)).

        Anchored at S(0) = 1; constant extrapolation past the last grid point.
        """
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        grid = np.concatenate([[0.0], self.grid]) if self.grid[0] > 0 else self.grid
        vals = (np.hstack([np.ones((self.n_subjects, 1)), self.values])
                if self.grid[0] > 0 else self.values)
        idx = np.clip(np.searchsorted(grid, ts, side="right") - 1, 0, len(grid) - 2)
        t0, t1 = grid[idx], grid[idx + 1]
        frac = np.where(t1 > t0, (ts - t0) / (t1 - t0), 0.0)
        frac = np.clip(frac, 0.0, 1.0)
        return vals[:, idx] * (1.0 - frac) + vals[:, idx + 1] * frac

    def at_own_times(self, ts):
        """S_i(t_i) for one time per subject."""
        ts = np.asarray(ts, dtype=np.float64)
        if len(ts) != self.n_subjects:
            raise ContractError("need exactly one time per subject")
        full = self.at_times(ts)
        return full[np.arange(len(ts)), np.arange(len(ts))]


# --- IPCW weights --------------------------------------------------------------

def _capped_inverse(g_values):
    g = np.asarray(g_values, dtype=np.float64)
    with np.errstate(divide="ignore"):
        inv = np.where(g > 0, 1.0 / g, np.inf)
    clipped = int(np.sum(inv > IPCW_CAP))
    return np.minimum(inv, IPCW_CAP), clipped


# --- time-dependent concordance -------------------------------------------------

@dataclass
class CIndexResult:
    value: float
    n_comparable_pairs: int
    n_tied_predictions: int
    n_clipped_weights: int

    def __float__(self):
        return self.value


def c_index_td(curves: SurvivalCurves, times, events, ghat: StepFunction,
               horizon: float) -> CIndexResult:
    """IPCW time-dependent concordance.

    Comparable pairs take an event subject i with o_i < horizon against any
    subject j with o_i < o_j; the pair is concordant when S_i(o_i) < S_j(o_i)
    strictly.  Event-subject weights are min(1 / G(o_i-)^2, 10).
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    if curves.n_subjects != len(times):
        raise ContractError("curves and test set sizes differ")
    ev = np.flatnonzero(events & (times < horizon))
    if len(ev) == 0:
        raise UndefinedMetricError("no event subject before the horizon")
    g_left = ghat(times[ev], side="left")
    w_sq, clipped = _capped_inverse(np.asarray(g_left) ** 2)

    s_at_event_times = curves.at_times(times[ev])  # (n, n_ev)
    numer = 0.0
    denom = 0.0
    tied = 0
    comparable = 0
    for col, i in enumerate(ev):
        later = times > times[i]
        n_later = int(np.sum(later))
        if n_later == 0:
            continue
        s_i = s_at_event_times[i, col]
        s_j = s_at_event_times[later, col]
        n_conc = int(np.sum(s_j > s_i))
        tied += int(np.sum(s_j == s_i))
        numer += w_sq[col] * n_conc
        denom += w_sq[col] * n_later
        comparable += n_later
    if comparable == 0 or denom == 0.0:
        raise UndefinedMetricError("no comparable pairs before the horizon")
    return CIndexResult(value=float(numer / denom), n_comparable_pairs=comparable,
                        n_tied_predictions=tied, n_clipped_weights=clipped)


# --- Brier score and binomial log-likelihood -------------------------------------

def brier_score(curves: SurvivalCurves, times, events, ghat: StepFunction,
                t: float):
    """IPCW Brier score at a single time point; also reports clip count."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    if ghat(t) <= 0.0:
        raise HorizonError(f"time {t} is beyond the censoring support")
    s_t = curves.at_times([t])[:, 0]
    died = (times < t) & events
    alive = times > t
    w_event, _ = _capped_inverse(ghat(times, side="left"))
    w_at_t, clip_at_t = _capped_inverse(np.full(1, ghat(t)))
    contrib = np.zeros(len(times))
    contrib[died] = (s_t[died] ** 2) * w_event[died]
    contrib[alive] = ((1.0 - s_t[alive]) ** 2) * w_at_t[0]
    clipped = int(np.sum(w_event[died] >= IPCW_CAP))
    if np.any(alive):
        clipped += clip_at_t
    return float(contrib.mean()), clipped


def binomial_log_likelihood(curves: SurvivalCurves, times, events,
                            ghat: StepFunction, t: float):
    """IPCW binomial log-likelihood at time t (higher is better, <= 0)."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    if ghat(t) <= 0.0:
        raise HorizonError(f"time {t} is beyond the censoring support")
    s_t = np.clip(curves.at_times([t])[:, 0], SURVIVAL_CLAMP, 1.0 - SURVIVAL_CLAMP)
    died = (times < t) & events
    alive = times > t
    w_event, _ = _capped_inverse(ghat(times, side="left"))
    w_at_t, _ = _capped_inverse(np.full(1, ghat(t)))
    contrib = np.zeros(len(times))
    contrib[died] = np.log(1.0 - s_t[died]) * w_event[died]
    contrib[alive] = np.log(s_t[alive]) * w_at_t[0]
    return float(contrib.mean())


def _integration_grid(times, horizon, n_points=100):
    times = np.asarray(times, dtype=np.float64)
    positive = times[times > 0]
    if len(positive) == 0:
        raise ContractError("no positive observed times")
    start = float(positive.min())
    if horizon <= start:
        return np.array([start])
    return np.linspace(start, horizon, n_points)


def integrated_brier_score(curves, times, events, ghat, horizon,
                           n_points: int = 100):
    """Trapezoid integral of BS(t) over the evaluation window, normalized."""
    grid = _integration_grid(times, horizon, n_points)
    scores = np.array([brier_score(curves, times, events, ghat, t)[0] for t in grid])
    if len(grid) == 1:
        return float(scores[0])
    return float(np.trapezoid(scores, grid) / (grid[-1] - grid[0]))


def integrated_binomial_ll(curves, times, events, ghat, horizon,
                           n_points: int = 100):
    grid = _integration_grid(times, horizon, n_points)
    vals = np.array([binomial_log_likelihood(curves, times, events, ghat, t)
                     for t in grid])
    if len(grid) == 1:
        return float(vals[0])
    return float(np.trapezoid(vals, grid) / (grid[-1] - grid[0]))


# --- regularized incomplete gamma (for the chi-square p-value) -------------------

_GAMMA_EPS = 1e-14
_GAMMA_ITMAX = 500


def _gamma_series(a, x):
    ap = a
    total = 1.0 / a
    delta = total
    for _ in range(_GAMMA_ITMAX):
        ap += 1.0
        delta *= x / ap
        total += delta
        if abs(delta) < abs(total) * _GAMMA_EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))

def _gamma_cf(a, x):
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_ITMAX + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def regularized_gamma_p(a: float, x: float) -> float:
    """P(a, x), the regularized lower incomplete gamma function."""
    if a <= 0 or x < 0:
        raise ContractError(f"gamma arguments out of domain: a={a}, x={x}")
    if x == 0.0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cf(a, x)


def regularized_gamma_q(a: float, x: float) -> float:
    """Q(a, x) = 1 - P(a, x), the upper tail."""
    if a <= 0 or x < 0:
        raise ContractError(f"gamma arguments out of domain: a={a}, x={x}")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cf(a, x)


def chi_square_sf(stat: float, dof: int) -> float:
    return regularized_gamma_q(dof / 2.0, stat / 2.0)


# --- D-calibration ---------------------------------------------------------------

@dataclass
class DCalResult:
    statistic: float
    p_value: float
    bin_mass: np.ndarray


def d_calibration(s_at_obs, events, bins: int = 10) -> DCalResult:
    """Chi-square uniformity test of S_i(o_i) over equal-width bins.

    An uncensored subject puts mass 1 in the bin containing S_i(o_i); a
    censored subject spreads its mass uniformly over [0, S_i(o_i)].
    """
    s = np.asarray(s_at_obs, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    if len(s) == 0:
        raise ContractError("d_calibration requires a nonempty sample")
    if np.any(s < 0) or np.any(s > 1):
        raise ContractError("survival probabilities must lie in [0, 1]")
    n = len(s)
    mass = np.zeros(bins)
    edges = np.linspace(0.0, 1.0, bins + 1)

    s_event = s[events]
    idx = np.minimum((s_event * bins).astype(int), bins - 1)
    np.add.at(mass, idx, 1.0)

    s_cens = np.maximum(s[~events], SURVIVAL_CLAMP)
    if len(s_cens):
        lower = np.minimum(edges[:-1][None, :], s_cens[:, None])
        upper = np.minimum(edges[1:][None, :], s_cens[:, None])
        mass += ((upper - lower) / s_cens[:, None]).sum(axis=0)

    expected = n / bins
    stat = float(np.sum((mass - expected) ** 2) / expected)
    p = chi_square_sf(stat, bins - 1)
    return DCalResult(statistic=stat, p_value=float(p), bin_mass=mass)


# --- evaluation horizons -----------------------------------------------------------

@dataclass
class EvaluationHorizons:
    full: float
    q1: float
    q2: float
    q2_ties_full: bool

    def as_dict(self):
        return {"full": self.full, "q1": self.q1, "q2": self.q2,
                "q2_ties_full": self.q2_ties_full}


def select_horizons(train_times, train_events, test_times,
                    support_threshold: float = 1e-3) -> EvaluationHorizons:
    """Full horizon from the training censoring support, quantiles from test.

    The full horizon is the largest training time point where the
    Kaplan-Meier censoring survival stays at or above the threshold; Q1/Q2
    are the lower quartile and median of the test observed times, capped at
    the full horizon.  Horizons are reporting-only.
    """
    train_times = np.asarray(train_times, dtype=np.float64)
    test_times = np.asarray(test_times, dtype=np.float64)
    ghat = censoring_survival(train_times, train_events)
    candidates = np.unique(train_times)
    supported = candidates[ghat(candidates) >= support_threshold]
    if len(supported) == 0:
        raise HorizonError(
            "censoring survival drops below the support threshold immediately")
    full = float(supported.max())
    q1 = float(min(np.quantile(test_times, 0.25), full))
    q2_raw = float(np.quantile(test_times, 0.5))
    q2 = min(q2_raw, full)
    return EvaluationHorizons(full=full, q1=q1, q2=float(q2),
                              q2_ties_full=bool(q2 >= full))


# --- full report --------------------------------------------------------------------

def evaluation_report(curves_fn, train_times, train_events, test_times,
                      test_events, n_grid: int = 100) -> dict:
    """Metrics at the three standard horizons plus D-calibration.

    ``curves_fn(grid) -> survival matrix`` supplies predictions on demand so
    each integrated metric can use its own horizon-specific grid.
    """
    horizons = select_horizons(train_times, train_events, test_times)
    ghat = censoring_survival(train_times, train_events)

    full_grid = _integration_grid(test_times, horizons.full, n_grid)
    full_curves = SurvivalCurves(full_grid, curves_fn(full_grid))

    report = {"horizons": {}, "horizon_taus": horizons.as_dict()}
    clip_events = 0
    n_comparable = None
    for name, tau in (("full", horizons.full), ("q1", horizons.q1),
                      ("q2", horizons.q2)):
        grid = _integration_grid(test_times, tau, n_grid)
        curves = SurvivalCurves(grid, curves_fn(grid)) if name != "full" else full_curves
        try:
            cres = c_index_td(full_curves, test_times, test_events, ghat, tau)
            ctd = cres.value
            clip_events += cres.n_clipped_weights
            if name == "full":
                n_comparable = cres.n_comparable_pairs
        except UndefinedMetricError:
            ctd = None
        report["horizons"][name] = {
            "tau": float(tau),
            "ctd": ctd,
            "ibs": integrated_brier_score(curves, test_times, test_events, ghat, tau),
            "ibll": integrated_binomial_ll(curves, test_times, test_events, ghat, tau),
        }

    s_at_obs = np.clip(full_curves.at_own_times(test_times), 0.0, 1.0)
    dcal = d_calibration(s_at_obs, test_events)
    report["dcal_stat"] = dcal.statistic
    report["dcal_p"] = dcal.p_value
    report["n_comparable_pairs"] = n_comparable
    report["clip_events"] = clip_events
    return report
