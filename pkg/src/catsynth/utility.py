"""Global and analysis-specific utility of partially synthetic replicates."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .dataset import (CategoricalDataset, Codebook, DataValidationError, cross_tabulate,
                      table_subsets)
from .statmodels import design_matrix, fit_logistic, predict_proba


# ---------------------------------------------------------------------------
# propensity score mean squared error

@dataclass
class PmseResult:
    score: float
    c: float
    n_c: int
    n_s: int
    flagged: bool = False


def stack(confidential: CategoricalDataset, synthetic: CategoricalDataset
          ) -> tuple[CategoricalDataset, np.ndarray]:
    """Concatenate two datasets; the returned labels are 1 for synthetic rows."""
    if confidential.codebook != synthetic.codebook:
        raise DataValidationError("datasets have different codebooks")
    vals = np.vstack([confidential.values, synthetic.values])
    ids = [f"c{i}" for i in range(confidential.n)] + [f"s{i}" for i in range(synthetic.n)]
    labels = np.r_[np.zeros(confidential.n), np.ones(synthetic.n)]
    return CategoricalDataset(confidential.codebook, vals, ids), labels


def logistic_propensity(data: CategoricalDataset, labels: np.ndarray,
                        variables: Sequence[str] | None = None) -> tuple[np.ndarray, bool]:
    """Main-effects logistic propensity scores; the flag marks a non-converged fit."""
    variables = list(variables) if variables is not None else data.codebook.names
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        X = design_matrix(data, variables)
    fit = fit_logistic(X, labels)
    return predict_proba(fit, X), not fit.converged


def pmse(confidential: CategoricalDataset, synthetic: CategoricalDataset,
         variables: Sequence[str] | None = None,
         classifier: Callable | None = None) -> PmseResult:
    """Propensity-score mean squared error of one synthetic replicate.

    ``classifier(stacked, labels)`` must return ``(probabilities, flagged)``;
    the default is a main-effects logistic regression on all variables.
    """
    data, labels = stack(confidential, synthetic)
    n_c, n_s = confidential.n, synthetic.n
    c = n_s / (n_s + n_c)
    if classifier is None:
        probs, flagged = logistic_propensity(data, labels, variables)
    else:
        probs, flagged = classifier(data, labels)
    score = float(np.mean((np.asarray(probs) - c) ** 2))
    return PmseResult(score, c, n_c, n_s, bool(flagged))


def pmse_mean(confidential: CategoricalDataset, replicates: Sequence[CategoricalDataset],
              **kwargs) -> tuple[float, list[PmseResult]]:
    results = [pmse(confidential, rep, **kwargs) for rep in replicates]
    return float(np.mean([r.score for r in results])), results


# ---------------------------------------------------------------------------
# cross-tabulation deviations

@dataclass
class DeviationSummary:
    order: int
    d: np.ndarray                          # relative differences, cells with c > 0
    cells: list[tuple[tuple[str, ...], tuple[int, ...]]]
    n_excluded: int                        # cells with c == 0
    mean_absolute_deviation: float

    @property
    def d_min(self) -> float | None:
        return float(self.d.min()) if self.d.size else None

    @property
    def d_max(self) -> float | None:
        return float(self.d.max()) if self.d.size else None

    @property
    def d_mean(self) -> float | None:
        return float(self.d.mean()) if self.d.size else None

    def to_dict(self) -> dict:
        return {"order": self.order, "n_cells": int(self.d.size), "n_excluded": self.n_excluded,
                "d_min": self.d_min, "d_max": self.d_max, "d_mean": self.d_mean,
                "mean_absolute_deviation": self.mean_absolute_deviation}


def _subsets(codebook: Codebook, t: int, synthesized: Sequence[str] | None, full: bool):
    if t not in (1, 2, 3):
        raise ValueError(f"table order must be 1, 2 or 3, got {t}")
    if t > codebook.r:
        raise ValueError(f"table order {t} exceeds variable count {codebook.r}")
    if full:
        return table_subsets(codebook, t)
    touching = codebook.sensitive_names if synthesized is None else list(synthesized)
    return table_subsets(codebook, t, touching)


def _paired_tables(confidential, synthetic, t, synthesized, full):
    if confidential.codebook != synthetic.codebook:
        raise DataValidationError("datasets have different codebooks")
    for sub in _subsets(confidential.codebook, t, synthesized, full):
        yield sub, cross_tabulate(confidential, sub).frequencies, \
            cross_tabulate(synthetic, sub).frequencies


def relative_differences(confidential: CategoricalDataset, synthetic: CategoricalDataset,
                         t: int, synthesized: Sequence[str] | None = None,
                         full: bool = False) -> DeviationSummary:
    """Cell-wise ``(s - c) / c`` over all t-way tables touching a synthesized variable.

    Cells with ``c == 0`` are left out of ``d`` and counted in ``n_excluded``.
    """
    ds, cells, abs_dev = [], [], []
    excluded = 0
    for sub, c, s in _paired_tables(confidential, synthetic, t, synthesized, full):
        abs_dev.append(np.abs(s - c).ravel())
        pos = c > 0
        excluded += int((~pos).sum())
        ds.append((s[pos] - c[pos]) / c[pos])
        cells.extend((sub, tuple(int(i) + 1 for i in idx)) for idx in np.argwhere(pos))
    mad = float(np.concatenate(abs_dev).mean()) if abs_dev else 0.0
    d = np.concatenate(ds) if ds else np.empty(0)
    return DeviationSummary(t, d, cells, excluded, mad)


def mean_absolute_deviation(confidential: CategoricalDataset, synthetic: CategoricalDataset,
                            t: int, synthesized: Sequence[str] | None = None,
                            full: bool = False) -> float:
    """Mean of ``|s - c|`` over every cell of every t-way table (zero cells included)."""
    devs = [np.abs(s - c).ravel()
            for _, c, s in _paired_tables(confidential, synthetic, t, synthesized, full)]
    return float(np.concatenate(devs).mean()) if devs else 0.0


# ---------------------------------------------------------------------------
# combining rules and interval overlap

@dataclass
class CombinedEstimate:
    q_bar: float
    b_m: float
    v_bar: float
    T_p: float
    ci_low: float
    ci_high: float
    m: int
    df: float | None        # None when the normal quantile was used
    level: float = 0.95

    def to_dict(self) -> dict:
        return asdict(self)


def combine_estimates(q, v, level: float = 0.95) -> CombinedEstimate:
    """Combine per-replicate estimates ``q`` and variances ``v`` from partially synthetic data.

    ``T_p = b_m / m + v_bar``; the interval uses a t reference distribution
    with ``(m - 1) (1 + v_bar / (b_m / m))**2`` degrees of freedom, or the
    normal quantile when ``b_m == 0``.
    """
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    if q.ndim != 1 or q.shape != v.shape:
        raise ValueError("q and v must be 1-d and of equal length")
    m = q.size
    if m < 2:
        raise ValueError("combining rules need at least 2 replicates")
    # centring on the first element keeps identical inputs exact
    q_bar = float(q[0] + np.mean(q - q[0]))
    v_bar = float(v[0] + np.mean(v - v[0]))
    b_m = float(np.sum((q - q_bar) ** 2) / (m - 1))
    T_p = b_m / m + v_bar
    alpha = 1 - level
    if b_m == 0:
        df = None
        crit = stats.norm.ppf(1 - alpha / 2)
    else:
        df = (m - 1) * (1 + v_bar / (b_m / m)) ** 2
        crit = stats.t.ppf(1 - alpha / 2, df)
    half = crit * math.sqrt(max(T_p, 0.0))
    return CombinedEstimate(q_bar, b_m, v_bar, T_p, q_bar - half, q_bar + half, m, df, level)


def interval_overlap(ci_c: tuple[float, float], ci_s: tuple[float, float]) -> float:
    """Overlap of a confidential and a synthetic interval; 1 for identical intervals.

    Disjoint intervals give a negative value, reported as is.
    """
    lc, uc = ci_c
    ls, us = ci_s
    if not (uc > lc and us > ls):
        raise ValueError("intervals must have positive width")
    li, ui = max(ls, lc), min(us, uc)
    return (ui - li) / (2 * (uc - lc)) + (ui - li) / (2 * (us - ls))


def proportion(dataset: CategoricalDataset, variable: str, level: int) -> tuple[float, float]:
    """Sample proportion of ``variable == level`` and its variance ``p (1 - p) / n``."""
    p = float(np.mean(dataset.column(variable) == level))
    return p, p * (1 - p) / dataset.n


def normal_interval(estimate: float, variance: float, level: float = 0.95):
    half = float(stats.norm.ppf(1 - (1 - level) / 2)) * math.sqrt(variance)
    return estimate - half, estimate + half


@dataclass
class EstimandComparison:
    name: str
    confidential: float
    confidential_ci: tuple[float, float]
    synthetic: CombinedEstimate
    overlap: float | None
    flagged: bool = False

    def to_dict(self) -> dict:
        return {"name": self.name, "confidential": self.confidential,
                "confidential_ci": list(self.confidential_ci),
                "synthetic": self.synthetic.to_dict(), "overlap": self.overlap,
                "flagged": self.flagged}


def _overlap_or_none(ci_c, ci_s):
    try:
        return interval_overlap(ci_c, ci_s)
    except ValueError:
        return None


def proportion_utility(confidential: CategoricalDataset,
                       replicates: Sequence[CategoricalDataset], variable: str,
                       level: int = 1, ci_level: float = 0.95) -> EstimandComparison:
    """Compare the proportion of ``variable == level`` between confidential and synthetic data."""
    p_c, v_c = proportion(confidential, variable, level)
    ci_c = normal_interval(p_c, v_c, ci_level)
    qs, vs = zip(*(proportion(rep, variable, level) for rep in replicates))
    comb = combine_estimates(qs, vs, ci_level)
    ov = _overlap_or_none(ci_c, (comb.ci_low, comb.ci_high))
    label = confidential.codebook[variable].levels[level - 1]
    return EstimandComparison(f"P({variable}={label})", p_c, ci_c, comb, ov, ov is None)


@dataclass
class CoefficientRow:
    label: str
    confidential: float
    confidential_ci: tuple[float, float]
    synthetic: CombinedEstimate | None
    overlap: float | None
    flagged: bool

    def to_dict(self) -> dict:
        return {"label": self.label, "confidential": self.confidential,
                "confidential_ci": list(self.confidential_ci),
                "synthetic": None if self.synthetic is None else self.synthetic.to_dict(),
                "overlap": self.overlap, "flagged": self.flagged}


def _binary_target(dataset, target, event_level):
    if dataset.codebook[target].d != 2:
        raise DataValidationError(f"regression target '{target}' must be binary")
    return (dataset.column(target) == event_level).astype(float)


def regression_utility(confidential: CategoricalDataset, replicates: Sequence[CategoricalDataset],
                       target: str, predictors: Sequence[str], event_level: int = 1,
                       ci_level: float = 0.95) -> list[CoefficientRow]:
    """Logistic-regression coefficients on confidential vs combined synthetic data.

    The response is ``target == event_level``. Synthetic coefficients use the
    combining rules with the fitted coefficient variances. Rows whose
    confidential or synthetic fits did not converge are flagged and carry no
    overlap.
    """
    if len(replicates) < 2:
        raise ValueError("regression utility needs at least 2 replicates")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        X_c = design_matrix(confidential, predictors)
    fit_c = fit_logistic(X_c, _binary_target(confidential, target, event_level))
    z = stats.norm.ppf(1 - (1 - ci_level) / 2)
    fits = []
    for rep in replicates:
        X_s = design_matrix(rep, predictors, labels=X_c.labels)
        try:
            fits.append(fit_logistic(X_s, _binary_target(rep, target, event_level)))
        except ValueError:
            fits.append(None)
    rows = []
    for k, label in enumerate(X_c.labels):
        est, se = float(fit_c.coef[k]), float(fit_c.se[k])
        ci_c = (est - z * se, est + z * se)
        ok = fit_c.converged and not fit_c.singular and all(
            f is not None and f.converged and not f.singular for f in fits)
        comb = None
        if all(f is not None for f in fits):
            comb = combine_estimates([f.coef[k] for f in fits],
                                     [f.cov[k, k] for f in fits], ci_level)
        ov = _overlap_or_none(ci_c, (comb.ci_low, comb.ci_high)) if ok and comb else None
        rows.append(CoefficientRow(label, est, ci_c, comb, ov, not ok or ov is None))
    return rows


# ---------------------------------------------------------------------------
# report

@dataclass
class UtilityReport:
    pmse: list[float]
    pmse_mean: float
    pmse_flagged: list[bool]
    deviations: dict[int, list[DeviationSummary]]   # per order, one per replicate
    estimands: list[EstimandComparison] = field(default_factory=list)
    regressions: dict[str, list[CoefficientRow]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        dev = {}
        for t, summaries in sorted(self.deviations.items()):
            mads = [s.mean_absolute_deviation for s in summaries]
            dev[str(t)] = {"per_replicate": [s.to_dict() for s in summaries],
                           "mean_absolute_deviation": float(np.mean(mads))}
        return {
            "pmse": {"per_replicate": self.pmse, "mean": self.pmse_mean,
                     "flagged": self.pmse_flagged},
            "deviations": dev,
            "estimands": [e.to_dict() for e in self.estimands],
            "regressions": {k: [r.to_dict() for r in rows]
                            for k, rows in sorted(self.regressions.items())},
        }


def utility_report(confidential: CategoricalDataset, replicates: Sequence[CategoricalDataset],
                   orders: Sequence[int] = (1, 2, 3), synthesized: Sequence[str] | None = None,
                   full_enumeration: bool = False, pmse_variables: Sequence[str] | None = None,
                   estimands: Sequence[dict] = (), regressions: Sequence[dict] = (),
                   ci_level: float = 0.95) -> UtilityReport:
    """Run every configured utility metric over the replicates.

    ``estimands`` items are ``{"variable": name, "level": code}``;
    ``regressions`` items are ``{"target", "predictors", "event_level"}``.
    """
    mean, res = pmse_mean(confidential, replicates, variables=pmse_variables)
    deviations = {t: [relative_differences(confidential, rep, t, synthesized, full_enumeration)
                      for rep in replicates] for t in orders}
    est = []
    if estimands and len(replicates) >= 2:
        est = [proportion_utility(confidential, replicates, e["variable"], int(e.get("level", 1)),
                                  ci_level) for e in estimands]
    regs = {}
    if regressions and len(replicates) >= 2:
        for spec in regressions:
            key = f"{spec['target']} ~ {' + '.join(spec['predictors'])}"
            regs[key] = regression_utility(confidential, replicates, spec["target"],
                                           spec["predictors"], int(spec.get("event_level", 1)),
                                           ci_level)
    return UtilityReport([r.score for r in res], mean, [r.flagged for r in res], deviations,
                         est, regs)
