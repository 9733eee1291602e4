"""Identification and attribute disclosure risk of partially synthetic data.

Identification risk is measured by exact key matching (expected match risk,
true and false match rates) and by Fellegi-Sunter record linkage with a
greedy one-to-one assignment. Attribute risk is measured by the correct
attribution probability (CAP) and by a classification contrast between a
forest trained on synthetic data and one trained on confidential data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dataset import CategoricalDataset, DataValidationError, key_codes
from .statmodels import ForestParams, fit_forest, predict_class

EM_CLAMP = 1e-6
WEIGHT_DECIMALS = 10


def _check_compatible(confidential, synthetic):
    if confidential.codebook != synthetic.codebook:
        raise DataValidationError("datasets have different codebooks")


# ---------------------------------------------------------------------------
# matching-based identification risk

@dataclass
class MatchRiskSummary:
    expected_match_risk: float
    true_match_rate: float
    false_match_rate: float
    unique_match_count: int
    n_targets: int
    false_rate_undefined: bool = False
    c: np.ndarray | None = field(default=None, repr=False)
    T: np.ndarray | None = field(default=None, repr=False)
    K: np.ndarray | None = field(default=None, repr=False)
    F: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"expected_match_risk": self.expected_match_risk,
                "true_match_rate": self.true_match_rate,
                "false_match_rate": self.false_match_rate,
                "unique_match_count": self.unique_match_count,
                "n_targets": self.n_targets,
                "false_rate_undefined": self.false_rate_undefined}


def match_risk(confidential: CategoricalDataset, synthetic: CategoricalDataset,
               known_vars: Sequence[str], targets: Iterable[int] | None = None,
               keep_traces: bool = False) -> MatchRiskSummary:
    """Expected match risk, true match rate and false match rate.

    For each target record the candidate set is every synthetic record that
    agrees exactly with it on ``known_vars``; ``c_i`` is its size and the
    true match is the synthetic record carrying the same record id. Records
    with no candidate contribute nothing. ``targets`` holds 0-based row
    positions of the intruder's targets (all rows by default).
    """
    _check_compatible(confidential, synthetic)
    if not known_vars:
        raise ValueError("known_vars must not be empty")
    rows = np.arange(confidential.n) if targets is None else np.asarray(list(targets), dtype=int)
    ck = key_codes(confidential, known_vars)[rows]
    sk = key_codes(synthetic, known_vars)
    uniq, counts = np.unique(sk, return_counts=True)
    pos = np.searchsorted(uniq, ck)
    pos_ok = pos < uniq.size
    found = np.zeros(rows.size, dtype=bool)
    found[pos_ok] = uniq[pos[pos_ok]] == ck[pos_ok]
    c = np.where(found, counts[np.minimum(pos, uniq.size - 1)], 0)

    syn_row = {rid: j for j, rid in enumerate(synthetic.record_ids)}
    own = np.array([syn_row.get(rid, -1) for rid in confidential.record_ids[rows]])
    T = np.zeros(rows.size, dtype=bool)
    has = own >= 0
    T[has] = sk[own[has]] == ck[has]

    unique = c == 1
    K = unique & T
    F = unique & ~T
    s = int(unique.sum())
    N = rows.size
    expected = float(np.sum(T[c > 0] / c[c > 0]))
    return MatchRiskSummary(
        expected_match_risk=expected,
        true_match_rate=float(K.sum() / N),
        false_match_rate=float(F.sum() / s) if s else 0.0,
        unique_match_count=s,
        n_targets=N,
        false_rate_undefined=s == 0,
        **({"c": c, "T": T, "K": K, "F": F} if keep_traces else {}))


# ---------------------------------------------------------------------------
# Fellegi-Sunter record linkage

@dataclass
class FellegiSunterFit:
    m_probs: np.ndarray
    u_probs: np.ndarray
    prevalence: float
    loglik_path: list[float]
    n_iter: int
    converged: bool
    flagged: bool = False


def _fs_loglik(gamma, w, m, u, p):
    lm = gamma @ np.log(m) + (1 - gamma) @ np.log1p(-m)
    lu = gamma @ np.log(u) + (1 - gamma) @ np.log1p(-u)
    a = np.log(p) + lm
    b = np.log1p(-p) + lu
    joint = np.logaddexp(a, b)
    return float(w @ joint), np.exp(a - joint)


def em_fellegi_sunter(patterns, counts=None, init: tuple | None = None, tol: float = 1e-8,
                      max_iter: int = 1000) -> FellegiSunterFit:
    """Fit the two-class conditional-independence model to agreement patterns by EM.

    Parameters
    ----------
    patterns : array_like of shape (n_patterns, n_keys)
        Binary agreement vectors (1 = the pair agrees on that key).
    counts : array_like of shape (n_patterns,), optional
        Multiplicity of each pattern; defaults to 1 per row.
    init : (m, u, prevalence), optional
        Starting values. Defaults to m = 0.9, u = the overall agreement rate
        per key, prevalence = 0.1.

    Returns
    -------
    FellegiSunterFit
        The class with the larger mean agreement probability is reported as
        the match class. Probabilities are kept inside
        ``(EM_CLAMP, 1 - EM_CLAMP)``.
    """
    gamma = np.asarray(patterns, dtype=float)
    if gamma.ndim != 2 or gamma.shape[0] < 1 or gamma.shape[1] < 1:
        raise ValueError("patterns must be a non-empty (n_patterns, n_keys) array")
    if not np.all((gamma == 0) | (gamma == 1)):
        raise ValueError("patterns must be binary")
    w = np.ones(gamma.shape[0]) if counts is None else np.asarray(counts, dtype=float)
    keep = w > 0
    gamma, w = gamma[keep], w[keep]
    H = gamma.shape[1]
    lo, hi = EM_CLAMP, 1 - EM_CLAMP
    flagged = bool(np.all(gamma == gamma[0]))
    if init is None:
        rate = (w @ gamma) / w.sum()
        m = np.full(H, 0.9)
        u = np.clip(rate, 0.01, 0.5)
        p = 0.1
    else:
        m, u, p = (np.broadcast_to(np.asarray(init[0], float), (H,)).copy(),
                   np.broadcast_to(np.asarray(init[1], float), (H,)).copy(), float(init[2]))
    m, u, p = np.clip(m, lo, hi), np.clip(u, lo, hi), float(np.clip(p, lo, hi))
    ll, g = _fs_loglik(gamma, w, m, u, p)
    path = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        wg = w * g
        wu = w * (1 - g)
        p_new = float(np.clip(wg.sum() / w.sum(), lo, hi))
        m_new = np.clip((wg @ gamma) / max(wg.sum(), 1e-300), lo, hi)
        u_new = np.clip((wu @ gamma) / max(wu.sum(), 1e-300), lo, hi)
        delta = max(np.abs(m_new - m).max(), np.abs(u_new - u).max(), abs(p_new - p))
        m, u, p = m_new, u_new, p_new
        ll, g = _fs_loglik(gamma, w, m, u, p)
        path.append(ll)
        if delta < tol:
            converged = True
            break
    if m.mean() < u.mean():
        m, u, p = u, m, 1 - p
    return FellegiSunterFit(m, u, p, path, it, converged, flagged)


def pattern_weights(patterns, m, u) -> np.ndarray:
    """Base-2 log-likelihood-ratio weight of each agreement pattern."""
    gamma = np.asarray(patterns, dtype=float)
    w = gamma @ np.log2(m / u) + (1 - gamma) @ np.log2((1 - m) / (1 - u))
    return np.round(w, WEIGHT_DECIMALS)


def _all_patterns(H: int) -> np.ndarray:
    codes = np.arange(2 ** H)
    return ((codes[:, None] >> np.arange(H)) & 1).astype(np.int8)


def pattern_counts(confidential: CategoricalDataset, synthetic: CategoricalDataset,
                   keys: Sequence[str]) -> np.ndarray:
    """Number of (confidential, synthetic) pairs with each agreement pattern.

    Index ``b`` counts pairs agreeing exactly on the keys whose bits are set
    in ``b``. Computed from key-combination frequencies by inclusion-exclusion
    over key subsets, so no pair is enumerated.
    """
    H = len(keys)
    at_least = np.zeros(2 ** H, dtype=np.int64)
    for b in range(2 ** H):
        sub = [keys[h] for h in range(H) if b >> h & 1]
        if not sub:
            at_least[b] = confidential.n * synthetic.n
            continue
        cu, cc = np.unique(key_codes(confidential, sub), return_counts=True)
        su, sc = np.unique(key_codes(synthetic, sub), return_counts=True)
        _, ic, is_ = np.intersect1d(cu, su, assume_unique=True, return_indices=True)
        at_least[b] = int(np.sum(cc[ic] * sc[is_]))
    exact = at_least.copy()
    for h in range(H):
        bit = 1 << h
        for b in range(2 ** H):
            if not b & bit:
                exact[b] -= exact[b | bit]
    return exact


def greedy_link(pairs: Iterable[tuple], threshold: float = 0.0) -> list[tuple]:
    """One-to-one links taken in descending weight order.

    ``pairs`` holds ``(left, right, weight)``. Ties are broken by
    ``(left, right)`` order; only weights strictly above ``threshold`` link.
    """
    used_l, used_r, links = set(), set(), []
    for a, b, wt in sorted(pairs, key=lambda t: (-t[2], t[0], t[1])):
        if wt <= threshold:
            break
        if a in used_l or b in used_r:
            continue
        used_l.add(a)
        used_r.add(b)
        links.append((a, b, wt))
    return links


@dataclass
class LinkageResult:
    links: list[tuple[str, str, float]]
    true_link_rate: float | None
    false_link_rate: float | None
    m_probs: np.ndarray
    u_probs: np.ndarray
    prevalence: float
    keys: tuple[str, ...]
    em: FellegiSunterFit | None = field(default=None, repr=False)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def rates_undefined(self) -> bool:
        return not self.links

    def to_dict(self) -> dict:
        return {"keys": list(self.keys), "n_links": self.n_links,
                "true_link_rate": self.true_link_rate, "false_link_rate": self.false_link_rate,
                "rates_undefined": self.rates_undefined,
                "m_probs": self.m_probs.tolist(), "u_probs": self.u_probs.tolist(),
                "prevalence": self.prevalence}


def _greedy_by_pattern(ck, sk, weights, threshold):
    """Greedy assignment using row positions as tie-break ids."""
    n_c, n_s = ck.shape[0], sk.shape[0]
    H = ck.shape[1]
    bits = (1 << np.arange(H)).astype(np.int64)
    dense = n_c * n_s <= 25_000_000
    if dense:
        codes = np.zeros((n_c, n_s), dtype=np.int64)
        for h in range(H):
            codes |= (ck[:, h][:, None] == sk[:, h][None, :]).astype(np.int64) << h

    def row_codes(i):
        if dense:
            return codes[i]
        return ((ck[i][None, :] == sk).astype(np.int64) * bits).sum(axis=1)

    free_c = np.ones(n_c, dtype=bool)
    free_s = np.ones(n_s, dtype=bool)
    links = []
    levels = sorted({wt for wt in weights.tolist() if wt > threshold}, reverse=True)
    for wt in levels:
        lut = weights == wt
        for i in np.flatnonzero(free_c):
            cand = free_s & lut[row_codes(i)]
            if not cand.any():
                continue
            j = int(np.argmax(cand))
            free_c[i] = free_s[j] = False
            links.append((int(i), j, float(wt)))
        if not free_c.any() or not free_s.any():
            break
    return links


def record_linkage_risk(confidential: CategoricalDataset, synthetic: CategoricalDataset,
                        keys: Sequence[str], threshold: float = 0.0,
                        em_init: tuple | None = None) -> LinkageResult:
    """Link synthetic to confidential records on ``keys`` and score the links.

    All ``n_c x n_s`` pairs are candidates. Agreement probabilities come from
    :func:`em_fellegi_sunter` on the pattern counts; each pair is weighted by
    its base-2 log-likelihood ratio and links are chosen greedily (see
    :func:`greedy_link`, with row positions as ids). A link is true when both
    records carry the same record id.
    """
    _check_compatible(confidential, synthetic)
    keys = tuple(keys)
    if not keys:
        raise ValueError("linkage keys must not be empty")
    counts = pattern_counts(confidential, synthetic, keys)
    pats = _all_patterns(len(keys))
    fit = em_fellegi_sunter(pats, counts, init=em_init)
    weights = pattern_weights(pats, fit.m_probs, fit.u_probs)
    ck = confidential.columns(keys)
    sk = synthetic.columns(keys)
    raw = _greedy_by_pattern(ck, sk, weights, threshold)
    cid, sid = confidential.record_ids, synthetic.record_ids
    links = [(str(cid[i]), str(sid[j]), wt) for i, j, wt in raw]
    if links:
        true = sum(a == b for a, b, _ in links) / len(links)
        rates = (true, 1.0 - true)
    else:
        rates = (None, None)
    return LinkageResult(links, rates[0], rates[1], fit.m_probs, fit.u_probs, fit.prevalence,
                         keys, fit)


# ---------------------------------------------------------------------------
# correct attribution probability

@dataclass
class CapResult:
    values: np.ndarray          # per confidential record; NaN where undefined (exclude mode)
    average: float | None
    n_undefined: int
    mode: str = "exclude"

    def to_dict(self) -> dict:
        return {"average": self.average, "n_undefined": self.n_undefined, "mode": self.mode,
                "n_records": int(self.values.size)}


def cap(confidential: CategoricalDataset, synthetic: CategoricalDataset, keys: Sequence[str],
        target: str, undefined: str = "exclude") -> CapResult:
    """Correct attribution probability of each confidential record.

    The share of synthetic records matching the record on ``keys`` that also
    match its ``target`` value. When no synthetic record matches the keys
    the value is undefined: ``undefined="exclude"`` leaves it out of the
    average, ``undefined="zero"`` scores it 0.
    """
    _check_compatible(confidential, synthetic)
    keys = list(keys)
    if target in keys:
        raise ValueError("target must not be one of the keys")
    if undefined not in ("exclude", "zero"):
        raise ValueError(f"unknown undefined-denominator mode {undefined!r}")
    d_t = confidential.codebook[target].d
    ck = key_codes(confidential, keys)
    sk = key_codes(synthetic, keys)
    ct = confidential.column(target) - 1
    st = synthetic.column(target) - 1

    uniq, inv = np.unique(np.concatenate([ck, sk]), return_inverse=True)
    ci, si = inv[:ck.size], inv[ck.size:]
    den = np.bincount(si, minlength=uniq.size)
    num = np.bincount(si * d_t + st, minlength=uniq.size * d_t)
    d_i = den[ci]
    n_i = num[ci * d_t + ct]
    values = np.full(ck.size, np.nan)
    ok = d_i > 0
    values[ok] = n_i[ok] / d_i[ok]
    n_undef = int((~ok).sum())
    if undefined == "zero":
        values[~ok] = 0.0
    defined = values[~np.isnan(values)]
    avg = float(defined.mean()) if defined.size else None
    return CapResult(values, avg, n_undef, undefined)


# ---------------------------------------------------------------------------
# classification-based attribute risk

@dataclass
class ClassErrorRow:
    code: int
    label: str
    n: int
    error_synthetic: float | None
    error_confidential: float | None
    absent_in_synthetic: bool
    absent_in_confidential: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _class_errors(truth, pred, classes):
    out = {}
    for g in classes:
        mask = truth == g
        out[g] = float(np.mean(pred[mask] != g)) if mask.any() else None
    return out


def classification_risk(confidential: CategoricalDataset, synthetic: CategoricalDataset,
                        target: str, predictors: Sequence[str],
                        params: ForestParams | None = None, seed: int = 0,
                        confidential_model=None) -> list[ClassErrorRow]:
    """Per-class error (1 - recall) on the confidential data of two forests.

    One forest is trained on ``synthetic``, the other on ``confidential``;
    both are evaluated on ``confidential``. A class missing from a training
    set can never be predicted, so its error is 1 and the row is flagged.
    """
    _check_compatible(confidential, synthetic)
    spec = confidential.codebook[target]
    classes = list(range(1, spec.d + 1))
    truth = confidential.column(target)
    model_s = fit_forest(synthetic, target, predictors, params, np.random.default_rng(seed))
    if confidential_model is None:
        confidential_model = fit_forest(confidential, target, predictors, params,
                                        np.random.default_rng(seed))
    err_s = _class_errors(truth, predict_class(model_s, confidential), classes)
    err_c = _class_errors(truth, predict_class(confidential_model, confidential), classes)
    present_s = set(np.unique(synthetic.column(target)).tolist())
    present_c = set(np.unique(truth).tolist())
    return [ClassErrorRow(g, spec.levels[g - 1], int(np.sum(truth == g)), err_s[g], err_c[g],
                          g not in present_s, g not in present_c) for g in classes]


# ---------------------------------------------------------------------------
# report

def _mean_or_none(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


@dataclass
class RiskReport:
    match_baseline: MatchRiskSummary | None = None
    match: list[MatchRiskSummary] = field(default_factory=list)
    linkage_baseline: LinkageResult | None = None
    linkage: list[LinkageResult] = field(default_factory=list)
    cap_baseline: CapResult | None = None
    cap: list[CapResult] = field(default_factory=list)
    classification: list[list[ClassErrorRow]] = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def match_mean(self) -> dict | None:
        if not self.match:
            return None
        keys = ("expected_match_risk", "true_match_rate", "false_match_rate",
                "unique_match_count")
        return {k: float(np.mean([getattr(s, k) for s in self.match])) for k in keys}

    def linkage_mean(self) -> dict | None:
        if not self.linkage:
            return None
        return {"true_link_rate": _mean_or_none([r.true_link_rate for r in self.linkage]),
                "false_link_rate": _mean_or_none([r.false_link_rate for r in self.linkage]),
                "n_links": float(np.mean([r.n_links for r in self.linkage]))}

    def classification_mean(self) -> list[dict]:
        if not self.classification:
            return []
        rows = []
        for per_class in zip(*self.classification):
            first = per_class[0]
            rows.append({"code": first.code, "label": first.label, "n": first.n,
                         "error_confidential": first.error_confidential,
                         "error_synthetic": _mean_or_none([r.error_synthetic for r in per_class]),
                         "absent_in_synthetic": any(r.absent_in_synthetic for r in per_class),
                         "absent_in_confidential": first.absent_in_confidential})
        return rows

    def to_dict(self) -> dict:
        out = {"settings": self.settings}
        if self.match_baseline is not None:
            out["match"] = {"baseline": self.match_baseline.to_dict(),
                            "per_replicate": [s.to_dict() for s in self.match],
                            "mean": self.match_mean()}
        if self.linkage_baseline is not None:
            out["linkage"] = {"baseline": self.linkage_baseline.to_dict(),
                              "per_replicate": [r.to_dict() for r in self.linkage],
                              "mean": self.linkage_mean()}
        if self.cap_baseline is not None:
            out["cap"] = {"baseline": self.cap_baseline.to_dict(),
                          "per_replicate": [c.to_dict() for c in self.cap],
                          "mean": _mean_or_none([c.average for c in self.cap])}
        if self.classification:
            out["classification"] = {
                "per_replicate": [[r.to_dict() for r in rows] for rows in self.classification],
                "mean": self.classification_mean()}
        return out


def risk_report(confidential: CategoricalDataset, replicates: Sequence[CategoricalDataset],
                known_vars: Sequence[str] | None = None,
                linkage_keys: Sequence[str] | None = None, linkage_threshold: float = 0.0,
                cap_keys: Sequence[str] | None = None, cap_target: str | None = None,
                cap_undefined: str = "exclude",
                classification: dict | None = None, seed: int = 0) -> RiskReport:
    """Evaluate every configured risk metric; baselines use the confidential data itself."""
    rep = RiskReport(settings={
        "known_vars": list(known_vars or []), "linkage_keys": list(linkage_keys or []),
        "linkage_threshold": linkage_threshold, "cap_keys": list(cap_keys or []),
        "cap_target": cap_target, "cap_undefined": cap_undefined,
        "classification": classification or {}})
    if known_vars:
        rep.match_baseline = match_risk(confidential, confidential, known_vars)
        rep.match = [match_risk(confidential, s, known_vars) for s in replicates]
    if linkage_keys:
        rep.linkage_baseline = record_linkage_risk(confidential, confidential, linkage_keys,
                                                   linkage_threshold)
        rep.linkage = [record_linkage_risk(confidential, s, linkage_keys, linkage_threshold)
                       for s in replicates]
    if cap_keys and cap_target:
        rep.cap_baseline = cap(confidential, confidential, cap_keys, cap_target, cap_undefined)
        rep.cap = [cap(confidential, s, cap_keys, cap_target, cap_undefined) for s in replicates]
    if classification:
        params = ForestParams(**{k: classification[k] for k in
                                 ("n_trees", "max_depth", "min_leaf", "max_features")
                                 if k in classification})
        target, predictors = classification["target"], classification["predictors"]
        model_c = fit_forest(confidential, target, predictors, params,
                             np.random.default_rng(seed))
        rep.classification = [classification_risk(confidential, s, target, predictors, params,
                                                  seed + l, model_c)
                              for l, s in enumerate(replicates, start=1)]
    return rep
