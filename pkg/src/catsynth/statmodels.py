"""Binary logistic regression (IRLS) and a bagged categorical CART ensemble."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .dataset import CategoricalDataset, DataValidationError

PROB_CLAMP = 1e-12
COEF_CAP = 30.0


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray
    labels: tuple[str, ...]

    @property
    def shape(self):
        return self.X.shape


def _indicator_columns(dataset: CategoricalDataset, variables: Sequence[str]):
    cols, labels = [], []
    for name in variables:
        spec = dataset.codebook[name]
        col = dataset.column(name)
        for code in range(2, spec.d + 1):
            cols.append((col == code).astype(float))
            labels.append(f"{name}[{spec.levels[code - 1]}]")
    return cols, labels


def design_matrix(dataset: CategoricalDataset, variables: Sequence[str],
                  labels: Sequence[str] | None = None, intercept: bool = True) -> DesignMatrix:
    """Dummy-code ``variables`` with the first codebook level as reference.

    Without ``labels``, constant and linearly dependent columns are pruned
    (with a warning) so the result has full column rank. With ``labels``,
    exactly those columns are built in that order, e.g. to score new data
    with an existing fit.
    """
    cols, names = _indicator_columns(dataset, variables)
    if intercept:
        cols.insert(0, np.ones(dataset.n))
        names.insert(0, "(Intercept)")
    if labels is not None:
        lookup = dict(zip(names, cols))
        missing = [lb for lb in labels if lb not in lookup]
        if missing:
            raise DataValidationError(f"design columns not available: {missing}")
        return DesignMatrix(np.column_stack([lookup[lb] for lb in labels]), tuple(labels))

    kept, kept_names, dropped = [], [], []
    for c, nm in zip(cols, names):
        if nm != "(Intercept)" and np.ptp(c) == 0:
            dropped.append(nm)
            continue
        trial = np.column_stack(kept + [c])
        if np.linalg.matrix_rank(trial) < trial.shape[1]:
            dropped.append(nm)
            continue
        kept.append(c)
        kept_names.append(nm)
    if dropped:
        warnings.warn(f"pruned degenerate design columns: {dropped}", stacklevel=2)
    X = np.column_stack(kept) if kept else np.empty((dataset.n, 0))
    return DesignMatrix(X, tuple(kept_names))


@dataclass
class LogisticFit:
    coef: np.ndarray
    cov: np.ndarray
    labels: tuple[str, ...]
    converged: bool
    n_iter: int
    loglik: float
    loglik_path: list[float] = field(default_factory=list)
    separated: bool = False
    singular: bool = False

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))

    def coefficient(self, label: str) -> float:
        return float(self.coef[self.labels.index(label)])


def _loglik(X, y, beta):
    eta = X @ beta
    # log(1 + exp(eta)) evaluated stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_logistic(X: DesignMatrix, y, tol: float = 1e-8, max_iter: int = 100) -> LogisticFit:
    """Maximum-likelihood logistic regression by iteratively reweighted least squares.

    Each Newton step is halved until the log-likelihood does not decrease.
    Iteration stops when the gradient norm falls below ``tol``. If any
    coefficient would exceed ``COEF_CAP`` in magnitude the data are treated
    as (quasi-)separated: coefficients are clipped, the fit is flagged and
    ``converged`` is False.
    """
    y = np.asarray(y, dtype=float)
    A = X.X
    if y.shape != (A.shape[0],):
        raise ValueError("y length does not match design rows")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must be binary 0/1")
    if y.min() == y.max():
        raise ValueError("y contains a single class")
    p = A.shape[1]
    beta = np.zeros(p)
    ll = _loglik(A, y, beta)
    path = [ll]
    converged = separated = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(A @ beta)
        grad = A.T @ (y - mu)
        if np.linalg.norm(grad) < tol:
            converged = True
            it -= 1
            break
        w = mu * (1 - mu)
        H = A.T @ (A * w[:, None])
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            capped = np.abs(cand).max() > COEF_CAP
            if capped:
                cand = np.clip(cand, -COEF_CAP, COEF_CAP)
            ll_new = _loglik(A, y, cand)
            # near the optimum the gain drops below float resolution
            if ll_new >= ll - 1e-12 * (1 + abs(ll)) or t < 1e-10:
                break
            t /= 2
        if ll_new < ll - 1e-12 * (1 + abs(ll)):
            # no ascent direction left within machine precision
            converged = np.linalg.norm(grad) < math.sqrt(tol)
            break
        beta, ll = cand, ll_new
        path.append(ll)
        if capped:
            separated = True
            break
    mu = expit(A @ beta)
    w = mu * (1 - mu)
    info = A.T @ (A * w[:, None])
    singular = False
    try:
        cov = np.linalg.inv(info)
        if not np.all(np.isfinite(cov)) or np.any(np.diag(cov) <= 0):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(info)
        singular = True
    cov = (cov + cov.T) / 2
    return LogisticFit(beta, cov, X.labels, converged and not separated, it, ll, path,
                       separated, singular)


def predict_proba(fit: LogisticFit, X: DesignMatrix) -> np.ndarray:
    if tuple(X.labels) != tuple(fit.labels):
        raise ValueError("design columns do not match the fitted model")
    return np.clip(expit(X.X @ fit.coef), PROB_CLAMP, 1 - PROB_CLAMP)


# ---------------------------------------------------------------------------
# bagged classification trees

@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    max_depth: int | None = None
    min_leaf: int = 5
    max_features: int | None = None  # default ceil(sqrt(#predictors))


@dataclass
class Tree:
    feature: np.ndarray     # -1 at leaves
    goes_left: np.ndarray   # (nodes, max_levels) bool, by 0-based level
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray       # (nodes, n_classes) class distribution

    def apply(self, Xc: np.ndarray) -> np.ndarray:
        node = np.zeros(Xc.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            f = self.feature[nd]
            left = self.goes_left[nd, Xc[idx, f]]
            node[idx] = np.where(left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict(self, Xc: np.ndarray) -> np.ndarray:
        # argmax takes the lowest class index on ties
        return np.argmax(self.value[self.apply(Xc)], axis=1)


@dataclass
class ForestModel:
    target: str
    predictors: tuple[str, ...]
    classes: tuple[int, ...]          # 1-based target codes
    trees: list[Tree]
    bootstrap_seeds: list[int]
    params: ForestParams
    degenerate: bool = False

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def _gini(counts: np.ndarray) -> np.ndarray:
    tot = counts.sum(axis=-1)
    safe = np.where(tot > 0, tot, 1)
    return 1.0 - np.sum(counts * counts, axis=-1) / (safe * safe) * (tot > 0)


def _grow_tree(Xc, y, arity, n_classes, params: ForestParams, mtry: int,
               rng: np.random.Generator) -> Tree:
    """Grow one tree breadth first, searching splits for a whole depth level at once.

    For a node and a candidate predictor, present levels are ordered by their
    share of the node's majority class and every prefix of that order is a
    candidate left set (exact for two classes). Each node draws a random
    predictor order; the best split among the first ``mtry`` predictors is
    used, falling back to the remaining ones when none of those splits.
    Equal impurities go to the earlier predictor in that order and to the
    shorter prefix.
    """
    n, p = Xc.shape
    L, C = max(arity), n_classes
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    goes_left = np.zeros((cap, L), dtype=bool)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros((cap, C))
    n_nodes = 1
    node_of = np.zeros(n, dtype=np.int64)
    frontier = np.array([0])
    depth = 0
    ar_p, ar_L = np.arange(p), np.arange(L)
    while frontier.size:
        loc = np.full(n_nodes, -1)
        loc[frontier] = np.arange(frontier.size)
        fi = loc[node_of]
        rows = np.flatnonzero(fi >= 0)
        fi = fi[rows]
        ncount = np.bincount(fi * C + y[rows], minlength=frontier.size * C).reshape(-1, C)
        value[frontier] = ncount / ncount.sum(axis=1, keepdims=True)
        split_ok = ((ncount > 0).sum(axis=1) > 1) & (ncount.sum(axis=1) >= 2 * params.min_leaf)
        if params.max_depth is not None and depth >= params.max_depth:
            split_ok[:] = False
        if not split_ok.any():
            break
        S = np.flatnonzero(split_ok)
        G = S.size
        gmap = np.full(frontier.size, -1)
        gmap[S] = np.arange(G)
        sel = gmap[fi] >= 0
        r2, g = rows[sel], gmap[fi[sel]]
        idx = ((g[:, None] * p + ar_p) * L + Xc[r2]) * C + y[r2][:, None]
        counts = np.bincount(idx.ravel(), minlength=G * p * L * C).reshape(G, p, L, C)
        node_tot = ncount[S]
        lvl_tot = counts.sum(axis=3)
        present = lvl_tot > 0
        ref = np.argmax(node_tot, axis=1)
        ref_counts = np.take_along_axis(counts, ref[:, None, None, None], axis=3)[..., 0]
        share = np.where(present, ref_counts / np.where(present, lvl_tot, 1), np.inf)
        order = np.argsort(share, axis=2, kind="stable")
        cum = np.cumsum(np.take_along_axis(counts, order[..., None], axis=2), axis=2)[:, :, :-1]
        rest = node_tot[:, None, None, :] - cum
        nl, nr = cum.sum(axis=3), rest.sum(axis=3)
        ok = ((ar_L[:-1] < present.sum(axis=2)[..., None] - 1)
              & (nl >= params.min_leaf) & (nr >= params.min_leaf))
        imp = np.where(ok, _gini(cum) * nl + _gini(rest) * nr, np.inf)
        best_s = np.argmin(imp, axis=2)
        best_imp = np.take_along_axis(imp, best_s[..., None], axis=2)[..., 0]
        parent = _gini(node_tot) * node_tot.sum(axis=1)
        valid = best_imp < parent[:, None] - 1e-12
        perms = rng.permuted(np.tile(ar_p, (G, 1)), axis=1)
        rank = np.argsort(perms, axis=1)
        first = valid & (rank < mtry)
        use = np.where(first.any(axis=1)[:, None], np.where(first, best_imp, np.inf),
                       np.where(valid, best_imp, np.inf))
        j = np.argmin(np.take_along_axis(use, perms, axis=1), axis=1)
        fsel = perms[np.arange(G), j]
        ks = np.flatnonzero(np.isfinite(use[np.arange(G), fsel]))
        if ks.size == 0:
            break
        fk, sk = fsel[ks], best_s[ks, fsel[ks]]
        mask = np.zeros((ks.size, L), dtype=bool)
        np.put_along_axis(mask, order[ks, fk], ar_L[None, :] <= sk[:, None], axis=1)
        # levels unseen at this node follow the larger child
        larger_left = nl[ks, fk, sk] >= nr[ks, fk, sk]
        mask |= ~present[ks, fk] & larger_left[:, None]
        nids = frontier[S[ks]]
        lids = n_nodes + 2 * np.arange(ks.size)
        rids = lids + 1
        feature[nids], goes_left[nids] = fk, mask
        left[nids], right[nids] = lids, rids
        n_nodes += 2 * ks.size
        kmap = np.full(G, -1)
        kmap[ks] = np.arange(ks.size)
        kk = kmap[g]
        moved = kk >= 0
        r3, k3 = r2[moved], kk[moved]
        go = mask[k3, Xc[r3, fk[k3]]]
        node_of[r3] = np.where(go, lids[k3], rids[k3])
        frontier = np.concatenate([lids, rids])
        depth += 1
    m = n_nodes
    return Tree(feature[:m], goes_left[:m], left[:m], right[:m], value[:m])


def fit_forest(dataset: CategoricalDataset, target: str, predictors: Sequence[str],
               params: ForestParams | None = None,
               rng: np.random.Generator | None = None) -> ForestModel:
    """Bagged CART trees with Gini splits over unordered categorical predictors.

    Each tree is grown on a bootstrap resample with its own recorded seed,
    drawing ``max_features`` candidate predictors per node.
    """
    params = params or ForestParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    predictors = tuple(predictors)
    if target in predictors:
        raise ValueError("target cannot also be a predictor")
    if not predictors:
        raise ValueError("at least one predictor is required")
    Xc = dataset.columns(predictors) - 1
    y = dataset.column(target) - 1
    n_classes = dataset.codebook[target].d
    classes = tuple(range(1, n_classes + 1))
    arity = [dataset.codebook[nm].d for nm in predictors]
    mtry = params.max_features or math.ceil(math.sqrt(len(predictors)))
    mtry = min(mtry, len(predictors))
    seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=params.n_trees)]
    degenerate = np.unique(y).size < 2
    trees = []
    for s in seeds:
        trng = np.random.default_rng(s)
        boot = trng.integers(0, y.size, size=y.size)
        trees.append(_grow_tree(Xc[boot], y[boot], arity, n_classes, params, mtry, trng))
    return ForestModel(target, predictors, classes, trees, seeds, params, bool(degenerate))


def predict_class(model: ForestModel, dataset: CategoricalDataset) -> np.ndarray:
    """Majority vote of the trees (ties go to the lowest class); returns 1-based codes."""
    Xc = dataset.columns(model.predictors) - 1
    votes = np.zeros((dataset.n, len(model.classes)), dtype=np.int64)
    rows = np.arange(dataset.n)
    for tree in model.trees:
        votes[rows, tree.predict(Xc)] += 1
    return np.argmax(votes, axis=1) + 1
