"""Truncated Dirichlet-process mixture of products of multinomials (DPMPM).

The model is fitted with a blocked Gibbs sampler over the truncated
stick-breaking representation::

    z_i | pi            ~ Categorical(pi_1, ..., pi_K)
    Y_ij | z_i, theta   ~ Categorical(theta_{z_i}^{(j)})
    pi_k = V_k prod_{l<k} (1 - V_l),   V_k ~ Beta(1, alpha),  V_K = 1
    alpha ~ Gamma(a_alpha, rate=b_alpha)
    theta_k^{(j)} ~ Dirichlet(dirichlet_a, ..., dirichlet_a)

Posterior draws are then used to produce partially synthetic copies of a
dataset in which only the sensitive columns are redrawn.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import CategoricalDataset, Codebook, DataValidationError

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1

# sub-stream phase tags for SeedSequence spawn keys
PHASE_INIT = 0
PHASE_SWEEP = 1
PHASE_REPLICATE = 2
PHASE_FOREST = 3

_LOG_FLOOR = np.log(np.finfo(float).tiny)
_V_CLAMP = 1.0 - 1e-12


def substream(seed: int, *key: int) -> np.random.Generator:
    """Generator for a deterministic sub-stream of the master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(key)))


@dataclass(frozen=True)
class DpmpmHyperparams:
    K: int = 80
    a_alpha: float = 0.25
    b_alpha: float = 0.25
    dirichlet_a: float = 1.0
    nrun: int = 10000
    burn: int = 5000
    thin: int = 10
    seed: int = 221
    m: int = 5
    selection: str = "even"

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")
        for name in ("a_alpha", "b_alpha", "dirichlet_a"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.burn < self.nrun:
            raise ValueError(f"need 0 <= burn < nrun, got burn={self.burn}, nrun={self.nrun}")
        if self.thin < 1:
            raise ValueError(f"thin must be >= 1, got {self.thin}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.selection not in ("even", "last"):
            raise ValueError(f"selection must be 'even' or 'last', got {self.selection!r}")

    @property
    def n_retained(self) -> int:
        return (self.nrun - self.burn) // self.thin

    def to_dict(self) -> dict:
        return asdict(self)


def stick_weights(V: np.ndarray) -> np.ndarray:
    """Mixture weights from stick-breaking fractions."""
    V = np.asarray(V, dtype=float)
    remaining = np.concatenate(([1.0], np.cumprod(1.0 - V[:-1])))
    return V * remaining


@dataclass
class DpmpmState:
    """One state of the chain. ``z`` holds 1-based class labels."""

    z: np.ndarray
    V: np.ndarray
    pi: np.ndarray
    theta: list[np.ndarray]
    alpha: float

    @property
    def K(self) -> int:
        return self.pi.shape[0]

    def check(self, atol: float = 1e-10) -> None:
        """Raise AssertionError if an invariant is violated."""
        K = self.K
        assert self.V.shape == (K,) and self.V[-1] == 1.0, "V_K must equal 1"
        assert np.all((self.V >= 0) & (self.V <= 1)), "stick fractions outside [0, 1]"
        assert abs(self.pi.sum() - 1.0) <= atol, f"pi sums to {self.pi.sum()}"
        assert np.allclose(stick_weights(self.V), self.pi, rtol=0, atol=1e-12), \
            "pi inconsistent with V"
        for th in self.theta:
            assert th.shape[0] == K
            assert np.all(np.abs(th.sum(axis=1) - 1.0) <= atol), "theta row does not sum to 1"
        assert self.alpha > 0, "alpha must be positive"
        assert self.z.min() >= 1 and self.z.max() <= K, "z outside [1, K]"

    def copy(self) -> "DpmpmState":
        return DpmpmState(self.z.copy(), self.V.copy(), self.pi.copy(),
                          [th.copy() for th in self.theta], float(self.alpha))


@dataclass(frozen=True)
class PosteriorDraw:
    """A retained parameter snapshot (latent assignments are not kept)."""

    pi: np.ndarray
    theta: tuple[np.ndarray, ...]
    alpha: float


@dataclass
class PosteriorDraws:
    """Thinned post-burn-in draws, stacked along the first axis."""

    pi: np.ndarray                 # (R, K)
    theta: list[np.ndarray]        # per variable, (R, K, d_j)
    alpha: np.ndarray              # (R,)
    occupied_counts: np.ndarray    # (R,)
    iterations: np.ndarray         # (R,) 1-based sweep index of each draw
    hyper: DpmpmHyperparams
    variables: tuple[str, ...]

    def __len__(self):
        return self.pi.shape[0]

    def draw(self, i: int) -> PosteriorDraw:
        """0-based access to one retained draw."""
        return PosteriorDraw(self.pi[i], tuple(th[i] for th in self.theta), float(self.alpha[i]))

    @property
    def retained(self) -> list[PosteriorDraw]:
        return [self.draw(i) for i in range(len(self))]


def _codes0(dataset: CategoricalDataset) -> np.ndarray:
    if dataset.has_missing:
        raise DataValidationError("the sampler needs a complete dataset; call drop_incomplete first")
    return dataset.values - 1


def _dirichlet_rows(conc: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # Gamma(a) = Gamma(a + 1) * U**(1/a), evaluated in log space so tiny
    # concentrations cannot underflow a whole row to zero.
    logg = np.log(rng.standard_gamma(conc + 1.0)) + np.log1p(-rng.random(conc.shape)) / conc
    logg -= logg.max(axis=-1, keepdims=True)
    g = np.exp(logg)
    return g / g.sum(axis=-1, keepdims=True)


def _sample_categorical(logp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of one 0-based category per row of unnormalised log-probs."""
    p = np.exp(logp - logp.max(axis=1, keepdims=True))
    cum = np.cumsum(p, axis=1)
    u = rng.random(p.shape[0]) * cum[:, -1]
    k = (cum <= u[:, None]).sum(axis=1)
    return np.minimum(k, p.shape[1] - 1)


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    return np.minimum((cum <= u[:, None]).sum(axis=1), probs.shape[1] - 1)


def _safe_log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(x), _LOG_FLOOR)


def init_state(dataset: CategoricalDataset, hyper: DpmpmHyperparams,
               rng: np.random.Generator) -> DpmpmState:
    """Draw a starting state from the prior (z uniform, alpha at its prior mean)."""
    _codes0(dataset)
    K = hyper.K
    alpha0 = hyper.a_alpha / hyper.b_alpha
    z = rng.integers(1, K + 1, size=dataset.n)
    V = np.ones(K)
    if K > 1:
        V[:-1] = rng.beta(1.0, alpha0, size=K - 1)
    theta = [_dirichlet_rows(np.full((K, d), hyper.dirichlet_a), rng)
             for d in dataset.codebook.arities]
    return DpmpmState(z=z, V=V, pi=stick_weights(V), theta=theta, alpha=alpha0)


def gibbs_sweep(state: DpmpmState, dataset: CategoricalDataset, hyper: DpmpmHyperparams,
                rng: np.random.Generator, codes: np.ndarray | None = None) -> DpmpmState:
    """One blocked Gibbs sweep: z, then theta, then V (and pi), then alpha.

    ``codes`` may pass the precomputed 0-based data matrix to skip validation.
    """
    y = _codes0(dataset) if codes is None else codes
    K = state.K
    n = y.shape[0]

    # z | pi, theta
    logp = np.broadcast_to(_safe_log(state.pi), (n, K)).copy()
    for j, th in enumerate(state.theta):
        logp += _safe_log(th).T[y[:, j]]
    z0 = _sample_categorical(logp, rng)

    # theta | z
    theta = []
    for j, th in enumerate(state.theta):
        d = th.shape[1]
        counts = np.bincount(z0 * d + y[:, j], minlength=K * d).reshape(K, d)
        theta.append(_dirichlet_rows(hyper.dirichlet_a + counts, rng))

    # V | z, alpha
    nk = np.bincount(z0, minlength=K)
    above = np.cumsum(nk[::-1])[::-1] - nk
    V = np.ones(K)
    if K > 1:
        V[:-1] = rng.beta(1.0 + nk[:-1], state.alpha + above[:-1])
    pi = stick_weights(V)

    # alpha | V
    rate = hyper.b_alpha - np.log1p(-np.minimum(V[:-1], _V_CLAMP)).sum()
    alpha = rng.gamma(hyper.a_alpha + K - 1, 1.0 / rate)
    alpha = max(float(alpha), np.finfo(float).tiny)

    return DpmpmState(z=z0 + 1, V=V, pi=pi, theta=theta, alpha=alpha)


def log_likelihood(dataset: CategoricalDataset, state: DpmpmState) -> float:
    """Complete-data log-likelihood of the data and ``state.z``."""
    y = _codes0(dataset)
    z0 = state.z - 1
    ll = _safe_log(state.pi)[z0].sum()
    for j, th in enumerate(state.theta):
        ll += _safe_log(th)[z0, y[:, j]].sum()
    return float(ll)


def run_chain(dataset: CategoricalDataset, hyper: DpmpmHyperparams,
              progress: Callable[[int, int], None] | None = None,
              check_invariants: bool = True) -> PosteriorDraws:
    """Run ``hyper.nrun`` sweeps and keep every ``thin``-th post-burn-in state."""
    codes = _codes0(dataset)
    state = init_state(dataset, hyper, substream(hyper.seed, PHASE_INIT))
    R = hyper.n_retained
    K = hyper.K
    pis = np.empty((R, K))
    thetas = [np.empty((R, K, d)) for d in dataset.codebook.arities]
    alphas = np.empty(R)
    occupied = np.empty(R, dtype=np.int64)
    iters = np.empty(R, dtype=np.int64)
    r = 0
    for t in range(1, hyper.nrun + 1):
        state = gibbs_sweep(state, dataset, hyper, substream(hyper.seed, PHASE_SWEEP, t), codes)
        if check_invariants:
            state.check()
        if t > hyper.burn and (t - hyper.burn) % hyper.thin == 0:
            pis[r] = state.pi
            for j, th in enumerate(state.theta):
                thetas[j][r] = th
            alphas[r] = state.alpha
            occupied[r] = np.unique(state.z).size
            iters[r] = t
            r += 1
        if progress is not None:
            progress(t, hyper.nrun)
    assert r == R
    log.debug("chain finished: %d sweeps, %d retained", hyper.nrun, R)
    return PosteriorDraws(pis, thetas, alphas, occupied, iters, hyper,
                          tuple(dataset.codebook.names))


def mixture_marginal(draw: PosteriorDraw, j: int) -> np.ndarray:
    """Marginal category probabilities of variable ``j`` under one draw."""
    return draw.pi @ draw.theta[j]


def _check_sensitive(codebook: Codebook, sensitive_vars: Sequence[str]) -> list[int]:
    if not sensitive_vars:
        raise DataValidationError("no sensitive variables given; nothing to synthesize")
    idx = codebook.indices(sensitive_vars)
    flagged = set(codebook.sensitive_names)
    extra = [nm for nm in sensitive_vars if nm not in flagged]
    if extra:
        raise DataValidationError(f"variables not flagged sensitive in the codebook: {extra}")
    if len(set(idx)) != len(idx):
        raise DataValidationError("sensitive_vars contains duplicates")
    if len(idx) == codebook.r:
        raise DataValidationError("partial synthesis needs at least one unsynthesized variable")
    return idx


def synthesize_partial(dataset: CategoricalDataset, draw: PosteriorDraw,
                       sensitive_vars: Sequence[str], rng: np.random.Generator,
                       conditioning: str = "unsynthesized") -> CategoricalDataset:
    """Replace the ``sensitive_vars`` columns with draws from the model.

    A fresh class label is drawn for every record, then each synthesized
    variable is drawn from that class's kernel. With
    ``conditioning="unsynthesized"`` (the default) the label is drawn from
    ``p(z | pi, theta, unsynthesized values of the record)``, which keeps the
    association between released and synthesized columns. With
    ``conditioning="prior"`` it is drawn from ``pi`` alone.
    """
    cb = dataset.codebook
    syn_idx = _check_sensitive(cb, sensitive_vars)
    y = _codes0(dataset)
    K = draw.pi.shape[0]
    logp = np.broadcast_to(_safe_log(draw.pi), (dataset.n, K)).copy()
    if conditioning == "unsynthesized":
        for j in range(cb.r):
            if j not in syn_idx:
                logp += _safe_log(draw.theta[j]).T[y[:, j]]
    elif conditioning != "prior":
        raise ValueError(f"unknown conditioning mode {conditioning!r}")
    z0 = _sample_categorical(logp, rng)
    updates = {}
    for j in syn_idx:
        updates[cb.names[j]] = _sample_rows(draw.theta[j][z0], rng) + 1
    return dataset.replace_columns(updates)


def select_draw_indices(n_retained: int, m: int, selection: str = "even") -> list[int]:
    """1-based indices of the draws used for ``m`` replicates."""
    if m > n_retained:
        raise DataValidationError(
            f"m={m} replicates requested but only {n_retained} draws are retained")
    if selection == "even":
        return [(l * n_retained) // m for l in range(1, m + 1)]
    if selection == "last":
        return list(range(n_retained - m + 1, n_retained + 1))
    raise ValueError(f"unknown selection rule {selection!r}")


def config_hash(codebook: Codebook, hyper: DpmpmHyperparams, sensitive_vars: Sequence[str],
                extra: dict | None = None) -> str:
    doc = {"codebook": codebook.to_dict(), "sampler": hyper.to_dict(),
           "sensitive_vars": list(sensitive_vars), "extra": extra or {}}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class SyntheticReplicates:
    datasets: list[CategoricalDataset]
    draw_indices: list[int]
    seed: int
    config_hash: str
    sensitive_vars: tuple[str, ...]
    conditioning: str = "unsynthesized"

    @property
    def m(self) -> int:
        return len(self.datasets)

    def provenance(self) -> dict:
        return {"seed": self.seed, "config_hash": self.config_hash,
                "draw_indices": list(self.draw_indices), "m": self.m,
                "sensitive_vars": list(self.sensitive_vars), "conditioning": self.conditioning}


def generate_replicates(dataset: CategoricalDataset, hyper: DpmpmHyperparams,
                        sensitive_vars: Sequence[str], draws: PosteriorDraws | None = None,
                        conditioning: str = "unsynthesized",
                        progress: Callable[[int, int], None] | None = None) -> SyntheticReplicates:
    """Fit the chain (unless ``draws`` is given) and produce ``hyper.m`` replicates.

    Replicate ``l`` uses its own sub-stream of ``hyper.seed``, so it does not
    change when ``m`` changes.
    """
    _check_sensitive(dataset.codebook, sensitive_vars)
    if draws is None:
        draws = run_chain(dataset, hyper, progress=progress)
    idx = select_draw_indices(len(draws), hyper.m, hyper.selection)
    reps = [synthesize_partial(dataset, draws.draw(i - 1), sensitive_vars,
                               substream(hyper.seed, PHASE_REPLICATE, l), conditioning)
            for l, i in enumerate(idx, start=1)]
    return SyntheticReplicates(reps, idx, hyper.seed,
                               config_hash(dataset.codebook, hyper, sensitive_vars,
                                           {"conditioning": conditioning}),
                               tuple(sensitive_vars), conditioning)


# persistence

def _draws_meta(draws: PosteriorDraws) -> dict:
    return {"format_version": SNAPSHOT_VERSION, "hyper": draws.hyper.to_dict(),
            "variables": list(draws.variables)}


def save_draws(draws: PosteriorDraws, path, fmt: str | None = None) -> None:
    """Write draws as ``npz`` (binary) or ``json``; format follows the suffix by default.

    The npz writer pins zip timestamps so identical draws give identical bytes.
    """
    path = Path(path)
    fmt = fmt or ("json" if path.suffix == ".json" else "npz")
    meta = _draws_meta(draws)
    if fmt == "json":
        doc = dict(meta, pi=draws.pi.tolist(), alpha=draws.alpha.tolist(),
                   theta=[th.tolist() for th in draws.theta],
                   occupied_counts=draws.occupied_counts.tolist(),
                   iterations=draws.iterations.tolist())
        path.write_text(json.dumps(doc, sort_keys=True))
        return
    if fmt != "npz":
        raise ValueError(f"unknown snapshot format {fmt!r}")
    arrays = {"pi": draws.pi, "alpha": draws.alpha, "occupied_counts": draws.occupied_counts,
              "iterations": draws.iterations}
    for j, th in enumerate(draws.theta):
        arrays[f"theta_{j}"] = th
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(meta, sort_keys=True), zipfile.ZIP_DEFLATED)
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue(), zipfile.ZIP_DEFLATED)


def load_draws(path) -> PosteriorDraws:
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        meta = doc
        arrays = {"pi": np.array(doc["pi"], dtype=float), "alpha": np.array(doc["alpha"]),
                  "occupied_counts": np.array(doc["occupied_counts"], dtype=np.int64),
                  "iterations": np.array(doc["iterations"], dtype=np.int64)}
        theta = [np.array(th, dtype=float) for th in doc["theta"]]
    else:
        with np.load(path, allow_pickle=False) as npz, zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {k: npz[k] for k in ("pi", "alpha", "occupied_counts", "iterations")}
            theta = [npz[f"theta_{j}"] for j in range(len(meta["variables"]))]
    if meta.get("format_version") != SNAPSHOT_VERSION:
        raise DataValidationError(
            f"{path}: unsupported snapshot version {meta.get('format_version')}")
    hyper = DpmpmHyperparams(**meta["hyper"])
    R = arrays["pi"].shape[0]
    if R == 0:
        theta = [th.reshape(0, hyper.K, -1) for th in theta]
    return PosteriorDraws(arrays["pi"], theta, arrays["alpha"], arrays["occupied_counts"],
                          arrays["iterations"], hyper, tuple(meta["variables"]))
