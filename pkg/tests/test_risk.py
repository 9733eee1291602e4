import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from catsynth.dataset import CategoricalDataset, Codebook, VariableSpec
from catsynth.risk import (_all_patterns, _greedy_by_pattern, cap, classification_risk,
                           em_fellegi_sunter, greedy_link, match_risk, pattern_counts,
                           pattern_weights, record_linkage_risk, risk_report)
from catsynth.statmodels import ForestParams


def make_codebook(arities, sensitive_from=None):
    sensitive_from = len(arities) if sensitive_from is None else sensitive_from
    return Codebook(tuple(VariableSpec(f"v{j}", tuple(f"L{i}" for i in range(d)),
                                       sensitive=j >= sensitive_from)
                          for j, d in enumerate(arities)))


def random_pair(rng, n, arities, resample=0.5):
    cb = make_codebook(arities)
    vals = np.column_stack([rng.integers(1, d + 1, n) for d in arities])
    conf = CategoricalDataset(cb, vals)
    syn_vals = vals.copy()
    flip = rng.random(vals.shape) < resample
    syn_vals[flip] = np.column_stack([rng.integers(1, d + 1, n) for d in arities])[flip]
    return conf, CategoricalDataset(cb, syn_vals)


def unique_keys_dataset(n):
    # two keys whose combinations are all distinct
    cb = make_codebook([n, 2])
    return CategoricalDataset(cb, np.column_stack([np.arange(1, n + 1), np.ones(n, int)]))


# exact-match identification risk

def test_self_match_baseline():
    ds = unique_keys_dataset(30)
    res = match_risk(ds, ds, ["v0", "v1"])
    assert (res.expected_match_risk, res.true_match_rate, res.false_match_rate) == (30, 1, 0)


def test_shared_key_hand_case():
    cb = make_codebook([2, 2])
    ds = CategoricalDataset(cb, [[1, 1], [1, 1]])
    res = match_risk(ds, ds, ["v0"], keep_traces=True)
    assert res.c.tolist() == [2, 2] and res.T.all()
    assert res.expected_match_risk == 1.0
    assert res.unique_match_count == 0 and res.false_rate_undefined
    assert res.true_match_rate == 0 and res.false_match_rate == 0


def brute_match(conf, syn, known):
    idx = [conf.codebook.index(k) for k in known]
    n = conf.n
    expected, K, F, s = 0.0, 0, 0, 0
    for i in range(n):
        key = tuple(conf.values[i, idx])
        c = 0
        T = 0
        for j in range(syn.n):
            if tuple(syn.values[j, idx]) == key:
                c += 1
                if syn.record_ids[j] == conf.record_ids[i]:
                    T = 1
        if c > 0:
            expected += T / c
        if c == 1:
            s += 1
            K += T
            F += 1 - T
    return expected, K / n, (F / s if s else 0.0)


def test_match_risk_equals_double_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(5, 120))
        conf, syn = random_pair(rng, n, rng.integers(2, 5, size=4).tolist())
        known = [f"v{j}" for j in sorted(rng.choice(4, size=rng.integers(1, 5), replace=False))]
        res = match_risk(conf, syn, known)
        exp, tr, fr = brute_match(conf, syn, known)
        assert res.expected_match_risk == pytest.approx(exp, rel=1e-12, abs=0)
        assert res.true_match_rate == tr and res.false_match_rate == fr


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_candidate_sets_shrink_with_more_known_vars(seed):
    rng = np.random.default_rng(seed)
    conf, syn = random_pair(rng, 60, [2, 3, 2, 4])
    small = match_risk(conf, syn, ["v0", "v1"], keep_traces=True)
    large = match_risk(conf, syn, ["v0", "v1", "v2"], keep_traces=True)
    assert np.all(large.c <= small.c)


def test_match_targets_subset():
    ds = unique_keys_dataset(10)
    res = match_risk(ds, ds, ["v0"], targets=[0, 3, 5])
    assert res.n_targets == 3 and res.expected_match_risk == 3


# correct attribution probability

def test_cap_all_share_key_and_target():
    cb = make_codebook([2, 2])
    conf = CategoricalDataset(cb, [[1, 2]])
    syn = CategoricalDataset(cb, [[1, 2]] * 4, [str(i) for i in range(4)])
    assert cap(conf, syn, ["v0"], "v1").average == 1.0


def test_cap_two_of_three():
    cb = make_codebook([2, 2])
    conf = CategoricalDataset(cb, [[1, 1]])
    syn = CategoricalDataset(cb, [[1, 1], [1, 1], [1, 2], [2, 1]], list("abcd"))
    assert cap(conf, syn, ["v0"], "v1").values[0] == pytest.approx(2 / 3, rel=1e-15)


def brute_cap(conf, syn, keys, target):
    idx = [conf.codebook.index(k) for k in keys]
    t = conf.codebook.index(target)
    out = []
    for i in range(conf.n):
        num = den = 0
        for j in range(syn.n):
            if np.array_equal(conf.values[i, idx], syn.values[j, idx]):
                den += 1
                num += conf.values[i, t] == syn.values[j, t]
        out.append(num / den if den else np.nan)
    return np.array(out)


def test_cap_equals_enumeration_oracle():
    rng = np.random.default_rng(1)
    for _ in range(5):
        n = int(rng.integers(10, 150))
        conf, syn = random_pair(rng, n, [2, 3, 2, 3, 2])
        names = conf.codebook.names
        for size in (1, 2, 3):
            for keys in itertools.combinations(names[:-1], size):
                got = cap(conf, syn, keys, names[-1])
                ref = brute_cap(conf, syn, keys, names[-1])
                np.testing.assert_array_equal(got.values, ref)
                if np.isnan(ref).all():
                    assert got.average is None
                else:
                    assert got.average == np.nanmean(ref)


def test_cap_undefined_modes():
    cb = make_codebook([3, 2])
    conf = CategoricalDataset(cb, [[1, 1], [3, 1]])
    syn = CategoricalDataset(cb, [[1, 1], [2, 2]])
    ex = cap(conf, syn, ["v0"], "v1")
    zero = cap(conf, syn, ["v0"], "v1", undefined="zero")
    assert ex.n_undefined == 1 and ex.average == 1.0
    assert zero.average == 0.5
    with pytest.raises(ValueError):
        cap(conf, syn, ["v0"], "v0")


# Fellegi-Sunter EM

def simulate_pairs(rng, n_pairs, H, m, u, p):
    is_match = rng.random(n_pairs) < p
    probs = np.where(is_match[:, None], m, u)
    return (rng.random((n_pairs, H)) < probs).astype(int)


def compress(gamma):
    pats, counts = np.unique(gamma, axis=0, return_counts=True)
    return pats, counts


def test_em_separable():
    pats = np.array([[1, 1, 1], [0, 0, 0]])
    fit = em_fellegi_sunter(pats, [30, 970])
    assert np.all(fit.m_probs > 1 - 1e-5) and np.all(fit.u_probs < 1e-5)
    assert fit.prevalence == pytest.approx(0.03, abs=1e-6)


def test_em_recovers_generating_parameters():
    rng = np.random.default_rng(42)
    pats, counts = compress(simulate_pairs(rng, 100_000, 5, 0.9, 0.1, 0.01))
    fit = em_fellegi_sunter(pats, counts)
    assert fit.converged
    assert np.all(np.abs(fit.m_probs - 0.9) <= 0.05)
    assert np.all(np.abs(fit.u_probs - 0.1) <= 0.05)
    assert abs(fit.prevalence - 0.01) <= 0.05
    assert np.all(np.diff(fit.loglik_path) >= -1e-8 * abs(fit.loglik_path[0]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_em_loglik_monotone(seed, H):
    rng = np.random.default_rng(seed)
    m, u = rng.uniform(0.5, 0.99, H), rng.uniform(0.01, 0.5, H)
    pats, counts = compress(simulate_pairs(rng, 2000, H, m, u, rng.uniform(0.02, 0.3)))
    fit = em_fellegi_sunter(pats, counts)
    path = np.array(fit.loglik_path)
    assert np.all(np.diff(path) >= -1e-9 * abs(path[0]))


def test_em_deterministic():
    rng = np.random.default_rng(3)
    pats, counts = compress(simulate_pairs(rng, 5000, 4, 0.85, 0.2, 0.1))
    a = em_fellegi_sunter(pats, counts, init=(0.8, 0.3, 0.2))
    b = em_fellegi_sunter(pats, counts, init=(0.8, 0.3, 0.2))
    assert np.array_equal(a.m_probs, b.m_probs) and a.loglik_path == b.loglik_path


def test_em_input_errors():
    with pytest.raises(ValueError):
        em_fellegi_sunter(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        em_fellegi_sunter([[0, 2]])


# linkage

def test_pattern_counts_match_pair_enumeration():
    rng = np.random.default_rng(5)
    conf, syn = random_pair(rng, 40, [2, 3, 2, 3])
    keys = ["v0", "v1", "v3"]
    ck, sk = conf.columns(keys), syn.columns(keys)
    ref = np.zeros(8, dtype=np.int64)
    for i in range(conf.n):
        for j in range(syn.n):
            b = sum(1 << h for h in range(3) if ck[i, h] == sk[j, h])
            ref[b] += 1
    np.testing.assert_array_equal(pattern_counts(conf, syn, keys), ref)


def test_pattern_greedy_equals_greedy_over_all_pairs():
    rng = np.random.default_rng(6)
    conf, syn = random_pair(rng, 35, [2, 3, 2], resample=0.4)
    keys = ["v0", "v1", "v2"]
    pats = _all_patterns(3)
    fit = em_fellegi_sunter(pats, pattern_counts(conf, syn, keys))
    w = pattern_weights(pats, fit.m_probs, fit.u_probs)
    ck, sk = conf.columns(keys), syn.columns(keys)
    pairs = []
    for i in range(conf.n):
        for j in range(syn.n):
            b = sum(1 << h for h in range(3) if ck[i, h] == sk[j, h])
            pairs.append((i, j, float(w[b])))
    assert _greedy_by_pattern(ck, sk, w, 0.0) == greedy_link(pairs, 0.0)


def test_greedy_link_input_order_irrelevant():
    rng = np.random.default_rng(7)
    pairs = [(int(a), int(b), float(rng.integers(-2, 4)))
             for a in range(8) for b in range(8)]
    ref = greedy_link(pairs)
    for _ in range(5):
        rng.shuffle(pairs)
        assert greedy_link(pairs) == ref
    assert all(w > 0 for *_, w in ref)


def test_self_linkage_is_all_true():
    ds = unique_keys_dataset(40)
    res = record_linkage_risk(ds, ds, ["v0", "v1"])
    assert res.n_links == 40
    assert res.true_link_rate == 1 and res.false_link_rate == 0


def test_shuffled_identity_gives_chance_true_rate():
    rng = np.random.default_rng(8)
    n = 40
    cb = make_codebook([8, 5])
    combos = np.array(list(itertools.product(range(1, 9), range(1, 6))))[:n]
    conf = CategoricalDataset(cb, combos)
    rates = []
    for _ in range(200):
        syn = CategoricalDataset(cb, combos[rng.permutation(n)])
        rates.append(record_linkage_risk(conf, syn, ["v0", "v1"]).true_link_rate)
    se = np.sqrt((1 / n) * (1 - 1 / n) / n / len(rates))
    assert abs(np.mean(rates) - 1 / n) < 4 * se


# classification risk

def test_classification_deterministic_target_zero_error():
    rng = np.random.default_rng(9)
    cb = make_codebook([3, 2, 3])
    a, b = rng.integers(1, 4, 300), rng.integers(1, 3, 300)
    y = np.where(a == 1, 1, np.where(b == 1, 2, 3))
    ds = CategoricalDataset(cb, np.column_stack([a, b, y]))
    rows = classification_risk(ds, ds, "v2", ["v0", "v1"], ForestParams(n_trees=25))
    assert all(r.error_synthetic == 0 and r.error_confidential == 0 for r in rows)


def test_classification_rare_class_error_near_one():
    rng = np.random.default_rng(10)
    n = 1000
    cb = make_codebook([3, 2, 2])
    y = np.where(rng.random(n) < 0.01, 1, 2)
    ds = CategoricalDataset(cb, np.column_stack([rng.integers(1, 4, n), rng.integers(1, 3, n), y]))
    rows = classification_risk(ds, ds, "v2", ["v0", "v1"], ForestParams(n_trees=50))
    rare = rows[0]
    assert rare.n == int((y == 1).sum())
    assert rare.error_confidential >= 0.9 and rare.error_synthetic >= 0.9
    assert rows[1].error_confidential <= 0.05


def test_risk_report_baseline_equals_self_match():
    rng = np.random.default_rng(11)
    conf, syn = random_pair(rng, 80, [3, 3, 2, 2])
    rep = risk_report(conf, [syn, syn], known_vars=["v0", "v1"], linkage_keys=["v0", "v1", "v2"],
                      cap_keys=["v0", "v1"], cap_target="v3")
    doc = rep.to_dict()
    assert doc["match"]["baseline"] == match_risk(conf, conf, ["v0", "v1"]).to_dict()
    assert len(doc["match"]["per_replicate"]) == 2
    assert doc["linkage"]["baseline"]["true_link_rate"] is not None
    assert doc["cap"]["mean"] == cap(conf, syn, ["v0", "v1"], "v3").average
