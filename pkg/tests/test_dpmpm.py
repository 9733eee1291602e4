import numpy as np
import pytest

from catsynth.dataset import CategoricalDataset, Codebook, DataValidationError, VariableSpec
from catsynth.dpmpm import (DpmpmHyperparams, DpmpmState, PHASE_REPLICATE, PosteriorDraw,
                            generate_replicates, gibbs_sweep, init_state, load_draws,
                            log_likelihood, mixture_marginal, run_chain, save_draws,
                            select_draw_indices, stick_weights, substream, synthesize_partial)
from catsynth.simulate import SimSpec, simulate, small_simspec


def binary_dataset(counts=(3, 1)):
    cb = Codebook((VariableSpec("y", ("a", "b")),))
    vals = np.repeat([1, 2], counts)[:, None]
    return CategoricalDataset(cb, vals)


def test_hyperparam_defaults_and_validation():
    h = DpmpmHyperparams()
    assert (h.K, h.a_alpha, h.b_alpha, h.nrun, h.burn, h.thin, h.m) == \
        (80, 0.25, 0.25, 10000, 5000, 10, 5)
    assert h.n_retained == 500
    for bad in ({"K": 0}, {"a_alpha": 0}, {"burn": 10, "nrun": 10}, {"thin": 0}, {"m": 0},
                {"dirichlet_a": -1}, {"selection": "random"}):
        with pytest.raises(ValueError):
            DpmpmHyperparams(**bad)


def test_init_k1():
    ds = binary_dataset()
    st = init_state(ds, DpmpmHyperparams(K=1), np.random.default_rng(0))
    assert np.all(st.z == 1)
    np.testing.assert_array_equal(st.pi, [1.0])
    st.check()


def test_init_deterministic():
    data, _ = simulate(small_simspec(n=200))
    h = DpmpmHyperparams(K=10)
    a = init_state(data, h, substream(5, 0))
    b = init_state(data, h, substream(5, 0))
    assert np.array_equal(a.z, b.z) and np.array_equal(a.V, b.V)
    assert all(np.array_equal(x, y) for x, y in zip(a.theta, b.theta))


def test_init_k80():
    data, _ = simulate(small_simspec(n=100))
    st = init_state(data, DpmpmHyperparams(K=80), np.random.default_rng(1))
    assert st.V.shape == (80,) and st.V[-1] == 1.0
    st.check()


def test_sweep_invariants_hold_every_sweep():
    data, _ = simulate(small_simspec(n=300))
    h = DpmpmHyperparams(K=15, a_alpha=0.25, b_alpha=0.25)
    st = init_state(data, h, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for _ in range(200):
        st = gibbs_sweep(st, data, h, rng)
        assert abs(st.pi.sum() - 1) <= 1e-10
        for th in st.theta:
            assert np.all(np.abs(th.sum(axis=1) - 1) <= 1e-10)
        assert st.alpha > 0
        assert st.z.min() >= 1 and st.z.max() <= h.K
        assert np.max(np.abs(stick_weights(st.V) - st.pi)) <= 1e-12


def test_tiny_dirichlet_prior_stays_valid():
    data, _ = simulate(small_simspec(n=100))
    h = DpmpmHyperparams(K=30, dirichlet_a=1e-3, a_alpha=0.01, b_alpha=10)
    st = init_state(data, h, np.random.default_rng(0))
    rng = np.random.default_rng(2)
    for _ in range(50):
        st = gibbs_sweep(st, data, h, rng)
        st.check()


def test_k1_theta_conjugacy():
    # posterior of theta with counts (3, 1) and a flat prior is Dirichlet(4, 2)
    ds = binary_dataset((3, 1))
    h = DpmpmHyperparams(K=1, nrun=4000, burn=0, thin=1, seed=3)
    draws = run_chain(ds, h)
    th = draws.theta[0][:, 0, :]
    a, b = 4.0, 2.0
    sd = np.sqrt(a * b / ((a + b) ** 2 * (a + b + 1)))
    se = sd / np.sqrt(th.shape[0])
    assert abs(th[:, 0].mean() - 2 / 3) < 3 * se
    assert abs(th[:, 1].mean() - 1 / 3) < 3 * se


def test_identical_kernels_make_z_follow_pi():
    cb = Codebook((VariableSpec("y", ("a", "b", "c")),))
    rng = np.random.default_rng(0)
    ds = CategoricalDataset(cb, rng.integers(1, 4, size=(20000, 1)))
    K = 4
    V = np.array([0.4, 0.5, 0.3, 1.0])
    pi = stick_weights(V)
    theta = [np.tile([0.2, 0.5, 0.3], (K, 1))]
    st = DpmpmState(np.ones(20000, dtype=int), V, pi, theta, 1.0)
    out = gibbs_sweep(st, ds, DpmpmHyperparams(K=K), np.random.default_rng(9))
    freq = np.bincount(out.z - 1, minlength=K) / 20000
    se = np.sqrt(pi * (1 - pi) / 20000)
    assert np.all(np.abs(freq - pi) < 4 * se)


def test_separated_classes_are_coassigned():
    cb = Codebook(tuple(VariableSpec(f"v{j}", ("a", "b", "c")) for j in range(6)))
    spec = SimSpec(cb, [0.5, 0.5], [[[0.9, 0.05, 0.05], [0.05, 0.05, 0.9]]] * 6, 200, 4)
    data, z_true = simulate(spec)
    h = DpmpmHyperparams(K=10)
    st = init_state(data, h, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    co = np.zeros((200, 200))
    kept = 0
    for t in range(300):
        st = gibbs_sweep(st, data, h, rng)
        if t >= 100:
            co += st.z[:, None] == st.z[None, :]
            kept += 1
    co /= kept
    same = z_true[:, None] == z_true[None, :]
    off = ~np.eye(200, dtype=bool)
    assert co[same & off].mean() > co[~same].mean() + 0.5


def test_run_chain_retained_counts():
    ds = binary_dataset((5, 5))
    draws = run_chain(ds, DpmpmHyperparams(K=2, nrun=10000, burn=5000, thin=10, seed=1),
                      check_invariants=False)
    assert len(draws) == 500
    assert draws.iterations[0] == 5010 and draws.iterations[-1] == 10000
    one = run_chain(ds, DpmpmHyperparams(K=2, nrun=21, burn=20, thin=1, seed=1))
    assert len(one) == 1


def test_run_chain_deterministic():
    data, _ = simulate(small_simspec(n=150))
    h = DpmpmHyperparams(K=8, nrun=60, burn=20, thin=4, seed=12)
    a, b = run_chain(data, h), run_chain(data, h)
    assert np.array_equal(a.pi, b.pi) and np.array_equal(a.alpha, b.alpha)
    assert all(np.array_equal(x, y) for x, y in zip(a.theta, b.theta))
    assert np.array_equal(a.occupied_counts, b.occupied_counts)


def test_progress_hook_called():
    seen = []
    run_chain(binary_dataset(), DpmpmHyperparams(K=2, nrun=5, burn=1, thin=1),
              progress=lambda t, n: seen.append((t, n)))
    assert seen == [(t, 5) for t in range(1, 6)]


def test_log_likelihood_exchangeable():
    data, _ = simulate(small_simspec(n=200))
    h = DpmpmHyperparams(K=6)
    st = init_state(data, h, np.random.default_rng(0))
    perm = np.random.default_rng(1).permutation(data.n)
    st_p = st.copy()
    st_p.z = st.z[perm]
    a = log_likelihood(data, st)
    b = log_likelihood(data.take(perm), st_p)
    assert a == pytest.approx(b, rel=1e-12)


# synthesis

def _draw_for(codebook, K, rng):
    pi = rng.dirichlet(np.ones(K))
    theta = tuple(rng.dirichlet(np.ones(d), size=K) for d in codebook.arities)
    return PosteriorDraw(pi, theta, 1.0)


def test_synthesize_keeps_unsynthesized_columns():
    data, _ = simulate(small_simspec(n=500))
    draw = _draw_for(data.codebook, 5, np.random.default_rng(0))
    sens = data.codebook.sensitive_names
    syn = synthesize_partial(data, draw, sens, np.random.default_rng(1))
    for nm in data.codebook.nonsensitive_names:
        assert np.array_equal(syn.column(nm), data.column(nm))
    assert np.array_equal(syn.record_ids, data.record_ids)
    assert not all(np.array_equal(syn.column(nm), data.column(nm)) for nm in sens)


def test_synthesize_degenerate_kernel():
    data, _ = simulate(small_simspec(n=100))
    cb = data.codebook
    K = 3
    theta = [np.full((K, d), 1.0 / d) for d in cb.arities]
    j = cb.index("smoker")
    theta[j] = np.tile([0.0, 1.0], (K, 1))
    draw = PosteriorDraw(np.full(K, 1 / K), tuple(theta), 1.0)
    syn = synthesize_partial(data, draw, ["smoker"], np.random.default_rng(0))
    assert np.all(syn.column("smoker") == 2)


def test_synthesize_prior_mode_matches_mixture_marginal():
    data, _ = simulate(small_simspec(n=10000))
    draw = _draw_for(data.codebook, 4, np.random.default_rng(5))
    syn = synthesize_partial(data, draw, ["smoker", "exercise"], np.random.default_rng(6),
                             conditioning="prior")
    for nm in ("smoker", "exercise"):
        expected = mixture_marginal(draw, data.codebook.index(nm))
        freq = np.bincount(syn.column(nm) - 1, minlength=2) / data.n
        se = np.sqrt(expected * (1 - expected) / data.n)
        assert np.all(np.abs(freq - expected) < 4 * se)


def test_synthesize_conditional_mode_matches_per_record_oracle():
    data, _ = simulate(small_simspec(n=300))
    cb = data.codebook
    draw = _draw_for(cb, 3, np.random.default_rng(7))
    j = cb.index("drinker")
    unsyn = [cb.index(nm) for nm in cb.names if nm != "drinker"]
    # oracle: Bayes rule record by record
    expected = np.zeros(2)
    for row in data.values:
        w = draw.pi.copy()
        for u in unsyn:
            w = w * draw.theta[u][:, row[u] - 1]
        w /= w.sum()
        expected += w @ draw.theta[j]
    expected /= data.n
    reps = 60
    freq = np.zeros(2)
    for l in range(reps):
        syn = synthesize_partial(data, draw, ["drinker"], np.random.default_rng(100 + l))
        freq += np.bincount(syn.column("drinker") - 1, minlength=2)
    freq /= reps * data.n
    se = np.sqrt(expected * (1 - expected) / (reps * data.n))
    assert np.all(np.abs(freq - expected) < 4 * se)


def test_synthesize_errors():
    data, _ = simulate(small_simspec(n=50))
    draw = _draw_for(data.codebook, 2, np.random.default_rng(0))
    with pytest.raises(DataValidationError, match="nothing to synthesize"):
        synthesize_partial(data, draw, [], np.random.default_rng(0))
    with pytest.raises(DataValidationError, match="not flagged"):
        synthesize_partial(data, draw, ["region"], np.random.default_rng(0))
    with pytest.raises(ValueError):
        synthesize_partial(data, draw, ["smoker"], np.random.default_rng(0), conditioning="x")


def test_draw_index_selection():
    assert select_draw_indices(500, 5) == [100, 200, 300, 400, 500]
    assert select_draw_indices(500, 1) == [500]
    assert select_draw_indices(500, 3, "last") == [498, 499, 500]
    with pytest.raises(DataValidationError):
        select_draw_indices(4, 5)


@pytest.fixture(scope="module")
def fitted():
    data, _ = simulate(small_simspec(n=400, seed=8))
    h = DpmpmHyperparams(K=10, nrun=300, burn=100, thin=4, m=5, seed=77)
    return data, h, run_chain(data, h)


def test_generate_replicates(fitted):
    data, h, draws = fitted
    sens = data.codebook.sensitive_names
    reps = generate_replicates(data, h, sens, draws)
    assert reps.m == 5
    assert reps.draw_indices == [10, 20, 30, 40, 50]
    for a in range(5):
        for b in range(a + 1, 5):
            assert not np.array_equal(reps.datasets[a].values, reps.datasets[b].values)
    # replicate l uses its own stream
    again = synthesize_partial(data, draws.draw(29), sens, substream(77, PHASE_REPLICATE, 3))
    assert again == reps.datasets[2]
    prov = reps.provenance()
    assert prov["seed"] == 77 and len(prov["config_hash"]) == 64


def test_generate_single_and_too_many(fitted):
    data, h, draws = fitted
    sens = data.codebook.sensitive_names
    one = generate_replicates(data, DpmpmHyperparams(**{**h.to_dict(), "m": 1}), sens, draws)
    assert one.m == 1
    with pytest.raises(DataValidationError):
        generate_replicates(data, DpmpmHyperparams(**{**h.to_dict(), "m": 51}), sens, draws)


@pytest.mark.parametrize("suffix", [".npz", ".json"])
def test_draws_snapshot_round_trip(fitted, tmp_path, suffix):
    _, h, draws = fitted
    path = tmp_path / f"draws{suffix}"
    save_draws(draws, path)
    back = load_draws(path)
    assert back.hyper == h
    np.testing.assert_array_equal(back.pi, draws.pi)
    np.testing.assert_array_equal(back.alpha, draws.alpha)
    for a, b in zip(back.theta, draws.theta):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(back.iterations, draws.iterations)


def test_npz_snapshot_bytes_reproducible(fitted, tmp_path):
    _, _, draws = fitted
    save_draws(draws, tmp_path / "a.npz")
    save_draws(draws, tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
