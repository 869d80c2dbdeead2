"""Tests for the semi-synthetic generator and benchmark helpers.

Oracles: pca_top2 is checked against a direct eigendecomposition of the
sample covariance; kmeans against planted well-separated blobs; the
sparse draw against fixed Normal quantile thresholds; the generator
against its by-construction variance shares.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import ndtri

from deconfound.data import Dataset
from deconfound.errors import ConfigError, DataError
from deconfound.synth import (
    BenchmarkRow,
    SynthConfig,
    SynthDataset,
    generate,
    kmeans,
    pca_top2,
    run_benchmark,
    sparse_normal,
    surrogate_causes,
    _lloyd,
    _plus_plus_init,
)


# ---------------------------------------------------------------- pca_top2


def test_pca_top2_matches_eigendecomposition_up_to_sign():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(400, 7)) @ rng.normal(size=(7, 7))
    scores = pca_top2(x)

    xc = x - x.mean(axis=0)
    vals, vecs = np.linalg.eigh(np.cov(x, rowvar=False))
    order = np.argsort(vals)[::-1]
    for j in range(2):
        raw = xc @ vecs[:, order[j]]
        lo, hi = raw.min(), raw.max()
        minmax = (raw - lo) / (hi - lo)
        col = scores[:, j]
        same = np.allclose(col, minmax, atol=1e-10)
        flipped = np.allclose(col, 1.0 - minmax, atol=1e-10)
        assert same or flipped


def test_pca_top2_minmax_hits_zero_and_one_exactly():
    rng = np.random.default_rng(4)
    scores = pca_top2(rng.normal(size=(100, 5)))
    assert_array_equal(scores.min(axis=0), [0.0, 0.0])
    assert_array_equal(scores.max(axis=0), [1.0, 1.0])


def test_pca_top2_collinear_data_gives_constant_second_column():
    t = np.linspace(-2.0, 5.0, 50)
    x = np.outer(t, [1.0, -2.0, 0.5]) + 3.0
    scores = pca_top2(x)
    assert_array_equal(scores[:, 1], np.zeros(50))
    assert scores[:, 0].min() == 0.0 and scores[:, 0].max() == 1.0


def test_pca_top2_rejects_degenerate_input():
    with pytest.raises(DataError):
        pca_top2(np.ones((50, 4)))
    with pytest.raises(DataError):
        pca_top2(np.arange(10.0).reshape(10, 1))
    with pytest.raises(DataError):
        pca_top2(np.ones((2, 4)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_pca_top2_scores_stay_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    scores = pca_top2(rng.normal(size=(30, 4)))
    assert scores.min() >= 0.0 and scores.max() <= 1.0


# ------------------------------------------------------------------ kmeans


def _planted_blobs(rng, n_per=100, spread=0.05):
    centers = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    pts = np.concatenate([
        c + spread * rng.normal(size=(n_per, 2)) for c in centers
    ])
    truth = np.repeat(np.arange(4), n_per)
    return pts, truth


def test_kmeans_recovers_well_separated_blobs():
    rng = np.random.default_rng(8)
    pts, truth = _planted_blobs(rng)
    labels = kmeans(pts, 4, seed=1)
    agree = 0
    for blob in range(4):
        values, counts = np.unique(labels[truth == blob], return_counts=True)
        agree += counts.max()
    assert agree / len(truth) >= 0.99
    assert set(np.unique(labels)) == {1, 2, 3, 4}


def test_kmeans_k_equals_n_gives_zero_cost():
    rng = np.random.default_rng(9)
    pts = rng.normal(size=(12, 2))
    labels = kmeans(pts, 12, seed=0)
    assert sorted(labels) == list(range(1, 13))


def test_kmeans_objective_non_increasing():
    rng = np.random.default_rng(10)
    pts, _ = _planted_blobs(rng, n_per=50, spread=0.4)
    for restart in range(5):
        centers = _plus_plus_init(pts, 4, rng)
        _, _, costs = _lloyd(pts, centers)
        assert all(b <= a + 1e-9 for a, b in zip(costs, costs[1:]))


def test_kmeans_k1_centroid_is_mean():
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(40, 3))
    _, centers, costs = _lloyd(pts, pts.mean(axis=0, keepdims=True))
    assert_allclose(centers[0], pts.mean(axis=0), atol=1e-12)
    assert_allclose(costs[-1], ((pts - pts.mean(axis=0)) ** 2).sum(), rtol=1e-12)


def test_kmeans_labels_ascend_with_last_coordinate():
    rng = np.random.default_rng(12)
    pts, truth = _planted_blobs(rng, n_per=80, spread=0.02)
    labels = kmeans(pts, 4, seed=5)
    keys = [
        (pts[labels == lab, 1].mean(), pts[labels == lab, 0].mean())
        for lab in (1, 2, 3, 4)
    ]
    assert all(b > a for a, b in zip(keys, keys[1:]))


def test_kmeans_deterministic_and_validates():
    rng = np.random.default_rng(13)
    pts = rng.normal(size=(30, 2))
    assert_array_equal(kmeans(pts, 3, seed=7), kmeans(pts, 3, seed=7))
    with pytest.raises(DataError):
        kmeans(pts, 0, seed=0)
    with pytest.raises(DataError):
        kmeans(pts, 31, seed=0)
    with pytest.raises(DataError):
        kmeans(pts[:, 0], 2, seed=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_kmeans_uses_every_label_once_reachable(seed, k):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(24, 2))
    labels = kmeans(pts, k, seed=seed)
    assert set(np.unique(labels)) == set(range(1, k + 1))


# ------------------------------------------------------------ sparse_normal


def test_sparse_normal_zero_fraction_near_band_width():
    v = sparse_normal(100_000, sd=0.5, seed=0)
    frac = (v == 0.0).mean()
    assert 0.59 <= frac <= 0.61


def test_sparse_normal_survivors_clear_quantile_threshold():
    sd = 0.5
    v = sparse_normal(20_000, sd=sd, seed=1)
    nz = v[v != 0.0]
    assert np.abs(nz).min() >= sd * ndtri(0.8) - 1e-12


def test_sparse_normal_scale_equivariant():
    a = sparse_normal(500, sd=1.0, seed=42)
    b = sparse_normal(500, sd=2.0, seed=42)
    assert_array_equal(b, 2.0 * a)


def test_sparse_normal_validates():
    with pytest.raises(ConfigError):
        sparse_normal(10, sd=0.0, seed=0)
    with pytest.raises(ConfigError):
        sparse_normal(10, sd=1.0, band=(80.0, 20.0), seed=0)
    with pytest.raises(ConfigError):
        sparse_normal(10, sd=1.0, band=(0.0, 50.0), seed=0)


@settings(max_examples=25, deadline=None)
@given(
    st.integers(0, 10_000),
    st.floats(5.0, 45.0),
    st.floats(55.0, 95.0),
)
def test_sparse_normal_band_property(seed, lo, hi):
    v = sparse_normal(300, sd=1.3, band=(lo, hi), seed=seed)
    nz = v[v != 0.0]
    q_lo, q_hi = 1.3 * ndtri(lo / 100.0), 1.3 * ndtri(hi / 100.0)
    assert not np.any((nz > q_lo) & (nz < q_hi))


# ------------------------------------------------------------------ config


def test_synth_config_validates_variance_partition():
    with pytest.raises(ConfigError):
        SynthConfig(nu_x=0.5, nu_z=0.5)
    with pytest.raises(ConfigError):
        SynthConfig(nu_x=-0.1, nu_z=0.3)
    with pytest.raises(ConfigError):
        SynthConfig(nu_x=0.3, nu_z=0.3, sparse_band=(0.0, 80.0))
    with pytest.raises(ConfigError):
        SynthConfig(nu_x=0.3, nu_z=0.3, n_clusters=1)
    cfg = SynthConfig(nu_x=0.45, nu_z=0.45)
    assert_allclose(cfg.nu_eps, 0.1, atol=1e-15)


# --------------------------------------------------------------- generate


def test_generate_variance_audit():
    cfg = SynthConfig(nu_x=0.6, nu_z=0.3, seed=21)
    sd = generate(cfg, n_rows=10_000, n_causes=19)
    shares = sd.components.var(axis=0)
    target = [0.6, 0.9 * 0.3, 0.1 * 0.3, 0.1]
    assert_allclose(shares, target, atol=0.02)
    assert_allclose(shares, target, atol=1e-10)


def test_generate_balance_and_labels():
    cfg = SynthConfig(nu_x=0.2, nu_z=0.7, seed=5)
    sd = generate(cfg, n_rows=2000, n_causes=19)
    frac = sd.dataset.outcome.mean()
    assert 0.48 <= frac <= 0.52
    assert set(np.unique(sd.u)) == {1, 2, 3, 4}
    assert sd.sigma_k.shape == (4,)
    assert np.all(sd.sigma_k > 1.0)
    assert set(np.unique(sd.dataset.outcome)) <= {0.0, 1.0}


def test_generate_deterministic():
    cfg = SynthConfig(nu_x=0.45, nu_z=0.45, seed=33)
    a = generate(cfg, n_rows=500, n_causes=8)
    b = generate(cfg, n_rows=500, n_causes=8)
    assert_array_equal(a.dataset.causes, b.dataset.causes)
    assert_array_equal(a.dataset.outcome, b.dataset.outcome)
    assert_array_equal(a.u, b.u)
    assert_array_equal(a.true_beta, b.true_beta)
    assert a.beta0 == b.beta0


def test_generate_true_effects_match_recipe():
    cfg = SynthConfig(nu_x=0.5, nu_z=0.4, seed=2)
    sd = generate(cfg, n_rows=1500, n_causes=10)
    ds = sd.dataset
    design = np.column_stack([np.ones(ds.n_rows), ds.covariates])
    coef, _, _, _ = np.linalg.lstsq(design, ds.causes, rcond=None)
    sigma_x = (design @ coef @ sd.true_beta).std()
    assert_allclose(
        sd.true_effects, sd.true_beta * np.sqrt(0.5) / sigma_x, rtol=1e-10
    )
    zeros = sd.true_beta == 0.0
    assert zeros.any()
    assert_array_equal(sd.true_effects[zeros], np.zeros(zeros.sum()))


def test_generate_zero_cause_share_gives_zero_effects():
    cfg = SynthConfig(nu_x=0.0, nu_z=0.8, seed=9)
    sd = generate(cfg, n_rows=800, n_causes=6)
    assert_array_equal(sd.true_effects, np.zeros(6))
    assert_array_equal(sd.components[:, 0], np.zeros(800))


def test_generate_accepts_supplied_causes():
    rng = np.random.default_rng(14)
    x, f = surrogate_causes(600, 7, rng)
    cfg = SynthConfig(nu_x=0.45, nu_z=0.45, seed=3)
    sd = generate(cfg, causes=x, covariates=f)
    assert sd.dataset.causes.shape == (600, 7)
    assert_array_equal(sd.dataset.causes, x)
    with pytest.raises(ConfigError):
        generate(cfg, causes=x)
    with pytest.raises(ConfigError):
        generate(cfg, covariates=f)
    with pytest.raises(ConfigError):
        generate(cfg, causes=x, covariates=f[:, :1])


def test_generate_unreachable_balance_raises():
    cfg = SynthConfig(nu_x=0.45, nu_z=0.45, n_clusters=2, seed=1)
    with pytest.raises(DataError, match="achieved positive fraction"):
        generate(cfg, n_rows=3, n_causes=2)


def test_synth_dataset_rejects_imbalanced_outcome():
    rng = np.random.default_rng(15)
    x, f = surrogate_causes(100, 4, rng)
    names = ("x01", "x02", "x03", "x04")
    roles = {n: "cause-volume" for n in names}
    roles.update({"age": "age", "gender": "covariate", "y": "outcome"})
    ds = Dataset(
        causes=x, covariates=f, outcome=np.ones(100), roles=roles,
        cause_names=names, covariate_names=("age", "gender"), outcome_name="y",
    )
    cfg = SynthConfig(nu_x=0.45, nu_z=0.45, n_clusters=2)
    with pytest.raises(DataError, match="balance"):
        SynthDataset(
            dataset=ds, u=np.ones(100, dtype=int), true_beta=np.zeros(4),
            true_gamma=0.0, sigma_k=np.ones(2), true_effects=np.zeros(4),
            beta0=0.0, config=cfg,
        )


def test_surrogate_causes_shapes_and_covariates():
    rng = np.random.default_rng(16)
    x, f = surrogate_causes(300, 19, rng)
    assert x.shape == (300, 19)
    assert f.shape == (300, 2)
    assert set(np.unique(f[:, 1])) <= {0.0, 1.0}
    rng2 = np.random.default_rng(16)
    x2, f2 = surrogate_causes(300, 19, rng2)
    assert_array_equal(x, x2)
    assert_array_equal(f, f2)


# ----------------------------------------------------------------- table


def test_benchmark_row_deltas_are_improvements_over_non_causal():
    row = BenchmarkRow(
        ratio="1/1", nu_x=0.45, nu_z=0.45, non_causal=25.0, roa=24.0,
        ppca=23.0, bpmf=22.5, oracle=22.0, ppca_excluded=0, bpmf_excluded=1,
    )
    assert row.delta_roa == 1.0
    assert row.delta_ppca == 2.0
    assert row.delta_bpmf == 2.5


def test_run_benchmark_small_grid_reproducible():
    kwargs = dict(
        grid=[(1, 1)], n_sims=1, n_rows=200, n_causes=6, seed=4,
        n_clusters=2, k_fit=2,
        chain={"n_warmup": 25, "n_samples": 10, "thin": 1},
        n_replicates=100,
    )
    table = run_benchmark(**kwargs)
    again = run_benchmark(**kwargs)
    assert table.to_text() == again.to_text()
    assert len(table.rows) == 1
    row = table.rows[0]
    assert row.ratio == "1/1"
    assert_allclose(row.nu_x, 0.45, atol=1e-15)
    for value in (row.non_causal, row.roa, row.oracle):
        assert np.isfinite(value) and value > 0.0
    header = table.to_text().splitlines()[0]
    assert header.split("\t")[:6] == [
        "ratio", "Non-causal", "ROA", "PPCA", "BPMF", "Oracle",
    ]


def test_run_benchmark_rejects_bad_sims():
    with pytest.raises(ConfigError):
        run_benchmark(grid=[(1, 1)], n_sims=0)
