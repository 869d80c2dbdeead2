import numpy as np
import pytest
from scipy.special import expit

from deconfound.ace import (
    AceContrast,
    AceEstimate,
    Intervention,
    ace_contrast,
    apply_intervention,
    average_causal_effect,
)
from deconfound.errors import DataError, GateError
from deconfound.outcome import BetaRegFit, residualize
from deconfound.plfm import extract_substitute
from deconfound.ppc import PpcReport
from tests.test_data import make_dataset
from tests.test_plfm import make_draws


def passing_report(n, mean=0.5):
    return PpcReport(
        p_values=np.full(n, mean), scored=np.ones(n, dtype=bool),
        mean_p=mean, tau=0.1, passed=mean > 0.1, n_replicates=200,
    )


def setup_world(n=30, d=4, m=150, seed=0, beta=None):
    rng = np.random.default_rng(seed)
    ds = make_dataset(n=n, d=d, p=2, seed=seed)
    k = 2
    draws = make_draws(
        rng.normal(size=(3, d, k)) * 0.4,
        rng.normal(size=(3, d, 2)) * 0.4,
        [0.5, 0.6, 0.7],
        rng.normal(size=(3, n, k)),
        ds.causes,
        np.ones((n, d), dtype=bool),
        ds.covariates,
    )
    z_hat = extract_substitute(draws)
    if beta is None:
        beta = rng.normal(size=(m, d + 1)) * 0.2
    fit = BetaRegFit(
        beta0=rng.normal(size=m) * 0.3, beta=beta,
        phi=np.full(m, 10.0), prior_scale=2.5, diagnostics={},
    )
    return ds, draws, z_hat, fit, passing_report(n)


# -------------------------------------------------------------- intervention


def test_intervention_validation():
    with pytest.raises(DataError, match="at least one"):
        Intervention(subset=(), values=np.array([]))
    with pytest.raises(DataError, match="distinct"):
        Intervention(subset=(1, 1), values=np.array([0.0, 1.0]))
    with pytest.raises(DataError, match="one value per column"):
        Intervention(subset=(0, 1), values=np.array([0.0]))
    with pytest.raises(DataError, match="finite"):
        Intervention(subset=(0,), values=np.array([np.inf]))


def test_apply_intervention_full_overwrite():
    ds = make_dataset(n=8, d=3, seed=1)
    iv = Intervention(subset=(0, 1, 2), values=np.array([1.0, -2.0, 0.5]))
    x = apply_intervention(ds, iv)
    assert (x == np.array([1.0, -2.0, 0.5])).all()


def test_apply_intervention_untouched_columns_and_identity():
    ds = make_dataset(n=8, d=3, seed=2)
    iv = Intervention(subset=(1,), values=np.array([9.0]))
    x = apply_intervention(ds, iv)
    np.testing.assert_array_equal(x[:, [0, 2]], ds.causes[:, [0, 2]])
    # identity: interventions carry one value per column, so demonstrate
    # on a column that is already constant
    ds2 = make_dataset(n=8, d=3, seed=2)
    const = ds2.causes.copy()
    const[:, 1] = 0.25
    from dataclasses import replace

    ds2 = replace(ds2, causes=const)
    x2 = apply_intervention(ds2, Intervention(subset=(1,), values=np.array([0.25])))
    np.testing.assert_array_equal(x2, ds2.causes)


def test_apply_intervention_out_of_range():
    ds = make_dataset(n=5, d=3, seed=3)
    with pytest.raises(DataError, match="out of range"):
        apply_intervention(ds, Intervention(subset=(3,), values=np.array([0.0])))


# ---------------------------------------------------------------------- gate


def test_gate_requires_report():
    ds, draws, z_hat, fit, _ = setup_world()
    iv = Intervention(subset=(0,), values=np.array([0.0]))
    with pytest.raises(GateError, match="override_gate"):
        average_causal_effect(ds, draws, z_hat, fit, iv)


def test_gate_blocks_failed_check():
    ds, draws, z_hat, fit, _ = setup_world()
    iv = Intervention(subset=(0,), values=np.array([0.0]))
    bad = passing_report(30, mean=0.05)
    with pytest.raises(GateError, match="gate"):
        average_causal_effect(ds, draws, z_hat, fit, iv, ppc_report=bad)


def test_gate_override_and_status():
    ds, draws, z_hat, fit, report = setup_world()
    iv = Intervention(subset=(0,), values=np.array([0.0]))
    est = average_causal_effect(ds, draws, z_hat, fit, iv, ppc_report=report)
    assert est.gate_status == "passed"
    est2 = average_causal_effect(ds, draws, z_hat, fit, iv, override_gate=True)
    assert est2.gate_status == "overridden"
    np.testing.assert_array_equal(est.draw_means, est2.draw_means)


# ------------------------------------------------------------------ estimator


def test_identity_intervention_equals_in_sample_prediction():
    ds, draws, z_hat, fit, report = setup_world(seed=4)
    design = residualize(ds, draws, z_hat).matrix()
    mu = expit(fit.beta0[None, :] + design @ fit.beta.T)
    expected = mu.mean(axis=0)

    # interventions set one value per column, so make a column constant
    from dataclasses import replace

    causes = ds.causes.copy()
    causes[:, 2] = 0.4
    ds_const = replace(ds, causes=causes)
    design_c = residualize(ds_const, draws, z_hat).matrix()
    expected_c = expit(fit.beta0[None, :] + design_c @ fit.beta.T).mean(axis=0)
    iv = Intervention(subset=(2,), values=np.array([0.4]))
    est = average_causal_effect(ds_const, draws, z_hat, fit, iv, ppc_report=report)
    np.testing.assert_array_equal(est.draw_means, expected_c)
    assert np.abs(est.draw_means - expected_c).max() < 1e-12


def test_zero_beta_fit_ignores_intervention():
    m = 120
    ds, draws, z_hat, fit, report = setup_world(m=m, seed=5,
                                                beta=np.zeros((m, 5)))
    iv_a = Intervention(subset=(0,), values=np.array([5.0]))
    iv_b = Intervention(subset=(0, 1), values=np.array([-5.0, 2.0]))
    ea = average_causal_effect(ds, draws, z_hat, fit, iv_a, ppc_report=report)
    eb = average_causal_effect(ds, draws, z_hat, fit, iv_b, ppc_report=report)
    # averaging n identical values is exact only to the last ulp
    np.testing.assert_allclose(ea.draw_means, expit(fit.beta0), rtol=0, atol=1e-14)
    np.testing.assert_array_equal(ea.draw_means, eb.draw_means)


def test_brute_force_reevaluation_oracle():
    ds, draws, z_hat, fit, report = setup_world(n=17, m=23, seed=6)
    iv = Intervention(subset=(1, 3), values=np.array([0.7, -1.1]))
    est = average_causal_effect(ds, draws, z_hat, fit, iv, ppc_report=report)

    from deconfound.plfm import reconstruct_mean

    recon = reconstruct_mean(draws, z_hat.z_hat, ds.covariates)
    x = ds.causes.copy()
    x[:, 1] = 0.7
    x[:, 3] = -1.1
    age = ds.age()
    for t in range(23):
        acc = 0.0
        for i in range(17):
            eta = fit.beta0[t]
            for j in range(4):
                eta += (x[i, j] - recon[i, j]) * fit.beta[t, j]
            eta += age[i] * fit.beta[t, 4]
            acc += 1.0 / (1.0 + np.exp(-eta))
        assert abs(est.draw_means[t] - acc / 17.0) < 1e-12


def test_residuals_outside_subset_unchanged():
    ds, draws, z_hat, _, _ = setup_world(seed=7)
    from deconfound.plfm import reconstruct_mean

    recon = reconstruct_mean(draws, z_hat.z_hat, ds.covariates)
    iv = Intervention(subset=(1,), values=np.array([3.0]))
    r_base = ds.causes - recon
    r_int = apply_intervention(ds, iv) - recon
    keep = [0, 2, 3]
    np.testing.assert_array_equal(r_int[:, keep], r_base[:, keep])
    assert (r_int[:, 1] == 3.0 - recon[:, 1]).all()


def test_row_order_invariance():
    ds, draws, z_hat, fit, report = setup_world(seed=8)
    iv = Intervention(subset=(0,), values=np.array([1.0]))
    est = average_causal_effect(ds, draws, z_hat, fit, iv, ppc_report=report)

    from dataclasses import replace

    rng = np.random.default_rng(9)
    perm = rng.permutation(30)
    ds_p = replace(ds, causes=ds.causes[perm], covariates=ds.covariates[perm],
                   outcome=ds.outcome[perm])
    draws_p = make_draws(
        draws.loadings, draws.coefficients, draws.noise_variance,
        draws.latents[:, perm, :], ds_p.causes,
        np.ones((30, 4), dtype=bool), ds_p.covariates,
    )
    z_hat_p = extract_substitute(draws_p)
    est_p = average_causal_effect(ds_p, draws_p, z_hat_p, fit, iv,
                                  ppc_report=passing_report(30))
    assert abs(est.point - est_p.point) < 1e-12
    np.testing.assert_allclose(est.draw_means, est_p.draw_means, atol=1e-13)


def test_design_width_mismatch_errors():
    ds, draws, z_hat, fit, report = setup_world(seed=10)
    bad_fit = BetaRegFit(
        beta0=fit.beta0, beta=fit.beta[:, :2], phi=fit.phi,
        prior_scale=2.5, diagnostics={},
    )
    iv = Intervention(subset=(0,), values=np.array([0.0]))
    with pytest.raises(DataError, match="design columns"):
        average_causal_effect(ds, draws, z_hat, bad_fit, iv, ppc_report=report)


def test_interval_matches_order_statistic_oracle():
    m = 200
    ds, draws, z_hat, fit, report = setup_world(m=m, seed=11,
                                                beta=np.zeros((m, 5)))
    iv = Intervention(subset=(0,), values=np.array([0.0]))
    est = average_causal_effect(ds, draws, z_hat, fit, iv, ppc_report=report)
    v = np.sort(est.draw_means)
    k = int(np.floor(0.025 * (m - 1)))
    assert est.lo95 == v[k]
    assert est.hi95 == v[m - 1 - k]
    assert est.lo95 <= est.point <= est.hi95
    np.testing.assert_allclose(v, np.sort(expit(fit.beta0)), rtol=0, atol=1e-14)


# ------------------------------------------------------------------- contrast


def test_contrast_identical_arms_degenerate():
    ds, draws, z_hat, fit, report = setup_world(seed=12)
    iv = Intervention(subset=(2,), values=np.array([0.3]))
    c = ace_contrast(ds, draws, z_hat, fit, iv, iv, ppc_report=report)
    assert c.point == 0.0
    assert c.lo95 == 0.0 and c.hi95 == 0.0
    assert (c.draw_means == 0.0).all()


def test_contrast_antisymmetry_exact():
    ds, draws, z_hat, fit, report = setup_world(seed=13)
    iv_a = Intervention(subset=(0,), values=np.array([1.2]))
    iv_b = Intervention(subset=(0,), values=np.array([-0.8]))
    ab = ace_contrast(ds, draws, z_hat, fit, iv_a, iv_b, ppc_report=report)
    ba = ace_contrast(ds, draws, z_hat, fit, iv_b, iv_a, ppc_report=report)
    np.testing.assert_array_equal(ab.draw_means, -ba.draw_means)
    assert ab.point == -ba.point
    assert ab.lo95 == -ba.hi95
    assert ab.hi95 == -ba.lo95


def test_contrast_matches_unpaired_difference_in_mean():
    ds, draws, z_hat, fit, report = setup_world(seed=14)
    iv_a = Intervention(subset=(1,), values=np.array([0.9]))
    iv_b = Intervention(subset=(1,), values=np.array([-0.9]))
    c = ace_contrast(ds, draws, z_hat, fit, iv_a, iv_b, ppc_report=report)
    ea = average_causal_effect(ds, draws, z_hat, fit, iv_a, ppc_report=report)
    eb = average_causal_effect(ds, draws, z_hat, fit, iv_b, ppc_report=report)
    assert abs(c.point - (ea.point - eb.point)) < 1e-12
    assert c.n_individuals == 30


def test_estimate_invariants_enforced():
    with pytest.raises(DataError, match="nested"):
        AceEstimate(point=0.5, lo95=0.6, hi95=0.4, n_individuals=3,
                    draw_means=np.array([0.5]), gate_status="passed")
    with pytest.raises(DataError):
        AceContrast(point=1.5, lo95=0.0, hi95=0.0, n_individuals=3,
                    draw_means=np.array([0.0]), gate_status="passed")
