"""Residualized outcome regression.

Causes are replaced by their residuals against the factor-model
reconstruction, r_i = x_i - E[X | z_hat_i, f_i], which removes the part
of the causes the substitute confounder explains. The outcome model for
proportion outcomes is a Beta regression with a logit link,

    y_i ~ Beta(mu_i * phi, (1 - mu_i) * phi),
    mu_i = invlogit(beta0 + r_i' beta),

whose posterior is sampled by adaptive random-walk Metropolis on
(beta0, beta, log phi). Age stays in the design next to the residualized
causes as the observed confounder. Binary outcomes (the benchmark) use a
plain Newton-solved logistic regression instead.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import digamma, expit, gammaln

from .errors import ConfigError, DataError, NumericalError
from .plfm import reconstruct_mean

_LOG_PHI_PRIOR_SD = 3.0


@dataclass(frozen=True)
class ResidualizedDesign:
    """Residualized causes plus the retained age column.

    ``matrix()`` stacks residuals and age into the regression design.
    ``provenance`` records which fit produced the reconstruction.
    """

    residuals: np.ndarray
    age: np.ndarray | None
    column_names: tuple
    provenance: str

    def __post_init__(self):
        r = np.asarray(self.residuals, dtype=np.float64)
        if r.ndim != 2:
            raise DataError("residuals must be a matrix")
        if not np.isfinite(r).all():
            raise DataError("non-finite residuals")
        age = self.age
        if age is not None:
            age = np.asarray(age, dtype=np.float64)
            if age.shape != (r.shape[0],):
                raise DataError("age length does not match residual rows")
        names = tuple(self.column_names)
        want = r.shape[1] + (1 if age is not None else 0)
        if len(names) != want:
            raise DataError("column_names must cover residuals plus age")
        object.__setattr__(self, "residuals", r)
        object.__setattr__(self, "age", age)
        object.__setattr__(self, "column_names", names)

    def matrix(self):
        if self.age is None:
            return self.residuals
        return np.column_stack([self.residuals, self.age])


@dataclass
class BetaRegFit:
    """Posterior draws of the Beta-regression parameters."""

    beta0: np.ndarray        # (M,)
    beta: np.ndarray         # (M, d)
    phi: np.ndarray          # (M,)
    prior_scale: float
    diagnostics: dict

    def __post_init__(self):
        if self.beta0.shape[0] < 1:
            raise DataError("need at least one draw")
        if (self.phi <= 0).any():
            raise DataError("phi must be positive in every draw")

    @property
    def n_draws(self):
        return self.beta0.shape[0]


@dataclass(frozen=True)
class CoefficientSummary:
    """Posterior means with 80% and 95% equal-tailed credible intervals."""

    names: tuple
    mean: np.ndarray
    lo80: np.ndarray
    hi80: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray
    significant: np.ndarray

    def __post_init__(self):
        if not ((self.lo95 <= self.lo80) & (self.hi80 <= self.hi95)).all():
            raise DataError("80% interval must nest inside the 95% interval")
        flag = (self.lo95 > 0) | (self.hi95 < 0)
        if (flag != self.significant).any():
            raise DataError("significance flags inconsistent with the 95% intervals")


def residualize(ds, draws, z_hat):
    """Residuals of the causes against their reconstruction.

    r_i = x_i - E[X | z_hat_i, f_i], computed with the posterior-mean
    loadings. A pure function of its inputs; repeated calls give
    bit-identical output.
    """
    z = z_hat.z_hat
    if ds.n_rows != draws.n_rows or z.shape[0] != ds.n_rows:
        raise DataError(
            "row count mismatch: dataset %d, draws %d, substitute %d"
            % (ds.n_rows, draws.n_rows, z.shape[0])
        )
    if ds.n_causes != draws.n_causes:
        raise DataError("cause count differs between dataset and draws")
    recon = reconstruct_mean(draws, z, ds.covariates)
    residuals = ds.causes - recon
    age = ds.age() if ds.has_age() else None
    names = tuple(ds.cause_names) + (("age",) if age is not None else ())
    provenance = "%s:K=%d:draws=%d" % (draws.kind, draws.latent_dim, draws.n_draws)
    return ResidualizedDesign(
        residuals=residuals, age=age, column_names=names, provenance=provenance
    )


def scale_outcome(adas, max_score=85.0):
    """Compress a bounded score into the open interval (0, 1).

    y = (score + 0.5) / (max_score + 1). Exact inverse available through
    :func:`unscale_outcome`.
    """
    adas = np.asarray(adas, dtype=np.float64)
    if ((adas < 0) | (adas > max_score)).any():
        bad = int(np.argmax((adas < 0) | (adas > max_score)))
        raise DataError(
            "outcome value %g at row %d outside [0, %g]" % (adas[bad], bad, max_score)
        )
    return (adas + 0.5) / (max_score + 1.0)


def unscale_outcome(y, max_score=85.0):
    return np.asarray(y, dtype=np.float64) * (max_score + 1.0) - 0.5


def _design_matrix(design):
    if isinstance(design, ResidualizedDesign):
        return design.matrix()
    x = np.asarray(design, dtype=np.float64)
    if x.ndim != 2:
        raise DataError("design must be a matrix or a ResidualizedDesign")
    return x


def beta_log_likelihood(params, design, y, prior_scale=None):
    """Beta-regression log-likelihood and its analytic gradient.

    Parameters
    ----------
    params : (beta0, beta, phi)
        Intercept, coefficient vector, precision phi > 0.
    design : ResidualizedDesign or ndarray (N, d)
    y : ndarray in the open interval (0, 1)
    prior_scale : float, optional
        When given, adds Normal(0, prior_scale^2) log-priors on beta0 and
        beta and a lognormal prior (log phi ~ Normal(0, 3^2)) on phi.

    Returns
    -------
    (float, ndarray)
        Log-likelihood (plus log-priors if requested) and its gradient,
        packed as [d/dbeta0, d/dbeta_1..d, d/dphi].
    """
    beta0, beta, phi = params
    beta = np.asarray(beta, dtype=np.float64)
    phi = float(phi)
    if phi <= 0:
        raise ConfigError("phi must be strictly positive")
    x = _design_matrix(design)
    y = np.asarray(y, dtype=np.float64)
    if ((y <= 0.0) | (y >= 1.0)).any():
        raise DataError("outcome values must lie strictly inside (0, 1); scale first")
    eta = beta0 + x @ beta
    mu = expit(eta)
    a = mu * phi
    b = (1.0 - mu) * phi
    log_y = np.log(y)
    log_1my = np.log1p(-y)
    ll = float(
        ((a - 1.0) * log_y + (b - 1.0) * log_1my).sum()
        - (gammaln(a) + gammaln(b)).sum()
        + len(y) * gammaln(phi)
    )
    dig_a = digamma(a)
    dig_b = digamma(b)
    g_mu = phi * (log_y - log_1my - dig_a + dig_b)
    g_eta = g_mu * mu * (1.0 - mu)
    g_beta0 = float(g_eta.sum())
    g_beta = x.T @ g_eta
    g_phi = float(
        (mu * log_y + (1.0 - mu) * log_1my - mu * dig_a - (1.0 - mu) * dig_b).sum()
        + len(y) * digamma(phi)
    )
    if prior_scale is not None:
        ps2 = float(prior_scale) ** 2
        ll -= 0.5 * (beta0**2 + (beta**2).sum()) / ps2
        ll -= 0.5 * (len(beta) + 1) * np.log(2.0 * np.pi * ps2)
        g_beta0 -= beta0 / ps2
        g_beta = g_beta - beta / ps2
        # log phi ~ Normal(0, sd^2), expressed as a density in phi
        t = np.log(phi)
        sd2 = _LOG_PHI_PRIOR_SD**2
        ll += -0.5 * t**2 / sd2 - t - 0.5 * np.log(2.0 * np.pi * sd2)
        g_phi += (-t / sd2 - 1.0) / phi
    grad = np.concatenate([[g_beta0], g_beta, [g_phi]])
    return ll, grad


def _log_posterior_packed(theta, x, y, prior_scale):
    """Posterior over [beta0, beta, log phi]; prior on log phi is direct."""
    beta0 = theta[0]
    beta = theta[1:-1]
    t = theta[-1]
    phi = np.exp(t)
    ll, grad = beta_log_likelihood((beta0, beta, phi), x, y)
    ps2 = prior_scale**2
    lp = ll - 0.5 * (beta0**2 + (beta**2).sum()) / ps2 - 0.5 * t**2 / _LOG_PHI_PRIOR_SD**2
    g = np.empty_like(theta)
    g[0] = grad[0] - beta0 / ps2
    g[1:-1] = grad[1:-1] - beta / ps2
    g[-1] = grad[-1] * phi - t / _LOG_PHI_PRIOR_SD**2
    return lp, g


def fit_beta_regression(design, y, prior_scale=2.5, n_warmup=1500, n_samples=2000,
                        thin=2, seed=0):
    """Sample the Beta-regression posterior by adaptive random-walk Metropolis.

    The chain starts at the posterior mode (found by L-BFGS with the
    analytic gradient) and adapts a full proposal covariance with a
    Robbins-Monro step-size targeting acceptance in [0.2, 0.4] during
    warmup only; afterwards the proposal is frozen. Deterministic given
    ``seed``.

    Returns
    -------
    BetaRegFit
        Draws of (beta0, beta, phi) and chain diagnostics. If the frozen
        chain's acceptance rate falls outside [0.05, 0.8] the fit is
        returned flagged, not raised.
    """
    x = _design_matrix(design)
    y = np.asarray(y, dtype=np.float64)
    if ((y <= 0.0) | (y >= 1.0)).any():
        raise DataError("outcome values must lie strictly inside (0, 1); scale first")
    if x.shape[0] != y.shape[0]:
        raise DataError("design rows do not match outcome length")
    if not np.isfinite(x).all():
        raise DataError("non-finite design values")
    n, d = x.shape
    if n_samples < 1 or n_warmup < 0 or thin < 1:
        raise ConfigError("need n_samples >= 1, n_warmup >= 0, thin >= 1")
    dim = d + 2
    rng = np.random.default_rng(seed)

    def neg(theta):
        lp, g = _log_posterior_packed(theta, x, y, prior_scale)
        return -lp, -g

    theta0 = np.zeros(dim)
    theta0[-1] = np.log(10.0)
    res = optimize.minimize(neg, theta0, jac=True, method="L-BFGS-B",
                            options={"maxiter": 500})
    theta = res.x if np.isfinite(res.fun) else theta0

    lp, _ = _log_posterior_packed(theta, x, y, prior_scale)
    target = 0.3
    log_step = np.log(0.3 / np.sqrt(dim))
    chol = np.eye(dim)
    mean_acc = 0.0
    run_mean = theta.copy()
    run_cov = np.eye(dim) * 1e-4
    total = n_warmup + n_samples * thin
    keep = np.empty((n_samples, dim))
    kept = 0
    accepted_frozen = 0
    frozen_steps = 0
    for it in range(total):
        step = np.exp(log_step)
        prop = theta + step * (chol @ rng.standard_normal(dim))
        lp_prop, _ = _log_posterior_packed(prop, x, y, prior_scale)
        log_ratio = lp_prop - lp
        accept = np.log(rng.random()) < log_ratio
        if accept:
            theta = prop
            lp = lp_prop
        if it < n_warmup:
            acc_prob = min(1.0, np.exp(log_ratio)) if np.isfinite(log_ratio) else 0.0
            log_step += (acc_prob - target) / (1.0 + it) ** 0.6
            # running covariance for the proposal shape
            delta = theta - run_mean
            run_mean += delta / (it + 2.0)
            run_cov += (np.outer(delta, theta - run_mean) - run_cov) / (it + 2.0)
            if it >= 200 and (it + 1) % 100 == 0:
                shaped = run_cov + 1e-8 * np.eye(dim)
                try:
                    chol = np.linalg.cholesky(shaped)
                except np.linalg.LinAlgError:
                    pass
        else:
            frozen_steps += 1
            accepted_frozen += int(accept)
            pos = it - n_warmup
            if (pos + 1) % thin == 0:
                keep[kept] = theta
                kept += 1
        mean_acc += int(accept)

    acceptance = accepted_frozen / max(frozen_steps, 1)
    flagged = not (0.05 <= acceptance <= 0.8)
    diagnostics = {
        "acceptance_rate": float(acceptance),
        "step_scale": float(np.exp(log_step)),
        "n_warmup": int(n_warmup),
        "n_samples": int(n_samples),
        "thin": int(thin),
        "flagged": bool(flagged),
        "map_converged": bool(res.success),
    }
    return BetaRegFit(
        beta0=keep[:, 0].copy(),
        beta=keep[:, 1:-1].copy(),
        phi=np.exp(keep[:, -1]),
        prior_scale=float(prior_scale),
        diagnostics=diagnostics,
    )


def fit_logistic(design, y, l2=0.0):
    """Maximum-likelihood logistic regression by damped Newton iterations.

    An intercept column is prepended internally; the returned vector is
    [intercept, coefficients...]. The optional ridge penalty applies to
    the non-intercept coefficients. Converges to gradient norm < 1e-8 or
    raises; if the coefficients diverge without a penalty the data are
    separable and the error says to set l2 > 0.
    """
    x = _design_matrix(design)
    y = np.asarray(y, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError("logistic outcome must be binary 0/1")
    if x.shape[0] != y.shape[0]:
        raise DataError("design rows do not match outcome length")
    if l2 < 0:
        raise ConfigError("l2 must be >= 0")
    n, d = x.shape
    x1 = np.column_stack([np.ones(n), x])
    pen = np.zeros(d + 1)
    pen[1:] = l2
    beta = np.zeros(d + 1)

    def objective(b):
        eta = x1 @ b
        # log-lik = sum y*eta - log(1 + e^eta), stable via logaddexp
        return float((y * eta).sum() - np.logaddexp(0.0, eta).sum() - 0.5 * (pen * b * b).sum())

    def check_separation(eta):
        # A finite MLE always leaves some row on the wrong side of (or on)
        # its own hyperplane. If every row sits strictly on its label's side
        # the data are separated, the optimum is infinite, and the gradient
        # only vanished by floating-point saturation.
        if l2 == 0.0 and n > 0 and ((2.0 * y - 1.0) * eta).min() > 1.0:
            raise NumericalError(
                "perfect separation: logistic MLE does not exist, set l2 > 0"
            )

    obj = objective(beta)
    for _ in range(100):
        eta = x1 @ beta
        p = expit(eta)
        grad = x1.T @ (y - p) - pen * beta
        if np.linalg.norm(grad) < 1e-8:
            check_separation(eta)
            return beta
        if np.linalg.norm(beta[1:]) > 1e3 and l2 == 0.0:
            raise NumericalError(
                "logistic coefficients diverging; data appear separable, set l2 > 0"
            )
        w = p * (1.0 - p)
        h = (x1 * w[:, None]).T @ x1
        h[np.arange(d + 1), np.arange(d + 1)] += pen + 1e-12
        try:
            step = np.linalg.solve(h, grad)
        except np.linalg.LinAlgError:
            raise NumericalError("singular Hessian in logistic regression") from None
        # damp until the penalized log-likelihood improves
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * step
            cand_obj = objective(cand)
            if cand_obj >= obj - 1e-12:
                break
            scale *= 0.5
        beta = beta + scale * step
        obj = objective(beta)
    grad = x1.T @ (y - expit(x1 @ beta)) - pen * beta
    if np.linalg.norm(grad) < 1e-8:
        check_separation(x1 @ beta)
        return beta
    if l2 == 0.0:
        raise NumericalError(
            "logistic regression did not converge; data may be separable, set l2 > 0"
        )
    raise NumericalError("logistic regression did not converge")


def summarize_coefficients(fit, names=None):
    """Posterior means, 80%/95% equal-tailed intervals, significance flags.

    Covers the intercept and each design coefficient; phi is a nuisance
    parameter and stays in the fit draws.
    """
    if fit.n_draws < 100:
        raise DataError("need at least 100 draws to summarize, got %d" % fit.n_draws)
    draws = np.column_stack([fit.beta0, fit.beta])
    d = draws.shape[1]
    if names is None:
        names = ("intercept",) + tuple("x%d" % j for j in range(1, d))
    names = tuple(names)
    if len(names) != d:
        raise DataError("expected %d names, got %d" % (d, len(names)))
    lo95, lo80, hi80, hi95 = np.quantile(draws, [0.025, 0.10, 0.90, 0.975], axis=0)
    mean = draws.mean(axis=0)
    significant = (lo95 > 0) | (hi95 < 0)
    return CoefficientSummary(
        names=names, mean=mean, lo80=lo80, hi80=hi80, lo95=lo95, hi95=hi95,
        significant=significant,
    )


def save_coefficients(summary, path):
    """Write the coefficient table as delimited text."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "mean", "lo80", "hi80", "lo95", "hi95", "significant"])
        for i, name in enumerate(summary.names):
            w.writerow([
                name,
                repr(float(summary.mean[i])),
                repr(float(summary.lo80[i])),
                repr(float(summary.hi80[i])),
                repr(float(summary.lo95[i])),
                repr(float(summary.hi95[i])),
                int(summary.significant[i]),
            ])
