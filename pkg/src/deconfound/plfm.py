"""Covariate-augmented probabilistic latent factor models, fit by Gibbs sampling.

The generative model for a cause matrix X with covariates F is

    x_ij = w_j' z_i + a_j' f_i + eps_ij,    eps_ij ~ Normal(0, sigma2)

with z_i ~ Normal(0, I_K), elementwise zero-mean normal priors on the
loadings w_j and coefficients a_j, and an inverse-gamma prior on sigma2.
The "ppca" and "bpmf" kinds share this algebra (one writes the model
row-wise, the other entry-wise); they coincide in distribution whenever
their priors match, so a single sampler serves both.

All full conditionals are conjugate: rows of Z, rows of the loading
matrix, and rows of A are multivariate normal, sigma2 is inverse-gamma.
Held-out cells are excluded from every likelihood term through the
presence mask; their values never enter the chain. Each Gaussian block is
sampled by perturb-and-solve: z = Lambda^{-1} (b + p) where p is noise
with covariance Lambda, which gives one batched linear solve per block.

Blocks advance in the fixed order Z, loadings, A, sigma2.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import MaskedMatrix
from .errors import ConfigError, DataError, NumericalError

_FORMAT_TAG = "deconfound-draws/1"
_LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PlfmSpec:
    """Model definition and priors for one factor-model fit.

    ``kind`` selects the label under which the loadings are reported
    ("ppca" rows of W, "bpmf" item vectors v_j); ``latent_dim`` is K.
    Prior scales are standard deviations of the zero-mean normal priors;
    the noise variance prior is InverseGamma(shape, scale).
    """

    kind: str = "ppca"
    latent_dim: int = 5
    prior_scale_loadings: float = 1.0
    prior_scale_coefficients: float = 1.0
    noise_prior_shape: float = 3.0
    noise_prior_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ppca", "bpmf"):
            raise ConfigError("kind must be 'ppca' or 'bpmf', got %r" % (self.kind,))
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        for field in ("prior_scale_loadings", "prior_scale_coefficients",
                      "noise_prior_shape", "noise_prior_scale"):
            if getattr(self, field) <= 0:
                raise ConfigError("%s must be strictly positive" % field)


@dataclass(frozen=True)
class DrawView:
    """One retained parameter state theta."""

    loadings: np.ndarray       # (D, K)
    coefficients: np.ndarray   # (D, P)
    noise_variance: float
    latents: np.ndarray        # (N, K)


@dataclass
class PosteriorDraws:
    """Retained Gibbs samples plus the data the posterior conditions on.

    Arrays are stacked over draws: loadings (M_s, D, K), coefficients
    (M_s, D, P), noise_variance (M_s,), latents (M_s, N, K). The observed
    cause matrix (zero-filled at masked cells), its presence mask, and the
    covariates ride along so that posterior-predictive simulation and
    downstream stages can run from a serialized fit alone.
    """

    kind: str
    loadings: np.ndarray
    coefficients: np.ndarray
    noise_variance: np.ndarray
    latents: np.ndarray
    x_obs_values: np.ndarray
    observed: np.ndarray
    covariates: np.ndarray
    spec: PlfmSpec
    diagnostics: dict

    def __post_init__(self):
        if self.loadings.ndim != 3 or self.loadings.shape[0] < 1:
            raise DataError("loadings must be (n_draws, D, K) with n_draws >= 1")
        if (self.noise_variance <= 0).any():
            raise DataError("noise variance must be positive in every draw")
        ms, d, k = self.loadings.shape
        n = self.latents.shape[1]
        if self.latents.shape != (ms, n, k):
            raise DataError("latents shape inconsistent with loadings")
        if self.coefficients.shape[0] != ms or self.coefficients.shape[1] != d:
            raise DataError("coefficients shape inconsistent with loadings")
        if self.x_obs_values.shape != (n, d) or self.observed.shape != (n, d):
            raise DataError("observed data shape inconsistent with draws")
        if self.covariates.shape[0] != n:
            raise DataError("covariate rows inconsistent with draws")

    @property
    def n_draws(self):
        return self.loadings.shape[0]

    @property
    def n_rows(self):
        return self.latents.shape[1]

    @property
    def n_causes(self):
        return self.loadings.shape[1]

    @property
    def latent_dim(self):
        return self.loadings.shape[2]

    def theta(self, t):
        return DrawView(
            loadings=self.loadings[t],
            coefficients=self.coefficients[t],
            noise_variance=float(self.noise_variance[t]),
            latents=self.latents[t],
        )

    def posterior_mean_loadings(self):
        return self.loadings.mean(axis=0)

    def posterior_mean_coefficients(self):
        return self.coefficients.mean(axis=0)

    def save(self, path):
        """Serialize to a version-tagged npz file."""
        np.savez_compressed(
            path,
            format_tag=np.array(_FORMAT_TAG),
            kind=np.array(self.kind),
            loadings=self.loadings,
            coefficients=self.coefficients,
            noise_variance=self.noise_variance,
            latents=self.latents,
            x_obs_values=self.x_obs_values,
            observed=self.observed,
            covariates=self.covariates,
            spec_json=np.array(json.dumps(asdict(self.spec))),
            diagnostics_json=np.array(json.dumps(self.diagnostics)),
        )

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            tag = str(z["format_tag"])
            if tag != _FORMAT_TAG:
                raise DataError(
                    "unrecognized draws file format %r (expected %r)" % (tag, _FORMAT_TAG)
                )
            spec = PlfmSpec(**json.loads(str(z["spec_json"])))
            return cls(
                kind=str(z["kind"]),
                loadings=z["loadings"],
                coefficients=z["coefficients"],
                noise_variance=z["noise_variance"],
                latents=z["latents"],
                x_obs_values=z["x_obs_values"],
                observed=z["observed"],
                covariates=z["covariates"],
                spec=spec,
                diagnostics=json.loads(str(z["diagnostics_json"])),
            )


@dataclass(frozen=True)
class SubstituteConfounder:
    """Posterior mean of the latent rows, E[Z | X_obs, F]."""

    z_hat: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z_hat, dtype=np.float64)
        if not np.isfinite(z).all():
            raise DataError("substitute confounder contains non-finite values")
        object.__setattr__(self, "z_hat", z)


# ------------------------------------------------------------ Gibbs blocks
#
# Each update draws from the exact full conditional. The sampled vector for
# row v with precision Lambda and linear term b is Lambda^{-1}(b + p), with
# p = mask-weighted design noise / sigma + prior-scale noise, so cov(p) =
# Lambda and the result has mean Lambda^{-1} b, covariance Lambda^{-1}.


def _update_latents(rng, x, mobs, f, w, a, s2):
    n, d = x.shape
    k = w.shape[1]
    outer = np.einsum("jk,jl->jkl", w, w).reshape(d, k * k)
    lam = (mobs @ outer).reshape(n, k, k) / s2
    lam[:, np.arange(k), np.arange(k)] += 1.0
    resid = (x - f @ a.T) * mobs
    b = resid @ w / s2
    pert = (rng.standard_normal((n, d)) * mobs) @ w / np.sqrt(s2)
    pert += rng.standard_normal((n, k))
    return np.linalg.solve(lam, (b + pert)[..., None])[..., 0]


def _update_loadings(rng, x, mobs, f, z, a, s2, prior_scale):
    n, d = x.shape
    k = z.shape[1]
    outer = np.einsum("ik,il->ikl", z, z).reshape(n, k * k)
    lam = (mobs.T @ outer).reshape(d, k, k) / s2
    lam[:, np.arange(k), np.arange(k)] += 1.0 / prior_scale**2
    resid = (x - f @ a.T) * mobs
    b = resid.T @ z / s2
    pert = (rng.standard_normal((n, d)) * mobs).T @ z / np.sqrt(s2)
    pert += rng.standard_normal((d, k)) / prior_scale
    return np.linalg.solve(lam, (b + pert)[..., None])[..., 0]


def _update_coefficients(rng, x, mobs, f, z, w, s2, prior_scale):
    n, d = x.shape
    p = f.shape[1]
    if p == 0:
        return np.zeros((d, 0))
    outer = np.einsum("ip,iq->ipq", f, f).reshape(n, p * p)
    lam = (mobs.T @ outer).reshape(d, p, p) / s2
    lam[:, np.arange(p), np.arange(p)] += 1.0 / prior_scale**2
    resid = (x - z @ w.T) * mobs
    b = resid.T @ f / s2
    pert = (rng.standard_normal((n, d)) * mobs).T @ f / np.sqrt(s2)
    pert += rng.standard_normal((d, p)) / prior_scale
    return np.linalg.solve(lam, (b + pert)[..., None])[..., 0]


def _update_noise(rng, x, mobs, f, z, w, a, prior_shape, prior_scale):
    resid = (x - z @ w.T - f @ a.T) * mobs
    ssr = float((resid * resid).sum())
    shape = prior_shape + 0.5 * mobs.sum()
    scale = prior_scale + 0.5 * ssr
    return scale / rng.gamma(shape)


def fit_gibbs(x_obs, f, spec, n_warmup=1000, n_samples=500, thin=2):
    """Run the Gibbs chain on masked causes and return retained draws.

    Parameters
    ----------
    x_obs : MaskedMatrix
        Observed causes; masked cells are excluded from all likelihoods.
    f : ndarray, shape (N, P)
        Covariates (P may be 0).
    spec : PlfmSpec
    n_warmup, n_samples, thin : int
        ``n_warmup`` burn-in iterations, then ``n_samples`` states retained
        every ``thin`` iterations.

    Returns
    -------
    PosteriorDraws

    Notes
    -----
    Initialization is a singular value decomposition of the zero-filled
    observed matrix, so the chain starts near the dominant subspace. The
    chain is deterministic given ``spec.seed``.
    """
    if not isinstance(x_obs, MaskedMatrix):
        raise DataError("x_obs must be a MaskedMatrix")
    x = x_obs.values
    mobs = x_obs.observed.astype(np.float64)
    n, d = x.shape
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 1:
        f = f.reshape(n, -1)
    if f.shape[0] != n:
        raise DataError("covariate rows (%d) do not match causes (%d)" % (f.shape[0], n))
    if not np.isfinite(f).all():
        raise DataError("non-finite covariate values")
    k = spec.latent_dim
    if k >= d:
        raise ConfigError("latent_dim must be smaller than the number of causes")
    if (mobs.sum(axis=1) < 1).any():
        raise DataError("every row needs at least one observed cause")
    if n_warmup < 0 or n_samples < 1 or thin < 1:
        raise ConfigError("need n_warmup >= 0, n_samples >= 1, thin >= 1")

    rng = np.random.default_rng(spec.seed)
    p = f.shape[1]

    # deterministic warm start from the dominant singular subspace
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    root = np.sqrt(s[:k] + 1e-12)
    z = u[:, :k] * root
    w = vt[:k].T * root
    a = np.zeros((d, p))
    resid = (x - z @ w.T) * mobs
    n_obs = mobs.sum()
    s2 = max(float((resid * resid).sum() / n_obs), 1e-6)

    total = n_warmup + n_samples * thin
    keep_loadings = np.empty((n_samples, d, k))
    keep_coefficients = np.empty((n_samples, d, p))
    keep_noise = np.empty(n_samples)
    keep_latents = np.empty((n_samples, n, k))
    sigma_trace = np.empty(total)

    kept = 0
    for it in range(total):
        z = _update_latents(rng, x, mobs, f, w, a, s2)
        if not np.isfinite(z).all():
            raise NumericalError("non-finite latent block at iteration %d" % it)
        w = _update_loadings(rng, x, mobs, f, z, a, s2, spec.prior_scale_loadings)
        if not np.isfinite(w).all():
            raise NumericalError("non-finite loadings block at iteration %d" % it)
        a = _update_coefficients(rng, x, mobs, f, z, w, s2, spec.prior_scale_coefficients)
        if not np.isfinite(a).all():
            raise NumericalError("non-finite coefficient block at iteration %d" % it)
        s2 = _update_noise(rng, x, mobs, f, z, w, a,
                           spec.noise_prior_shape, spec.noise_prior_scale)
        if not np.isfinite(s2) or s2 <= 0:
            raise NumericalError("invalid noise variance at iteration %d" % it)
        sigma_trace[it] = s2
        pos = it - n_warmup
        if pos >= 0 and (pos + 1) % thin == 0:
            keep_loadings[kept] = w
            keep_coefficients[kept] = a
            keep_noise[kept] = s2
            keep_latents[kept] = z
            kept += 1

    retained_sigma = sigma_trace[n_warmup::][thin - 1::thin][:n_samples]
    diagnostics = {
        "n_warmup": int(n_warmup),
        "n_samples": int(n_samples),
        "thin": int(thin),
        "iterations": int(total),
        "sigma2_mean": float(retained_sigma.mean()),
        "sigma2_sd": float(retained_sigma.std(ddof=1)) if n_samples > 1 else 0.0,
        "loadings_fro_mean": float(np.sqrt((keep_loadings**2).sum(axis=(1, 2))).mean()),
        "latents_fro_mean": float(np.sqrt((keep_latents**2).sum(axis=(1, 2))).mean()),
    }
    return PosteriorDraws(
        kind=spec.kind,
        loadings=keep_loadings,
        coefficients=keep_coefficients,
        noise_variance=keep_noise,
        latents=keep_latents,
        x_obs_values=x.copy(),
        observed=x_obs.observed.copy(),
        covariates=f.copy(),
        spec=spec,
        diagnostics=diagnostics,
    )


def extract_substitute(draws):
    """Posterior mean of Z over the retained draws (Algorithm line: Z_hat)."""
    if draws.n_draws < 1:
        raise DataError("no retained draws")
    return SubstituteConfounder(z_hat=draws.latents.mean(axis=0))


def reconstruct_mean(draws, z, f):
    """Mean reconstruction E[X | z, f], averaged over the posterior draws.

    The model is linear in the parameters, so the average over draws of
    W z + A f equals the product with the posterior-mean W and A; that is
    how it is computed. Accepts single rows (K,), (P,) or stacked rows
    (n, K), (n, P).
    """
    z = np.asarray(z, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    f2 = np.atleast_2d(f) if f.size else f.reshape(z2.shape[0], 0)
    if f2.ndim == 1:
        f2 = f2.reshape(z2.shape[0], -1)
    if z2.shape[1] != draws.latent_dim:
        raise DataError("z has %d entries, model has latent_dim %d" % (z2.shape[1], draws.latent_dim))
    w_bar = draws.posterior_mean_loadings()
    a_bar = draws.posterior_mean_coefficients()
    if f2.shape[1] != a_bar.shape[1]:
        raise DataError("f has %d entries, model has %d covariates" % (f2.shape[1], a_bar.shape[1]))
    out = z2 @ w_bar.T + f2 @ a_bar.T
    return out[0] if single else out


def sample_posterior_predictive(draws, f, n_replicates, seed):
    """Simulate replicate cause matrices from the posterior predictive.

    Replicate m uses retained draw ``m % n_draws``. For each row, a fresh
    latent vector is sampled from its Gaussian conditional given that
    row's observed causes (stored in ``draws``) and the covariates, then
    observation noise is added. Deterministic given ``seed``.

    Returns
    -------
    ndarray, shape (n_replicates, N, D)
    """
    if n_replicates < 1:
        raise ConfigError("n_replicates must be >= 1")
    x = draws.x_obs_values
    mobs = draws.observed.astype(np.float64)
    n, d = x.shape
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 1:
        f = f.reshape(n, -1)
    if f.shape[0] != n:
        raise DataError("covariate rows do not match the fitted data")
    k = draws.latent_dim
    rng = np.random.default_rng(seed)
    out = np.empty((n_replicates, n, d))
    diag = np.arange(k)
    for m in range(n_replicates):
        t = m % draws.n_draws
        w = draws.loadings[t]
        a = draws.coefficients[t]
        s2 = float(draws.noise_variance[t])
        outer = np.einsum("jk,jl->jkl", w, w).reshape(d, k * k)
        lam = (mobs @ outer).reshape(n, k, k) / s2
        lam[:, diag, diag] += 1.0
        b = ((x - f @ a.T) * mobs) @ w / s2
        pert = (rng.standard_normal((n, d)) * mobs) @ w / np.sqrt(s2)
        pert += rng.standard_normal((n, k))
        z = np.linalg.solve(lam, (b + pert)[..., None])[..., 0]
        out[m] = z @ w.T + f @ a.T + rng.standard_normal((n, d)) * np.sqrt(s2)
    return out


def row_log_likelihood(theta, x_row, f_row):
    """Log-density of one row's present entries under a single draw theta.

    The latent vector is integrated out under its standard normal prior,
    so the present entries are jointly Gaussian with mean (A f)_O and
    covariance (W_O W_O' + sigma2 I). Rows with no present entries
    contribute 0. ``x_row`` is a MaskedMatrix holding one row (1-d arrays).
    """
    obs = np.asarray(x_row.observed, dtype=bool).ravel()
    values = np.asarray(x_row.values, dtype=np.float64).ravel()
    h = int(obs.sum())
    if h == 0:
        return 0.0
    w = theta.loadings[obs]                      # (h, K)
    k = w.shape[1]
    f_row = np.asarray(f_row, dtype=np.float64).ravel()
    mu = theta.coefficients[obs] @ f_row if f_row.size else np.zeros(h)
    r = values[obs] - mu
    s2 = theta.noise_variance
    g = s2 * np.eye(k) + w.T @ w
    sign, logdet_g = np.linalg.slogdet(g)
    if sign <= 0:
        raise NumericalError("restricted covariance not positive definite")
    u = w.T @ r
    quad = (r @ r - u @ np.linalg.solve(g, u)) / s2
    return -0.5 * (h * _LOG2PI + (h - k) * np.log(s2) + logdet_g + quad)
