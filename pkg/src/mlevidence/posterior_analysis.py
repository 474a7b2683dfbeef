"""Posterior recovery, Mahalanobis diagnostics, AIC, Bayes factors and fit export.

In integrated mode the coefficient posterior is a mixture of the Gaussian
conditional posteriors over the sampled variance points: the mixture mean
averages the conditional means and the mixture covariance adds the
between-point spread of those means to the averaged conditional
covariances.  The Mahalanobis statistic instead averages the per-point
quadratic forms, which is kept as a separate code path on purpose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from mlevidence.likelihood_core import (
    LOG_2PI,
    conditional_beta_posterior,
    precompute,
)
from mlevidence.model_spec import assemble_sigma_eta
from mlevidence.smc_engine import variance_block_to_natural


class SingularCovarianceError(ValueError):
    """The empirical posterior covariance has no Cholesky factorization."""


@dataclass(frozen=True)
class PosteriorGaussian:
    """Gaussian summary of a coefficient posterior."""

    mean: np.ndarray
    cov: np.ndarray
    source: str  # "mixture-over-trace" or "empirical-from-draws"

    def __post_init__(self):
        if not np.allclose(self.cov, self.cov.T, atol=1e-10, rtol=0.0):
            raise ValueError("cov must be symmetric within 1e-10")
        try:
            np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            raise SingularCovarianceError("posterior covariance is singular") from None
        self.mean.setflags(write=False)
        self.cov.setflags(write=False)


def _theta_points(spec, particles):
    """ThetaPoint per particle row of an integrated-mode cloud."""
    from mlevidence.likelihood_core import ThetaPoint

    nat = variance_block_to_natural(spec, particles)
    out = []
    for row in nat:
        if spec.family in ("LinearModel", "LinearModelNIG"):
            out.append(ThetaPoint(sigma2_y=row[0]))
        elif spec.family == "SimpleMultilevel":
            out.append(ThetaPoint(sigma2_y=row[0], sigma2_eta=row[1]))
        else:
            m = spec.eta_structure.m
            rho = (
                row[1 + m]
                if row.shape[0] > 1 + m
                else (spec.corr_prior.value if spec.corr_prior and spec.corr_prior.is_fixed else 0.0)
            )
            out.append(ThetaPoint(sigma2_y=row[0], nu=(row[1:1 + m], rho)))
    return out


def beta_posterior_trace(cloud, stats, spec):
    """Weighted conditional posteriors (weight, mean, cov) along the variance trace."""
    weights = cloud.normalized_weights()
    thetas = _theta_points(spec, cloud.particles)
    return [
        (float(w), *conditional_beta_posterior(stats, spec, th))
        for w, th in zip(weights, thetas)
    ]


def recover_beta_posterior(cloud, stats, spec, mode):
    """Gaussian summary of the coefficient posterior from a terminal cloud."""
    if not np.isclose(cloud.beta_temper, 1.0):
        raise ValueError("cloud must be at tempering exponent 1")
    if mode == "integrated":
        trace = beta_posterior_trace(cloud, stats, spec)
        mean = np.zeros(stats.d)
        for w, mu, _ in trace:
            mean += w * mu
        cov = np.zeros((stats.d, stats.d))
        for w, mu, cv in trace:
            dm = mu - mean
            cov += w * (cv + np.outer(dm, dm))
        cov = 0.5 * (cov + cov.T)
        return PosteriorGaussian(mean=mean, cov=cov, source="mixture-over-trace")
    if mode != "full":
        raise ValueError("mode must be 'integrated' or 'full'")
    beta_draws = cloud.particles[:, :stats.d]
    distinct = np.unique(beta_draws, axis=0).shape[0]
    if distinct < stats.d + 1:
        raise SingularCovarianceError(
            f"only {distinct} distinct coefficient draws for dimension {stats.d}"
        )
    w = cloud.normalized_weights()
    mean = w @ beta_draws
    diff = beta_draws - mean[None, :]
    cov = (diff * w[:, None]).T @ diff
    denom = 1.0 - float(w @ w)  # weighted analogue of the n-1 correction
    if denom > 0:
        cov = cov / denom
    cov = 0.5 * (cov + cov.T)
    return PosteriorGaussian(mean=mean, cov=cov, source="empirical-from-draws")


def mahalanobis(b_true, post):
    """Covariance-weighted distance from a point to a posterior summary.

    ``post`` is either a PosteriorGaussian (full-likelihood convention) or
    an iterable of (weight, mean, cov) conditional posteriors, in which
    case the per-point quadratic forms are averaged under the weights
    before taking the root.
    """
    b = np.asarray(b_true, dtype=float)
    if isinstance(post, PosteriorGaussian):
        diff = b - post.mean
        c, lower = cho_factor(post.cov, lower=True)
        return float(np.sqrt(diff @ cho_solve((c, lower), diff)))
    total = 0.0
    wsum = 0.0
    for w, mu, cov in post:
        diff = b - mu
        c, lower = cho_factor(cov, lower=True)
        total += w * float(diff @ cho_solve((c, lower), diff))
        wsum += w
    return float(np.sqrt(total / wsum))


# ---------------------------------------------------------------------------
# AIC via group-effect marginalization and generalized-least-squares profiling.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AICResult:
    aic: float
    k: int
    max_loglik: float
    theta_hat: dict
    converged: bool


def _profile_loglik_builder(stats, spec):
    """Max-over-coefficients log likelihood as a function of log-variances.

    Group effects are integrated out exactly; coefficients are profiled by
    generalized least squares at each variance point.  Works with
    rank-deficient designs through least-squares solves.
    """
    family = spec.family
    n = stats.n

    if family in ("LinearModel", "LinearModelNIG"):
        lam, Q = np.linalg.eigh(stats.gram_xx)
        proj = Q.T @ stats.sum_xy
        tol = max(lam.max(), 1.0) * 1e-10
        keep = lam > tol
        qfit = float(np.sum(proj[keep] ** 2 / lam[keep]))
        resid = stats.sum_yy - qfit

        def profile(u):
            if abs(u[0]) > 46.0:
                return -np.inf
            s2 = np.exp(u[0])
            return -0.5 * (n * (LOG_2PI + u[0]) + resid / s2)

        return profile, 1

    if family == "SimpleMultilevel":
        nj = stats.n_per_group.astype(float)

        def profile(u):
            if np.max(np.abs(u)) > 46.0:
                return -np.inf
            s2y, s2e = np.exp(u[0]), np.exp(u[1])
            w = s2e / (s2y + nj * s2e)
            A = (stats.gram_xx - np.einsum("j,ja,jb->ab", w, stats.group_sum_x, stats.group_sum_x)) / s2y
            c = (stats.sum_xy - (w * stats.group_sum_y) @ stats.group_sum_x) / s2y
            fit = float(c @ np.linalg.lstsq(A, c, rcond=None)[0])
            quad = (stats.sum_yy - float(w @ stats.group_sum_y ** 2)) / s2y
            logdet_v = n * u[0] + float(np.sum(np.log1p(nj * s2e / s2y)))
            return -0.5 * (n * LOG_2PI + logdet_v + quad - fit)

        return profile, 2

    struct = spec.eta_structure
    m = struct.m
    rho_free = spec.corr_prior is not None and not spec.corr_prior.is_fixed
    fixed_rho = spec.corr_prior.value if (spec.corr_prior and spec.corr_prior.is_fixed) else 0.0

    def profile(u):
        if np.max(np.abs(u[:1 + m])) > 46.0:  # keep exp() finite and well-scaled
            return -np.inf
        s2y = np.exp(u[0])
        v = np.exp(u[1:1 + m])
        rho = np.tanh(u[1 + m]) if rho_free else fixed_rho
        try:
            sigma_eta = assemble_sigma_eta(struct, v, rho)
        except ValueError:
            return -np.inf
        try:
            ce, lower = cho_factor(sigma_eta, lower=True)
            logdet_eta = 2.0 * float(np.sum(np.log(np.diag(ce))))
            eta_prec = cho_solve((ce, lower), np.eye(m))
            corr = np.zeros((stats.d, stats.d))
            rhs_corr = np.zeros(stats.d)
            datafit_corr = 0.0
            sum_logdet = 0.0
            for j in range(stats.J):
                Mj = eta_prec + stats.group_gram_zz[j] / s2y
                cj, lj = cho_factor(Mj, lower=True)
                sum_logdet += 2.0 * float(np.sum(np.log(np.diag(cj))))
                shat = cho_solve((cj, lj), np.eye(m))
                czs = stats.group_cross_xz[j] @ shat
                corr += czs @ stats.group_cross_xz[j].T
                rhs_corr += czs @ stats.group_sum_zy[j]
                datafit_corr += float(stats.group_sum_zy[j] @ shat @ stats.group_sum_zy[j])
        except (np.linalg.LinAlgError, ValueError):
            return -np.inf
        s4 = s2y * s2y
        A = stats.gram_xx / s2y - corr / s4
        c = stats.sum_xy / s2y - rhs_corr / s4
        fit = float(c @ np.linalg.lstsq(A, c, rcond=None)[0])
        quad = stats.sum_yy / s2y - datafit_corr / s4
        logdet_v = n * u[0] + stats.J * logdet_eta + sum_logdet
        return -0.5 * (n * LOG_2PI + logdet_v + quad - fit)

    return profile, 1 + m + (1 if rho_free else 0)


_START_FACTORS = (1.0, 0.3, 3.0, 0.1, 10.0)


def aic(data, spec, k=None):
    """Akaike information criterion with profile-likelihood parameter count.

    k defaults to the design width for the single-level families and the
    design width plus the number of variance-type parameters for the
    multilevel families.  The variance search is a multi-start
    Nelder-Mead simplex on log-variance coordinates.
    """
    stats = precompute(data)
    if k is None:
        if spec.family in ("LinearModel", "LinearModelNIG"):
            k = stats.d
        else:
            k = stats.d + spec.n_variance_params()
    profile, nvar = _profile_loglik_builder(stats, spec)

    base = np.zeros(nvar)
    igs = [spec.ig_y] + (list(spec.ig_eta) if spec.ig_eta else [])
    for i, ig in enumerate(igs[: nvar]):
        base[i] = np.log(ig.mean if np.isfinite(ig.mean) else 1.0)

    best_val = -np.inf
    best_u = base
    converged = False
    for factor in _START_FACTORS:
        start = base + np.log(factor) * np.ones(nvar)
        if nvar > len(igs):
            start[len(igs):] = 0.0  # correlation coordinate starts at rho = 0
        res = minimize(
            lambda u: -profile(u), start, method="Nelder-Mead",
            options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 4000, "maxfev": 8000},
        )
        if -res.fun > best_val:
            best_val = -res.fun
            best_u = res.x
            converged = bool(res.success)
    theta_hat = {"log_variances": [float(v) for v in best_u]}
    return AICResult(
        aic=2.0 * k - 2.0 * best_val, k=int(k), max_loglik=float(best_val),
        theta_hat=theta_hat, converged=converged,
    )


# ---------------------------------------------------------------------------
# Bayes factors and fit export.
# ---------------------------------------------------------------------------

DEFAULT_BF_BANDS = (
    (1.0, "no evidence"),
    (3.0, "positive"),
    (5.0, "strong"),
    (np.inf, "very strong"),
)


@dataclass(frozen=True)
class BayesFactor:
    log_bf: float
    std: float
    label: str


def bayes_factor(est_m, est_n, bands=DEFAULT_BF_BANDS):
    """Log Bayes factor between two evidence estimates with a strength label."""
    log_bf = est_m.mean - est_n.mean
    std = float(np.sqrt(est_m.std ** 2 + est_n.std ** 2))
    label = bands[-1][1]
    for cut, name in bands:
        if abs(log_bf) < cut:
            label = name
            break
    return BayesFactor(log_bf=float(log_bf), std=std, label=label)


def conditional_eta_means(stats, spec, theta, beta):
    """Conditional means of the group effects given variances and coefficients."""
    if spec.family == "SimpleMultilevel":
        s2y, s2e = theta.sigma2_y, theta.sigma2_eta
        shrink = s2e / (s2y + stats.n_per_group * s2e)
        resid = stats.group_sum_y - stats.group_sum_x @ beta
        return (shrink * resid)[:, None]
    if spec.family == "GeneralMultilevel":
        sigma_eta = assemble_sigma_eta(spec.eta_structure, *theta.nu)
        ce, lower = cho_factor(sigma_eta, lower=True)
        eta_prec = cho_solve((ce, lower), np.eye(stats.m))
        out = np.zeros((stats.J, stats.m))
        for j in range(stats.J):
            Mj = eta_prec + stats.group_gram_zz[j] / theta.sigma2_y
            rhs = (stats.group_sum_zy[j] - stats.group_cross_xz[j].T @ beta) / theta.sigma2_y
            cj, lj = cho_factor(Mj, lower=True)
            out[j] = cho_solve((cj, lj), rhs)
        return out
    raise ValueError("group effects exist only for multilevel families")


def export_fits(post, data, spec, model_id, meta, eta_means=None, eta_covs=None):
    """Per-county fitted means and one-sd bands at both floor levels.

    Returns a list of dict rows with keys county, t, mean, sd, present.
    ``meta`` is the label dict produced by the radon design builder.
    ``eta_means``/``eta_covs`` optionally add group deviations and their
    spread for the multilevel models.
    """
    labels = meta["x_labels"]
    d = len(labels)
    J = data.J
    county_names = list(meta.get("county_names", [])) or [str(j + 1) for j in range(J)]

    county_v = np.zeros(J)
    if "log_uranium" in labels:
        vcol = labels.index("log_uranium")
        for j in range(J):
            county_v[j] = data.x[data.group_of == j + 1][0, vcol]

    dropped = set(meta.get("dropped_columns", []))
    rows = []
    for j in range(J):
        name = county_names[j]
        for t in (0, 1):
            present = True
            xrow = np.zeros(d)
            if model_id in ("M0",):
                xrow[0] = 1.0 - t
                xrow[1] = float(t)
            elif model_id in ("M1", "M4", "M5"):
                xrow[0] = 1.0 - t
                xrow[1] = float(t)
                xrow[2] = county_v[j]
            elif model_id == "M2":
                xrow[j] = 1.0
                xrow[J] = 1.0 - t
                xrow[J + 1] = float(t)
            elif model_id == "M3":
                lab = ("basement:" if t == 0 else "first_floor:") + name
                if lab in dropped:
                    present = False
                else:
                    xrow[labels.index(lab)] = 1.0
            else:
                raise ValueError(f"unknown model id {model_id!r}")
            if not present:
                rows.append({"county": name, "t": t, "mean": None, "sd": None, "present": False})
                continue
            mean = float(xrow @ post.mean)
            var = float(xrow @ post.cov @ xrow)
            if eta_means is not None and model_id in ("M4", "M5"):
                zrow = np.array([1.0]) if model_id == "M4" else np.array([1.0 - t, float(t)])
                mean += float(zrow @ eta_means[j])
                if eta_covs is not None:
                    var += float(zrow @ eta_covs[j] @ zrow)
            rows.append(
                {"county": name, "t": t, "mean": mean, "sd": float(np.sqrt(var)), "present": True}
            )
    return rows
