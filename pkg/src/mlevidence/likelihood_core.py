"""Sufficient statistics and integrated / full log-likelihood evaluators.

All data-only sums are computed once (:func:`precompute`) and every
evaluator is a pure function of ``(stats, spec, theta)``.  Matrix inverses
go through Cholesky factorizations and log-determinants are read off the
Cholesky diagonal; quadratic forms are computed as triangular solves, so
explicit inverses are never formed even when the design is wide.

Batched variants (``batch_*``) evaluate whole particle clouds at once and
are numerically equivalent to the scalar functions; the scalar functions
remain the reference implementations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular

from mlevidence.model_spec import NotPositiveDefiniteError, assemble_sigma_eta

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class SufficientStats:
    """Data-only sums required by the integrated likelihoods.

    Per-group arrays are indexed 0..J-1 for groups labeled 1..J.
    """

    n: int
    J: int
    d: int
    m: int
    sum_yy: float
    sum_xy: np.ndarray          # (d,)
    gram_xx: np.ndarray         # (d, d)
    group_sum_y: np.ndarray     # (J,)
    group_sum_x: np.ndarray     # (J, d)
    group_gram_zz: np.ndarray   # (J, m, m)
    group_sum_zy: np.ndarray    # (J, m)
    group_cross_xz: np.ndarray  # (J, d, m)
    n_per_group: np.ndarray     # (J,)

    def __post_init__(self):
        for name in (
            "sum_xy", "gram_xx", "group_sum_y", "group_sum_x",
            "group_gram_zz", "group_sum_zy", "group_cross_xz", "n_per_group",
        ):
            getattr(self, name).setflags(write=False)


@dataclass(frozen=True)
class ThetaPoint:
    """A point in variance space.

    ``sigma2_y`` is the observation noise variance (plain ``sigma2`` for
    single-level families).  ``sigma2_eta`` applies to SimpleMultilevel;
    ``nu = (variances, rho)`` applies to GeneralMultilevel.
    """

    sigma2_y: float
    sigma2_eta: float | None = None
    nu: tuple | None = None

    def __post_init__(self):
        if not self.sigma2_y > 0:
            raise ValueError("sigma2_y must be strictly positive")
        if self.sigma2_eta is not None and self.sigma2_eta < 0:
            raise ValueError("sigma2_eta must be nonnegative")
        if self.nu is not None:
            variances, rho = self.nu
            variances = np.asarray(variances, dtype=float)
            if np.any(variances <= 0):
                raise ValueError("nu variances must be strictly positive")
            if not -1.0 < rho < 1.0:
                raise ValueError("rho must lie in (-1, 1)")
            variances.setflags(write=False)
            object.__setattr__(self, "nu", (variances, float(rho)))


def precompute(data):
    """One pass over the data, accumulating all sums in a canonical order.

    Within each group, rows are summed in lexicographic order of their
    values, so any permutation of the input rows yields bit-identical
    statistics.
    """
    n, d, m, J = data.n, data.d, data.m, data.J
    sum_yy = 0.0
    sum_xy = np.zeros(d)
    gram_xx = np.zeros((d, d))
    group_sum_y = np.zeros(J)
    group_sum_x = np.zeros((J, d))
    group_gram_zz = np.zeros((J, m, m))
    group_sum_zy = np.zeros((J, m))
    group_cross_xz = np.zeros((J, d, m))
    for j in range(J):
        idx = np.flatnonzero(data.group_of == j + 1)
        key = np.column_stack([data.y[idx, None], data.x[idx], data.z[idx]])
        order = np.lexsort(key.T[::-1])
        idx = idx[order]
        yj, xj, zj = data.y[idx], data.x[idx], data.z[idx]
        group_sum_y[j] = yj.sum()
        group_sum_x[j] = xj.sum(axis=0)
        group_gram_zz[j] = zj.T @ zj
        group_sum_zy[j] = zj.T @ yj
        group_cross_xz[j] = xj.T @ zj
        sum_yy += float(yj @ yj)
        sum_xy += xj.T @ yj
        gram_xx += xj.T @ xj
    return SufficientStats(
        n=n, J=J, d=d, m=m,
        sum_yy=sum_yy, sum_xy=sum_xy, gram_xx=gram_xx,
        group_sum_y=group_sum_y, group_sum_x=group_sum_x,
        group_gram_zz=group_gram_zz, group_sum_zy=group_sum_zy,
        group_cross_xz=group_cross_xz,
        n_per_group=data.n_per_group.astype(np.int64).copy(),
    )


def _prior_terms(mu, cov):
    """Cholesky-derived prior quantities: precision, precision @ mean, logdet, quad."""
    c, lower = cho_factor(cov, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    prec = cho_solve((c, lower), np.eye(cov.shape[0]))
    prec_mu = cho_solve((c, lower), mu)
    quad = float(mu @ prec_mu)
    return prec, prec_mu, logdet, quad


def _logdet_and_quad(precision, rhs):
    """log|precision| and rhs^T precision^-1 rhs via one Cholesky."""
    L = cholesky(precision, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    t = solve_triangular(L, rhs, lower=True)
    return logdet, float(t @ t), L


def _check_family(spec, *allowed):
    if spec.family not in allowed:
        raise ValueError(f"family {spec.family!r} not valid here (expected {allowed})")


def _lm_core(stats, mu, cov, sigma2):
    prec, prec_mu, logdet_prior, quad_prior = _prior_terms(mu, cov)
    A = prec + stats.gram_xx / sigma2
    rhs = prec_mu + stats.sum_xy / sigma2
    logdet_post, quad_post, _ = _logdet_and_quad(A, rhs)
    return -0.5 * (
        logdet_post + logdet_prior + stats.n * (LOG_2PI + np.log(sigma2))
        + quad_prior + stats.sum_yy / sigma2 - quad_post
    )


def log_integrated_lm(stats, spec, sigma2):
    """Log likelihood with the Gaussian coefficient prior integrated out."""
    _check_family(spec, "LinearModel")
    if not sigma2 > 0:
        raise ValueError("sigma2 must be strictly positive")
    if stats.n == 0:
        return 0.0
    return _lm_core(stats, spec.prior_mean, spec.prior_cov, sigma2)


def log_integrated_nig_conditional(stats, spec, sigma2):
    """Conditional integrated likelihood for the conjugate family.

    Identical to the plain linear-model evaluator with prior covariance
    gamma * sigma2 * prior_cov.
    """
    _check_family(spec, "LinearModelNIG")
    if not sigma2 > 0:
        raise ValueError("sigma2 must be strictly positive")
    if stats.n == 0:
        return 0.0
    return _lm_core(stats, spec.prior_mean, spec.gamma * sigma2 * spec.prior_cov, sigma2)


def log_integrated_simple_ml(stats, spec, sigma2_y, sigma2_eta):
    """Integrated likelihood with coefficients and group intercepts marginalized.

    ``sigma2_eta = 0`` is an exact boundary and reduces to the plain
    linear-model value at ``sigma2 = sigma2_y``.
    """
    _check_family(spec, "SimpleMultilevel")
    if not sigma2_y > 0:
        raise ValueError("sigma2_y must be strictly positive")
    if sigma2_eta < 0:
        raise ValueError("sigma2_eta must be nonnegative")
    if stats.n == 0:
        return 0.0
    prec, prec_mu, logdet_prior, quad_prior = _prior_terms(spec.prior_mean, spec.prior_cov)
    nj = stats.n_per_group
    w = sigma2_eta / (sigma2_y + nj * sigma2_eta)          # shrinkage weight per group
    A = prec + (stats.gram_xx - np.einsum("j,ja,jb->ab", w, stats.group_sum_x, stats.group_sum_x)) / sigma2_y
    rhs = prec_mu + (stats.sum_xy - (w * stats.group_sum_y) @ stats.group_sum_x) / sigma2_y
    logdet_post, quad_post, _ = _logdet_and_quad(A, rhs)
    sum_log_ratio = float(np.sum(np.log1p(nj * sigma2_eta / sigma2_y)))
    datafit = (stats.sum_yy - float(w @ (stats.group_sum_y ** 2))) / sigma2_y
    return -0.5 * (
        logdet_post + logdet_prior + stats.n * (LOG_2PI + np.log(sigma2_y))
        + sum_log_ratio + quad_prior + datafit - quad_post
    )


def log_integrated_general_ml(stats, spec, theta):
    """Integrated likelihood for the group-varying-coefficient family.

    Returns ``-inf`` when the group-level covariance assembled from theta
    is not positive-definite (a rejected proposal, not an error).
    """
    _check_family(spec, "GeneralMultilevel")
    sigma2_y = theta.sigma2_y
    if theta.nu is None:
        raise ValueError("theta.nu is required for GeneralMultilevel")
    variances, rho = theta.nu
    try:
        sigma_eta = assemble_sigma_eta(spec.eta_structure, variances, rho)
    except NotPositiveDefiniteError:
        return -np.inf
    if stats.n == 0:
        return 0.0
    prec, prec_mu, logdet_prior, quad_prior = _prior_terms(spec.prior_mean, spec.prior_cov)
    eta_prec, _, logdet_eta, _ = _prior_terms(np.zeros(stats.m), sigma_eta)

    corr = np.zeros((stats.d, stats.d))
    rhs_corr = np.zeros(stats.d)
    datafit_corr = 0.0
    sum_logdet_groups = 0.0
    for j in range(stats.J):
        Mj = eta_prec + stats.group_gram_zz[j] / sigma2_y
        cj, lower = cho_factor(Mj, lower=True)
        sum_logdet_groups += 2.0 * float(np.sum(np.log(np.diag(cj))))
        shat = cho_solve((cj, lower), np.eye(stats.m))
        czs = stats.group_cross_xz[j] @ shat
        corr += czs @ stats.group_cross_xz[j].T
        rhs_corr += czs @ stats.group_sum_zy[j]
        datafit_corr += float(stats.group_sum_zy[j] @ shat @ stats.group_sum_zy[j])

    s4 = sigma2_y * sigma2_y
    A = prec + stats.gram_xx / sigma2_y - corr / s4
    rhs = prec_mu + stats.sum_xy / sigma2_y - rhs_corr / s4
    try:
        logdet_post, quad_post, _ = _logdet_and_quad(A, rhs)
    except np.linalg.LinAlgError:
        return -np.inf
    return -0.5 * (
        logdet_post + logdet_prior + stats.n * (LOG_2PI + np.log(sigma2_y))
        + stats.J * logdet_eta + sum_logdet_groups
        + quad_prior + stats.sum_yy / sigma2_y - datafit_corr / s4 - quad_post
    )


def log_full_likelihood(stats, family, beta, sigma2_y, eta=None):
    """Exact Gaussian log-density of y given coefficients and group effects.

    Priors are not included (the sampler adds them).  ``eta`` has shape
    (J,) for SimpleMultilevel and (J, m) for GeneralMultilevel.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (stats.d,):
        raise ValueError(f"beta must have length {stats.d}")
    if not sigma2_y > 0:
        raise ValueError("sigma2_y must be strictly positive")
    rss = (
        stats.sum_yy
        - 2.0 * float(beta @ stats.sum_xy)
        + float(beta @ stats.gram_xx @ beta)
    )
    if family in ("LinearModel", "LinearModelNIG"):
        if eta is not None:
            raise ValueError("single-level families take no group effects")
    elif family == "SimpleMultilevel":
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (stats.J,):
            raise ValueError(f"eta must have shape ({stats.J},)")
        rss += float(
            np.sum(eta ** 2 * stats.n_per_group)
            - 2.0 * eta @ stats.group_sum_y
            + 2.0 * eta @ (stats.group_sum_x @ beta)
        )
    elif family == "GeneralMultilevel":
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (stats.J, stats.m):
            raise ValueError(f"eta must have shape ({stats.J}, {stats.m})")
        rss += float(
            np.einsum("ja,jab,jb->", eta, stats.group_gram_zz, eta)
            - 2.0 * np.einsum("ja,ja->", eta, stats.group_sum_zy)
            + 2.0 * np.einsum("a,jab,jb->", beta, stats.group_cross_xz, eta)
        )
    else:
        raise ValueError(f"unknown family {family!r}")
    return -0.5 * (stats.n * (LOG_2PI + np.log(sigma2_y)) + rss / sigma2_y)


def conditional_beta_posterior(stats, spec, theta):
    """Conditional Gaussian posterior of the coefficients at fixed variances.

    Returns (mean, cov).  Used both by the posterior-recovery mixture and
    by per-point diagnostics.
    """
    if spec.family == "LinearModel":
        mu, cov, sigma2 = spec.prior_mean, spec.prior_cov, theta.sigma2_y
        prec, prec_mu, _, _ = _prior_terms(mu, cov)
        A = prec + stats.gram_xx / sigma2
        rhs = prec_mu + stats.sum_xy / sigma2
    elif spec.family == "LinearModelNIG":
        sigma2 = theta.sigma2_y
        prec, prec_mu, _, _ = _prior_terms(
            spec.prior_mean, spec.gamma * sigma2 * spec.prior_cov
        )
        A = prec + stats.gram_xx / sigma2
        rhs = prec_mu + stats.sum_xy / sigma2
    elif spec.family == "SimpleMultilevel":
        sigma2_y, sigma2_eta = theta.sigma2_y, theta.sigma2_eta
        prec, prec_mu, _, _ = _prior_terms(spec.prior_mean, spec.prior_cov)
        w = sigma2_eta / (sigma2_y + stats.n_per_group * sigma2_eta)
        A = prec + (
            stats.gram_xx - np.einsum("j,ja,jb->ab", w, stats.group_sum_x, stats.group_sum_x)
        ) / sigma2_y
        rhs = prec_mu + (stats.sum_xy - (w * stats.group_sum_y) @ stats.group_sum_x) / sigma2_y
    elif spec.family == "GeneralMultilevel":
        sigma2_y = theta.sigma2_y
        variances, rho = theta.nu
        sigma_eta = assemble_sigma_eta(spec.eta_structure, variances, rho)
        prec, prec_mu, _, _ = _prior_terms(spec.prior_mean, spec.prior_cov)
        eta_prec, _, _, _ = _prior_terms(np.zeros(stats.m), sigma_eta)
        corr = np.zeros((stats.d, stats.d))
        rhs_corr = np.zeros(stats.d)
        for j in range(stats.J):
            Mj = eta_prec + stats.group_gram_zz[j] / sigma2_y
            cj, lower = cho_factor(Mj, lower=True)
            shat = cho_solve((cj, lower), np.eye(stats.m))
            czs = stats.group_cross_xz[j] @ shat
            corr += czs @ stats.group_cross_xz[j].T
            rhs_corr += czs @ stats.group_sum_zy[j]
        s4 = sigma2_y * sigma2_y
        A = prec + stats.gram_xx / sigma2_y - corr / s4
        rhs = prec_mu + stats.sum_xy / sigma2_y - rhs_corr / s4
    else:
        raise ValueError(f"unknown family {spec.family!r}")
    c, lower = cho_factor(A, lower=True)
    mean = cho_solve((c, lower), rhs)
    cov = cho_solve((c, lower), np.eye(stats.d))
    cov = 0.5 * (cov + cov.T)
    return mean, cov


# ---------------------------------------------------------------------------
# Batched evaluators (particle clouds); agree with the scalar functions.
# ---------------------------------------------------------------------------

def _batch_chol_logdet_quad(A, rhs):
    """Batched log|A| and rhs^T A^-1 rhs for a stack of SPD matrices."""
    L = np.linalg.cholesky(A)
    logdet = 2.0 * np.sum(np.log(np.einsum("pii->pi", L)), axis=1)
    t = np.linalg.solve(L, rhs[:, :, None])[:, :, 0]
    return logdet, np.sum(t * t, axis=1)


def batch_log_integrated(stats, spec):
    """Build a vectorized integrated-likelihood evaluator.

    The returned function maps a (P, k) array of natural-scale variance
    parameters to (P,) log likelihood values, with k = 1 for the
    single-level families, 2 for SimpleMultilevel, and 1 + m (+1 when the
    correlation is sampled) for GeneralMultilevel.
    """
    family = spec.family
    n = stats.n

    if family in ("LinearModel", "LinearModelNIG"):
        if family == "LinearModel":
            # Generalized-eigenvalue fast path: one symmetric eigendecomposition,
            # then every sigma2 is O(d).
            Lp = cholesky(spec.prior_cov, lower=True)
            lam, Q = np.linalg.eigh(Lp.T @ stats.gram_xx @ Lp)
            lam = np.clip(lam, 0.0, None)
            prec, prec_mu, _, quad_prior = _prior_terms(spec.prior_mean, spec.prior_cov)
            a = Q.T @ solve_triangular(Lp, spec.prior_mean, lower=True)
            b = Q.T @ (Lp.T @ stats.sum_xy)

            def loglik(theta):
                s2 = theta[:, 0][:, None]
                if n == 0:
                    return np.zeros(s2.shape[0])
                logdet = np.sum(np.log1p(lam[None, :] / s2), axis=1)
                quad = np.sum((a[None, :] + b[None, :] / s2) ** 2 / (1.0 + lam[None, :] / s2), axis=1)
                s2f = s2[:, 0]
                return -0.5 * (logdet + n * (LOG_2PI + np.log(s2f)) + quad_prior
                               + stats.sum_yy / s2f - quad)

        else:
            base_cov = spec.gamma * spec.prior_cov
            prec_b, prec_mu_b, logdet_b, quad_b = _prior_terms(spec.prior_mean, base_cov)
            M = prec_b + stats.gram_xx
            v = prec_mu_b + stats.sum_xy
            cM, lowM = cho_factor(M, lower=True)
            logdet_M = 2.0 * float(np.sum(np.log(np.diag(cM))))
            quad_M = float(v @ cho_solve((cM, lowM), v))
            d = stats.d

            def loglik(theta):
                s2 = theta[:, 0]
                if n == 0:
                    return np.zeros(s2.shape)
                # log|post precision| + log|prior cov| with sigma2 cancelled:
                # both determinants pick up d*log(sigma2) terms of opposite sign.
                const = logdet_M + logdet_b
                return -0.5 * (
                    const + n * (LOG_2PI + np.log(s2))
                    + (quad_b + stats.sum_yy - quad_M) / s2
                )

        return loglik

    prec, prec_mu, logdet_prior, quad_prior = _prior_terms(spec.prior_mean, spec.prior_cov)

    if family == "SimpleMultilevel":
        nj = stats.n_per_group.astype(float)
        Yj = stats.group_sum_y
        Xj = stats.group_sum_x

        def loglik(theta):
            s2y = theta[:, 0]
            s2e = theta[:, 1]
            if n == 0:
                return np.zeros(s2y.shape)
            w = s2e[:, None] / (s2y[:, None] + nj[None, :] * s2e[:, None])
            A = prec[None] + (
                stats.gram_xx[None] - np.einsum("pj,ja,jb->pab", w, Xj, Xj, optimize=True)
            ) / s2y[:, None, None]
            rhs = prec_mu[None] + (
                stats.sum_xy[None] - np.einsum("pj,j,ja->pa", w, Yj, Xj, optimize=True)
            ) / s2y[:, None]
            logdet_post, quad_post = _batch_chol_logdet_quad(A, rhs)
            sum_log_ratio = np.sum(np.log1p(nj[None, :] * s2e[:, None] / s2y[:, None]), axis=1)
            datafit = (stats.sum_yy - w @ (Yj ** 2)) / s2y
            return -0.5 * (
                logdet_post + logdet_prior + n * (LOG_2PI + np.log(s2y))
                + sum_log_ratio + quad_prior + datafit - quad_post
            )

        return loglik

    if family == "GeneralMultilevel":
        struct = spec.eta_structure
        m = struct.m
        fixed_rho = spec.corr_prior.value if (spec.corr_prior and spec.corr_prior.is_fixed) else None
        rho_sampled = spec.corr_prior is not None and not spec.corr_prior.is_fixed
        Gz = stats.group_gram_zz
        Cxz = stats.group_cross_xz
        Szy = stats.group_sum_zy
        pat = struct.pattern

        def loglik(theta):
            s2y = theta[:, 0]
            v = theta[:, 1:1 + m]
            if rho_sampled:
                rho = theta[:, 1 + m]
            elif fixed_rho is not None:
                rho = np.full(s2y.shape, fixed_rho)
            else:
                rho = np.zeros(s2y.shape)
            P = s2y.shape[0]
            if n == 0:
                return np.zeros(P)
            sig = np.sqrt(v)
            se = np.zeros((P, m, m))
            ii = np.arange(m)
            se[:, ii, ii] = v
            for r, c in pat:
                off = rho * sig[:, r] * sig[:, c]
                se[:, r, c] = off
                se[:, c, r] = off
            # Positive-definiteness gate; failed proposals get -inf density.
            eigmin = np.linalg.eigvalsh(se)[:, 0]
            ok = eigmin > 0
            se_safe = np.where(ok[:, None, None], se, np.eye(m)[None])
            Le = np.linalg.cholesky(se_safe)
            logdet_eta = 2.0 * np.sum(np.log(np.einsum("pii->pi", Le)), axis=1)
            eta_prec = np.linalg.inv(se_safe)

            Mj = eta_prec[:, None] + Gz[None] / s2y[:, None, None, None]
            Lj = np.linalg.cholesky(Mj)
            sum_logdet_groups = 2.0 * np.sum(np.log(np.einsum("pjii->pji", Lj)), axis=(1, 2))

            # Group corrections as one tall matmul: with B_j = M_j^{-1} [C_j^T s_j]
            # the sums over j of C_j B_j collapse to a (d+1)-column product.
            cxz_t = Cxz.transpose(0, 2, 1)               # (J, m, d)
            rhs_j = np.concatenate([cxz_t, Szy[:, :, None]], axis=2)
            B = np.linalg.inv(Mj) @ rhs_j[None]          # (P, J, m, d+1)
            cbig = cxz_t.reshape(stats.J * m, stats.d)   # (Jm, d)
            prod = cbig.T[None] @ B.reshape(P, stats.J * m, stats.d + 1)
            corr = prod[:, :, :stats.d]                  # sum_j C_j Mhat_j^{-1} C_j^T
            rhs_corr = prod[:, :, stats.d]
            datafit_corr = np.einsum("pjm,jm->p", B[:, :, :, stats.d], Szy)

            s4 = (s2y * s2y)[:, None, None]
            A = prec[None] + stats.gram_xx[None] / s2y[:, None, None] - corr / s4
            rhs = prec_mu[None] + stats.sum_xy[None] / s2y[:, None] - rhs_corr / s4[:, :, 0]
            logdet_post, quad_post = _batch_chol_logdet_quad(A, rhs)
            val = -0.5 * (
                logdet_post + logdet_prior + n * (LOG_2PI + np.log(s2y))
                + stats.J * logdet_eta + sum_logdet_groups
                + quad_prior + stats.sum_yy / s2y - datafit_corr / (s2y * s2y) - quad_post
            )
            return np.where(ok, val, -np.inf)

        return loglik

    raise ValueError(f"unknown family {family!r}")


def batch_log_full(stats, spec):
    """Vectorized full log-likelihood over (beta, eta) particle blocks.

    The returned function takes ``(beta, eta, sigma2_y)`` with shapes
    (P, d), (P, J) or (P, J, m) or None, and (P,).
    """
    family = spec.family
    n = stats.n

    def loglik(beta, eta, sigma2_y):
        rss = (
            stats.sum_yy
            - 2.0 * beta @ stats.sum_xy
            + np.einsum("pa,ab,pb->p", beta, stats.gram_xx, beta, optimize=True)
        )
        if family == "SimpleMultilevel":
            rss = rss + (
                (eta ** 2) @ stats.n_per_group.astype(float)
                - 2.0 * eta @ stats.group_sum_y
                + 2.0 * np.einsum("pj,ja,pa->p", eta, stats.group_sum_x, beta, optimize=True)
            )
        elif family == "GeneralMultilevel":
            rss = rss + (
                np.einsum("pja,jab,pjb->p", eta, stats.group_gram_zz, eta, optimize=True)
                - 2.0 * np.einsum("pja,ja->p", eta, stats.group_sum_zy, optimize=True)
                + 2.0 * np.einsum("pa,jab,pjb->p", beta, stats.group_cross_xz, eta, optimize=True)
            )
        return -0.5 * (n * (LOG_2PI + np.log(sigma2_y)) + rss / sigma2_y)

    return loglik
