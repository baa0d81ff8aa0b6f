"""Accuracy diagnostics for fitted non-linear predictors.

Two complementary checks of how faithful the working linearisation is
to the exact predictor: a sampling-based deviation summary on the
predictor scale, and a Kullback--Leibler comparison of the latent
Gaussian approximation against a locally corrected Gaussian that keeps
the predictor's second-order curvature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .engine import _obs_grad_hess
from .sparse import FactorizationError, SparseSym, chol


class DiagnosticsError(RuntimeError):
    pass


FD_STEP = 1e-3  # central second-difference step for predictor curvature


@dataclass
class KlReport:
    """KL divergences between the linearised-model latent Gaussian and
    its curvature-corrected counterpart at the hyperparameter mode,
    plus the Frobenius norm of the correction matrix."""

    kl_lin_to_nonlin: float
    kl_nonlin_to_lin: float
    g_matrix_norm: float


def _mode_point(fit):
    return max(fit.grid, key=lambda p: p.log_post)


def _pair_pattern(bmat):
    """Structural (row, col) pairs of B^T B, cancellation-proof."""
    a = bmat.tocsr(copy=True)
    a.data = np.abs(a.data)
    m = (a.T @ a).tocoo()
    keep = m.data > 0
    return set(zip(m.row[keep].tolist(), m.col[keep].tolist()))


def _interaction_pairs(model, lin):
    """Latent index pairs (j <= k) the predictor can couple.

    Second derivatives of the predictor live inside the sparsity of
    B^T B.  The pattern is read off the stored Jacobian and, to dodge
    derivatives that happen to vanish exactly at the expansion point,
    off a second Jacobian at a nearby probe point.
    """
    pairs = _pair_pattern(lin.B)
    shift = 0.01 * (1.0 + np.abs(lin.u0))
    probe = lin.u0 + shift * np.random.default_rng(0).standard_normal(lin.u0.size)
    try:
        pairs |= _pair_pattern(model.linearise(probe).B)
    except Exception:
        pass  # probe left the predictor's domain; keep the anchored pattern
    out = {(j, k) for j, k in pairs if j < k}
    out |= {(j, j) for j in range(lin.u0.size)}
    return sorted(out)


def correction_matrix(fit):
    """Second-order curvature of the predictor, likelihood-weighted.

    Returns the sparse symmetric matrix G = sum_i g_i H_i, where g_i is
    the gradient of observation i's log-likelihood at the exact
    predictor and H_i the Hessian of predictor row i with respect to
    the latent state, both taken at the linearisation point and at the
    hyperparameter mode.  Entries are central second differences of
    psi(u) = g^T eta(u) over the coupling pattern of the predictor.
    """
    model, lin = fit.model, fit.linearisation
    point = _mode_point(fit)
    _, obs_vals = model.natural_values(point.theta)
    # at the anchor the linearised and exact predictors coincide
    g_star, _, _ = _obs_grad_hess(model, lin, lin.u0, obs_vals)

    u0 = lin.u0
    d = u0.size

    def psi(u):
        return float(g_star @ model.eta(u))

    psi0 = psi(u0)
    h = FD_STEP
    rows, cols, vals = [], [], []
    for j, k in _interaction_pairs(model, lin):
        ej = np.zeros(d)
        ej[j] = h
        if j == k:
            val = (psi(u0 + ej) - 2.0 * psi0 + psi(u0 - ej)) / h**2
            rows.append(j)
            cols.append(j)
            vals.append(val)
        else:
            ek = np.zeros(d)
            ek[k] = h
            val = (
                psi(u0 + ej + ek)
                - psi(u0 + ej - ek)
                - psi(u0 - ej + ek)
                + psi(u0 - ej - ek)
            ) / (4.0 * h**2)
            rows.extend([j, k])
            cols.extend([k, j])
            vals.extend([val, val])
    return sp.coo_matrix((vals, (rows, cols)), shape=(d, d)).tocsr()


def _trace_with_inverse(gmat, factor):
    """tr(G A^-1) reading only the inverse's entries on G's pattern.

    One solve per non-empty column of G; never forms the full inverse.
    """
    g = gmat.tocsc()
    n = g.shape[0]
    total = 0.0
    for k in range(n):
        lo, hi = g.indptr[k], g.indptr[k + 1]
        if lo == hi:
            continue
        e = np.zeros(n)
        e[k] = 1.0
        x = factor.solve(e)
        total += float(g.data[lo:hi] @ x[g.indices[lo:hi]])
    return total


def kl_divergences(fit):
    """Both KL divergences between the fitted latent Gaussian and its
    curvature-corrected counterpart, evaluated at the hyperparameter
    mode.

    The linearised model gives N(m, Q^-1) for the latent state.  Adding
    the likelihood-weighted predictor curvature G yields the corrected
    Gaussian with precision Q - G and matched gradient at the
    linearisation point; both divergences between the two are returned
    together with ||G||_F.  A corrected precision that is not positive
    definite means the local Gaussian comparison is meaningless and
    raises DiagnosticsError.
    """
    model, lin = fit.model, fit.linearisation
    point = _mode_point(fit)
    comp_vals, obs_vals = model.natural_values(point.theta)

    m_bar = point.mode
    _, h_bar, _ = _obs_grad_hess(model, lin, m_bar, obs_vals)
    q_prior = model.precision(comp_vals).csc
    q_bar = (q_prior - (lin.B.T @ sp.diags(h_bar) @ lin.B)).tocsc()

    gmat = correction_matrix(fit)
    q_tilde = (q_bar - gmat).tocsc()

    factor_bar = chol(SparseSym(q_bar))
    try:
        factor_tilde = chol(SparseSym(q_tilde))
    except FactorizationError as err:
        raise DiagnosticsError(
            "nonlinearity too strong for Gaussian comparison: corrected "
            "precision is not positive definite"
        ) from err

    m_tilde = factor_tilde.solve(q_bar @ m_bar - gmat @ lin.u0)
    delta = m_tilde - m_bar

    # tr(Qt Qb^-1) = d - tr(G Qb^-1) and tr(Qb Qt^-1) = d + tr(G Qt^-1),
    # so only the inverse entries on G's pattern are ever needed
    tr_bar = _trace_with_inverse(gmat, factor_bar)
    tr_tilde = _trace_with_inverse(gmat, factor_tilde)

    kl_lin = 0.5 * (
        factor_bar.log_det
        - factor_tilde.log_det
        - tr_bar
        + float(delta @ (q_tilde @ delta))
    )
    kl_nonlin = 0.5 * (
        factor_tilde.log_det
        - factor_bar.log_det
        + tr_tilde
        + float(delta @ (q_bar @ delta))
    )
    return KlReport(
        kl_lin_to_nonlin=float(kl_lin),
        kl_nonlin_to_lin=float(kl_nonlin),
        g_matrix_norm=float(np.sqrt(np.sum(gmat.data**2))),
    )


def linearisation_deviation(fit, n_samples=1000, seed=0):
    """Monte-Carlo size of the linearisation error on the predictor scale.

    Draws joint posterior samples (a grid location by its weight, then
    the latent state from the matching conditional), evaluates the
    linearised and the exact predictor at each draw, and returns the
    sum over predictor rows of mean squared gap over marginal predictor
    variance.  The variance in the denominator includes the
    hyperparameter mixture spread, matching ``predictor_sigma2`` on the
    fit.
    """
    if n_samples < 1:
        raise DiagnosticsError("n_samples must be positive")
    model, lin = fit.model, fit.linearisation
    var = np.asarray(fit.predictor_sigma2, dtype=float)
    if np.any(~(var > 0.0)):
        bad = int(np.flatnonzero(~(var > 0.0))[0])
        raise DiagnosticsError(f"zero predictor variance row {bad}")

    rng = np.random.default_rng(seed)
    grid = fit.grid
    weights = np.array([p.weight for p in grid])
    d = model.n_latent
    C = model.constraints
    acc = np.zeros(var.size)
    for _ in range(int(n_samples)):
        m = int(rng.choice(len(grid), p=weights))
        point = grid[m]
        z = rng.standard_normal(d)
        u = point.mode + point.factor.solve_lt(z)
        if C is not None:
            W, S = point.constraint_proj
            u = u - W @ np.linalg.solve(S, C @ u)
        gap = lin.eval(u) - model.eta(u)
        acc += gap * gap
    return float(np.sum(acc / (n_samples * var)))
