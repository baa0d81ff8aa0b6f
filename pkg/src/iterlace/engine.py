"""Core inference: Gaussian approximation, hyperparameter grid, fixed-point loop.

The estimation problem is a latent Gaussian model whose predictor may be
a non-linear expression of the component effects.  For a fixed
linearisation point u0 the predictor is replaced by its first-order
Taylor expansion, giving an ordinary linear latent Gaussian model that
is fitted by a Laplace/grid scheme:

* ``gaussian_approx``      -- Newton iteration for the conditional mode
                              and precision of p(u | theta, y),
* ``log_posterior_theta``  -- Laplace approximation of p(theta | y),
* ``theta_explore``        -- Nelder-Mead mode search plus an axis grid
                              in standardised coordinates,
* ``line_search``          -- the predictor-space step-size control,
* ``fit``                  -- the outer loop choosing successive
                              linearisation points until they stop
                              moving.

Sum-to-zero constraints on intrinsic components are imposed by
conditioning-by-kriging: every Newton step, mode, sample, and marginal
variance is corrected through the same projection, and the Laplace
ratio gets matching correction terms so the hyperparameter posterior
stays consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import optimize

from .exprs import AdditiveAll, Ref, expr_jacobian, detect_additive
from .sparse import CholFactor, SparseSym, chol

__all__ = [
    "EngineError",
    "Component",
    "ObsBlock",
    "Model",
    "Linearisation",
    "ThetaPoint",
    "IterationRecord",
    "FitResult",
    "gaussian_approx",
    "line_search",
    "fit",
    "marginals",
    "generate",
    "predict_summary",
    "sample_mode",
]

LOG_2PI = np.log(2.0 * np.pi)


class EngineError(RuntimeError):
    pass


# --- model assembly -------------------------------------------------------

@dataclass
class Component:
    """A named latent block: its prior model and effect mapper."""

    name: str
    model: object  # LatentModel
    mapper: object = None

    def __post_init__(self):
        if self.mapper is None:
            self.mapper = self.model.default_mapper()


@dataclass
class ObsBlock:
    """One likelihood: family, response, formula, per-component inputs.

    ``inputs`` maps component names to the resolved mapper inputs for
    this block's data.  ``aggregation`` optionally post-processes the
    formula output into per-response rows (mapper plus its BlockSpec).
    """

    family: object
    y: np.ndarray
    formula: object
    inputs: dict
    aggregation: tuple = None

    def __post_init__(self):
        self.y = self.family.check_response(self.y)


@dataclass
class Linearisation:
    """eta_bar(u) = delta + B u, anchored so eta_bar(u0) = eta_tilde(u0)."""

    u0: np.ndarray
    B: sp.csr_matrix
    delta: np.ndarray
    block_slices: list

    def eval(self, u):
        return self.delta + self.B @ u


@dataclass
class ThetaPoint:
    """One hyperparameter grid location with its conditional Gaussian."""

    theta: np.ndarray  # internal scale
    log_post: float
    weight: float
    mode: np.ndarray
    factor: CholFactor
    latent_var: np.ndarray
    pred_mean: np.ndarray
    pred_var: np.ndarray
    constraint_proj: tuple = None  # (W, S) for sampling projection


@dataclass
class IterationRecord:
    iter: int
    alpha: float
    max_dev_over_sd: float
    mean_dev_over_sd: float
    theta: dict
    line_search_ran: bool


@dataclass
class FitResult:
    model: object
    grid: list
    linearisation: Linearisation
    converged: bool
    records: list
    theta_names: list
    latent_mean: np.ndarray
    latent_sd: np.ndarray
    predictor_sigma2: np.ndarray
    hyper_summary: list
    log_lines: list


class Model:
    """Components plus likelihood blocks plus options."""

    def __init__(self, components, obs, options=None):
        if not components:
            raise EngineError("model needs at least one component")
        if not obs:
            raise EngineError("model needs at least one likelihood")
        names = [c.name for c in components]
        if len(set(names)) != len(names):
            raise EngineError("component names must be distinct")
        self.components = list(components)
        self.obs = list(obs)
        self.options = dict(options or {})
        self._by_name = {c.name: c for c in self.components}

        # latent layout
        self.offsets = {}
        start = 0
        for c in self.components:
            n = c.model.n_latent()
            self.offsets[c.name] = (start, start + n)
            start += n
        self.n_latent = start

        # free hyperparameters: components first, then likelihood families
        self.theta_entries = []
        for c in self.components:
            for h in c.model.hypers():
                self.theta_entries.append((f"{c.name}.{h.name}", c.name, h))
        for i, block in enumerate(self.obs):
            prefix = "lik" if len(self.obs) == 1 else f"lik{i + 1}"
            for h in block.family.hypers():
                self.theta_entries.append((f"{prefix}.{h.name}", ("obs", i), h))
        self.theta_names = [e[0] for e in self.theta_entries]

        self._validate_refs()
        self._constraints = self._build_constraints()

    # -- bookkeeping

    def _validate_refs(self):
        declared = set(self._by_name)
        for i, block in enumerate(self.obs):
            for ref in block.formula.refs():
                if isinstance(ref, Ref) and ref.name not in declared:
                    raise EngineError(
                        f"formula for likelihood {i + 1} references "
                        f"undeclared component {ref.name!r}"
                    )

    def block_components(self, block):
        """Component names participating in a block, in component order."""
        refs = block.formula.refs()
        if isinstance(block.formula, AdditiveAll):
            wanted = set(block.inputs)
        else:
            wanted = {r.name for r in refs if isinstance(r, Ref)}
        return [c.name for c in self.components if c.name in wanted]

    def component(self, name):
        return self._by_name[name]

    def slice_of(self, name):
        start, end = self.offsets[name]
        return slice(start, end)

    def _build_constraints(self):
        rows = []
        for c in self.components:
            cons = c.model.constraints()
            if cons is None:
                continue
            start, end = self.offsets[c.name]
            for r in np.atleast_2d(cons):
                full = np.zeros(self.n_latent)
                full[start:end] = r
                rows.append(full)
        return np.array(rows) if rows else None

    @property
    def constraints(self):
        return self._constraints

    # -- hyperparameters

    def theta_internal0(self):
        return np.array([h.initial_internal() for _, _, h in self.theta_entries])

    def natural_values(self, theta):
        """Split an internal theta vector into natural per-owner dicts."""
        theta = np.asarray(theta, dtype=float)
        if theta.size != len(self.theta_entries):
            raise EngineError(
                f"theta has {theta.size} entries, model has "
                f"{len(self.theta_entries)} free hyperparameters"
            )
        comp_vals = {c.name: {} for c in self.components}
        obs_vals = [{} for _ in self.obs]
        for (name, owner, h), x in zip(self.theta_entries, theta):
            val = h.transform.to_natural(x)
            if isinstance(owner, tuple):
                obs_vals[owner[1]][h.name] = val
            else:
                comp_vals[owner][h.name] = val
        return comp_vals, obs_vals

    def log_prior_theta(self, theta):
        return float(
            sum(h.prior.logpdf(x) for (_, _, h), x in zip(self.theta_entries, theta))
        )

    def precision(self, comp_vals):
        blocks = [
            c.model.precision(comp_vals[c.name]).csc for c in self.components
        ]
        return SparseSym(sp.block_diag(blocks, format="csc"))

    def prior_mean(self):
        return np.concatenate([c.model.prior_mean() for c in self.components])

    @property
    def is_linear(self):
        """Syntactically linear: additive formulas, linear mappers/aggregation."""
        for block in self.obs:
            if not detect_additive(block.formula):
                return False
            for name in self.block_components(block):
                if not self.component(name).mapper.is_linear:
                    return False
            if block.aggregation is not None and not block.aggregation[0].is_linear:
                return False
        return True

    # -- predictor evaluation

    def _block_env(self, block, u, inputs=None):
        inputs = block.inputs if inputs is None else inputs
        env = {}
        needed = self.block_components(block)
        latent_refs = sorted(
            {
                r.name
                for r in block.formula.refs()
                if isinstance(r, Ref) and r.kind == "latent"
            }
        )
        for name in needed:
            comp = self.component(name)
            if name not in inputs:
                raise EngineError(
                    f"component {name!r} has no input bound for this likelihood"
                )
            env[name] = comp.mapper.eval(inputs[name], u[self.slice_of(name)])
        for name in latent_refs:
            env[f"{name}_latent"] = np.array(u[self.slice_of(name)])
        for r in block.formula.refs():
            if isinstance(r, Ref) and r.kind == "eval":
                raise EngineError(
                    f"{r.name}_eval(...) is only available when predicting"
                )
        return env

    def eta_block(self, block, u, inputs=None):
        env = self._block_env(block, u, inputs)
        eta = np.asarray(block.formula.eval(env), dtype=float)
        if eta.ndim == 0:
            eta = np.full(self._block_rows(block, inputs), float(eta))
        if block.aggregation is not None:
            agg, spec = block.aggregation
            eta = agg.eval(spec, eta)
        return eta

    def _block_rows(self, block, inputs=None):
        inputs = block.inputs if inputs is None else inputs
        for name in self.block_components(block):
            return self.component(name).mapper.n_output(inputs[name])
        raise EngineError("likelihood references no components")

    def eta(self, u):
        """Full non-linear predictor, blocks stacked."""
        return np.concatenate([self.eta_block(b, u) for b in self.obs])

    def linearise(self, u0):
        """First-order expansion of the predictor at u0."""
        u0 = np.asarray(u0, dtype=float)
        etas, jacs, slices = [], [], []
        start = 0
        for block in self.obs:
            env = self._block_env(block, u0)
            eta_pre = np.asarray(block.formula.eval(env), dtype=float)
            n_rows = self._block_rows(block)
            if eta_pre.ndim == 0:
                eta_pre = np.full(n_rows, float(eta_pre))
            if not np.all(np.isfinite(eta_pre)):
                raise EngineError("non-finite predictor at the linearisation point")

            if isinstance(block.formula, AdditiveAll):
                # the sentinel is an exact sum: unit derivatives, no
                # finite-difference noise on the linear path
                diffs = {name: np.ones(n_rows) for name in env}
            else:
                diffs = expr_jacobian(block.formula, env, list(env))
            parts = []
            for key, dvec in diffs.items():
                if np.ndim(dvec) == 0:
                    dvec = np.full(n_rows, float(dvec))
                if key.endswith("_latent"):
                    name = key[: -len("_latent")]
                    inner = sp.eye(
                        self.component(name).model.n_latent(), format="csr"
                    )
                else:
                    name = key
                    comp = self.component(name)
                    inner = comp.mapper.jacobian(
                        block.inputs[name], u0[self.slice_of(name)]
                    )
                s = self.slice_of(name)
                scattered = sp.hstack(
                    [
                        sp.csr_matrix((inner.shape[0], s.start)),
                        inner,
                        sp.csr_matrix((inner.shape[0], self.n_latent - s.stop)),
                    ],
                    format="csr",
                )
                parts.append(sp.diags(dvec).tocsr() @ scattered)
            b_pre = parts[0]
            for p in parts[1:]:
                b_pre = b_pre + p

            if block.aggregation is not None:
                agg, spec = block.aggregation
                j_agg = agg.jacobian(spec, eta_pre)
                eta_b = agg.eval(spec, eta_pre)
                b_block = (j_agg @ b_pre).tocsr()
            else:
                eta_b = eta_pre
                b_block = b_pre.tocsr()
            etas.append(eta_b)
            jacs.append(b_block)
            slices.append(slice(start, start + eta_b.size))
            start += eta_b.size

        eta_full = np.concatenate(etas)
        B = sp.vstack(jacs, format="csr")
        delta = eta_full - B @ u0
        return Linearisation(u0=u0.copy(), B=B, delta=delta, block_slices=slices)

    def responses(self):
        return np.concatenate([b.y for b in self.obs])


# --- Gaussian approximation ------------------------------------------------

@dataclass
class GaussResult:
    mode: np.ndarray
    factor: CholFactor
    qstar: SparseSym
    grad_obs: np.ndarray
    hess_obs: np.ndarray
    grad_at_mode: np.ndarray  # unconstrained gradient (zero without constraints)
    constraint_proj: tuple = None  # (W, S) with W = Q*^{-1} C^T, S = C W

    def latent_var(self):
        var = self.factor.diag_inverse()
        if self.constraint_proj is not None:
            W, S = self.constraint_proj
            T = W @ np.linalg.inv(S)
            var = var - np.sum(T * W, axis=1)
        return var

    def pred_var(self, B):
        x = self.factor.solve(B.T.toarray())
        var = np.sum(B.T.toarray() * x, axis=0)
        if self.constraint_proj is not None:
            W, S = self.constraint_proj
            U = B @ W
            var = var - np.sum((U @ np.linalg.inv(S)) * U, axis=1)
        return var


def _obs_grad_hess(model, lin, u, obs_vals):
    eta = lin.eval(u)
    g = np.empty(eta.size)
    h = np.empty(eta.size)
    ll = 0.0
    for block, vals, sl in zip(model.obs, obs_vals, lin.block_slices):
        gb, hb = block.family.grad_hess(block.y, eta[sl], vals)
        g[sl], h[sl] = gb, hb
        ll += block.family.loglik(block.y, eta[sl], vals)
    return g, h, ll


def gaussian_approx(model, lin, prior_q, mu_prior, obs_vals, u_init=None,
                    tol=1e-8, max_iter=50):
    """Newton iteration for the mode and curvature of p(u | theta, y).

    Solves (Q - B^T diag(h) B) step = B^T g + Q (mu - u) repeatedly; with
    constraints each candidate is projected back onto Cu = 0 through the
    current precision (conditioning-by-kriging), and step-halving guards
    against overshooting.
    """
    C = model.constraints
    u = np.array(mu_prior if u_init is None else u_init, dtype=float)
    if C is not None:
        # feasible start: plain least-squares projection is good enough here
        u = u - C.T @ np.linalg.solve(C @ C.T, C @ u)

    B = lin.B
    Q = prior_q.csc

    def objective(u_val):
        eta = lin.eval(u_val)
        ll = 0.0
        for block, vals, sl in zip(model.obs, obs_vals, lin.block_slices):
            ll += block.family.loglik(block.y, eta[sl], vals)
        d = u_val - mu_prior
        return ll - 0.5 * float(d @ (Q @ d))

    f_cur = objective(u)
    factor = None
    proj = None
    for _ in range(max_iter):
        g, h, _ = _obs_grad_hess(model, lin, u, obs_vals)
        a_mat = SparseSym(Q - (B.T @ sp.diags(h) @ B).tocsc())
        factor = chol(a_mat)
        rhs = B.T @ g + Q @ (mu_prior - u)
        step = factor.solve(rhs)
        cand = u + step
        if C is not None:
            W = factor.solve(C.T)
            S = C @ W
            cand = cand - W @ np.linalg.solve(S, C @ cand)
            proj = (W, S)
        move = cand - u
        # step-halving if the objective got worse or went non-finite
        t = 1.0
        f_new = objective(cand)
        halvings = 0
        while (not np.isfinite(f_new)) or f_new < f_cur - 1e-12:
            t *= 0.5
            halvings += 1
            if halvings > 30:
                raise EngineError(
                    "inner Newton iteration failed to improve the objective"
                )
            f_new = objective(u + t * move)
        u = u + t * move
        f_cur = f_new
        if np.max(np.abs(t * move)) < tol:
            break
    else:
        raise EngineError(
            f"inner Newton iteration did not converge in {max_iter} steps"
        )

    g, h, _ = _obs_grad_hess(model, lin, u, obs_vals)
    qstar = SparseSym(Q - (B.T @ sp.diags(h) @ B).tocsc())
    factor = chol(qstar)
    grad0 = B.T @ g + Q @ (mu_prior - u)
    if C is not None:
        W = factor.solve(C.T)
        S = C @ W
        proj = (W, S)
    return GaussResult(
        mode=u,
        factor=factor,
        qstar=qstar,
        grad_obs=g,
        hess_obs=h,
        grad_at_mode=grad0,
        constraint_proj=proj,
    )


def _log_gaussian_k(dev, cov):
    """log N_k(dev; 0, cov) for a small dense covariance."""
    k = cov.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise EngineError("constraint covariance is not positive definite")
    return -0.5 * (k * LOG_2PI + logdet + float(dev @ np.linalg.solve(cov, dev)))


def log_posterior_theta(model, lin, theta, u_init=None):
    """Laplace approximation of log p(theta | y) up to a constant."""
    comp_vals, obs_vals = model.natural_values(theta)
    prior_q = model.precision(comp_vals)
    mu = model.prior_mean()
    ga = gaussian_approx(model, lin, prior_q, mu, obs_vals, u_init=u_init)
    u_star = ga.mode

    prior_factor = chol(prior_q)
    d = model.n_latent
    dev = u_star - mu
    log_prior_u = (
        -0.5 * d * LOG_2PI + 0.5 * prior_factor.log_det - 0.5 * float(dev @ (prior_q.csc @ dev))
    )

    eta = lin.eval(u_star)
    ll = 0.0
    for block, vals, sl in zip(model.obs, obs_vals, lin.block_slices):
        ll += block.family.loglik(block.y, eta[sl], vals)

    # minus the Gaussian approximation's own log-density at u_star; with
    # constraints the approximation is centred at the unconstrained
    # quadratic-model mean m = u* + Q*^{-1} g0, not at u* itself
    quad = 0.0
    if np.any(ga.grad_at_mode):
        g0 = ga.grad_at_mode
        quad = float(g0 @ ga.factor.solve(g0))
    log_approx_at_mode = -0.5 * d * LOG_2PI + 0.5 * ga.factor.log_det - 0.5 * quad

    lp = model.log_prior_theta(theta) + log_prior_u + ll - log_approx_at_mode

    C = model.constraints
    if C is not None:
        # conditioning both densities on Cu = 0
        cov_prior = C @ prior_factor.solve(C.T)
        lp -= _log_gaussian_k(C @ mu, cov_prior)
        W, S = ga.constraint_proj
        m_unc = u_star + ga.factor.solve(ga.grad_at_mode)
        lp += _log_gaussian_k(C @ m_unc, S)
    return lp, ga


# --- hyperparameter exploration --------------------------------------------

GRID_SPACING = 0.75
GRID_DROP = 5.0
MAX_THETA_DIM = 3


class _ThetaCache:
    """Deterministic memo of log-posterior evaluations, with warm starts."""

    def __init__(self, model, lin):
        self.model = model
        self.lin = lin
        self.cache = {}
        self.last_mode = None

    def __call__(self, theta):
        key = tuple(np.round(np.asarray(theta, dtype=float), 12))
        if key not in self.cache:
            lp, ga = log_posterior_theta(
                self.model, self.lin, np.asarray(theta, dtype=float),
                u_init=self.last_mode,
            )
            self.last_mode = ga.mode
            self.cache[key] = (lp, ga)
        return self.cache[key]


def theta_explore(model, lin, theta_start=None, mode_only=False, known_mode=None):
    """Find the theta mode and build the integration grid.

    ``mode_only`` returns a single-point grid at the mode (used inside
    the outer iterations); ``known_mode`` skips the optimisation
    entirely (the final integration pass of an iterative fit).
    """
    p = len(model.theta_entries)
    if p > MAX_THETA_DIM:
        raise EngineError(
            f"{p} free hyperparameters exceed the supported maximum of "
            f"{MAX_THETA_DIM}"
        )
    evals = _ThetaCache(model, lin)

    if p == 0:
        theta_hat = np.empty(0)
    elif known_mode is not None:
        theta_hat = np.asarray(known_mode, dtype=float)
    else:
        start = (
            np.asarray(theta_start, dtype=float)
            if theta_start is not None
            else model.theta_internal0()
        )
        res = optimize.minimize(
            lambda t: -evals(t)[0],
            start,
            method="Nelder-Mead",
            options={"xatol": 1e-8, "fatol": 1e-8, "maxfev": 500, "maxiter": 1000},
        )
        if not res.success:
            raise EngineError(
                "hyperparameter optimisation failed within 500 evaluations"
            )
        theta_hat = res.x

    lp_hat, ga_hat = evals(theta_hat)

    if mode_only or p == 0:
        point = _make_point(theta_hat, lp_hat, 1.0, ga_hat, lin)
        return theta_hat, [point], ga_hat

    # curvature at the mode (central differences, internal scale)
    step = 0.01
    hess = np.empty((p, p))
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = step
        fp = evals(theta_hat + ei)[0]
        fm = evals(theta_hat - ei)[0]
        hess[i, i] = (fp - 2.0 * lp_hat + fm) / step**2
        for j in range(i + 1, p):
            ej = np.zeros(p)
            ej[j] = step
            fpp = evals(theta_hat + ei + ej)[0]
            fpm = evals(theta_hat + ei - ej)[0]
            fmp = evals(theta_hat - ei + ej)[0]
            fmm = evals(theta_hat - ei - ej)[0]
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * step**2)

    lam, vec = np.linalg.eigh(-hess)
    lam = np.maximum(lam, 1e-8 * max(1.0, lam.max()))
    axes = vec @ np.diag(1.0 / np.sqrt(lam))  # z -> theta displacement

    def theta_of(z):
        return theta_hat + axes @ z

    # per-axis extents, then the tensor-product grid, dropping low points
    offsets = []
    for i in range(p):
        vals = [0.0]
        for direction in (1.0, -1.0):
            k = 1
            while k <= 10:
                z = np.zeros(p)
                z[i] = direction * GRID_SPACING * k
                if evals(theta_of(z))[0] < lp_hat - GRID_DROP:
                    break
                vals.append(z[i])
                k += 1
        offsets.append(sorted(vals))

    grid_points = []
    mesh = np.meshgrid(*offsets, indexing="ij")
    zs = np.stack([m.ravel() for m in mesh], axis=-1)
    order = np.lexsort(zs.T[::-1])
    for z in zs[order]:
        theta = theta_of(z)
        lp, ga = evals(theta)
        if lp < lp_hat - GRID_DROP:
            continue
        grid_points.append((theta, lp, ga))

    lps = np.array([g[1] for g in grid_points])
    w = np.exp(lps - lps.max())
    w /= w.sum()
    grid = [
        _make_point(theta, lp, weight, ga, lin)
        for (theta, lp, ga), weight in zip(grid_points, w)
    ]
    return theta_hat, grid, ga_hat


def _make_point(theta, lp, weight, ga, lin):
    return ThetaPoint(
        theta=np.array(theta, dtype=float),
        log_post=float(lp),
        weight=float(weight),
        mode=ga.mode,
        factor=ga.factor,
        latent_var=ga.latent_var(),
        pred_mean=lin.eval(ga.mode),
        pred_var=ga.pred_var(lin.B),
        constraint_proj=ga.constraint_proj,
    )


# --- line search ------------------------------------------------------------

def line_search(eta_fn, u0, u1, eta_bar0, eta_bar1, sigma2, gamma=2.0):
    """Step-size selection in predictor space.

    Minimises the quartic model of ||eta_tilde(v_alpha) - eta_bar(u1)||
    in the norm weighted by 1/sigma2, after an expansion/contraction
    walk along powers of gamma.  alpha = 1 accepts the new estimate
    unchanged; the returned point is v = (1 - alpha) u0 + alpha u1.
    """
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0):
        raise EngineError("line search needs strictly positive predictor variances")
    w = 1.0 / sigma2

    def norm2(x):
        return float(np.sum(x * x * w))

    def v_of(alpha):
        return (1.0 - alpha) * u0 + alpha * u1

    def exact(alpha):
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                r = eta_fn(v_of(alpha)) - eta_bar1
                val = norm2(r)
        except (FloatingPointError, EngineError):
            return np.inf
        return val if np.isfinite(val) else np.inf

    d1 = eta_bar1 - eta_bar0

    # expansion/contraction on k: alpha = gamma^k
    k = 0
    f_cur = exact(1.0)
    for direction in (1, -1):
        if exact(float(gamma) ** direction) < f_cur:
            k = direction
            f_cur = exact(float(gamma) ** k)
            for _ in range(9):
                nxt = k + direction
                f_nxt = exact(float(gamma) ** nxt)
                if f_nxt < f_cur:
                    k, f_cur = nxt, f_nxt
                else:
                    break
            break
    if not np.isfinite(f_cur):
        raise EngineError("line search: all candidate norms are non-finite")

    alpha_k = float(gamma) ** k
    eta_bar_k = (1.0 - alpha_k) * eta_bar0 + alpha_k * eta_bar1
    d2 = (eta_fn(v_of(alpha_k)) - eta_bar_k) / alpha_k**2

    a = norm2(d1)
    b = float(np.sum(d1 * d2 * w))
    c = norm2(d2)

    lo, hi = float(gamma) ** (k - 1), float(gamma) ** (k + 1)

    def quartic(alpha):
        return (
            a * (alpha - 1.0) ** 2
            + 2.0 * b * (alpha - 1.0) * alpha**2
            + c * alpha**4
        )

    candidates = [lo, hi]
    roots = np.roots([4.0 * c, 6.0 * b, 2.0 * a - 4.0 * b, -2.0 * a])
    for r in roots:
        if abs(r.imag) < 1e-10 and lo <= r.real <= hi:
            candidates.append(float(r.real))
    alpha = min(candidates, key=quartic)
    return alpha, v_of(alpha)


# --- outer loop --------------------------------------------------------------

def _fmt3(x):
    """Three significant figures, positional (matches the iteration log)."""
    x = float(x)
    if x == 0 or not np.isfinite(x):
        return "0" if x == 0 else repr(x)
    from math import floor, log10

    digits = -(floor(log10(abs(x))) - 2)
    return np.format_float_positional(round(x, digits), trim="-")


DEFAULT_OPTIONS = {
    "bru_max_iter": 10,
    "rel_tol": 0.1,
    "gamma": 2.0,
    "bru_initial": None,
    "bru_verbose": 0,
    "force_iterative": False,
}


class _RunLog:
    def __init__(self, level):
        self.level = int(level)
        self.lines = []

    def say(self, text):
        self.lines.append(text)
        if self.level >= 1:
            print(text)


def _initial_point(model, options):
    u0 = np.zeros(model.n_latent)
    init = options.get("bru_initial")
    if init:
        for name, val in init.items():
            if name not in model.offsets:
                raise EngineError(f"bru_initial names unknown component {name!r}")
            s = model.slice_of(name)
            block = np.asarray(val, dtype=float)
            if block.ndim == 0:
                u0[s] = float(block)
            else:
                if block.size != s.stop - s.start:
                    raise EngineError(
                        f"bru_initial for {name!r} has length {block.size}, "
                        f"component has {s.stop - s.start}"
                    )
                u0[s] = block
    return u0


def fit(model, options=None):
    """Estimate the model: linearise, fit, move the point, repeat."""
    opts = dict(DEFAULT_OPTIONS)
    opts.update(model.options)
    opts.update(options or {})
    max_iter = int(opts["bru_max_iter"])
    if max_iter < 1:
        raise EngineError("bru_max_iter must be at least 1")
    rel_tol = float(opts["rel_tol"])
    gamma = float(opts["gamma"])
    log = _RunLog(opts.get("bru_verbose", 0))

    u0 = _initial_point(model, opts)
    theta_warm = model.theta_internal0()
    records = []
    converged = False

    if model.is_linear and not opts["force_iterative"]:
        log.say(f"iinla: Iteration 1 [max:{max_iter}] (level 1)")
        lin = model.linearise(u0)
        theta_hat, grid, ga = theta_explore(model, lin, theta_start=theta_warm)
        sd = _mode_sd(grid)
        dev = np.abs(_mode_point(grid).mode - u0) / sd
        records.append(
            IterationRecord(
                iter=1,
                alpha=1.0,
                max_dev_over_sd=float(dev.max()),
                mean_dev_over_sd=float(dev.mean()),
                theta=_theta_dict(model, theta_hat),
                line_search_ran=False,
            )
        )
        return _finish(model, grid, lin, True, records, log)

    final_iter = max_iter
    for k in range(1, max_iter + 1):
        log.say(f"iinla: Iteration {k} [max:{max_iter}] (level 1)")
        lin = model.linearise(u0)
        theta_hat, _, ga = theta_explore(
            model, lin, theta_start=theta_warm, mode_only=True
        )
        theta_warm = theta_hat
        u_hat = ga.mode
        sd = np.sqrt(np.maximum(ga.latent_var(), 1e-300))

        if k == 1:
            dev_vec = np.abs(u_hat - u0) / sd
            records.append(
                IterationRecord(
                    iter=1,
                    alpha=1.0,
                    max_dev_over_sd=float(dev_vec.max()),
                    mean_dev_over_sd=float(dev_vec.mean()),
                    theta=_theta_dict(model, theta_hat),
                    line_search_ran=False,
                )
            )
            u0 = u_hat
            continue

        cand_dev = float(np.max(np.abs(u_hat - u0) / sd))
        if cand_dev < rel_tol:
            alpha, v, ran_search = 1.0, u_hat, False
        else:
            sigma2 = ga.pred_var(lin.B)
            eta_bar0 = lin.eval(u0)
            eta_bar1 = lin.eval(u_hat)
            alpha, v = line_search(
                model.eta, u0, u_hat, eta_bar0, eta_bar1, sigma2, gamma=gamma
            )
            ran_search = True

        dev_vec = np.abs(v - u0) / sd
        max_dev = float(dev_vec.max())
        records.append(
            IterationRecord(
                iter=k,
                alpha=float(alpha),
                max_dev_over_sd=max_dev,
                mean_dev_over_sd=float(dev_vec.mean()),
                theta=_theta_dict(model, theta_hat),
                line_search_ran=ran_search,
            )
        )
        if ran_search:
            log.say(f"iinla: Step rescaling: {_fmt3(100.0 * alpha)}")
        log.say(f"iinla: Max deviation from previous: {_fmt3(100.0 * max_dev)}")
        log.say(f"       [stop if: <{_fmt3(100.0 * rel_tol)}")
        u0 = v
        if max_dev < rel_tol and abs(alpha - 1.0) < 0.05:
            converged = True
            final_iter = k
            log.say("iinla: Convergence criterion met.")
            log.say(
                "       Running final INLA integration step with known theta "
                "mode. (level 1)"
            )
            break
    else:
        log.say(
            "iinla: Running final INLA integration step with known theta "
            "mode. (level 1)"
        )

    log.say(f"iinla: Iteration {final_iter + 1} [max:{max_iter}] (level 1)")
    lin = model.linearise(u0)
    _, grid, _ = theta_explore(model, lin, known_mode=theta_warm)
    return _finish(model, grid, lin, converged, records, log)


def _theta_dict(model, theta):
    out = {}
    for (name, _, h), x in zip(model.theta_entries, theta):
        out[name] = float(h.transform.to_natural(x))
    return out


def _mode_point(grid):
    return max(grid, key=lambda p: p.log_post)


def _mode_sd(grid):
    return np.sqrt(np.maximum(_mode_point(grid).latent_var, 1e-300))


def _finish(model, grid, lin, converged, records, log):
    latent_mean, latent_sd = marginals(grid)
    pred_sigma2 = _mixture_pred_var(grid)
    hyper_summary = _hyper_summary(model, grid)
    return FitResult(
        model=model,
        grid=grid,
        linearisation=lin,
        converged=converged,
        records=records,
        theta_names=list(model.theta_names),
        latent_mean=latent_mean,
        latent_sd=latent_sd,
        predictor_sigma2=pred_sigma2,
        hyper_summary=hyper_summary,
        log_lines=list(log.lines),
    )


# --- posterior summaries ------------------------------------------------------

def marginals(grid):
    """Grid-mixture mean and sd of each latent coordinate."""
    w = np.array([p.weight for p in grid])
    means = np.stack([p.mode for p in grid])
    variances = np.stack([p.latent_var for p in grid])
    mean = w @ means
    second = w @ (variances + means**2)
    var = np.maximum(second - mean**2, 0.0)
    return mean, np.sqrt(var)


def _mixture_pred_var(grid):
    w = np.array([p.weight for p in grid])
    means = np.stack([p.pred_mean for p in grid])
    variances = np.stack([p.pred_var for p in grid])
    mean = w @ means
    return np.maximum(w @ (variances + means**2) - mean**2, 0.0)


def _hyper_summary(model, grid):
    out = []
    w = np.array([p.weight for p in grid])
    for i, (name, _, h) in enumerate(model.theta_entries):
        vals = np.array([p.theta[i] for p in grid])
        mean_int = float(w @ vals)
        sd_int = float(np.sqrt(max(w @ vals**2 - mean_int**2, 0.0)))
        nat = np.array([h.transform.to_natural(v) for v in vals])
        out.append(
            {
                "name": name,
                "mean_internal": mean_int,
                "sd_internal": sd_int,
                "mean_natural": float(w @ nat),
            }
        )
    return out


def check_expr_refs(model, expr):
    """Validate a prediction expression against a model's components."""
    if isinstance(expr, AdditiveAll):
        raise EngineError("prediction expressions must reference components")
    for r in expr.refs():
        if isinstance(r, Ref) and r.name not in model.offsets:
            raise EngineError(f"unknown component {r.name!r} in expression")


def expr_env(model, expr, u, inputs=None):
    """Evaluation environment for a prediction expression at state u.

    ``inputs`` optionally rebinds component inputs; an absent binding
    falls back to the first likelihood block that carries one.
    ``name_eval(c(...))`` references evaluate the component's mapper at
    the literal values in the expression.
    """
    check_expr_refs(model, expr)

    def resolve_input(name):
        if inputs is not None and name in inputs:
            return inputs[name]
        for block in model.obs:
            if name in block.inputs:
                return block.inputs[name]
        raise EngineError(f"no input available for component {name!r}")

    env = {}
    for r in expr.refs():
        if not isinstance(r, Ref):
            continue
        s = model.slice_of(r.name)
        comp = model.component(r.name)
        if r.kind == "latent":
            env[f"{r.name}_latent"] = u[s]
        elif r.kind == "eval":
            env[f"{r.name}_eval"] = comp.mapper.eval(np.array(r.args), u[s])
        else:
            env[r.name] = comp.mapper.eval(resolve_input(r.name), u[s])
    return env


def generate(result, expr, n_samples, rng, inputs=None):
    """Posterior samples of an expression, one row of outputs per draw.

    ``inputs`` optionally rebinds component inputs (prediction at new
    rows); an absent binding falls back to the first likelihood block
    that carries one.  ``name_eval(c(...))`` references evaluate the
    component's mapper at the literal values in the expression.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    model = result.model
    grid = result.grid
    weights = np.array([p.weight for p in grid])
    d = model.n_latent
    C = model.constraints
    check_expr_refs(model, expr)

    rows = None
    samples = []
    for _ in range(n_samples):
        m = int(rng.choice(len(grid), p=weights))
        point = grid[m]
        z = rng.standard_normal(d)
        u = point.mode + point.factor.solve_lt(z)
        if C is not None:
            W, S = point.constraint_proj
            u = u - W @ np.linalg.solve(S, C @ u)
        val = np.atleast_1d(
            np.asarray(expr.eval(expr_env(model, expr, u, inputs)), dtype=float)
        )
        if rows is None:
            rows = val.size
        samples.append(val)
    return np.stack(samples)


def predict_summary(samples, quantiles=(0.025, 0.5, 0.975)):
    """Per-column mean, sd and quantiles of a sample matrix."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise EngineError("predict_summary needs a matrix with at least 2 samples")
    out = {
        "mean": samples.mean(axis=0),
        "sd": samples.std(axis=0, ddof=1),
    }
    for q in quantiles:
        out[f"q{q:g}"] = np.quantile(samples, q, axis=0)
    return out


def sample_mode(samples):
    """Histogram mode estimate: mean of the fullest of 512 bins."""
    samples = np.asarray(samples, dtype=float)
    out = np.empty(samples.shape[1])
    for j in range(samples.shape[1]):
        col = samples[:, j]
        if col.max() == col.min():
            out[j] = col[0]
            continue
        counts, edges = np.histogram(col, bins=512)
        b = int(np.argmax(counts))
        mask = (col >= edges[b]) & (col <= edges[b + 1])
        out[j] = col[mask].mean()
    return out
