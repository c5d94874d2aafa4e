"""Outer EM for the multilevel latent-trait mixture.

One outer iteration runs, in order: the E-step producing layer- and
node-level posteriors together with the approximate log-likelihood, a
Newton step for the class-prior coefficients with the layer offsets, the
layer-weight update, a variational refresh of the trait moments and tilts,
and the closed-form loading/intercept solve.  Every step is a (generalized)
EM move on the tilted likelihood, so the reported objective is
non-decreasing up to roundoff.  Starting the cycle at the E-step matters:
the first posteriors are computed under the diffuse xi=20 tilt, which keeps
early assignments soft instead of locking onto the random initial loadings.

Group posteriors for a node are defined as the posterior given the whole
layer, ``zhat = sum_q ahat``, which keeps the joint/marginal identities of
:class:`Posteriors` exact for layers with more than one node.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import varcore
from .data import (DataError, FitResult, ModelDims, NetworkData,
                   NumericalError, Params, VarState)

XI_INIT = 20.0
EMPTY_CLASS_TOL = 1e-6
EMPTY_CLASS_PATIENCE = 3
RIDGE = 1e-8


@dataclass
class Posteriors:
    """E-step output: ``ahat[i, g, q]`` is the joint posterior that node i's
    layer sits in layer-group q and the node itself in node-group g;
    ``zhat`` and ``vhat`` are its two margins."""

    zhat: np.ndarray  # (N, G)
    vhat: np.ndarray  # (H, Q)
    ahat: np.ndarray  # (N, G, Q)


@dataclass
class FitConfig:
    """Knobs of the outer/inner optimization loop."""

    n_starts: int = 10
    max_outer_iters: int = 500
    outer_tol: float = 1e-6
    inner_iters: int = 100
    nr_max_iters: int = 50
    nr_tol: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        counts = (self.n_starts, self.max_outer_iters, self.inner_iters,
                  self.nr_max_iters)
        if any(c < 1 for c in counts):
            raise DataError("all iteration counts must be >= 1")
        if self.outer_tol <= 0 or self.nr_tol <= 0:
            raise DataError("tolerances must be positive")


# ---------------------------------------------------------------------------
# priors and E-step
# ---------------------------------------------------------------------------

def log_class_priors(X, beta, gamma):
    """Log membership probabilities, shape (N, G, Q).

    Class 1 is the reference with zero logit; classes g >= 2 have logit
    x'beta_g + gamma_q.  Normalized with a max shift so no exponential can
    overflow.
    """
    X = np.asarray(X, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    n = X.shape[0]
    G = beta.shape[0] + 1
    Q = gamma.shape[0]
    logits = np.zeros((n, G, Q))
    if G > 1:
        logits[:, 1:, :] = (X @ beta.T)[:, :, None] + gamma[None, None, :]
    return logits - logsumexp(logits, axis=1, keepdims=True)


def class_priors(X, beta, gamma):
    """Membership probabilities eta[i, g, q]; rows over g sum to one."""
    return np.exp(log_class_priors(X, beta, gamma))


def e_step(data: NetworkData, params: Params, var: VarState):
    """Posterior decomposition of the tilted likelihood.

    Recomputes the integrated log bound from ``var.xi`` and returns the
    :class:`Posteriors` together with the approximate log-likelihood,
    accumulating all mixture sums in log space and the within-layer products
    as ordered sums of logs.
    """
    Y = data.Y.astype(np.float64)
    moments = varcore.component_moments(Y[:, None, :], var.xi,
                                        params.b, params.w_full)
    log_f = moments.log_ftilde                                     # (N, G)
    log_eta = log_class_priors(data.X, params.beta, params.gamma)  # (N, G, Q)
    node_q = log_eta + log_f[:, :, None]
    log_mix = logsumexp(node_q, axis=1)                            # (N, Q)

    bad = ~np.isfinite(np.max(log_mix, axis=1))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise NumericalError(
            f"all-zero mixture weight for row {row} "
            f"(layer '{data.layer_ids[data.row_layer[row]]}')")

    with np.errstate(divide="ignore"):  # rho_q == 0 contributes -inf cleanly
        log_rho = np.log(params.rho)
    log_layer = log_rho[None, :] + np.add.reduceat(log_mix, data.layer_starts,
                                                   axis=0)         # (H, Q)
    norm = logsumexp(log_layer, axis=1)                            # (H,)
    loglik = float(norm.sum())
    vhat = np.exp(log_layer - norm[:, None])

    cond = np.exp(node_q - log_mix[:, None, :])                    # (N, G, Q)
    ahat = vhat[data.row_layer][:, None, :] * cond
    zhat = ahat.sum(axis=2)
    return Posteriors(zhat=zhat, vhat=vhat, ahat=ahat), loglik


# ---------------------------------------------------------------------------
# M-step pieces
# ---------------------------------------------------------------------------

def _logit_objective(X, ahat, beta, gamma):
    log_eta = log_class_priors(X, beta, gamma)
    return float(np.where(ahat > 0, ahat * log_eta, 0.0).sum())


def _logit_grad(X, ahat, weights, eta):
    """Gradient of the weighted multinomial-logit objective in the packed
    parameter order (beta row-major, then gamma[1:])."""
    T = ahat - weights[:, None, :] * eta
    grad_beta = np.einsum("ngq,nj->gj", T[:, 1:, :], X)
    grad_gamma = T[:, 1:, 1:].sum(axis=(0, 1))
    return np.concatenate([grad_beta.ravel(), grad_gamma])


def m_step_logit(X, ahat, beta0, gamma0, cfg: FitConfig):
    """Newton maximization of sum ahat * log eta over beta and gamma[1:].

    Each node contributes Q pseudo-observations with offsets gamma_q and
    weights ``sum_g ahat``.  Full analytic Hessian with step halving; a
    singular Hessian gets a small ridge (warning recorded) before failing.
    """
    X = np.asarray(X, dtype=np.float64)
    ahat = np.asarray(ahat, dtype=np.float64)
    n, G, Q = ahat.shape
    J = X.shape[1]
    beta = np.array(beta0, dtype=np.float64, copy=True).reshape(G - 1, J)
    gamma = np.array(gamma0, dtype=np.float64, copy=True)
    if G == 1:
        return beta, gamma

    weights = ahat.sum(axis=1)  # (N, Q); layer posterior repeated per node
    n_beta = (G - 1) * J
    theta = np.concatenate([beta.ravel(), gamma[1:]])

    def unpack(th):
        return th[:n_beta].reshape(G - 1, J), np.concatenate([[0.0], th[n_beta:]])

    fval = _logit_objective(X, ahat, beta, gamma)
    for _ in range(cfg.nr_max_iters):
        beta, gamma = unpack(theta)
        eta = np.exp(log_class_priors(X, beta, gamma))
        grad = _logit_grad(X, ahat, weights, eta)
        if np.max(np.abs(grad)) < cfg.nr_tol:
            break

        # negative Hessian blocks (positive semi-definite)
        d1 = np.einsum("nq,ngq->ng", weights, eta[:, 1:, :])        # (N, G-1)
        cross = np.einsum("nq,ngq,nhq->ngh", weights, eta[:, 1:, :],
                          eta[:, 1:, :])                            # (N, G-1, G-1)
        a3 = -cross
        idx = np.arange(G - 1)
        a3[:, idx, idx] += d1
        h_bb = np.einsum("ngh,nj,nk->gjhk", a3, X, X).reshape(n_beta, n_beta)
        if Q > 1:
            h_bg = np.einsum("nq,ngq,nq,nj->gjq", weights, eta[:, 1:, :],
                             eta[:, 0, :], X)[:, :, 1:].reshape(n_beta, Q - 1)
            s = 1.0 - eta[:, 0, :]
            h_gg = np.diag(np.einsum("nq,nq,nq->q", weights, s,
                                     eta[:, 0, :])[1:])
            neg_h = np.block([[h_bb, h_bg], [h_bg.T, h_gg]])
        else:
            neg_h = h_bb

        try:
            step = np.linalg.solve(neg_h, grad)
            if not np.isfinite(step).all():
                raise np.linalg.LinAlgError("non-finite Newton step")
        except np.linalg.LinAlgError:
            warnings.warn("singular Hessian in class-prior update; "
                          "adding ridge", RuntimeWarning)
            ridged = neg_h + RIDGE * np.eye(neg_h.shape[0])
            step = np.linalg.solve(ridged, grad)
            if not np.isfinite(step).all():
                raise NumericalError("class-prior Newton step failed "
                                     "even with ridge") from None

        scale = 1.0
        for _ in range(20):
            cand = theta + scale * step
            f_new = _logit_objective(X, ahat, *unpack(cand))
            if f_new >= fval - 1e-12:
                theta = cand
                fval = f_new
                break
            scale *= 0.5
        else:
            break  # no improving step; keep current maximizer

    beta, gamma = unpack(theta)
    return beta, gamma


def update_rho(vhat):
    """Layer-group weights: column means of the layer posteriors."""
    vhat = np.asarray(vhat, dtype=np.float64)
    return vhat.mean(axis=0)


def update_zeta(data: NetworkData, zhat, var: VarState, parsimonious: bool,
                w_fixed: np.ndarray | None = None):
    """Closed-form loading/intercept update.

    Solves, per (group, item), the stationarity system of the expected
    tilted log-likelihood in (w_gk, b_gk); with shared loadings the
    per-group systems for one item are stacked into a single
    (D + G) x (D + G) solve with common w and group-specific intercepts.
    When ``w_fixed`` is given only the intercepts are re-estimated.
    """
    Y = data.Y.astype(np.float64)
    zhat = np.asarray(zhat, dtype=np.float64)
    lam = varcore.lambda_fn(var.xi)                     # (N, G, R)
    mu, Sigma = var.mu, var.Sigma
    D = mu.shape[-1]
    G = zhat.shape[1]
    R = Y.shape[1]
    euu = Sigma + mu[..., :, None] * mu[..., None, :]   # (N, G, D, D)

    a_uu = np.einsum("ng,ngk,ngde->gkde", zhat, lam, euu)
    a_ub = np.einsum("ng,ngk,ngd->gkd", zhat, lam, mu)
    a_bb = np.einsum("ng,ngk->gk", zhat, lam)
    c_u = np.einsum("ng,nk,ngd->gkd", zhat, Y - 0.5, mu)
    c_b = np.einsum("ng,nk->gk", zhat, Y - 0.5)

    if w_fixed is not None:
        wf = np.broadcast_to(np.asarray(w_fixed, dtype=np.float64),
                             (G, R, D)) if w_fixed.ndim == 2 else w_fixed
        num = c_b + 2.0 * np.einsum("gkd,gkd->gk", a_ub, wf)
        b = -num / (2.0 * a_bb)
        return b, np.array(w_fixed, dtype=np.float64, copy=True)

    if not parsimonious:
        lhs = np.empty((G, R, D + 1, D + 1))
        lhs[..., :D, :D] = a_uu
        lhs[..., :D, D] = a_ub
        lhs[..., D, :D] = a_ub
        lhs[..., D, D] = a_bb
        lhs *= -2.0
        rhs = np.concatenate([c_u, c_b[..., None]], axis=-1)
        zeta = _solve_with_ridge(lhs, rhs, "loading/intercept")
        return zeta[..., D], zeta[..., :D]

    # shared loadings: per item, unknowns (w_k, b_1k..b_Gk)
    lhs = np.zeros((R, D + G, D + G))
    lhs[:, :D, :D] = a_uu.sum(axis=0)
    for g in range(G):
        lhs[:, :D, D + g] = a_ub[g]
        lhs[:, D + g, :D] = a_ub[g]
        lhs[:, D + g, D + g] = a_bb[g]
    lhs *= -2.0
    rhs = np.concatenate([c_u.sum(axis=0), c_b.T], axis=-1)  # (R, D + G)
    zeta = _solve_with_ridge(lhs, rhs, "shared loading/intercept")
    return zeta[:, D:].T.copy(), zeta[:, :D].copy()


def _solve_with_ridge(lhs, rhs, label):
    try:
        out = np.linalg.solve(lhs, rhs[..., None])[..., 0]
        if np.isfinite(out).all():
            return out
        raise np.linalg.LinAlgError("non-finite solution")
    except np.linalg.LinAlgError:
        warnings.warn(f"singular {label} system; adding ridge", RuntimeWarning)
        eye = np.eye(lhs.shape[-1])
        out = np.linalg.solve(lhs + RIDGE * eye, rhs[..., None])[..., 0]
        if not np.isfinite(out).all():
            raise NumericalError(f"{label} update failed even with ridge") from None
        return out


# ---------------------------------------------------------------------------
# full fit
# ---------------------------------------------------------------------------

def initial_params(dims: ModelDims, R: int, J: int, rng: np.random.Generator) -> Params:
    """Diffuse starting point: zero prior coefficients, equally spaced layer
    offsets re-pinned at zero, uniform layer weights, standard-normal
    intercepts and loadings drawn from ``rng``."""
    gamma = np.linspace(-1.0, 1.0, dims.Q) if dims.Q > 1 else np.zeros(1)
    gamma = gamma - gamma[0]
    b = rng.standard_normal((dims.G, R))
    w_shape = (R, dims.D) if dims.parsimonious else (dims.G, R, dims.D)
    w = rng.standard_normal(w_shape)
    return Params(beta=np.zeros((dims.G - 1, J)), b=b, w=w, gamma=gamma,
                  rho=np.full(dims.Q, 1.0 / dims.Q))


def fit_one(data: NetworkData, dims: ModelDims, init: Params, cfg: FitConfig,
            estimate_w: bool = True) -> FitResult:
    """Run the outer EM from one starting point.

    Tracks the best objective seen and returns the coherent snapshot
    (parameters, posteriors, objective from the same E-step).  A start whose
    smallest class stays empty for ``EMPTY_CLASS_PATIENCE`` consecutive
    iterations is cut short and flagged degenerate.
    """
    cfg.validate()
    dims.validate(H=data.H)
    data.validate()
    params = init.copy()
    params.validate()
    if params.G != dims.G or params.Q != dims.Q or params.D != dims.D \
            or params.parsimonious != dims.parsimonious or params.R != data.R:
        raise DataError("initial parameters do not match dims/data shapes")
    if params.beta.shape[1] != data.J:
        raise DataError(f"beta has {params.beta.shape[1]} columns, "
                        f"data has J={data.J} covariates")

    n, G = data.n_total, dims.G
    Y = data.Y.astype(np.float64)
    var = VarState(xi=np.full((n, G, data.R), XI_INIT),
                   mu=np.zeros((n, G, dims.D)),
                   Sigma=np.broadcast_to(np.eye(dims.D), (n, G, dims.D, dims.D)).copy())

    best = None
    prev_ll = -np.inf
    converged = False
    empty_streak = 0
    degenerate = False
    iteration = 0

    for iteration in range(1, cfg.max_outer_iters + 1):
        # E-step first: on iteration 1 the bound is evaluated at the diffuse
        # xi=20 tilt, which keeps the initial posteriors soft by design.
        post, ll = e_step(data, params, var)
        if not np.isfinite(ll):
            raise NumericalError(f"non-finite objective at iteration {iteration}")
        if best is None or ll > best[0]:
            best = (ll, params.copy(), post, iteration)

        if G > 1 and post.zhat.max(axis=0).min() < EMPTY_CLASS_TOL:
            empty_streak += 1
            if empty_streak >= EMPTY_CLASS_PATIENCE:
                degenerate = True
                break
        else:
            empty_streak = 0

        if np.isfinite(prev_ll) and \
                abs(ll - prev_ll) <= cfg.outer_tol * (abs(prev_ll) + 1e-10):
            converged = True
            break
        prev_ll = ll

        beta, gamma = m_step_logit(data.X, post.ahat, params.beta,
                                   params.gamma, cfg)
        rho = update_rho(post.vhat)
        b, w, var = _trait_cycle(data, Y, post.zhat, params, var, dims, cfg,
                                 estimate_w)
        params = Params(beta=beta, b=b, w=w, gamma=gamma, rho=rho)

    ll, params, post, _ = best
    from .selection import bic as _bic  # deferred: selection imports this module

    return FitResult(
        dims=dims,
        params=params,
        loglik=ll,
        bic=_bic(ll, dims, data.R, data.J, data.n_total),
        zhat=post.zhat,
        vhat=post.vhat,
        node_map=post.zhat.argmax(axis=1),
        layer_map=post.vhat.argmax(axis=1),
        n_iterations=iteration,
        converged=converged,
        degenerate=degenerate,
    )


def _start_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _run_start(data, dims, cfg, index, estimate_w):
    init = initial_params(dims, data.R, data.J, _start_rng(cfg.seed, index))
    try:
        result = fit_one(data, dims, init, cfg, estimate_w=estimate_w)
        result.start_index = index
        return result, None
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return None, f"start {index}: {exc}"


def fit_multistart(data: NetworkData, dims: ModelDims, cfg: FitConfig,
                   threads: int = 1, estimate_w: bool = True) -> FitResult:
    """Best-of-``cfg.n_starts`` fit over independent seeded starting points.

    Start i draws its initial parameters from the (seed, i) RNG substream,
    so results do not depend on scheduling.  Degenerate (collapsed-class)
    starts are excluded from the selection; if no start survives, the
    aggregated diagnostics are raised.
    """
    cfg.validate()
    indices = range(cfg.n_starts)
    if threads > 1:
        from joblib import Parallel, delayed
        outcomes = Parallel(n_jobs=threads)(
            delayed(_run_start)(data, dims, cfg, i, estimate_w) for i in indices)
    else:
        outcomes = [_run_start(data, dims, cfg, i, estimate_w) for i in indices]

    failures = [msg for _, msg in outcomes if msg is not None]
    usable = [r for r, _ in outcomes if r is not None and not r.degenerate]
    if not usable:
        n_degen = sum(1 for r, _ in outcomes if r is not None and r.degenerate)
        failures.append(f"{n_degen} start(s) degenerate (empty class)")
        raise NumericalError("all starts failed: " + "; ".join(failures))
    return max(usable, key=lambda r: (r.loglik, -r.start_index))


__all__ = ["Posteriors", "FitConfig", "log_class_priors", "class_priors",
           "e_step", "m_step_logit", "update_rho", "update_zeta",
           "initial_params", "fit_one", "fit_multistart"]
