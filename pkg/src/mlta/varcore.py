"""Variational primitives for the Bernoulli latent-trait likelihood.

The logistic component density is replaced by a quadratic-exponential lower
bound with one positive tilt parameter ``xi`` per response.  Because the
bound is conjugate to the standard-Gaussian latent trait, the trait integral
has a closed form: for each (node, group) the bound induces a Gaussian
posterior N(mu, Sigma) over the trait and an integrated log bound
``log_ftilde``.  A small fixed-point loop alternating the moment update with
the tilt update tightens the bound monotonically.

All functions broadcast over leading batch axes, so a single code path
serves both the scalar unit tests and the full (rows, groups) sweeps of the
outer EM.  Shapes below are written for inputs y (..., R), xi (..., R),
b (..., R), w (..., R, D).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

XI_FLOOR = 1e-6
_LAMBDA_CUTOFF = 1e-6


def logistic(x):
    """Stable 1 / (1 + exp(-x)); no overflow for |x| up to ~700."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def log_logistic(x):
    """log of :func:`logistic`, computed as -log1p(exp(-x)) piecewise."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))),
                    x - np.log1p(np.exp(-np.abs(x))))


def lambda_fn(xi):
    """Bound curvature (1/2 - logistic(xi)) / (2 xi).

    Even, strictly negative, and -> 0 as |xi| grows; the removable
    singularity at 0 is patched with the analytic limit -1/8 below
    |xi| < 1e-6.
    """
    xi = np.asarray(xi, dtype=np.float64)
    small = np.abs(xi) < _LAMBDA_CUTOFF
    safe = np.where(small, 1.0, xi)
    out = (0.5 - logistic(safe)) / (2.0 * safe)
    return np.where(small, -0.125, out)


@dataclass
class ComponentMoments:
    """Gaussian trait posterior and integrated log bound for one component.

    Arrays carry matching leading batch axes: mu (..., D), Sigma (..., D, D),
    log_ftilde (...).
    """

    mu: np.ndarray
    Sigma: np.ndarray
    log_ftilde: np.ndarray


def _inv_logdet_spd(P):
    """Inverse and log-determinant of batched SPD matrices (..., D, D)."""
    D = P.shape[-1]
    if D == 1:
        p = P[..., 0, 0]
        if np.any(p <= 0):
            raise FloatingPointError("trait precision lost positive definiteness")
        inv = (1.0 / p)[..., None, None]
        return inv, np.log(p)
    sign, logdet = np.linalg.slogdet(P)
    if np.any(sign <= 0):
        raise FloatingPointError("trait precision lost positive definiteness")
    return np.linalg.inv(P), logdet


def component_moments(y, xi, b, w) -> ComponentMoments:
    """Closed-form trait posterior under the tilted bound.

    Sigma = [I - 2 sum_k lambda(xi_k) w_k w_k']^{-1}
    mu    = Sigma sum_k [(y_k - 1/2) + 2 lambda(xi_k) b_k] w_k
    log_ftilde = sum_k [log g(xi_k) + (y_k - 1/2) b_k - xi_k/2
                        + lambda(xi_k) (b_k^2 - xi_k^2)]
                 + mu' Sigma^{-1} mu / 2 + log|Sigma| / 2

    The precision is I plus a positive-semidefinite sum (lambda < 0), so it
    is always SPD; a numerical violation raises hard.
    """
    y = np.asarray(y, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    D = w.shape[-1]

    lam = lambda_fn(xi)
    precision = np.eye(D) - 2.0 * np.einsum("...k,...kd,...ke->...de", lam, w, w)
    Sigma, logdet_precision = _inv_logdet_spd(precision)
    rhs = np.einsum("...k,...kd->...d", (y - 0.5) + 2.0 * lam * b, w)
    mu = np.einsum("...de,...e->...d", Sigma, rhs)
    quad = np.einsum("...d,...d->...", mu, rhs)  # mu' Sigma^{-1} mu
    per_item = (log_logistic(xi) + (y - 0.5) * b - 0.5 * xi
                + lam * (b * b - xi * xi))
    log_ftilde = per_item.sum(axis=-1) + 0.5 * quad - 0.5 * logdet_precision
    return ComponentMoments(mu=mu, Sigma=Sigma, log_ftilde=log_ftilde)


def update_xi(b, w, moments: ComponentMoments) -> np.ndarray:
    """Optimal tilt given trait moments: xi_k = sqrt(E[(b_k + w_k'u)^2]).

    The radicand is a second moment, hence non-negative up to roundoff;
    exact zeros are floored at ``XI_FLOOR`` so the curvature stays defined.
    """
    b = np.asarray(b, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    wmu = np.einsum("...kd,...d->...k", w, moments.mu)
    wSw = np.einsum("...kd,...de,...ke->...k", w, moments.Sigma, w)
    xi2 = b * b + 2.0 * b * wmu + wSw + wmu * wmu
    if xi2.size and xi2.min() < -1e-9:
        raise FloatingPointError(f"negative tilt radicand {xi2.min():.3e}")
    xi = np.sqrt(np.maximum(xi2, 0.0))
    return np.where(xi > 0.0, xi, XI_FLOOR)


def inner_em(y, b, w, xi0, max_iters: int = 100,
             tol: float = 1e-8) -> tuple[ComponentMoments, np.ndarray]:
    """Fixed-point loop alternating moment and tilt updates.

    Stops after ``max_iters`` tilt updates or when the largest relative
    change of ``log_ftilde`` over the batch drops below ``tol``.  Returns the
    moments at the final tilt (log bound freshly evaluated) and the tilt
    itself.  Each sweep is an EM step on the tilted integrand, so the
    returned bound is non-decreasing along the loop.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    xi = np.array(xi0, dtype=np.float64, copy=True)
    moments = component_moments(y, xi, b, w)
    for _ in range(max_iters):
        xi = update_xi(b, w, moments)
        new = component_moments(y, xi, b, w)
        delta = np.max(np.abs(new.log_ftilde - moments.log_ftilde)
                       / (1.0 + np.abs(moments.log_ftilde)))
        moments = new
        if delta < tol:
            break
    return moments, xi


__all__ = ["XI_FLOOR", "logistic", "log_logistic", "lambda_fn",
           "ComponentMoments", "component_moments", "update_xi", "inner_em"]
