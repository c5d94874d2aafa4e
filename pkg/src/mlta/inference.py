"""Bootstrap standard errors with stratified resampling and label alignment.

Replicates resample sending nodes with replacement inside each layer, keeping
layer sizes fixed, and are re-fit warm-started at the point estimate.  Before
aggregation every replicate is permuted onto the reference labelling: node
groups by nearest intercept matrix, layer groups by nearest re-pinned
support points (both searched exhaustively).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .data import (DataError, FitResult, ModelDims, NetworkData,
                   NumericalError, Params, _atomic_write_text)

MAX_EXHAUSTIVE_G = 8


def resample_within_layers(data: NetworkData, rng: np.random.Generator) -> NetworkData:
    """Draw n_h rows with replacement inside every layer; covariate rows
    travel with their incidence rows."""
    idx_parts = []
    for start, size in zip(data.layer_starts, data.layer_sizes):
        idx_parts.append(start + rng.integers(0, size, size=size))
    idx = np.concatenate(idx_parts)
    return NetworkData(layer_ids=list(data.layer_ids),
                       layer_sizes=data.layer_sizes.copy(),
                       Y=data.Y[idx].copy(), X=data.X[idx].copy())


def _stack_beta(params: Params) -> np.ndarray:
    """Class-prior coefficients including the zero reference row."""
    J = params.beta.shape[1] if params.beta.size else 1
    full = np.zeros((params.G, J))
    if params.beta.size:
        full[1:] = params.beta
    return full


def align_labels(ref: Params, cand: Params) -> Params:
    """Permute ``cand``'s groups onto ``ref``'s labelling.

    Node groups: the permutation of {1..G} minimizing the Frobenius distance
    between intercept matrices, searched exhaustively (G <= 8).  If the
    reference class moves, prior coefficients are re-anchored as contrasts
    against the new first class.  Layer groups: the permutation minimizing
    the squared distance between support points after re-pinning the first
    at zero; the pin shift is absorbed into the prior intercepts so the
    membership probabilities are unchanged.
    """
    if ref.G != cand.G or ref.Q != cand.Q or ref.w.shape != cand.w.shape:
        raise DataError("aligned parameter sets must share dimensions")
    G, Q = ref.G, ref.Q
    if G > MAX_EXHAUSTIVE_G:
        raise DataError(
            f"exhaustive label alignment supports G <= {MAX_EXHAUSTIVE_G}; "
            "a Hungarian-assignment variant is not built in this configuration")

    sigma = min(permutations(range(G)),
                key=lambda p: float(((cand.b[list(p)] - ref.b) ** 2).sum()))
    sigma = list(sigma)
    b = cand.b[sigma]
    w = cand.w[sigma] if not cand.parsimonious else cand.w.copy()
    full_beta = _stack_beta(cand)
    beta = (full_beta[sigma] - full_beta[sigma[0]])[1:]

    tau = min(permutations(range(Q)),
              key=lambda p: float(((cand.gamma[list(p)] - cand.gamma[p[0]]
                                    - ref.gamma) ** 2).sum()))
    tau = list(tau)
    pin_shift = cand.gamma[tau[0]]
    gamma = cand.gamma[tau] - pin_shift
    rho = cand.rho[tau]
    if beta.size:
        beta[:, 0] += pin_shift

    return Params(beta=beta, b=b, w=w, gamma=gamma, rho=rho)


def param_names(dims: ModelDims, R: int, J: int) -> list[str]:
    """Flat labels matching :func:`flatten_params` order."""
    names = [f"beta_g{g + 2}_j{j}" for g in range(dims.G - 1) for j in range(J)]
    names += [f"b_g{g + 1}_k{k + 1}" for g in range(dims.G) for k in range(R)]
    if dims.parsimonious:
        names += [f"w_k{k + 1}_d{d + 1}" for k in range(R) for d in range(dims.D)]
    else:
        names += [f"w_g{g + 1}_k{k + 1}_d{d + 1}" for g in range(dims.G)
                  for k in range(R) for d in range(dims.D)]
    names += [f"gamma_q{q + 1}" for q in range(dims.Q)]
    names += [f"rho_q{q + 1}" for q in range(dims.Q)]
    return names


def flatten_params(params: Params) -> np.ndarray:
    return np.concatenate([params.beta.ravel(), params.b.ravel(),
                           params.w.ravel(), params.gamma, params.rho])


@dataclass
class BootstrapResult:
    """Aligned replicate estimates with their dispersion summary."""

    S: int                  # successful replicates
    estimates: np.ndarray   # (S, p)
    se: np.ndarray          # (p,)
    ci: np.ndarray          # (p, 2) percentile 95% interval
    n_failed: int


def _one_replicate(data, dims, base_params, cfg, s, multistart, threads_inner=1):
    from .em import fit_multistart, fit_one

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, s]))
    sample = resample_within_layers(data, rng)
    try:
        if multistart:
            fit = fit_multistart(sample, dims, cfg)
        else:
            fit = fit_one(sample, dims, base_params, cfg)
        if fit.degenerate:
            return None, f"replicate {s}: degenerate fit"
        aligned = align_labels(base_params, fit.params)
        return flatten_params(aligned), None
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return None, f"replicate {s}: {exc}"


def bootstrap_se(data: NetworkData, dims: ModelDims, fitted: FitResult,
                 S: int, cfg, threads: int = 1,
                 multistart_replicates: bool = False) -> BootstrapResult:
    """Stratified nonparametric bootstrap around a converged fit.

    Replicate s derives its resampling stream from (cfg.seed, s) and is
    warm-started at the point estimate (or re-run from random starts when
    ``multistart_replicates``).  The covariance uses the 1/S convention, so
    S=1 yields zero standard errors; replicates that fail numerically are
    dropped, and more than 20% failures aborts.
    """
    if S < 1:
        raise DataError("bootstrap needs at least one replicate")
    if not fitted.converged:
        raise DataError("bootstrap requires a converged point estimate")
    base = fitted.params

    if threads > 1:
        from joblib import Parallel, delayed
        outcomes = Parallel(n_jobs=threads)(
            delayed(_one_replicate)(data, dims, base, cfg, s,
                                    multistart_replicates)
            for s in range(S))
    else:
        outcomes = [_one_replicate(data, dims, base, cfg, s,
                                   multistart_replicates) for s in range(S)]

    estimates = [vec for vec, _ in outcomes if vec is not None]
    failures = [msg for _, msg in outcomes if msg is not None]
    if len(failures) > 0.2 * S:
        raise NumericalError(
            f"{len(failures)}/{S} bootstrap replicates failed: "
            + "; ".join(failures[:5]))

    E = np.asarray(estimates)
    s_eff = E.shape[0]
    centered = E - E.mean(axis=0)
    se = np.sqrt(np.einsum("sp,sp->p", centered, centered) / s_eff)
    ci = np.percentile(E, [2.5, 97.5], axis=0).T
    return BootstrapResult(S=s_eff, estimates=E, se=se, ci=ci,
                           n_failed=len(failures))


def write_bootstrap_csv(result: BootstrapResult, names: list[str],
                        point: np.ndarray, path: str) -> None:
    """Emit `name,estimate,se,ci_lo,ci_hi` rows."""
    if not (len(names) == point.shape[0] == result.se.shape[0]):
        raise DataError("names, point estimate and bootstrap result disagree "
                        "on parameter count")
    lines = ["name,estimate,se,ci_lo,ci_hi"]
    for i, name in enumerate(names):
        lines.append(",".join([name, repr(float(point[i])),
                               repr(float(result.se[i])),
                               repr(float(result.ci[i, 0])),
                               repr(float(result.ci[i, 1]))]))
    _atomic_write_text(path, "\n".join(lines) + "\n")


__all__ = ["resample_within_layers", "align_labels", "param_names",
           "flatten_params", "BootstrapResult", "bootstrap_se",
           "write_bootstrap_csv"]
