"""Evaluation of fits against simulation ground truth.

Comparisons are gauge-aware: the generating parameters are first re-pinned
so their first layer offset is zero (with the shift folded into the prior
intercepts), the fit is label-aligned to that truth, and offsets are then
compared coordinate-wise, which for the pinned vectors equals comparing the
contrasts against the first support point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import comb

from .data import DataError, FitResult, Params, _atomic_write_text
from .inference import align_labels
from .simulate import GroundTruth
from .varcore import logistic


def ari(a, b) -> float:
    """Adjusted Rand Index between two labelings of the same items.

    1 for identical partitions up to relabeling, expected 0 for independent
    random partitions; the degenerate all-pairs-agree case is defined as 1.
    """
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise DataError(f"label vectors differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise DataError("ARI needs at least two items")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    sum_cells = comb(table, 2).sum()
    sum_rows = comb(table.sum(axis=1), 2).sum()
    sum_cols = comb(table.sum(axis=0), 2).sum()
    n_pairs = comb(a.size, 2)
    expected = sum_rows * sum_cols / n_pairs
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def mse(est, truth) -> np.ndarray:
    """Per-coordinate squared errors (aggregation across replicates is the
    caller's job)."""
    est = np.asarray(est, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if est.shape != truth.shape:
        raise DataError(f"vector lengths differ: {est.size} vs {truth.size}")
    return (est - truth) ** 2


def predicted_probs(params: Params) -> np.ndarray:
    """Connection probabilities at the latent-trait mean, logistic(b)."""
    return logistic(params.b)


@dataclass
class EvalReport:
    ari_nodes: float
    ari_layers: float
    mse_beta: np.ndarray   # per coordinate, (G-1)*J
    mse_gamma: np.ndarray  # per support-point contrast, (Q,), first entry 0
    mse_rho: np.ndarray    # (Q,)
    prob_table: np.ndarray  # (G, R)


def evaluate(fit: FitResult, truth: GroundTruth) -> EvalReport:
    """Score one fit against the generating truth.

    Group permutations of the fit are absorbed by label alignment, so the
    report is invariant to relabeling.
    """
    if fit.dims != truth.dims:
        raise DataError(f"fit dims {fit.dims} do not match truth dims {truth.dims}")
    truth_gauged = truth.params.gauge_fixed()
    aligned = align_labels(truth_gauged, fit.params.gauge_fixed())
    return EvalReport(
        ari_nodes=ari(truth.node_labels, fit.node_map),
        ari_layers=ari(truth.layer_labels, fit.layer_map),
        mse_beta=mse(aligned.beta, truth_gauged.beta),
        mse_gamma=mse(aligned.gamma, truth_gauged.gamma),
        mse_rho=mse(aligned.rho, truth_gauged.rho),
        prob_table=predicted_probs(aligned),
    )


def write_eval(report: EvalReport, path: str) -> None:
    doc = {
        "ari_nodes": report.ari_nodes,
        "ari_layers": report.ari_layers,
        "mse_beta": report.mse_beta.tolist(),
        "mse_gamma": report.mse_gamma.tolist(),
        "mse_rho": report.mse_rho.tolist(),
        "prob_table": report.prob_table.tolist(),
    }
    _atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")


__all__ = ["ari", "mse", "predicted_probs", "EvalReport", "evaluate",
           "write_eval"]
