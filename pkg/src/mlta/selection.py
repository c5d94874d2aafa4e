"""BIC computation and grid search over (G, D, Q).

The free-parameter count deducts D(D-1)/2 per loading block for the
rotational invariance of the latent trait, and the BIC sample size is the
total number of sending nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import (DataError, FitResult, ModelDims, NetworkData,
                   NumericalError, _atomic_write_text)


@dataclass(frozen=True)
class GridSpec:
    """Inclusive (lo, hi) ranges for each dimension of the model grid."""

    G_range: tuple[int, int]
    D_range: tuple[int, int]
    Q_range: tuple[int, int]
    parsimonious: bool = False

    def validate(self) -> None:
        for name, (lo, hi) in (("G", self.G_range), ("D", self.D_range),
                               ("Q", self.Q_range)):
            if lo < 1 or hi < lo:
                raise DataError(f"invalid {name} range ({lo}, {hi})")

    def cells(self):
        for G in range(self.G_range[0], self.G_range[1] + 1):
            for D in range(self.D_range[0], self.D_range[1] + 1):
                for Q in range(self.Q_range[0], self.Q_range[1] + 1):
                    yield ModelDims(G=G, D=D, Q=Q, parsimonious=self.parsimonious)


def n_free_params(dims: ModelDims, R: int, J: int) -> int:
    """(G-1)J prior coefficients + GR intercepts + loadings + (Q-1) support
    points + (Q-1) weights, with loadings RD - D(D-1)/2 per block."""
    per_block = R * dims.D - dims.D * (dims.D - 1) // 2
    loadings = per_block if dims.parsimonious else dims.G * per_block
    return (dims.G - 1) * J + dims.G * R + loadings + 2 * (dims.Q - 1)


def bic(loglik: float, dims: ModelDims, R: int, J: int, n_total: int) -> float:
    return -2.0 * loglik + n_free_params(dims, R, J) * math.log(n_total)


@dataclass
class BICRow:
    """One cell of the model grid; ``fit`` is None when the cell failed."""

    G: int
    D: int
    Q: int
    loglik: float
    bic: float
    converged: bool
    n_params: int
    fit: FitResult | None = None
    error: str | None = None


def select_model(data: NetworkData, grid: GridSpec, cfg, threads: int = 1):
    """Fit every grid cell via the multi-start driver and return the
    smallest-BIC fit plus the full table.

    Failed cells are recorded with NaN scores and skipped by the selection;
    ties go to the smaller model (G, then Q, then D).
    """
    from .em import fit_multistart

    grid.validate()
    dims_list = list(grid.cells())

    def run_cell(dims):
        try:
            fit = fit_multistart(data, dims, cfg, threads=1)
            return BICRow(G=dims.G, D=dims.D, Q=dims.Q, loglik=fit.loglik,
                          bic=fit.bic, converged=fit.converged,
                          n_params=n_free_params(dims, data.R, data.J), fit=fit)
        except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
            return BICRow(G=dims.G, D=dims.D, Q=dims.Q, loglik=float("nan"),
                          bic=float("nan"), converged=False,
                          n_params=n_free_params(dims, data.R, data.J),
                          error=str(exc))

    if threads > 1:
        from joblib import Parallel, delayed
        table = Parallel(n_jobs=threads)(delayed(run_cell)(d) for d in dims_list)
    else:
        table = [run_cell(d) for d in dims_list]

    usable = [row for row in table if row.fit is not None]
    if not usable:
        msgs = "; ".join(f"(G={r.G},D={r.D},Q={r.Q}): {r.error}" for r in table)
        raise NumericalError("every grid cell failed: " + msgs)
    best = min(usable, key=lambda r: (r.bic, r.G, r.Q, r.D))
    return best.fit, table


def write_bic_table(table: list[BICRow], path: str) -> None:
    """Emit `G,D,Q,loglik,bic,converged,n_params` rows."""
    lines = ["G,D,Q,loglik,bic,converged,n_params"]
    for row in table:
        lines.append(",".join([
            str(row.G), str(row.D), str(row.Q),
            repr(float(row.loglik)), repr(float(row.bic)),
            "true" if row.converged else "false", str(row.n_params),
        ]))
    _atomic_write_text(path, "\n".join(lines) + "\n")


__all__ = ["GridSpec", "BICRow", "n_free_params", "bic", "select_model",
           "write_bic_table"]
