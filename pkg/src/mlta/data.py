"""Domain types and file I/O for multi-layer bipartite networks.

A network is stored row-wise: one row per sending node, rows grouped by
layer in first-appearance order.  ``Y`` holds the binary incidence of each
sending node with the ``R`` receiving nodes, ``X`` holds nodal covariates
with a leading constant-1 intercept column that is added at ingestion
(input files carry raw covariates only).
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

SCHEMA_VERSION = 1


class DataError(ValueError):
    """Malformed input file or inconsistent network/model structure."""


class NumericalError(RuntimeError):
    """Estimation failed numerically (non-finite objective, no usable start)."""


# ---------------------------------------------------------------------------
# core containers
# ---------------------------------------------------------------------------

@dataclass
class NetworkData:
    """Multi-layer bipartite network with nodal covariates.

    Attributes
    ----------
    layer_ids : list[str]
        Distinct layer labels in first-appearance order.
    layer_sizes : np.ndarray, shape (H,)
        Number of sending nodes per layer.
    Y : np.ndarray, shape (N, R)
        Binary incidence; row order matches the layer blocks.
    X : np.ndarray, shape (N, J)
        Covariates; column 0 is the constant intercept (all ones).
    """

    layer_ids: list[str]
    layer_sizes: np.ndarray
    Y: np.ndarray
    X: np.ndarray

    @property
    def H(self) -> int:
        return len(self.layer_ids)

    @property
    def R(self) -> int:
        return self.Y.shape[1]

    @property
    def J(self) -> int:
        return self.X.shape[1]

    @property
    def n_total(self) -> int:
        return self.Y.shape[0]

    @property
    def layer_starts(self) -> np.ndarray:
        """Row offsets of each layer block (usable with ``np.add.reduceat``)."""
        return np.concatenate(([0], np.cumsum(self.layer_sizes)[:-1])).astype(np.intp)

    @property
    def row_layer(self) -> np.ndarray:
        """For each row, the index of the layer it belongs to."""
        return np.repeat(np.arange(self.H), self.layer_sizes)

    def validate(self) -> None:
        if self.H < 1:
            raise DataError("network needs at least one layer")
        if self.R < 1:
            raise DataError("network needs at least one receiving node")
        if len(self.layer_sizes) != self.H:
            raise DataError("layer_sizes length does not match layer_ids")
        if np.any(np.asarray(self.layer_sizes) < 1):
            raise DataError("every layer must contain at least one sending node")
        n = int(np.sum(self.layer_sizes))
        if self.Y.shape[0] != n or self.X.shape[0] != n:
            raise DataError(
                f"row mismatch: layer sizes sum to {n} but Y has {self.Y.shape[0]} "
                f"and X has {self.X.shape[0]} rows"
            )
        if not np.isin(self.Y, (0, 1)).all():
            raise DataError("incidence matrix contains entries outside {0, 1}")
        if not np.isfinite(self.X).all():
            raise DataError("covariate matrix contains non-finite values")
        if not np.all(self.X[:, 0] == 1.0):
            raise DataError("covariate column 0 must be the constant intercept")
        if len(set(self.layer_ids)) != self.H:
            raise DataError("layer labels must be distinct")


@dataclass(frozen=True)
class ModelDims:
    """One candidate model: G node groups, D latent-trait dimensions,
    Q layer groups, and whether loadings are shared across groups."""

    G: int
    D: int
    Q: int
    parsimonious: bool = False

    def validate(self, H: int | None = None) -> None:
        if self.G < 1 or self.D < 1 or self.Q < 1:
            raise DataError(f"dims must be positive, got {self}")
        if H is not None and self.Q > H:
            raise DataError(f"Q={self.Q} exceeds the number of layers H={H}")


@dataclass
class Params:
    """Free model parameters.

    ``beta`` has one row per non-reference node group (classes 2..G; class 1
    is the reference with implicit zero coefficients).  ``w`` is (R, D) when
    loadings are shared across groups, else (G, R, D).  ``gamma`` holds the
    layer random-effect support points and ``rho`` their weights.  Fitted
    models are gauge-fixed with ``gamma[0] == 0``; containers holding an
    un-pinned generative truth are also permitted (see ``validate``).
    """

    beta: np.ndarray
    b: np.ndarray
    w: np.ndarray
    gamma: np.ndarray
    rho: np.ndarray

    @property
    def G(self) -> int:
        return self.b.shape[0]

    @property
    def R(self) -> int:
        return self.b.shape[1]

    @property
    def Q(self) -> int:
        return self.gamma.shape[0]

    @property
    def D(self) -> int:
        return self.w.shape[-1]

    @property
    def parsimonious(self) -> bool:
        return self.w.ndim == 2

    @property
    def w_full(self) -> np.ndarray:
        """Loadings broadcast to per-group shape (G, R, D)."""
        if self.parsimonious:
            return np.broadcast_to(self.w, (self.G,) + self.w.shape)
        return self.w

    def copy(self) -> "Params":
        return Params(self.beta.copy(), self.b.copy(), self.w.copy(),
                      self.gamma.copy(), self.rho.copy())

    def validate(self, gauged: bool = True) -> None:
        for name in ("beta", "b", "w", "gamma", "rho"):
            if not np.isfinite(getattr(self, name)).all():
                raise DataError(f"non-finite values in parameter block '{name}'")
        if self.beta.shape[0] != self.G - 1:
            raise DataError(f"beta has {self.beta.shape[0]} rows, expected G-1={self.G - 1}")
        if self.rho.shape != self.gamma.shape:
            raise DataError("gamma and rho must have the same length")
        if np.any(self.rho < 0) or abs(self.rho.sum() - 1.0) > 1e-8:
            raise DataError("rho must be a probability vector")
        if not self.parsimonious and self.w.shape[0] != self.G:
            raise DataError("per-group loadings must have G slices")
        if self.w.shape[-2] != self.R:
            raise DataError("loadings and intercepts disagree on R")
        if gauged and self.gamma[0] != 0.0:
            raise DataError(f"gamma[0] must be pinned at 0, got {self.gamma[0]}")

    def gauge_fixed(self) -> "Params":
        """Equivalent parameters with ``gamma[0] == 0``.

        Shifting every support point by ``-gamma[0]`` and adding ``gamma[0]``
        to the class-prior intercepts leaves all membership probabilities
        unchanged.
        """
        shift = self.gamma[0]
        if shift == 0.0:
            return self.copy()
        out = self.copy()
        out.gamma = out.gamma - shift
        if out.beta.size:
            out.beta[:, 0] += shift
        return out


@dataclass
class VarState:
    """Variational state: tilt parameters ``xi`` and the induced Gaussian
    posterior moments of the latent trait, per (row, group)."""

    xi: np.ndarray     # (N, G, R), strictly positive
    mu: np.ndarray     # (N, G, D)
    Sigma: np.ndarray  # (N, G, D, D)


@dataclass
class FitResult:
    """Converged fit of one model specification."""

    dims: ModelDims
    params: Params
    loglik: float
    bic: float
    zhat: np.ndarray      # (N, G) node-group posteriors
    vhat: np.ndarray      # (H, Q) layer-group posteriors
    node_map: np.ndarray  # (N,) argmax of zhat
    layer_map: np.ndarray  # (H,) argmax of vhat
    n_iterations: int
    converged: bool
    start_index: int = 0
    degenerate: bool = field(default=False, compare=False)  # not serialized


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _parse_header(header: list[str], R: int | None) -> tuple[int, int]:
    """Check `layer,y1..yR,x1..xJ` structure; return (R, J_raw)."""
    if not header or header[0] != "layer":
        raise DataError("header must start with a 'layer' column")
    n_y = 0
    pos = 1
    while pos < len(header) and header[pos] == f"y{n_y + 1}":
        n_y += 1
        pos += 1
    if n_y == 0:
        raise DataError("header must contain incidence columns y1..yR")
    n_x = 0
    while pos < len(header) and header[pos] == f"x{n_x + 1}":
        n_x += 1
        pos += 1
    if pos != len(header):
        raise DataError(f"unexpected header column '{header[pos]}' at position {pos + 1}")
    if R is not None and n_y != R:
        raise DataError(f"expected R={R} incidence columns, header has {n_y}")
    return n_y, n_x


def load_network(path: str, R: int | None = None) -> NetworkData:
    """Read a `layer,y1..yR,x1..xJ` CSV into a validated :class:`NetworkData`.

    Rows are regrouped by layer in first-appearance order and a constant-1
    intercept column is prepended to the covariates.  ``R`` is inferred from
    the header when omitted and cross-checked when given.  Errors name the
    offending row (1-based, counting the header) and column.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        n_y, n_x = _parse_header([c.strip() for c in header], R)

        layers: list[str] = []
        rows_y: list[list[float]] = []
        rows_x: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 1 + n_y + n_x:
                raise DataError(f"wrong field count at row {line_no}: "
                                f"got {len(row)}, expected {1 + n_y + n_x}")
            layer = row[0].strip()
            if not layer:
                raise DataError(f"empty layer token at row {line_no}")
            yvals = []
            for k in range(n_y):
                tok = row[1 + k].strip()
                try:
                    v = float(tok)
                except ValueError:
                    raise DataError(f"unreadable value at row {line_no}, column y{k + 1}") from None
                if v not in (0.0, 1.0):
                    raise DataError(f"binary violation at row {line_no}, column y{k + 1}")
                yvals.append(v)
            xvals = []
            for j in range(n_x):
                tok = row[1 + n_y + j].strip()
                try:
                    v = float(tok)
                except ValueError:
                    raise DataError(f"unreadable value at row {line_no}, column x{j + 1}") from None
                if not np.isfinite(v):
                    raise DataError(f"non-finite covariate at row {line_no}, column x{j + 1}")
                xvals.append(v)
            layers.append(layer)
            rows_y.append(yvals)
            rows_x.append(xvals)

    if not layers:
        raise DataError(f"{path}: no data rows")

    layer_ids = list(dict.fromkeys(layers))
    order_key = {name: i for i, name in enumerate(layer_ids)}
    order = np.argsort([order_key[s] for s in layers], kind="stable")
    Y = np.asarray(rows_y, dtype=np.int8)[order]
    Xraw = np.asarray(rows_x, dtype=np.float64).reshape(len(layers), n_x)[order]
    X = np.column_stack([np.ones(len(layers)), Xraw])
    sizes = np.asarray([layers.count(name) for name in layer_ids], dtype=np.intp)

    data = NetworkData(layer_ids=layer_ids, layer_sizes=sizes, Y=Y, X=X)
    data.validate()
    return data


def write_network(data: NetworkData, path: str) -> None:
    """Write a network back to CSV (dropping the internal intercept column)."""
    n_x = data.J - 1
    header = ["layer"] + [f"y{k + 1}" for k in range(data.R)] + \
        [f"x{j + 1}" for j in range(n_x)]
    lines = [",".join(header)]
    row_layer = data.row_layer
    for i in range(data.n_total):
        cells = [data.layer_ids[row_layer[i]]]
        cells += [str(int(v)) for v in data.Y[i]]
        cells += [repr(float(v)) for v in data.X[i, 1:]]
        lines.append(",".join(cells))
    _atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# model JSON round trip
# ---------------------------------------------------------------------------

def _params_to_dict(p: Params) -> dict:
    return {
        "beta": p.beta.tolist(),
        "b": p.b.tolist(),
        "w": p.w.tolist(),
        "gamma": p.gamma.tolist(),
        "rho": p.rho.tolist(),
    }


def _params_from_dict(d: dict, dims: ModelDims) -> Params:
    beta = np.asarray(d["beta"], dtype=np.float64).reshape(dims.G - 1, -1)
    w_shape = (dims.G, None, dims.D) if not dims.parsimonious else (None, dims.D)
    w = np.asarray(d["w"], dtype=np.float64)
    if w.ndim != len(w_shape):
        raise DataError(f"loadings have rank {w.ndim}, expected {len(w_shape)}")
    return Params(
        beta=beta,
        b=np.asarray(d["b"], dtype=np.float64),
        w=w,
        gamma=np.asarray(d["gamma"], dtype=np.float64),
        rho=np.asarray(d["rho"], dtype=np.float64),
    )


def write_model(result: FitResult, path: str) -> None:
    """Serialize a fit to canonical JSON (sorted keys, full double precision)."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "dims": {"G": result.dims.G, "D": result.dims.D, "Q": result.dims.Q,
                 "parsimonious": result.dims.parsimonious},
        "params": _params_to_dict(result.params),
        "loglik": result.loglik,
        "bic": result.bic,
        "zhat": result.zhat.tolist(),
        "vhat": result.vhat.tolist(),
        "node_map": result.node_map.tolist(),
        "layer_map": result.layer_map.tolist(),
        "converged": bool(result.converged),
        "n_iterations": int(result.n_iterations),
        "start_index": int(result.start_index),
    }
    _atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")


def read_model(path: str) -> FitResult:
    """Inverse of :func:`write_model`; raises :class:`DataError` on schema
    mismatch or missing fields."""
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DataError(f"unsupported model schema_version {version!r}, "
                        f"expected {SCHEMA_VERSION}")
    required = ("dims", "params", "loglik", "bic", "zhat", "vhat",
                "node_map", "layer_map", "converged", "n_iterations", "start_index")
    for key in required:
        if key not in doc:
            raise DataError(f"model file missing field '{key}'")
    for key in ("beta", "b", "w", "gamma", "rho"):
        if key not in doc["params"]:
            raise DataError(f"model file missing field 'params.{key}'")
    dims = ModelDims(G=int(doc["dims"]["G"]), D=int(doc["dims"]["D"]),
                     Q=int(doc["dims"]["Q"]),
                     parsimonious=bool(doc["dims"]["parsimonious"]))
    params = _params_from_dict(doc["params"], dims)
    return FitResult(
        dims=dims,
        params=params,
        loglik=float(doc["loglik"]),
        bic=float(doc["bic"]),
        zhat=np.asarray(doc["zhat"], dtype=np.float64),
        vhat=np.asarray(doc["vhat"], dtype=np.float64),
        node_map=np.asarray(doc["node_map"], dtype=np.intp),
        layer_map=np.asarray(doc["layer_map"], dtype=np.intp),
        n_iterations=int(doc["n_iterations"]),
        converged=bool(doc["converged"]),
        start_index=int(doc["start_index"]),
    )


def _atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file in the target directory plus rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


__all__ = [
    "DataError", "NumericalError", "NetworkData", "ModelDims", "Params",
    "VarState", "FitResult", "load_network", "write_network",
    "write_model", "read_model", "SCHEMA_VERSION",
]
