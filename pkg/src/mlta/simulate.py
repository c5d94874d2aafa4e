"""Synthetic multi-layer bipartite networks with known ground truth.

The default design: three node groups whose membership depends on a single
N(1, 1) covariate through coefficients (1, -0.4) and (1.5, -0.9) for the
non-reference classes, item intercepts drawn around -3/0/+3 per group,
shared standard-normal loadings, and layer offsets (-0.5, 1.5) with weights
(0.3, 0.7) for two layer groups or (-0.5, 1.5, 2.5) with equal weights for
three.  Layers are assigned to groups at random by the weights and are all
the same size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import (DataError, ModelDims, NetworkData, Params,
                   _atomic_write_text)
from .em import class_priors
from .varcore import logistic

_BETA_DEFAULT = np.array([[1.0, -0.4], [1.5, -0.9]])
_B_MEANS = (-3.0, 0.0, 3.0)
_GAMMA_DEFAULT = {2: np.array([-0.5, 1.5]), 3: np.array([-0.5, 1.5, 2.5])}
_RHO_DEFAULT = {2: np.array([0.3, 0.7]), 3: np.full(3, 1.0 / 3.0)}


@dataclass
class SimSpec:
    """Scenario description; explicit parameter arrays override the defaults."""

    N: int
    R: int
    H: int
    G: int = 3
    D: int = 1
    Q: int = 2
    beta_true: np.ndarray | None = None
    gamma_true: np.ndarray | None = None
    rho_true: np.ndarray | None = None
    b_true: np.ndarray | None = None
    w_true: np.ndarray | None = None
    seed: int = 0

    def validate(self) -> None:
        if min(self.N, self.R, self.H, self.G, self.D, self.Q) < 1:
            raise DataError("all scenario dimensions must be positive")
        if self.N % self.H != 0:
            raise DataError(f"N={self.N} must be divisible by H={self.H} "
                            "(equal layer sizes)")


@dataclass
class GroundTruth:
    """Generating parameters and the drawn group labels."""

    dims: ModelDims
    params: Params
    node_labels: np.ndarray   # (N,) node-group indices
    layer_labels: np.ndarray  # (H,) layer-group indices


def default_truth(spec: SimSpec, rng: np.random.Generator) -> Params:
    """Populate generating parameters, drawing any block not given explicitly.

    The built-in class-prior coefficients exist only for G=3 and the layer
    blocks only for Q in {2, 3}; other shapes must be passed explicitly.
    The Q=3 weights are the equal-thirds vector so they sum to one exactly.
    """
    spec.validate()
    if spec.beta_true is not None:
        beta = np.asarray(spec.beta_true, dtype=np.float64)
        if beta.shape[0] != spec.G - 1:
            raise DataError("beta_true must have G-1 rows")
    elif spec.G == 3:
        beta = _BETA_DEFAULT.copy()
    else:
        raise DataError(f"no default class-prior coefficients for G={spec.G}; "
                        "pass beta_true")

    if spec.b_true is not None:
        b = np.asarray(spec.b_true, dtype=np.float64)
    elif spec.G == 3:
        means = np.array(_B_MEANS)[:, None]
        b = means + rng.standard_normal((3, spec.R))
    else:
        raise DataError(f"no default intercept design for G={spec.G}; pass b_true")

    w = (np.asarray(spec.w_true, dtype=np.float64) if spec.w_true is not None
         else rng.standard_normal((spec.R, spec.D)))

    if (spec.gamma_true is None) != (spec.rho_true is None):
        raise DataError("gamma_true and rho_true must be overridden together")
    if spec.gamma_true is not None:
        gamma = np.asarray(spec.gamma_true, dtype=np.float64)
        rho = np.asarray(spec.rho_true, dtype=np.float64)
    elif spec.Q in _GAMMA_DEFAULT:
        gamma = _GAMMA_DEFAULT[spec.Q].copy()
        rho = _RHO_DEFAULT[spec.Q].copy()
    else:
        raise DataError(f"no default layer design for Q={spec.Q}; "
                        "pass gamma_true and rho_true")

    params = Params(beta=beta, b=b, w=w, gamma=gamma, rho=rho)
    params.validate(gauged=False)
    return params


def simulate_network(spec: SimSpec) -> tuple[NetworkData, GroundTruth]:
    """Draw one network: layer groups, covariates, node groups, traits, and
    Bernoulli incidences, in that fixed order from a single seeded stream."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed]))
    params = default_truth(spec, rng)
    n_h = spec.N // spec.H

    layer_labels = rng.choice(spec.Q, size=spec.H, p=params.rho)
    x = rng.normal(1.0, 1.0, size=spec.N)
    X = np.column_stack([np.ones(spec.N), x])

    eta = class_priors(X, params.beta, params.gamma)      # (N, G, Q)
    row_layer = np.repeat(np.arange(spec.H), n_h)
    p_class = eta[np.arange(spec.N), :, layer_labels[row_layer]]
    cum = np.cumsum(p_class, axis=1)
    node_labels = np.minimum((rng.random(spec.N)[:, None] > cum).sum(axis=1),
                             spec.G - 1)

    u = rng.standard_normal((spec.N, spec.D))
    if params.parsimonious:
        linpred = params.b[node_labels] + u @ params.w.T
    else:
        linpred = params.b[node_labels] + np.einsum("nd,nkd->nk", u,
                                                    params.w[node_labels])
    Y = (rng.random((spec.N, spec.R)) < logistic(linpred)).astype(np.int8)

    data = NetworkData(
        layer_ids=[f"L{h + 1:02d}" for h in range(spec.H)],
        layer_sizes=np.full(spec.H, n_h, dtype=np.intp),
        Y=Y,
        X=X,
    )
    data.validate()
    dims = ModelDims(G=spec.G, D=spec.D, Q=spec.Q,
                     parsimonious=params.parsimonious)
    truth = GroundTruth(dims=dims, params=params, node_labels=node_labels,
                        layer_labels=layer_labels)
    return data, truth


def write_truth(truth: GroundTruth, path: str) -> None:
    doc = {
        "schema_version": 1,
        "dims": {"G": truth.dims.G, "D": truth.dims.D, "Q": truth.dims.Q,
                 "parsimonious": truth.dims.parsimonious},
        "params": {
            "beta": truth.params.beta.tolist(),
            "b": truth.params.b.tolist(),
            "w": truth.params.w.tolist(),
            "gamma": truth.params.gamma.tolist(),
            "rho": truth.params.rho.tolist(),
        },
        "node_labels": truth.node_labels.tolist(),
        "layer_labels": truth.layer_labels.tolist(),
    }
    _atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")


def read_truth(path: str) -> GroundTruth:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != 1:
        raise DataError(f"unsupported truth schema_version "
                        f"{doc.get('schema_version')!r}")
    dims = ModelDims(G=int(doc["dims"]["G"]), D=int(doc["dims"]["D"]),
                     Q=int(doc["dims"]["Q"]),
                     parsimonious=bool(doc["dims"]["parsimonious"]))
    p = doc["params"]
    params = Params(beta=np.asarray(p["beta"], dtype=np.float64).reshape(dims.G - 1, -1),
                    b=np.asarray(p["b"], dtype=np.float64),
                    w=np.asarray(p["w"], dtype=np.float64),
                    gamma=np.asarray(p["gamma"], dtype=np.float64),
                    rho=np.asarray(p["rho"], dtype=np.float64))
    return GroundTruth(dims=dims, params=params,
                       node_labels=np.asarray(doc["node_labels"], dtype=np.intp),
                       layer_labels=np.asarray(doc["layer_labels"], dtype=np.intp))


__all__ = ["SimSpec", "GroundTruth", "default_truth", "simulate_network",
           "write_truth", "read_truth"]
