"""Per-tile baselines: ridge-stabilised least squares and a two-hidden-layer MLP."""
from __future__ import annotations

import math

import numpy as np

from ..errors import DataError, DivergenceError
from .layers import dleaky, leaky
from .model import HrGatConfig, TraceRow

RIDGE = 1e-8


def fit_linear(X, y, ridge: float = RIDGE) -> tuple[np.ndarray, float]:
    """Least squares with intercept through the normal equations.

    A ridge of ``ridge`` on the diagonal conditions near-collinear columns.
    Raises DataError when the system stays singular.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.column_stack([X, np.ones(len(X))])
    G = A.T @ A + ridge * np.eye(A.shape[1])
    try:
        beta = np.linalg.solve(G, A.T @ y)
    except np.linalg.LinAlgError:
        raise DataError("normal equations are singular") from None
    if not np.all(np.isfinite(beta)) or np.linalg.cond(G) > 1e15:
        raise DataError("normal equations are singular beyond ridge rescue")
    return beta[:-1], float(beta[-1])


def predict_linear(coef, intercept, X) -> np.ndarray:
    return np.asarray(X, dtype=float) @ coef + intercept


def init_mlp(d: int, cfg: HrGatConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    h = cfg.hidden
    params = {}
    for name, (r, c) in {"W1": (d, h), "W2": (h, h), "W3": (h, 1)}.items():
        b = 1.0 / math.sqrt(r)
        params[name] = rng.uniform(-b, b, size=(r, c))
        params["b" + name[1]] = np.zeros((1, c))
    return params


def mlp_forward(params, X, slope):
    Z1 = X @ params["W1"] + params["b1"]
    H1 = leaky(Z1, slope)
    Z2 = H1 @ params["W2"] + params["b2"]
    H2 = leaky(Z2, slope)
    out = (H2 @ params["W3"] + params["b3"])[:, 0]
    return out, (X, Z1, H1, Z2, H2)


def mlp_backward(params, dout, cache, slope):
    X, Z1, H1, Z2, H2 = cache
    g = {}
    d3 = dout[:, None]
    g["W3"] = H2.T @ d3
    g["b3"] = d3.sum(axis=0, keepdims=True)
    d2 = (d3 @ params["W3"].T) * dleaky(Z2, slope)
    g["W2"] = H1.T @ d2
    g["b2"] = d2.sum(axis=0, keepdims=True)
    d1 = (d2 @ params["W2"].T) * dleaky(Z1, slope)
    g["W1"] = X.T @ d1
    g["b1"] = d1.sum(axis=0, keepdims=True)
    return g


def fit_mlp(X, y, cfg: HrGatConfig, params=None):
    """Full-batch gradient descent on mean squared error; no spatial terms."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise DataError("empty training set")
    params = init_mlp(X.shape[1], cfg) if params is None else {k: v.copy() for k, v in params.items()}
    trace = []
    for epoch in range(cfg.epochs + 1):
        out, cache = mlp_forward(params, X, cfg.slope)
        r = out - y
        mse = float(r @ r / len(y))
        if not math.isfinite(mse):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        trace.append(TraceRow(epoch, mse, mse, 0.0))
        if epoch == cfg.epochs:
            break
        grads = mlp_backward(params, 2.0 * r / len(y), cache, cfg.slope)
        for k in params:
            params[k] -= cfg.lr * grads[k]
    return params, trace


def predict_mlp(params, X, slope: float = 0.2) -> np.ndarray:
    return mlp_forward(params, np.asarray(X, dtype=float), slope)[0]
