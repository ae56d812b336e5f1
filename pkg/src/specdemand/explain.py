"""Permutation-sampling Shapley attributions for per-tile predictions.

Each sampled tile's feature row is walked from the baseline to its observed
values along random feature orderings; the prediction change at each step
is credited to the feature just switched. All variants of one tile go to
the predictor in a single batch.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# f(row, variants) -> predictions, one per variant row
TilePredictor = Callable[[int, np.ndarray], np.ndarray]


@dataclass
class Attribution:
    feature_names: list[str]
    rows: list[int]
    phi: np.ndarray  # (n_rows, d)
    fx: np.ndarray
    fbase: np.ndarray
    permutations: int
    exact: bool
    seed: int

    @property
    def mean_abs(self) -> np.ndarray:
        return np.abs(self.phi).mean(axis=0)


def _orders(d: int, m: int, rng) -> np.ndarray:
    if m >= math.factorial(d):
        return np.array(list(itertools.permutations(range(d))), dtype=np.int64)
    return np.array([rng.permutation(d) for _ in range(m)], dtype=np.int64)


def shapley_sampled(predict: TilePredictor, X, rows: Sequence[int], baseline, m: int, seed: int,
                    feature_names: Sequence[str] | None = None) -> Attribution:
    """Shapley values for ``rows`` of ``X`` against ``baseline``.

    With ``m >= d!`` every ordering is enumerated and the values are exact.
    Otherwise each row draws ``m`` orderings from its own seeded stream.
    """
    X = np.asarray(X, dtype=float)
    base = np.asarray(baseline, dtype=float)
    d = X.shape[1]
    if m < 1:
        raise ValueError("need at least one permutation")
    if len(rows) == 0:
        raise ValueError("empty tile sample")
    if base.shape != (d,):
        raise ValueError(f"baseline has shape {base.shape}, expected ({d},)")
    names = list(feature_names) if feature_names is not None else [f"x{k}" for k in range(d)]
    exact = m >= math.factorial(d)
    phi = np.zeros((len(rows), d))
    fx = np.zeros(len(rows))
    fb = np.zeros(len(rows))
    for r, row in enumerate(rows):
        rng = np.random.default_rng([seed, int(row)])
        orders = _orders(d, m, rng)
        k = len(orders)
        x = X[row]
        # chain c, step s: baseline with the first s features of orders[c] switched on
        chains = np.repeat(base[None, :], k * (d + 1), axis=0).reshape(k, d + 1, d)
        for s in range(1, d + 1):
            chains[:, s] = chains[:, s - 1]
            f = orders[:, s - 1]
            chains[np.arange(k), s, f] = x[f]
        out = np.asarray(predict(int(row), chains.reshape(-1, d)), dtype=float).reshape(k, d + 1)
        step = np.diff(out, axis=1)
        contrib = np.zeros((k, d))
        contrib[np.arange(k)[:, None], orders] = step
        phi[r] = contrib.mean(axis=0)
        fx[r] = out[0, -1]
        fb[r] = out[0, 0]
    return Attribution(names, [int(r) for r in rows], phi, fx, fb, m, exact, seed)


def rank_features(attr: Attribution, top_k: int | None = 10) -> list[int]:
    """Feature indices by descending mean |phi|, ties broken by name."""
    v = attr.mean_abs
    order = sorted(range(len(v)), key=lambda k: (-v[k], attr.feature_names[k]))
    return order if top_k is None else order[:top_k]


def sample_rows(n: int, size: int, seed: int) -> list[int]:
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(n, size=min(size, n), replace=False).tolist())


def write_attribution_csv(path, attr: Attribution) -> None:
    order = rank_features(attr, None)
    v = attr.mean_abs
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "mean_abs_shap", "rank"])
        for rank, k in enumerate(order, 1):
            w.writerow([attr.feature_names[k], repr(float(v[k])), rank])


def write_tile_attribution_csv(path, attr: Attribution, quadkeys: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quadkey", "f_x", "f_baseline", *attr.feature_names])
        for r, row in enumerate(attr.rows):
            w.writerow([quadkeys[row], repr(float(attr.fx[r])), repr(float(attr.fbase[r])),
                        *(repr(float(p)) for p in attr.phi[r])])
