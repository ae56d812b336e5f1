"""Fit-and-predict wrappers shared by cross-validation and attribution.

Every model sees per-zoom z-scored features and a target standardised
with training-set moments; predictions come back in target units.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError
from ..geotile import MAX_ZOOM
from ..hiergraph import HierGraph, without_hierarchy
from ..ingest import FeatureTable, Standardizer
from . import baselines
from .model import HrGatConfig, embeddings, forward, init_params, prepare, tile_variants, train

MODEL_NAMES = ("hrgat", "plain_gat", "mlp", "linear")


@dataclass
class FitResult:
    name: str
    yhat: np.ndarray
    params: dict
    trace: list
    standardizer: Standardizer
    y_mean: float
    y_scale: float
    cfg: HrGatConfig
    fusion: np.ndarray | None = None
    fusion_zooms: tuple[int, ...] = ()
    extra: dict = field(default_factory=dict, repr=False)

    def variant_predictor(self):
        """Return ``f(row, raw_variants) -> predictions`` for one zoom-15 row."""
        std = self.standardizer
        mu, sc = std.mean[MAX_ZOOM], std.scale[MAX_ZOOM]
        back = lambda v: v * self.y_scale + self.y_mean
        if self.name == "linear":
            coef, b = self.params["coef"], self.params["intercept"]
            return lambda row, V: back(baselines.predict_linear(coef, b, (np.atleast_2d(V) - mu) / sc))
        if self.name == "mlp":
            return lambda row, V: back(baselines.predict_mlp(self.params, (np.atleast_2d(V) - mu) / sc, self.cfg.slope))
        mg, X = self.extra["mg"], self.extra["X"]
        context = embeddings(self.params, mg, X, self.cfg)
        return lambda row, V: back(tile_variants(self.params, mg, X, self.cfg, row, (np.atleast_2d(V) - mu) / sc, context))


def _preprocess(name: str, table: FeatureTable, train_mask):
    if name not in MODEL_NAMES:
        raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")
    if table.y is None:
        raise DataError("feature table has no target column")
    mask = np.asarray(train_mask, dtype=bool)
    if not mask.any():
        raise DataError("training mask is empty")
    if name != "hrgat":
        table = table.subset([MAX_ZOOM])
    std = Standardizer().fit(table, mask)
    X = std.transform(table)
    ytr = table.y[mask]
    mu = float(ytr.mean())
    sd = float(ytr.std())
    sd = sd if sd > 0 else 1.0
    return table, mask, std, X, mu, sd


def _graph_for(name: str, graph: HierGraph | None) -> HierGraph:
    if graph is None:
        raise DataError(f"model {name} needs a graph")
    return graph if name == "hrgat" else without_hierarchy(graph)


def fit_predict(name: str, table: FeatureTable, graph: HierGraph | None, train_mask, cfg: HrGatConfig) -> FitResult:
    """Train model ``name`` on the masked zoom-15 rows and predict every zoom-15 tile."""
    table, mask, std, X, mu, sd = _preprocess(name, table, train_mask)
    yt = (table.y - mu) / sd

    if name == "linear":
        coef, b = baselines.fit_linear(X[MAX_ZOOM][mask], yt[mask])
        yhat = baselines.predict_linear(coef, b, X[MAX_ZOOM])
        return FitResult(name, yhat * sd + mu, {"coef": coef, "intercept": b}, [], std, mu, sd, cfg)
    if name == "mlp":
        params, trace = baselines.fit_mlp(X[MAX_ZOOM][mask], yt[mask], cfg)
        yhat = baselines.predict_mlp(params, X[MAX_ZOOM], cfg.slope)
        return FitResult(name, yhat * sd + mu, params, trace, std, mu, sd, cfg)

    mg = prepare(_graph_for(name, graph))
    params = init_params(X[MAX_ZOOM].shape[1], cfg, mg.zooms)
    params, trace = train(params, mg, X, yt, mask, cfg)
    return restore(name, params, table, graph, mask, cfg, trace)


def restore(name: str, params: dict, table: FeatureTable, graph: HierGraph | None, train_mask,
            cfg: HrGatConfig, trace: list | None = None) -> FitResult:
    """Rebuild a graph-model fit from trained parameters.

    Preprocessing is recomputed from ``train_mask``, so it must be the mask
    the parameters were trained on.
    """
    if name not in ("hrgat", "plain_gat"):
        raise ValueError(f"restore supports graph models only, got {name!r}")
    table, mask, std, X, mu, sd = _preprocess(name, table, train_mask)
    mg = prepare(_graph_for(name, graph))
    pred = forward(params, mg, X, cfg)
    return FitResult(
        name, pred.yhat * sd + mu, params, list(trace or []), std, mu, sd, cfg,
        fusion=pred.fusion, fusion_zooms=mg.zooms, extra={"mg": mg, "X": X},
    )
