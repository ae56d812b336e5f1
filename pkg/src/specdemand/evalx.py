"""Spatially blocked cross-validation, metrics and residual diagnostics.

Folds come from two stages. Stage 1 groups zoom-14 tiles of each city into
small nearest-neighbour clusters. Stage 2 packs whole clusters into folds
with land-cover balance. A zoom-15 tile inherits the fold of its parent.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import betainc

from .errors import DataError, InvariantError
from .geotile import GeoPoint, TileId, centroid, haversine, neighbors8, parent, quadkey
from .hiergraph import HierGraph
from .hrgat.estimators import FitResult, fit_predict
from .hrgat.model import HrGatConfig
from .ingest import FeatureTable, modal_label

N_FOLDS = 5
KNN = 6


@dataclass(frozen=True)
class SpatialCluster:
    id: int
    members: tuple[TileId, ...]
    centroid: GeoPoint
    land_cover: str

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class FoldAssignment:
    n_folds: int
    cluster_fold: dict[int, int]
    tile_fold: dict[TileId, int]

    def folds_for(self, tiles15: Sequence[TileId]) -> np.ndarray:
        try:
            return np.array([self.tile_fold[parent(t)] for t in tiles15], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"zoom-15 tile has no fold: parent {exc.args[0]} not clustered") from None


# ---------------------------------------------------------------- fold construction

def stage1_clusters(tiles: Sequence[TileId], land_cover: Mapping[TileId, str] | None = None,
                    k: int = KNN, start_id: int = 0) -> list[SpatialCluster]:
    """Greedy kNN grouping.

    Repeatedly seed at the unassigned tile with the smallest quadkey and
    take it plus its ``k`` nearest unassigned tiles by centroid distance
    (ties by quadkey). The last clusters may be smaller.
    """
    tiles = sorted(set(tiles), key=quadkey)
    if not tiles:
        return []
    cen = np.array([(centroid(t).lat, centroid(t).lon) for t in tiles])
    free = np.ones(len(tiles), dtype=bool)
    out = []
    for s in range(len(tiles)):
        if not free[s]:
            continue
        free[s] = False
        cand = np.flatnonzero(free)
        d = haversine(cen[s, 0], cen[s, 1], cen[cand, 0], cen[cand, 1])
        # stable sort keeps quadkey order among equal distances
        pick = cand[np.argsort(d, kind="stable")[:k]]
        free[pick] = False
        idx = np.concatenate([[s], np.sort(pick)])
        members = tuple(tiles[i] for i in idx)
        c = GeoPoint(float(cen[idx, 0].mean()), float(cen[idx, 1].mean()))
        lc = modal_label([land_cover[t] for t in members]) if land_cover else ""
        out.append(SpatialCluster(start_id + len(out), members, c, lc))
    return out


def stage2_folds(clusters: Sequence[SpatialCluster], n_folds: int = N_FOLDS) -> FoldAssignment:
    """Pack whole clusters into folds, balancing each land-cover class.

    Within a class, clusters go largest first to the fold holding the fewest
    clusters of that class, then the fewest tiles, then the lowest index.
    """
    if len(clusters) < n_folds:
        raise DataError(f"{len(clusters)} clusters cannot fill {n_folds} folds")
    by_class: dict[str, list[SpatialCluster]] = defaultdict(list)
    for c in clusters:
        by_class[c.land_cover].append(c)
    class_count = {lc: [0] * n_folds for lc in by_class}
    tiles_in = [0] * n_folds
    cluster_fold, tile_fold = {}, {}
    for lc in sorted(by_class):
        for c in sorted(by_class[lc], key=lambda c: (-c.size, c.id)):
            f = min(range(n_folds), key=lambda f: (class_count[lc][f], tiles_in[f], f))
            class_count[lc][f] += 1
            tiles_in[f] += c.size
            cluster_fold[c.id] = f + 1
            for t in c.members:
                tile_fold[t] = f + 1
    return FoldAssignment(n_folds, cluster_fold, tile_fold)


def cbcv_folds(table: FeatureTable, n_folds: int = N_FOLDS, k: int = KNN):
    """Clusters per city, global fold packing, and the zoom-15 fold vector."""
    by_city: dict[str, list[TileId]] = defaultdict(list)
    lc14 = dict(zip(table.tiles[14], table.land_cover[14]))
    for t, c in zip(table.tiles[14], table.city[14]):
        by_city[c].append(t)
    clusters: list[SpatialCluster] = []
    for c in sorted(by_city):
        clusters += stage1_clusters(by_city[c], lc14, k, start_id=len(clusters))
    assignment = stage2_folds(clusters, n_folds)
    return clusters, assignment, assignment.folds_for(table.tiles[15])


def check_folds(clusters: Sequence[SpatialCluster], assignment: FoldAssignment, tiles15: Sequence[TileId]) -> None:
    """Raise InvariantError unless clusters are whole and class counts balanced."""
    seen = set()
    for c in clusters:
        folds = {assignment.tile_fold.get(t) for t in c.members}
        if len(folds) != 1 or folds != {assignment.cluster_fold[c.id]}:
            raise InvariantError(f"cluster {c.id} is split across folds {sorted(map(str, folds))}")
        if seen & set(c.members):
            raise InvariantError(f"cluster {c.id} shares tiles with another cluster")
        seen |= set(c.members)
    counts: dict[str, list[int]] = defaultdict(lambda: [0] * assignment.n_folds)
    for c in clusters:
        counts[c.land_cover][assignment.cluster_fold[c.id] - 1] += 1
    for lc, cnt in counts.items():
        if max(cnt) - min(cnt) > 1:
            raise InvariantError(f"land cover {lc!r} unbalanced across folds: {cnt}")
    missing = [quadkey(t) for t in tiles15 if parent(t) not in assignment.tile_fold]
    if missing:
        raise InvariantError(f"zoom-15 tiles without a fold: {missing[:10]}")


def loco_split(table: FeatureTable, test_city: str) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (train, test) masks over zoom-15 rows."""
    city = np.array(table.city[15])
    if test_city not in set(city.tolist()):
        raise DataError(f"unknown city {test_city!r}; have {sorted(set(city.tolist()))}")
    test = city == test_city
    return ~test, test


# ---------------------------------------------------------------- statistics

def metrics(y, yhat) -> tuple[float, float, float]:
    """(MAE, RMSE, R^2). R^2 is NaN for a single sample; zero-variance y raises."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.size == 0:
        raise ValueError("y and yhat must be nonempty and equally long")
    r = y - yhat
    mae = float(np.mean(np.abs(r)))
    rmse = float(math.sqrt(np.mean(r * r)))
    if y.size < 2:
        return mae, rmse, float("nan")
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0:
        raise ValueError("R^2 undefined for constant y")
    return mae, rmse, 1.0 - float(r @ r) / sst


def adjacency_pairs(tiles: Sequence[TileId]) -> tuple[np.ndarray, np.ndarray]:
    """8-adjacent pairs (i < j) among ``tiles``, by position."""
    idx = {t: i for i, t in enumerate(tiles)}
    pairs = [(i, j) for i, t in enumerate(tiles) for u in neighbors8(t) if (j := idx.get(u, -1)) > i]
    a = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return a[:, 0], a[:, 1]


def morans_i(values, i, j) -> float:
    """Global Moran's I with row-standardised binary weights on undirected pairs.

    Nodes without neighbours carry zero weight rows. A constant field
    returns 0.
    """
    x = np.asarray(values, dtype=float)
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    if x.size < 2:
        raise ValueError("Moran's I needs at least two values")
    if i.size == 0:
        raise ValueError("Moran's I needs at least one edge")
    z = x - x.mean()
    ss = float(z @ z)
    if ss == 0 or np.ptp(x) == 0:
        return 0.0
    deg = np.bincount(i, minlength=x.size) + np.bincount(j, minlength=x.size)
    src = np.concatenate([i, j])
    dst = np.concatenate([j, i])
    w = 1.0 / deg[src]
    num = float(np.sum(w * z[src] * z[dst]))
    s0 = float(np.count_nonzero(deg))
    return x.size / s0 * num / ss


def t_sf_two_sided(t: float, df: int) -> float:
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test; returns (t, p)."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if d.size < 2:
        raise ValueError("paired t-test needs at least two pairs")
    sd = float(np.std(d, ddof=1))
    if sd == 0 or not math.isfinite(sd):
        raise ValueError("paired differences have zero variance")
    t = float(d.mean() / (sd / math.sqrt(d.size)))
    return t, t_sf_two_sided(t, d.size - 1)


def ecdf(values) -> list[tuple[float, float]]:
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("eCDF of an empty sample")
    frac = np.searchsorted(v, v, side="right") / v.size
    return [(float(a), float(b)) for a, b in zip(v, frac)]


# ---------------------------------------------------------------- runs and reports

@dataclass
class FoldMetrics:
    model: str
    fold: int
    n_train: int
    n_val: int
    mae: float
    rmse: float
    r2: float
    morans_i: float


@dataclass
class EvalReport:
    scheme: str
    models: list[str]
    folds: list[FoldMetrics] = field(default_factory=list)
    aggregate: dict[str, dict[str, float]] = field(default_factory=dict)
    residuals: list[tuple] = field(default_factory=list)
    ecdf: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    t_tests: list[dict] = field(default_factory=list)
    fusion: dict[str, dict[str, float]] = field(default_factory=dict)
    tile_fusion: list[tuple] = field(default_factory=list)  # (model, fold, quadkey, zooms, alphas)
    fits: dict = field(default_factory=dict, repr=False)

    def fold_series(self, model: str, metric: str) -> list[float]:
        return [getattr(f, metric) for f in sorted(self.folds, key=lambda f: f.fold) if f.model == model]

    def median(self, model: str, metric: str) -> float:
        return self.aggregate[model][f"median_{metric}"]


def _finish(report: EvalReport) -> EvalReport:
    for m in report.models:
        agg = {}
        for k in ("mae", "rmse", "r2", "morans_i"):
            agg[f"median_{k}"] = float(np.median(report.fold_series(m, k)))
        report.aggregate[m] = agg
        report.ecdf[m] = ecdf([abs(r[5]) for r in report.residuals if r[0] == m])
    ref = report.models[0]
    for other in report.models[1:]:
        for k in ("rmse", "morans_i"):
            a, b = report.fold_series(ref, k), report.fold_series(other, k)
            try:
                t, p = paired_t_test(a, b)
            except ValueError:
                t, p = float("nan"), float("nan")
            report.t_tests.append({"metric": k, "model_a": ref, "model_b": other, "t": t, "p": p})
    return report


def _evaluate(report, name, fit: FitResult, table, edges15, train, val, fold):
    y = table.y
    r = y[val] - fit.yhat[val]
    mae, rmse, r2 = metrics(y[val], fit.yhat[val])
    vi = np.flatnonzero(val)
    local = np.full(len(y), -1)
    local[vi] = np.arange(vi.size)
    i, j = edges15
    keep = val[i] & val[j]
    mi = morans_i(r, local[i[keep]], local[j[keep]]) if keep.any() else float("nan")
    report.folds.append(FoldMetrics(name, fold, int(train.sum()), int(val.sum()), mae, rmse, r2, mi))
    tiles = table.tiles[15]
    for k, row in enumerate(vi):
        report.residuals.append((name, fold, quadkey(tiles[row]), float(y[row]), float(fit.yhat[row]), float(r[k])))
    if fit.fusion is not None:
        for col, z in enumerate(fit.fusion_zooms):
            report.fusion.setdefault(name, {})[f"fold{fold}_z{z}"] = float(fit.fusion[val, col].mean())
        for row in vi:
            report.tile_fusion.append((name, fold, quadkey(tiles[row]), fit.fusion_zooms, fit.fusion[row].tolist()))


def run_cbcv(models: Sequence[str], table: FeatureTable, graph: HierGraph, folds: np.ndarray,
             cfg: HrGatConfig, keep_fits: bool = False) -> EvalReport:
    """Train on four folds and validate on the fifth, for every fold and model."""
    folds = np.asarray(folds)
    if folds.shape != (len(table.tiles[15]),):
        raise DataError("fold vector does not match zoom-15 tiles")
    edges15 = graph.zoom_edges(15)[:2]
    report = EvalReport("cbcv", list(models))
    for name in models:
        for f in sorted(set(folds.tolist())):
            val = folds == f
            train = ~val
            fit = fit_predict(name, table, graph, train, cfg)
            _evaluate(report, name, fit, table, edges15, train, val, int(f))
            if keep_fits:
                report.fits[(name, int(f))] = fit
    return _finish(report)


def run_loco(models: Sequence[str], table: FeatureTable, graph: HierGraph, test_city: str,
             cfg: HrGatConfig, keep_fits: bool = False) -> EvalReport:
    train, test = loco_split(table, test_city)
    edges15 = graph.zoom_edges(15)[:2]
    report = EvalReport(f"loco:{test_city}", list(models))
    for name in models:
        fit = fit_predict(name, table, graph, train, cfg)
        _evaluate(report, name, fit, table, edges15, train, test, 1)
        if keep_fits:
            report.fits[(name, 1)] = fit
    return _finish(report)


def _num(x):
    return None if isinstance(x, float) and not math.isfinite(x) else x


def write_report(out_dir, report: EvalReport, prefix: str = "") -> list[Path]:
    """report.json plus fold-metric, residual and eCDF CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "scheme": report.scheme,
        "models": report.models,
        "aggregate": {m: {k: _num(v) for k, v in a.items()} for m, a in report.aggregate.items()},
        "folds": [{k: _num(v) for k, v in asdict(f).items()} for f in report.folds],
        "t_tests": [{k: _num(v) for k, v in t.items()} for t in report.t_tests],
        "fusion_mean_alpha": report.fusion,
    }
    paths = [out / f"{prefix}report.json", out / f"{prefix}fold_metrics.csv",
             out / f"{prefix}residuals.csv", out / f"{prefix}ecdf.csv"]
    paths[0].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "fold", "n_train", "n_val", "mae", "rmse", "r2", "morans_i"])
        for f in report.folds:
            w.writerow([f.model, f.fold, f.n_train, f.n_val, repr(f.mae), repr(f.rmse), repr(f.r2), repr(f.morans_i)])
    with open(paths[2], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "fold", "quadkey", "y", "yhat", "residual"])
        for r in report.residuals:
            w.writerow([r[0], r[1], r[2], repr(r[3]), repr(r[4]), repr(r[5])])
    with open(paths[3], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "abs_residual", "fraction"])
        for m, pts in report.ecdf.items():
            for v, p in pts:
                w.writerow([m, repr(v), repr(p)])
    if report.tile_fusion:
        paths.append(out / f"{prefix}fusion.csv")
        with open(paths[-1], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "fold", "quadkey", "alpha_z13", "alpha_z14", "alpha_z15"])
            for m, f, q, zs, a in report.tile_fusion:
                by_zoom = dict(zip(zs, a))
                w.writerow([m, f, q, *(repr(float(by_zoom.get(z, 0.0))) for z in (13, 14, 15))])
    return paths


def write_folds_csv(path, table: FeatureTable, clusters: Sequence[SpatialCluster], assignment: FoldAssignment) -> None:
    cluster_of = {t: c.id for c in clusters for t in c.members}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quadkey", "cluster", "fold", "land_cover"])
        lc = {c.id: c.land_cover for c in clusters}
        for t in table.tiles[15]:
            cid = cluster_of[parent(t)]
            w.writerow([quadkey(t), cid, assignment.cluster_fold[cid], lc[cid]])
