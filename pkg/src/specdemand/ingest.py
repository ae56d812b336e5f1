"""Harmonise heterogeneous inputs onto the zoom 13/14/15 tile grid.

Three input families are supported:

* point datasets (households, POIs, ...) summed per tile,
* polygon datasets carrying a metric (census-style zones) split over tiles by
  intersection area,
* polygon/polyline datasets without a metric (roads, footprints) from which
  counts, clipped lengths, clipped areas and densities are derived.

Geometry work happens in spherical Mercator meters. Lengths and areas are
converted to ground meters with the Mercator scale factor at the centroid of
each clipped piece.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import shapely
from shapely.geometry.base import BaseGeometry

from .errors import DataError
from .geotile import (
    MODEL_ZOOMS,
    GeoPoint,
    TileId,
    ancestor,
    from_mercator,
    lonlat_to_tile,
    neighbors8,
    parse_quadkey,
    quadkey,
    tile_bounds_mercator,
    tile_from_mercator,
    to_mercator,
)

log = logging.getLogger(__name__)

SHAPE_METRICS = ("count", "total_length_m", "total_area_m2", "density")
CLIP_PERCENTILE = 99.9
GAP_MIN_NEIGHBORS = 6
SLIVER = 1e-9


@dataclass
class PointDataset:
    name: str
    points: list[tuple[GeoPoint, float]]


@dataclass
class Zone:
    zone_id: str
    geometry: BaseGeometry  # lon/lat degrees
    metric: float | None
    level: str = "lower"
    parent_id: str | None = None


@dataclass
class PolygonMetricDataset:
    name: str
    zones: list[Zone]


@dataclass
class PolygonShapeDataset:
    name: str
    shapes: list[BaseGeometry]  # lon/lat degrees
    derived_metric: str = "count"

    def __post_init__(self):
        if self.derived_metric not in SHAPE_METRICS:
            raise ValueError(f"unknown shape metric {self.derived_metric!r}")


@dataclass
class FeatureColumn:
    """One zoom-15 feature before assembly."""

    name: str
    values: Mapping[TileId, float]
    additive: bool = True


@dataclass
class FeatureTable:
    feature_names: list[str]
    tiles: dict[int, list[TileId]]
    X: dict[int, np.ndarray]
    land_cover: dict[int, list[str]]
    city: dict[int, list[str]]
    y: np.ndarray | None = None
    _index: dict[int, dict[TileId, int]] = field(default_factory=dict, repr=False)

    @property
    def zooms(self) -> tuple[int, ...]:
        return tuple(sorted(self.tiles))

    def index(self, zoom: int) -> dict[TileId, int]:
        if zoom not in self._index:
            self._index[zoom] = {t: i for i, t in enumerate(self.tiles[zoom])}
        return self._index[zoom]

    def ancestor_rows(self, zoom: int) -> np.ndarray:
        """Row index at ``zoom`` of each zoom-15 tile's ancestor (-1 if absent)."""
        idx = self.index(zoom)
        return np.array([idx.get(ancestor(t, zoom), -1) for t in self.tiles[15]], dtype=np.int64)

    def subset(self, zooms: Iterable[int]) -> "FeatureTable":
        zooms = sorted(zooms)
        return FeatureTable(
            list(self.feature_names),
            {z: self.tiles[z] for z in zooms},
            {z: self.X[z] for z in zooms},
            {z: self.land_cover[z] for z in zooms},
            {z: self.city[z] for z in zooms},
            self.y,
        )

    def validate(self) -> None:
        d = len(self.feature_names)
        for z in self.zooms:
            X = self.X[z]
            if X.shape != (len(self.tiles[z]), d):
                raise DataError(f"zoom {z}: feature matrix shape {X.shape} != ({len(self.tiles[z])}, {d})")
            if not np.all(np.isfinite(X)):
                raise DataError(f"zoom {z}: non-finite feature values")
        if self.y is not None and len(self.y) != len(self.tiles[15]):
            raise DataError("target length does not match zoom-15 tiles")


# -- geometry helpers -------------------------------------------------------

def _project(geom: BaseGeometry) -> BaseGeometry:
    return shapely.transform(geom, lambda c: np.column_stack(to_mercator(c[:, 0], c[:, 1])))


def _repair(geom: BaseGeometry) -> BaseGeometry | None:
    if geom is None or geom.is_empty:
        return None
    if not geom.is_valid:
        geom = shapely.make_valid(geom)
    return None if geom.is_empty else geom


def _scale(y_merc) -> np.ndarray:
    """Mercator-to-ground scale factor (cos latitude) at Mercator northing."""
    _, lat = from_mercator(np.zeros_like(y_merc), y_merc)
    return np.cos(np.radians(lat))


def _tile_pairs(geoms: Sequence[BaseGeometry], zoom: int):
    """Candidate (geometry index, tile) pairs from bounding boxes."""
    gi, tiles = [], []
    for i, g in enumerate(geoms):
        minx, miny, maxx, maxy = g.bounds
        x0, y1 = tile_from_mercator(minx, miny, zoom)
        x1, y0 = tile_from_mercator(maxx, maxy, zoom)
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                gi.append(i)
                tiles.append(TileId(zoom, tx, ty))
    return np.array(gi, dtype=np.int64), tiles


def _clip(geoms: Sequence[BaseGeometry], zoom: int):
    gi, tiles = _tile_pairs(geoms, zoom)
    if not tiles:
        return gi, tiles, np.array([], dtype=object)
    boxes = shapely.box(*np.array([tile_bounds_mercator(t) for t in tiles]).T)
    pieces = shapely.intersection(np.asarray(geoms, dtype=object)[gi], boxes)
    return gi, tiles, pieces


# -- operations -------------------------------------------------------------

def aggregate_points(ds: PointDataset, zoom: int) -> tuple[dict[TileId, float], int]:
    """Sum point weights per tile.

    Points with invalid coordinates are dropped and counted. Exact coordinate
    repeats inside a tile are kept once. Returns ``(values, n_dropped)``;
    tiles without points are absent from ``values`` and read as zero.
    """
    values: dict[TileId, float] = defaultdict(float)
    seen = set()
    dropped = 0
    for p, w in ds.points:
        try:
            lat, lon, w = float(p.lat), float(p.lon), float(w)
        except (TypeError, ValueError, AttributeError):
            dropped += 1
            continue
        if not (math.isfinite(lat) and math.isfinite(lon) and math.isfinite(w) and w >= 0
                and abs(lat) <= 85.0511 and -180 <= lon <= 180):
            dropped += 1
            continue
        t = lonlat_to_tile(lat, lon, zoom)
        key = (t, lat, lon)
        if key in seen:
            continue
        seen.add(key)
        values[t] += w
    if dropped:
        log.warning("%s: dropped %d points with invalid coordinates", ds.name, dropped)
    return dict(values), dropped


def impute_zone_metrics(ds: PolygonMetricDataset) -> list[tuple[BaseGeometry, float]]:
    """Zones to interpolate, as ``(mercator geometry, metric)``.

    Lower-level zones with a missing metric take the enclosing upper zone's
    density times their own area. Upper zones are interpolated only when no
    lower zone references them.
    """
    zones = {}
    for z in ds.zones:
        g = _repair(z.geometry)
        if g is None:
            log.warning("%s: zone %s has unrepairable geometry, skipped", ds.name, z.zone_id)
            continue
        zones[z.zone_id] = (z, _project(g))
    referenced = {z.parent_id for z, _ in zones.values() if z.level == "lower" and z.parent_id}
    out = []
    for zid in zones:
        z, g = zones[zid]
        metric = z.metric
        if z.level == "upper" and zid in referenced:
            continue
        area = g.area
        if area <= 0:
            log.warning("%s: zone %s has zero area, metric dropped", ds.name, zid)
            continue
        if metric is None or not math.isfinite(metric):
            parent = zones.get(z.parent_id) if z.parent_id else None
            if parent is None or parent[0].metric is None or parent[1].area <= 0:
                log.warning("%s: zone %s has no metric and no usable parent, dropped", ds.name, zid)
                continue
            metric = parent[0].metric / parent[1].area * area
        out.append((g, float(metric)))
    return out


def interpolate_polygon_metric(ds: PolygonMetricDataset, zoom: int) -> dict[TileId, float]:
    """Split each zone's metric over tiles in proportion to intersection area."""
    items = impute_zone_metrics(ds)
    if not items:
        return {}
    geoms = [g for g, _ in items]
    metrics = np.array([m for _, m in items])
    areas = shapely.area(np.asarray(geoms, dtype=object))
    gi, tiles, pieces = _clip(geoms, zoom)
    share = shapely.area(pieces) / areas[gi]
    # snap projection slivers, then renormalise so each zone sums to its metric
    share[share < SLIVER] = 0.0
    total = np.bincount(gi, weights=share, minlength=len(geoms))
    share = np.divide(share, total[gi], out=np.zeros_like(share), where=total[gi] > 0)
    values: dict[TileId, float] = defaultdict(float)
    for k in np.flatnonzero(share > 0):
        values[tiles[k]] += metrics[gi[k]] * share[k]
    return dict(values)


def derive_shape_metrics(ds: PolygonShapeDataset, zoom: int) -> dict[TileId, float]:
    """Per-tile count, clipped ground length/area, or built-area density."""
    geoms = []
    for g in ds.shapes:
        g = _repair(g)
        if g is None:
            log.warning("%s: unrepairable geometry skipped", ds.name)
            continue
        geoms.append(_project(g))
    if not geoms:
        return {}
    gi, tiles, pieces = _clip(geoms, zoom)
    keep = ~shapely.is_empty(pieces)
    metric = ds.derived_metric
    if metric == "count":
        # touching a tile edge is not an intersection
        dims = shapely.get_dimensions(pieces)
        src_dims = shapely.get_dimensions(np.asarray(geoms, dtype=object))[gi]
        keep &= dims == src_dims
        vals = np.ones(len(pieces))
    elif metric == "total_length_m":
        cy = shapely.get_y(shapely.centroid(pieces))
        vals = shapely.length(pieces) * _scale(np.nan_to_num(cy))
    elif metric == "total_area_m2":
        cy = shapely.get_y(shapely.centroid(pieces))
        vals = shapely.area(pieces) * _scale(np.nan_to_num(cy)) ** 2
    else:
        tile_area = np.array([_box_area(t) for t in tiles]) if tiles else np.array([])
        vals = shapely.area(pieces) / tile_area
    values: dict[TileId, float] = defaultdict(float)
    for k in np.flatnonzero(keep & (vals > 0)):
        values[tiles[k]] += float(vals[k])
    return dict(values)


def _box_area(t: TileId) -> float:
    minx, miny, maxx, maxy = tile_bounds_mercator(t)
    return (maxx - minx) * (maxy - miny)


def qa_pipeline(values: Mapping[TileId, float], kind: str, universe: Sequence[TileId]) -> dict[TileId, float]:
    """Apply the quality rules for one input family over a tile universe.

    ``kind`` is ``"points"``, ``"polygon_metric"`` or ``"polygon_shape"``.
    Missing tiles read as zero except for ``polygon_metric``, where a missing
    (or NaN) tile is a gap filled with the mean of its available neighbours.
    """
    present = set(universe)
    if kind == "points":
        vals = {t: float(values.get(t, 0.0)) for t in universe}
        out = dict(vals)
        for t in universe:
            if vals[t] != 0:
                continue
            nb = [vals[u] for u in neighbors8(t) if u in present]
            if sum(1 for v in nb if v != 0) >= GAP_MIN_NEIGHBORS:
                out[t] = math.fsum(nb) / len(nb)
        return out
    if kind == "polygon_metric":
        vals = {t: values.get(t, math.nan) for t in universe}
        out = {}
        for t in universe:
            v = vals[t]
            if math.isfinite(v):
                out[t] = float(v)
                continue
            nb = [vals[u] for u in neighbors8(t) if u in present and math.isfinite(vals[u])]
            out[t] = math.fsum(nb) / len(nb) if nb else 0.0
        return out
    if kind == "polygon_shape":
        arr = np.array([float(values.get(t, 0.0)) for t in universe])
        if arr.size == 0:
            return {}
        cap = np.percentile(arr, CLIP_PERCENTILE, method="lower")
        return {t: float(v) for t, v in zip(universe, np.minimum(arr, cap))}
    raise ValueError(f"unknown QA kind {kind!r}")


def modal_label(labels: Sequence[str]) -> str:
    counts = Counter(labels)
    best = max(counts.values())
    return min(k for k, c in counts.items() if c == best)


def assemble(
    columns: Sequence[FeatureColumn],
    proxy: Mapping[TileId, float] | None,
    landcover: Mapping[TileId, str],
    tiles: Sequence[TileId],
    city: Mapping[TileId, str] | None = None,
) -> FeatureTable:
    """Join zoom-15 columns into a three-zoom table.

    Coarser zooms are formed from zoom-15 rows: additive features are summed
    over present descendants, intensive ones averaged. Land cover at coarse
    zooms is the modal child class. ``proxy`` supplies the zoom-15 target.
    """
    tiles15 = sorted(set(tiles), key=quadkey)
    if any(t.zoom != 15 for t in tiles15):
        raise DataError("tile universe must be zoom 15")
    names = [c.name for c in columns]
    if len(set(names)) != len(names):
        raise DataError(f"duplicate feature names: {[n for n, k in Counter(names).items() if k > 1]}")
    universe = set(tiles15)
    offenders = sorted({quadkey(t) for c in columns for t in c.values if t not in universe})
    missing_lc = [quadkey(t) for t in tiles15 if t not in landcover]
    if offenders or missing_lc:
        raise DataError(
            "tile universes do not match; outside universe: "
            f"{offenders[:20]}{'...' if len(offenders) > 20 else ''}; "
            f"without land cover: {missing_lc[:20]}"
        )
    y = None
    if proxy is not None:
        missing = [quadkey(t) for t in tiles15 if t not in proxy]
        if missing:
            raise DataError(f"tiles without a proxy target: {missing[:20]}")
        y = np.array([proxy[t] for t in tiles15], dtype=float)

    X15 = np.array([[float(c.values.get(t, 0.0)) for c in columns] for t in tiles15], dtype=float)
    X15 = X15.reshape(len(tiles15), len(columns))
    cities15 = [city.get(t, "") if city else "" for t in tiles15]
    lc15 = [landcover[t] for t in tiles15]
    additive = np.array([c.additive for c in columns], dtype=bool)

    out_tiles = {15: tiles15}
    out_X = {15: X15}
    out_lc = {15: lc15}
    out_city = {15: cities15}
    for z in (14, 13):
        groups: dict[TileId, list[int]] = defaultdict(list)
        for i, t in enumerate(tiles15):
            groups[ancestor(t, z)].append(i)
        tz = sorted(groups, key=quadkey)
        Xz = np.empty((len(tz), len(columns)))
        for r, t in enumerate(tz):
            rows = X15[groups[t]]
            Xz[r] = np.where(additive, rows.sum(axis=0), rows.mean(axis=0))
        out_tiles[z] = tz
        out_X[z] = Xz
        out_lc[z] = [modal_label([lc15[i] for i in groups[t]]) for t in tz]
        out_city[z] = [modal_label([cities15[i] for i in groups[t]]) for t in tz]
    table = FeatureTable(names, out_tiles, out_X, out_lc, out_city, y)
    table.validate()
    return table


class Standardizer:
    """Per-zoom z-scores with statistics from training rows only.

    Coarse-zoom training rows are the ancestors of training zoom-15 tiles.
    Zero-variance features map to zero.
    """

    def __init__(self):
        self.mean: dict[int, np.ndarray] = {}
        self.scale: dict[int, np.ndarray] = {}

    def fit(self, table: FeatureTable, train15: np.ndarray | None = None) -> "Standardizer":
        n15 = len(table.tiles[15])
        mask = np.ones(n15, dtype=bool) if train15 is None else np.asarray(train15, dtype=bool)
        if not mask.any():
            raise DataError("empty training set for standardisation")
        for z in table.zooms:
            if z == 15:
                rows = np.flatnonzero(mask)
            else:
                anc = table.ancestor_rows(z)[mask]
                rows = np.unique(anc[anc >= 0])
            X = table.X[z][rows]
            mu = X.mean(axis=0)
            sd = X.std(axis=0)
            self.mean[z] = mu
            self.scale[z] = np.where(sd > 0, sd, 1.0)
        return self

    def transform(self, table: FeatureTable) -> dict[int, np.ndarray]:
        return {z: (table.X[z] - self.mean[z]) / self.scale[z] for z in table.zooms}


# -- CSV interfaces ---------------------------------------------------------

def _rows(path):
    with open(path, newline="") as fh:
        yield from csv.DictReader(fh)


def read_tiles_csv(path) -> dict[TileId, str]:
    """Zoom-15 tile universe with the city of each tile."""
    return {parse_quadkey(r["quadkey"]): r.get("city", "") for r in _rows(path)}


def read_landcover_csv(path) -> dict[TileId, str]:
    return {parse_quadkey(r["quadkey"]): r["class"] for r in _rows(path)}


def read_points_csv(path) -> list[PointDataset]:
    groups: dict[str, list] = defaultdict(list)
    for r in _rows(path):
        w = r.get("weight", "").strip()
        try:
            p = GeoPoint(float(r["lat"]), float(r["lon"]))
        except ValueError:
            # kept so aggregate_points can count it as dropped
            p = _BadPoint(r["lat"], r["lon"])
        groups[r["name"]].append((p, float(w) if w else 1.0))
    return [PointDataset(n, pts) for n, pts in groups.items()]


@dataclass(frozen=True)
class _BadPoint:
    lat: str
    lon: str


def read_zones_csv(path) -> list[PolygonMetricDataset]:
    groups: dict[str, list] = defaultdict(list)
    for r in _rows(path):
        m = r.get("metric", "").strip()
        groups[r["name"]].append(Zone(
            r["zone_id"], shapely.from_wkt(r["wkt"]),
            float(m) if m else None, r.get("level", "lower") or "lower",
            r.get("parent_id") or None,
        ))
    return [PolygonMetricDataset(n, zs) for n, zs in groups.items()]


def read_shapes_csv(path) -> dict[str, list[BaseGeometry]]:
    groups: dict[str, list] = defaultdict(list)
    for r in _rows(path):
        groups[r["name"]].append(shapely.from_wkt(r["wkt"]))
    return dict(groups)


def read_tile_features_csv(path) -> list[FeatureColumn]:
    """Pre-extracted per-tile columns; aggregated upward by mean."""
    rows = list(_rows(path))
    if not rows:
        return []
    names = [k for k in rows[0] if k != "quadkey"]
    tiles = [parse_quadkey(r["quadkey"]) for r in rows]
    return [FeatureColumn(n, {t: float(r[n]) for t, r in zip(tiles, rows)}, additive=False) for n in names]


def shape_columns(name: str, shapes: Sequence[BaseGeometry], zoom: int = 15) -> list[tuple[str, dict, bool]]:
    """Derived columns for one shape dataset, chosen by geometry type.

    Lines give ``<name>_count`` and ``<name>_length_m``; polygons give
    ``<name>_count``, ``<name>_area_m2`` and ``<name>_density``.
    """
    dims = {int(d) for d in shapely.get_dimensions(np.asarray(shapes, dtype=object))}
    if dims == {1}:
        metrics = [("count", "count", True), ("total_length_m", "length_m", True)]
    elif dims == {2}:
        metrics = [("count", "count", True), ("total_area_m2", "area_m2", True), ("density", "density", False)]
    else:
        raise DataError(f"shape dataset {name!r} mixes geometry types or has points: dims {sorted(dims)}")
    return [(f"{name}_{suffix}", derive_shape_metrics(PolygonShapeDataset(name, list(shapes), m), zoom), add)
            for m, suffix, add in metrics]


def ingest_directory(data_dir, proxy: Mapping[TileId, float] | None) -> FeatureTable:
    """Build the feature table from the standard input file set.

    Expects ``tiles.csv`` and ``landcover.csv``; ``points.csv``, ``zones.csv``,
    ``shapes.csv`` and ``tile_features.csv`` are each optional.
    """
    data_dir = Path(data_dir)
    for required in ("tiles.csv", "landcover.csv"):
        if not (data_dir / required).exists():
            raise DataError(f"missing input file: {data_dir / required}")
    city = read_tiles_csv(data_dir / "tiles.csv")
    universe = sorted(city, key=quadkey)
    columns: list[FeatureColumn] = []
    if (data_dir / "points.csv").exists():
        for ds in read_points_csv(data_dir / "points.csv"):
            vals, _ = aggregate_points(ds, 15)
            columns.append(FeatureColumn(ds.name, qa_pipeline(vals, "points", universe)))
    if (data_dir / "zones.csv").exists():
        for ds in read_zones_csv(data_dir / "zones.csv"):
            vals = interpolate_polygon_metric(ds, 15)
            columns.append(FeatureColumn(ds.name, qa_pipeline(vals, "polygon_metric", universe)))
    if (data_dir / "shapes.csv").exists():
        for name, shapes in read_shapes_csv(data_dir / "shapes.csv").items():
            for col, vals, additive in shape_columns(name, shapes):
                columns.append(FeatureColumn(col, qa_pipeline(vals, "polygon_shape", universe), additive))
    if (data_dir / "tile_features.csv").exists():
        for col in read_tile_features_csv(data_dir / "tile_features.csv"):
            columns.append(FeatureColumn(col.name, qa_pipeline(col.values, "polygon_metric", universe), False))
    landcover = read_landcover_csv(data_dir / "landcover.csv")
    return assemble(columns, proxy, landcover, universe, city)


def write_feature_table(out_dir, table: FeatureTable) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for z in table.zooms:
        p = out_dir / f"features_z{z}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = ["quadkey", "city", "land_cover", *table.feature_names]
            with_y = z == 15 and table.y is not None
            if with_y:
                header.append("y")
            w.writerow(header)
            for i, t in enumerate(table.tiles[z]):
                row = [quadkey(t), table.city[z][i], table.land_cover[z][i], *map(repr, table.X[z][i].tolist())]
                if with_y:
                    row.append(repr(float(table.y[i])))
                w.writerow(row)
        paths.append(p)
    return paths


def read_feature_table(in_dir) -> FeatureTable:
    in_dir = Path(in_dir)
    tiles, X, lc, city = {}, {}, {}, {}
    names = None
    y = None
    for z in MODEL_ZOOMS:
        p = in_dir / f"features_z{z}.csv"
        if not p.exists():
            raise DataError(f"missing input file: {p}")
        with open(p, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        has_y = header[-1] == "y"
        feat = header[3:-1] if has_y else header[3:]
        if names is None:
            names = feat
        elif feat != names:
            raise DataError(f"{p}: feature names differ from zoom-13 header")
        tiles[z] = [parse_quadkey(r[0]) for r in rows]
        city[z] = [r[1] for r in rows]
        lc[z] = [r[2] for r in rows]
        X[z] = np.array([[float(v) for v in r[3:3 + len(feat)]] for r in rows], dtype=float).reshape(len(rows), len(feat))
        if z == 15 and has_y:
            y = np.array([float(r[-1]) for r in rows])
    table = FeatureTable(names, tiles, X, lc, city, y)
    table.validate()
    return table
