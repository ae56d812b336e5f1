"""Deterministic synthetic cities with a known demand function.

Each city is a square block of zoom-15 tiles aligned to the zoom-13 grid.
Raw inputs are written in the same layout real data would use; the target
is then computed from the ingested zoom-15 features and zoom-13 aggregates
so that the ground truth is an exact function of what the model sees:

    y = scale * (k_f * sum_k a_k z(planted_k) + k_c * cross * z(log employees_13) + noise) + offset

Tiles in the left half of each city (region "A") weight the zoom-13 term
fully and damp the fine term by ``region_contrast``; the right half
(region "B") does the reverse; with ``cross_scale = 0`` both halves use the
fine term alone. Night-time lights mark the regions.

The coarse driver varies smoothly across zoom-13 blocks, but each zoom-15
tile scatters widely around its block level, so the level is only
recoverable from the zoom-13 aggregate.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import shapely
from scipy.ndimage import gaussian_filter
from shapely.geometry import LineString, box

from .geotile import TileId, ancestor, centroid, from_mercator, lonlat_to_tile, quadkey, tile_bounds, tile_bounds_mercator, tile_width_m
from .ingest import ingest_directory

CITY_SITES = {
    "vancouver": (49.25, -123.10),
    "calgary": (51.05, -114.07),
    "gta": (43.70, -79.40),
    "ottawa": (45.42, -75.70),
    "montreal": (45.50, -73.57),
}
POINT_FEATURES = (
    "households", "population", "daytime_population", "businesses", "employees",
    "poi_retail", "poi_education", "poi_health", "poi_recreation", "transit_stops",
)
ZONE_FEATURES = (
    "residents_age_0_14", "residents_age_15_64", "residents_age_65p", "income_median",
    "workers_office", "workers_service", "trips_0_3km", "trips_3_7km", "trips_7_10km",
    "trips_10_15km", "dwellings",
)
TILE_FEATURES = ("ntl_mean", "ntl_std", "impervious_fraction", "green_fraction")
PLANTED = ("population", "poi_retail", "buildings_area_m2")
COARSE_DRIVER = "employees"
REGION_MARKER = "ntl_mean"
LAND_COVER = ("built_up", "grassland", "tree_cover")
# per-tile log-spread of the coarse driver around its zoom-13 level
EMPLOYEE_SPREAD = 1.2


@dataclass(frozen=True)
class SyntheticSpec:
    cities: int = 5
    side: int = 32
    coefficients: tuple[float, float, float] = (1.0, 0.8, 0.6)
    cross_scale: float = 1.5
    region_contrast: float = 0.8
    noise: float = 0.3
    noise_corr: float = 0.5  # smoothing length of the noise field, in zoom-15 tiles
    seed: int = 0
    scale: float = 20.0
    traffic_city: int = 0

    def __post_init__(self):
        if not 1 <= self.cities <= len(CITY_SITES):
            raise ValueError(f"cities must be in 1..{len(CITY_SITES)}")
        if self.side < 8 or self.side % 8:
            raise ValueError("side must be a positive multiple of 8 so both regions hold whole zoom-13 tiles")
        if len(self.coefficients) != len(PLANTED):
            raise ValueError(f"need {len(PLANTED)} planted coefficients")
        if self.noise < 0 or self.cross_scale < 0 or not 0 <= self.region_contrast <= 1:
            raise ValueError("noise and cross_scale must be >= 0, region_contrast in [0, 1]")
        if not self.noise_corr > 0:
            raise ValueError("noise_corr must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic keys: {sorted(unknown)}")
        d = dict(d)
        if "coefficients" in d:
            d["coefficients"] = tuple(float(c) for c in d["coefficients"])
        return cls(**d)


@dataclass
class CityGrid:
    name: str
    tiles: list[TileId]  # row-major over the side x side block
    region_a: np.ndarray


@dataclass
class SynthTruth:
    tiles: list[TileId]
    city: list[str]
    region: list[str]
    y: np.ndarray
    fine: np.ndarray
    coarse: np.ndarray
    noise: np.ndarray
    planted: tuple[str, ...] = PLANTED
    extra: dict = field(default_factory=dict)


def _field(rng, side, sigma):
    f = gaussian_filter(rng.normal(size=(side, side)), sigma, mode="reflect")
    return (f - f.mean()) / f.std()


def _zscore(v):
    sd = v.std()
    return (v - v.mean()) / (sd if sd > 0 else 1.0)


def city_grids(spec: SyntheticSpec) -> list[CityGrid]:
    out = []
    for name in list(CITY_SITES)[: spec.cities]:
        lat, lon = CITY_SITES[name]
        t = lonlat_to_tile(lat, lon, 15)
        x0, y0 = t.x - t.x % 32, t.y - t.y % 32
        tiles = [TileId(15, x0 + j, y0 + i) for i in range(spec.side) for j in range(spec.side)]
        cols = np.tile(np.arange(spec.side), spec.side)
        out.append(CityGrid(name, tiles, cols < spec.side // 2))
    return out


def _inside(rng, t: TileId, n: int, margin: float = 0.05):
    """``n`` random Mercator points strictly inside tile ``t``."""
    minx, miny, maxx, maxy = tile_bounds_mercator(t)
    u = rng.uniform(margin, 1 - margin, size=(n, 2))
    return minx + u[:, 0] * (maxx - minx), miny + u[:, 1] * (maxy - miny)


def _lonlat(x, y):
    lon, lat = from_mercator(np.asarray(x), np.asarray(y))
    return np.asarray(lon), np.asarray(lat)


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v: float) -> str:
    return repr(round(float(v), 6))


def write_raw_inputs(spec: SyntheticSpec, out_dir: Path) -> dict:
    """Write tiles, land cover, points, zones, shapes and tile columns."""
    rng = np.random.default_rng(spec.seed)
    grids = city_grids(spec)
    s = spec.side
    tiles_rows, lc_rows, point_rows, zone_rows, shape_rows, tf_rows = [], [], [], [], [], []
    region = {}
    for g in grids:
        urban = _field(rng, s, 4.0).ravel()
        green = _field(rng, s, 3.0).ravel()
        a = g.region_a
        for t, is_a in zip(g.tiles, a):
            region[t] = "A" if is_a else "B"
        # land cover from smooth fields, so clusters have a dominant class
        lc = np.where(urban > -0.3, "built_up", np.where(green > 0, "tree_cover", "grassland"))
        for t, c in zip(g.tiles, lc):
            tiles_rows.append((quadkey(t), g.name))
            lc_rows.append((quadkey(t), c))

        # planted drivers vary smoothly at the scale of a few tiles
        pop = _field(rng, s, 2.0).ravel()
        retail = _field(rng, s, 2.0).ravel()
        built = _field(rng, s, 2.0).ravel()
        # zoom-13 block level for the coarse driver
        block = np.exp(0.8 * _field(rng, s // 4, 1.0).ravel())
        bidx = (np.arange(s * s) // s // 4) * (s // 4) + (np.arange(s * s) % s) // 4
        values = {
            "households": np.exp(0.4 * urban + 0.5 * rng.normal(size=s * s)) * 40,
            "population": np.exp(0.6 * pop + 0.1 * rng.normal(size=s * s)) * 100,
            "daytime_population": np.exp(0.6 * urban + 0.5 * rng.normal(size=s * s)) * 120,
            "businesses": np.exp(0.5 * urban + 0.7 * rng.normal(size=s * s)) * 5,
            "employees": block[bidx] * np.exp(EMPLOYEE_SPREAD * rng.normal(size=s * s)) * 50,
            "poi_retail": np.exp(0.6 * retail + 0.1 * rng.normal(size=s * s)) * 8,
            "poi_education": np.exp(0.2 * urban + 0.8 * rng.normal(size=s * s)) * 2,
            "poi_health": np.exp(0.2 * urban + 0.8 * rng.normal(size=s * s)) * 2,
            "poi_recreation": np.exp(0.2 * green + 0.8 * rng.normal(size=s * s)) * 3,
            "transit_stops": np.exp(0.4 * urban + 0.6 * rng.normal(size=s * s)) * 4,
        }
        for name in POINT_FEATURES:
            for t, v in zip(g.tiles, values[name]):
                px, py = _inside(rng, t, 1)
                lon, lat = _lonlat(px, py)
                point_rows.append((name, _fmt(lat[0]), _fmt(lon[0]), _fmt(v)))

        # zones: zoom-14 lower units nested in zoom-13 upper units
        t14 = sorted({ancestor(t, 14) for t in g.tiles}, key=quadkey)
        t13 = sorted({ancestor(t, 13) for t in g.tiles}, key=quadkey)
        u14 = {}
        for t, v in zip(g.tiles, urban):
            u14.setdefault(ancestor(t, 14), []).append(v)
        for k, name in enumerate(ZONE_FEATURES):
            lower = {}
            for t in t14:
                mu = float(np.mean(u14[t]))
                lower[t] = float(np.exp((0.2 + 0.05 * k) * mu + 0.4 * rng.normal()) * (20 + 10 * k))
            missing = rng.random(len(t14)) < 0.05
            for t in t13:
                kids = [c for c in t14 if ancestor(c, 13) == t]
                zone_rows.append((name, f"{name}:{quadkey(t)}", shapely.to_wkt(box(*tile_bounds(t)), rounding_precision=9),
                                  _fmt(sum(lower[c] for c in kids)), "upper", ""))
            for t, miss in zip(t14, missing):
                zone_rows.append((name, f"{name}:{quadkey(t)}", shapely.to_wkt(box(*tile_bounds(t)), rounding_precision=9),
                                  "" if miss else _fmt(lower[t]), "lower", f"{name}:{quadkey(ancestor(t, 13))}"))

        # buildings and road segments kept inside their tile
        for t, u, b in zip(g.tiles, urban, built):
            minx, miny, maxx, maxy = tile_bounds_mercator(t)
            w = maxx - minx
            nb = 1 + rng.poisson(2.0 * math.exp(0.4 * u))
            # built-up area follows its smooth field and is split among the footprints
            total = (0.15 * w) ** 2 * math.exp(0.6 * b + 0.05 * rng.normal())
            for share in rng.dirichlet(np.full(nb, 4.0)):
                side = math.sqrt(total * share)
                cx, cy = _inside(rng, t, 1, margin=0.2)
                lon, lat = _lonlat([cx[0] - side / 2, cx[0] + side / 2], [cy[0] - side / 2, cy[0] + side / 2])
                geom = box(lon[0], lat[0], lon[1], lat[1])
                shape_rows.append(("buildings", shapely.to_wkt(geom, rounding_precision=9)))
            for _ in range(1 + rng.poisson(1.5 * math.exp(0.3 * u))):
                px, py = _inside(rng, t, 2, margin=0.05)
                lon, lat = _lonlat(px, py)
                shape_rows.append(("roads", shapely.to_wkt(LineString(zip(lon, lat)), rounding_precision=9)))

        ntl = 2.0 * a + 0.5 * urban + 0.3 * rng.normal(size=s * s) + 3.0
        for i, t in enumerate(g.tiles):
            tf_rows.append((
                quadkey(t), _fmt(ntl[i]), _fmt(abs(0.3 + 0.1 * rng.normal())),
                _fmt(1 / (1 + math.exp(-urban[i]))), _fmt(1 / (1 + math.exp(-green[i]))),
            ))

    out_dir.mkdir(parents=True, exist_ok=True)
    _write(out_dir / "tiles.csv", ["quadkey", "city"], tiles_rows)
    _write(out_dir / "landcover.csv", ["quadkey", "class"], lc_rows)
    _write(out_dir / "points.csv", ["name", "lat", "lon", "weight"], point_rows)
    _write(out_dir / "zones.csv", ["name", "zone_id", "wkt", "metric", "level", "parent_id"], zone_rows)
    _write(out_dir / "shapes.csv", ["name", "wkt"], shape_rows)
    _write(out_dir / "tile_features.csv", ["quadkey", *TILE_FEATURES], tf_rows)
    return {"grids": grids, "region": region, "rng": rng}


def target_from_table(spec: SyntheticSpec, table, region: dict[TileId, str], rng) -> SynthTruth:
    """Ground-truth demand as a function of the ingested features."""
    names = table.feature_names
    X15 = table.X[15]
    fine = sum(c * _zscore(X15[:, names.index(f)]) for c, f in zip(spec.coefficients, PLANTED))
    anc = table.ancestor_rows(13)
    drv = np.log(table.X[13][:, names.index(COARSE_DRIVER)])
    coarse = spec.cross_scale * _zscore(drv)[anc]
    is_a = np.array([region[t] == "A" for t in table.tiles[15]])
    # with no cross-scale term there is no coarse signal to shift weight toward
    contrast = spec.region_contrast if spec.cross_scale > 0 else 0.0
    kf = np.where(is_a, 1.0 - contrast, 1.0)
    kc = np.where(is_a, 1.0, 1.0 - contrast)
    # spatially smoothed noise laid out on each city's grid
    noise = np.zeros(len(table.tiles[15]))
    if spec.noise > 0:
        pos = {t: i for i, t in enumerate(table.tiles[15])}
        for g in city_grids(spec):
            f = _field(rng, spec.side, spec.noise_corr).ravel() * spec.noise
            for t, v in zip(g.tiles, f):
                noise[pos[t]] = v
    signal = kf * fine + kc * coarse + noise
    offset = max(60.0, 5.0 - spec.scale * float(signal.min()))
    y = spec.scale * signal + offset
    return SynthTruth(
        list(table.tiles[15]), list(table.city[15]), ["A" if a else "B" for a in is_a],
        y, fine, coarse, noise, extra={"offset": offset},
    )


def write_sites_and_cells(spec: SyntheticSpec, out_dir: Path, truth: SynthTruth, rng) -> None:
    """One small-footprint site per tile carrying the target bandwidth; cells for one city."""
    site_rows, cell_rows = [], []
    traffic_city = list(CITY_SITES)[spec.traffic_city]
    profile = 0.35 + 0.65 * np.exp(-0.5 * ((np.arange(24) - 20) / 3.0) ** 2)
    for k, (t, c, y) in enumerate(zip(truth.tiles, truth.city, truth.y)):
        p = centroid(t)
        w = tile_width_m(t)
        site_rows.append((f"s{k:05d}", repr(p.lat), repr(p.lon), repr(0.3 * w), repr(float(y)), ""))
        if c != traffic_city:
            continue
        level = 0.5 * y * math.exp(0.3 * rng.normal())
        for d in range(3):
            day = math.exp(0.1 * rng.normal())
            for h in range(24):
                v = level * day * profile[h] * math.exp(0.05 * rng.normal())
                cell_rows.append((f"c{k:05d}", repr(p.lat), repr(p.lon), repr(0.45 * w), d, h, _fmt(v)))
    _write(out_dir / "sites.csv", ["site_id", "lat", "lon", "radius_m", "bw_mhz", "eirp_opt"], site_rows)
    _write(out_dir / "cells.csv", ["cell_id", "lat", "lon", "radius_m", "day", "hour", "mbps"], cell_rows)


def write_truth(out_dir: Path, spec: SyntheticSpec, truth: SynthTruth) -> None:
    _write(out_dir / "truth.csv", ["quadkey", "city", "region", "y", "fine", "coarse", "noise"], [
        (quadkey(t), c, r, repr(float(y)), repr(float(f)), repr(float(k)), repr(float(n)))
        for t, c, r, y, f, k, n in zip(truth.tiles, truth.city, truth.region, truth.y, truth.fine, truth.coarse, truth.noise)
    ])
    meta = {**asdict(spec), "planted": list(PLANTED), "coarse_driver": COARSE_DRIVER,
            "region_marker": REGION_MARKER, "offset": truth.extra["offset"]}
    (out_dir / "synth_spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def generate_synthetic(spec: SyntheticSpec, out_dir) -> SynthTruth:
    """Write the full input file set plus ``truth.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    raw = write_raw_inputs(spec, out_dir)
    table = ingest_directory(out_dir, proxy=None)
    truth = target_from_table(spec, table, raw["region"], raw["rng"])
    write_sites_and_cells(spec, out_dir, truth, raw["rng"])
    write_truth(out_dir, spec, truth)
    return truth


def read_truth(path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        return {r["quadkey"]: r for r in csv.DictReader(fh)}
