"""Tile-level traffic target and deployed-bandwidth proxy.

Cell throughput is reduced to an average busy-hour value per cell and spread
over the tiles the cell covers in proportion to area overlap. Site bandwidth
is spread the same way, optionally scaled by a relative transmit-power
factor, to give the deployed-bandwidth proxy. The proxy is checked against
the traffic target with a simple OLS fit.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import betainc

from .errors import DataError
from .geotile import CoverageDisk, GeoPoint, TileId, disk_overlaps, parse_quadkey, quadkey

RELIABLE_COVERAGE = 0.5

CoverageModel = Callable[[CoverageDisk, int], Mapping[TileId, float]]


@dataclass
class CellTrafficRecord:
    cell_id: str
    coverage: CoverageDisk
    throughput: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        for key, v in self.throughput.items():
            if not (math.isfinite(v) and v >= 0):
                raise DataError(f"cell {self.cell_id}: bad throughput {v!r} at {key}")


@dataclass
class SiteRecord:
    site_id: str
    coverage: CoverageDisk
    bandwidth_mhz: float
    eirp: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.bandwidth_mhz) and self.bandwidth_mhz > 0):
            raise DataError(f"site {self.site_id}: bandwidth must be positive")
        if self.eirp is not None and not (math.isfinite(self.eirp) and self.eirp > 0):
            raise DataError(f"site {self.site_id}: eirp must be finite and positive")


@dataclass(frozen=True)
class TileTarget:
    tile: TileId
    traffic_mbps: float
    coverage_sum: float

    @property
    def reliable(self) -> bool:
        return self.coverage_sum >= RELIABLE_COVERAGE


@dataclass(frozen=True)
class TileProxy:
    tile: TileId
    deployed_bw: float


@dataclass(frozen=True)
class OlsResult:
    beta0: float
    beta1: float
    r_squared: float
    f_statistic: float
    p_value: float
    n: int


def busy_hour_mean(rec: CellTrafficRecord) -> float:
    """Mean over days of the daily maximum hourly throughput."""
    daily: dict[int, float] = {}
    for (day, _hour), v in rec.throughput.items():
        daily[day] = max(daily.get(day, -math.inf), v)
    if not daily:
        raise DataError(f"cell {rec.cell_id} has no throughput entries")
    return math.fsum(daily[d] for d in sorted(daily)) / len(daily)


def _coverage_table(disks: Sequence[CoverageDisk], tiles: Sequence[TileId], coverage: CoverageModel):
    universe = set(tiles)
    zooms = {t.zoom for t in tiles}
    if len(zooms) > 1:
        raise DataError(f"tiles span several zooms: {sorted(zooms)}")
    zoom = zooms.pop() if zooms else 15
    table = []
    for disk in disks:
        cov = {t: c for t, c in coverage(disk, zoom).items() if t in universe and c > 0}
        table.append(cov)
    return table


def allocate_traffic(
    cells: Sequence[CellTrafficRecord],
    tiles: Sequence[TileId],
    coverage: CoverageModel = disk_overlaps,
) -> list[TileTarget]:
    """Spread each cell's busy-hour load over its covered tiles."""
    table = _coverage_table([c.coverage for c in cells], tiles, coverage)
    traffic = defaultdict(float)
    cov_sum = defaultdict(float)
    for cell, cov in zip(cells, table):
        total = math.fsum(cov.values())
        for t, c in cov.items():
            cov_sum[t] += c
        if total <= 0:
            continue
        load = busy_hour_mean(cell)
        for t in sorted(cov):
            traffic[t] += load * cov[t] / total
    return [TileTarget(t, traffic[t], cov_sum[t]) for t in tiles]


def power_weight(sites: Sequence[SiteRecord]) -> list[float]:
    """Relative power factor per site; 1 for sites without a power value.

    The mean is taken over the sites that report power only.
    """
    if not sites:
        raise DataError("empty site list")
    powers = [s.eirp for s in sites if s.eirp is not None]
    if not powers:
        return [1.0] * len(sites)
    mean = math.fsum(powers) / len(powers)
    return [s.eirp / mean if s.eirp is not None else 1.0 for s in sites]


def build_proxy(
    sites: Sequence[SiteRecord],
    tiles: Sequence[TileId],
    coverage: CoverageModel = disk_overlaps,
) -> list[TileProxy]:
    if not sites:
        return [TileProxy(t, 0.0) for t in tiles]
    phi = power_weight(sites)
    table = _coverage_table([s.coverage for s in sites], tiles, coverage)
    bw = defaultdict(float)
    for site, w, cov in zip(sites, phi, table):
        total = math.fsum(cov.values())
        if total <= 0:
            continue
        for t in sorted(cov):
            bw[t] += site.bandwidth_mhz * cov[t] * w / total
    return [TileProxy(t, bw[t]) for t in tiles]


def f_sf(f: float, d1: float, d2: float) -> float:
    """Upper tail of the F(d1, d2) distribution."""
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return float(betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)))


def ols_validate(pairs: Iterable[tuple[float, float]]) -> OlsResult:
    """Regress traffic on deployed bandwidth: ``T = b0 + b1 * BW``.

    ``pairs`` holds ``(BW_g, T_g)`` over reliable tiles.
    """
    arr = np.asarray(list(pairs), dtype=float).reshape(-1, 2)
    n = arr.shape[0]
    if n < 3:
        raise DataError(f"need at least 3 tiles for OLS, got {n}")
    x, y = arr[:, 0], arr[:, 1]
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx <= 0 or not np.isfinite(sxx):
        raise DataError("regressor has zero variance")
    sxy = float(np.sum((x - xm) * (y - ym)))
    b1 = sxy / sxx
    b0 = ym - b1 * xm
    sst = float(np.sum((y - ym) ** 2))
    sse = float(np.sum((y - b0 - b1 * x) ** 2))
    r2 = 1.0 - sse / sst if sst > 0 else 0.0
    r2 = min(max(r2, 0.0), 1.0)
    f = math.inf if r2 >= 1.0 else r2 / (1.0 - r2) * (n - 2)
    return OlsResult(float(b0), float(b1), r2, f, f_sf(f, 1, n - 2), n)


def validation_pairs(proxy: Sequence[TileProxy], targets: Sequence[TileTarget]) -> list[tuple[float, float]]:
    """Join proxy and target by tile, keeping reliable tiles only."""
    bw = {p.tile: p.deployed_bw for p in proxy}
    return [(bw[t.tile], t.traffic_mbps) for t in targets if t.reliable and t.tile in bw]


# -- CSV interfaces ---------------------------------------------------------

def _disk(row) -> CoverageDisk:
    return CoverageDisk(GeoPoint(float(row["lat"]), float(row["lon"])), float(row["radius_m"]))


def read_cells_csv(path) -> list[CellTrafficRecord]:
    cells: dict[str, CellTrafficRecord] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cid = row["cell_id"]
            if cid not in cells:
                cells[cid] = CellTrafficRecord(cid, _disk(row))
            v = float(row["mbps"])
            if not (math.isfinite(v) and v >= 0):
                raise DataError(f"cell {cid}: bad throughput {row['mbps']!r}")
            cells[cid].throughput[(int(row["day"]), int(row["hour"]))] = v
    return list(cells.values())


def read_sites_csv(path) -> list[SiteRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            eirp = row.get("eirp_opt", "").strip()
            out.append(SiteRecord(row["site_id"], _disk(row), float(row["bw_mhz"]), float(eirp) if eirp else None))
    return out


def write_proxy_csv(path, proxy: Sequence[TileProxy]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quadkey", "deployed_bw"])
        for p in proxy:
            w.writerow([quadkey(p.tile), repr(p.deployed_bw)])


def read_proxy_csv(path) -> list[TileProxy]:
    with open(path, newline="") as fh:
        return [TileProxy(parse_quadkey(r["quadkey"]), float(r["deployed_bw"])) for r in csv.DictReader(fh)]


def write_targets_csv(path, targets: Sequence[TileTarget]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quadkey", "traffic_mbps", "coverage_sum", "reliable"])
        for t in targets:
            w.writerow([quadkey(t.tile), repr(t.traffic_mbps), repr(t.coverage_sum), int(t.reliable)])
