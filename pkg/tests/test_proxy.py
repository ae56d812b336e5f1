import math

import numpy as np
import pytest
from scipy.integrate import quad

from specdemand.errors import DataError
from specdemand.geotile import CoverageDisk, TileId, centroid, disk_overlaps, tile_width_m
from specdemand.proxy import (
    CellTrafficRecord,
    SiteRecord,
    TileProxy,
    TileTarget,
    allocate_traffic,
    build_proxy,
    busy_hour_mean,
    f_sf,
    ols_validate,
    power_weight,
    read_cells_csv,
    read_proxy_csv,
    read_sites_csv,
    validation_pairs,
    write_proxy_csv,
    write_targets_csv,
)

T0 = TileId(15, 9300, 11700)
DISK = CoverageDisk(centroid(T0), 100.0)


def cell(tp, cid="c"):
    return CellTrafficRecord(cid, DISK, tp)


def table_model(table):
    """Coverage model returning a fixed tile->fraction map per disk radius."""
    return lambda disk, zoom: table[disk.radius]


def test_busy_hour_examples():
    assert busy_hour_mean(cell({(0, 1): 1, (0, 2): 5, (0, 3): 3})) == 5
    assert busy_hour_mean(cell({(0, 1): 4, (0, 2): 1, (1, 5): 6})) == 5
    const = {(d, h): 2.5 for d in range(3) for h in range(24)}
    assert busy_hour_mean(cell(const)) == 2.5
    with pytest.raises(DataError):
        busy_hour_mean(cell({}))
    with pytest.raises(DataError):
        cell({(0, 0): -1.0})


def test_allocate_single_tile_real_disk():
    w = tile_width_m(T0)
    c = CellTrafficRecord("a", CoverageDisk(centroid(T0), 0.3 * w), {(0, 0): 8.0})
    out = allocate_traffic([c], [T0])
    assert out[0].traffic_mbps == pytest.approx(8.0)
    assert 0 < out[0].coverage_sum < 0.5
    assert not out[0].reliable


def test_allocate_split_two_tiles():
    t1 = TileId(15, 9301, 11700)
    model = table_model({100.0: {T0: 0.5, t1: 0.5}})
    out = allocate_traffic([cell({(0, 0): 10.0})], [T0, t1], coverage=model)
    assert [o.traffic_mbps for o in out] == [5.0, 5.0]
    assert [o.coverage_sum for o in out] == [0.5, 0.5]
    assert all(o.reliable for o in out)


def random_instance(rng, n_tiles=12, n_rec=8):
    tiles = [TileId(15, 9300 + i, 11700) for i in range(n_tiles)]
    table = {}
    for r in range(n_rec):
        k = rng.integers(0, 4)
        chosen = rng.choice(n_tiles, size=k, replace=False)
        table[float(r + 1)] = {tiles[j]: float(rng.uniform(0.01, 1.0)) for j in chosen}
    return tiles, table


def test_traffic_conservation_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        tiles, table = random_instance(rng)
        cells = [
            CellTrafficRecord(f"c{r}", CoverageDisk(DISK.center, r),
                              {(d, h): float(rng.uniform(0, 50)) for d in range(2) for h in range(3)})
            for r in table
        ]
        out = allocate_traffic(cells, tiles, coverage=table_model(table))
        expected = sum(busy_hour_mean(c) for c in cells if table[c.coverage.radius])
        assert sum(o.traffic_mbps for o in out) == pytest.approx(expected, rel=1e-9, abs=1e-12)
        # brute-force per-tile coverage sums
        for o in out:
            assert o.coverage_sum == pytest.approx(sum(tab.get(o.tile, 0.0) for tab in table.values()))


def test_power_weight_examples():
    s = lambda p: SiteRecord("s", DISK, 10.0, p)
    assert power_weight([s(10.0), s(30.0)]) == [0.5, 1.5]
    assert power_weight([s(None), s(None)]) == [1.0, 1.0]
    assert power_weight([s(7.0), s(7.0), s(7.0)]) == [1.0, 1.0, 1.0]
    # mean over reporting sites only
    assert power_weight([s(10.0), s(None), s(30.0)]) == [0.5, 1.0, 1.5]


def test_build_proxy_examples():
    w = tile_width_m(T0)
    site = SiteRecord("s", CoverageDisk(centroid(T0), 0.3 * w), 20.0)
    assert build_proxy([site], [T0])[0].deployed_bw == pytest.approx(20.0)
    t1 = TileId(15, 9301, 11700)
    model = table_model({100.0: {T0: 0.4, t1: 0.4}})
    out = build_proxy([SiteRecord("s", DISK, 20.0)], [T0, t1], coverage=model)
    assert [o.deployed_bw for o in out] == [10.0, 10.0]
    far = TileId(15, 100, 100)
    assert build_proxy([site], [far])[0].deployed_bw == 0.0


def test_bandwidth_conservation_random():
    rng = np.random.default_rng(1)
    for _ in range(100):
        tiles, table = random_instance(rng)
        sites = [
            SiteRecord(f"s{r}", CoverageDisk(DISK.center, r), float(rng.uniform(5, 100)),
                       float(rng.uniform(1, 60)) if rng.random() < 0.5 else None)
            for r in table
        ]
        phi = power_weight(sites)
        out = build_proxy(sites, tiles, coverage=table_model(table))
        expected = sum(s.bandwidth_mhz * p for s, p in zip(sites, phi) if table[s.coverage.radius])
        assert sum(o.deployed_bw for o in out) == pytest.approx(expected, rel=1e-9)
        assert all(o.deployed_bw >= 0 for o in out)


def normal_equations_oracle(x, y):
    A = np.column_stack([np.ones_like(x), x])
    beta = np.linalg.solve(A.T @ A, A.T @ y)
    resid = y - A @ beta
    r2 = 1 - resid @ resid / np.sum((y - y.mean()) ** 2)
    return beta, r2


def test_ols_exact_line():
    x = np.arange(10.0)
    res = ols_validate(zip(x, 2 * x + 1))
    assert res.beta1 == pytest.approx(2.0)
    assert res.beta0 == pytest.approx(1.0)
    assert res.r_squared == 1.0
    assert res.p_value == 0.0


def test_ols_matches_normal_equations():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(5, 200))
        x = rng.normal(size=n) * 10
        y = 3 * x + rng.normal(size=n) * 20
        res = ols_validate(zip(x, y))
        beta, r2 = normal_equations_oracle(x, y)
        assert res.beta0 == pytest.approx(beta[0], rel=1e-10)
        assert res.beta1 == pytest.approx(beta[1], rel=1e-10)
        assert res.r_squared == pytest.approx(r2, rel=1e-10)
        assert res.f_statistic == pytest.approx(r2 / (1 - r2) * (n - 2), rel=1e-10)


def test_ols_null_case():
    rng = np.random.default_rng(4)
    x = np.arange(2000.0)
    y = rng.permutation(x)
    res = ols_validate(zip(x, y))
    assert res.r_squared < 0.01
    assert 0.0 <= res.p_value <= 1.0


def f_density(x, d1, d2):
    logc = (math.lgamma((d1 + d2) / 2) - math.lgamma(d1 / 2) - math.lgamma(d2 / 2)
            + d1 / 2 * math.log(d1 / d2))
    return math.exp(logc + (d1 / 2 - 1) * math.log(x) - (d1 + d2) / 2 * math.log1p(d1 * x / d2))


def test_f_tail_vs_quadrature():
    oracle, _ = quad(f_density, 4.0, math.inf, args=(1, 60))
    assert oracle == pytest.approx(0.0501, abs=1e-4)
    assert f_sf(4.0, 1, 60) == pytest.approx(oracle, rel=1e-7)
    for f, d2 in [(0.5, 10), (2.0, 25), (12.0, 5)]:
        oracle, _ = quad(f_density, f, math.inf, args=(1, d2))
        assert f_sf(f, 1, d2) == pytest.approx(oracle, rel=1e-6)


def test_ols_errors():
    with pytest.raises(DataError):
        ols_validate([(1, 2), (2, 3)])
    with pytest.raises(DataError):
        ols_validate([(1, 2), (1, 3), (1, 4)])


def test_exclusion_rule():
    tiles = [TileId(15, 10, i) for i in range(4)]
    targets = [TileTarget(t, float(i), c) for i, (t, c) in enumerate(zip(tiles, [0.2, 0.5, 0.7, 0.49]))]
    proxy = [TileProxy(t, float(i)) for i, t in enumerate(tiles)]
    pairs = validation_pairs(proxy, targets)
    assert pairs == [(1.0, 1.0), (2.0, 2.0)]
    assert [t.reliable for t in targets] == [False, True, True, False]


def test_csv_roundtrip(tmp_path):
    (tmp_path / "cells.csv").write_text(
        "cell_id,lat,lon,radius_m,day,hour,mbps\n"
        "a,45.0,-75.0,500,0,1,3\n"
        "a,45.0,-75.0,500,0,2,7\n"
        "a,45.0,-75.0,500,1,9,5\n"
    )
    (tmp_path / "sites.csv").write_text(
        "site_id,lat,lon,radius_m,bw_mhz,eirp_opt\n"
        "s1,45.0,-75.0,500,20,\n"
        "s2,45.0,-75.0,800,40,55.5\n"
    )
    cells = read_cells_csv(tmp_path / "cells.csv")
    assert len(cells) == 1 and busy_hour_mean(cells[0]) == 6.0
    sites = read_sites_csv(tmp_path / "sites.csv")
    assert sites[0].eirp is None and sites[1].eirp == 55.5
    tiles = sorted(disk_overlaps(sites[1].coverage, 15))
    proxy = build_proxy(sites, tiles)
    write_proxy_csv(tmp_path / "proxy.csv", proxy)
    write_targets_csv(tmp_path / "targets.csv", allocate_traffic(cells, tiles))
    back = read_proxy_csv(tmp_path / "proxy.csv")
    assert [p.deployed_bw for p in back] == [p.deployed_bw for p in proxy]
    assert (tmp_path / "targets.csv").read_text().splitlines()[0] == "quadkey,traffic_mbps,coverage_sum,reliable"
