"""Acceptance criteria 1-9, each at its stated tolerance and runtime budget.

Criteria 5-8 share one run of the benchmark pipeline (configs/benchmark.yaml);
criterion 9 runs the full pipeline twice on a small config.
"""
import csv
import hashlib
import json
import math
import time
from collections import Counter, defaultdict
from pathlib import Path

import numpy as np
import pytest
import yaml

from helpers import gradient_check, grid_table
from test_evalx import morans_oracle
from test_explain import subset_shapley
from test_ingest import block, lonlat_box, random_merc_rect
from test_proxy import normal_equations_oracle
from specdemand.cli import load_config, main, run_stage
from specdemand.evalx import cbcv_folds, morans_i
from specdemand.geotile import CoverageDisk, GeoPoint, parent, tiles_in_bbox
from specdemand.ingest import PolygonMetricDataset, Zone, interpolate_polygon_metric
from specdemand.proxy import CellTrafficRecord, SiteRecord, allocate_traffic, build_proxy, busy_hour_mean, ols_validate, power_weight
from specdemand.explain import shapley_sampled
from specdemand.synth import PLANTED, read_truth

ROOT = Path(__file__).resolve().parents[1]


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


# ---------------------------------------------------------------- 1-4

def test_c1_gradient_correctness(criterion):
    t0 = time.perf_counter()
    errs = [gradient_check(seed, h=4, step=1e-5) for seed in range(5)]
    ok = max(errs) < 1e-4
    assert criterion(1, "HR-GAT gradients vs central differences", ok,
                     f"5 instances of 28 nodes, max rel err {max(errs):.2e} (< 1e-4)", time.perf_counter() - t0, 60)


def test_c2_oracle_equivalence(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(20)
    worst_ols = 0.0
    for _ in range(50):
        n = int(rng.integers(5, 300))
        x = rng.gamma(2.0, 10.0, n)
        y = 1.5 * x + rng.normal(size=n) * 15 + 4
        res = ols_validate(zip(x, y))
        beta, r2 = normal_equations_oracle(x, y)
        worst_ols = max(worst_ols, rel(res.beta0, beta[0]), rel(res.beta1, beta[1]), rel(res.r_squared, r2))
    worst_moran = 0.0
    for _ in range(30):
        n = int(rng.integers(4, 60))
        iu, ju = np.triu_indices(n, 1)
        keep = rng.random(iu.size) < 0.15
        keep[0] = True
        x = rng.normal(size=n)
        worst_moran = max(worst_moran, rel(morans_i(x, iu[keep], ju[keep]),
                                           morans_oracle(x, list(zip(iu[keep], ju[keep])), n)))
    worst_shap = 0.0
    for d in (1, 2, 3, 4):
        a = rng.normal(size=d)
        f = lambda z: float(a @ z) + 0.7
        X = rng.normal(size=(5, d))
        base = rng.normal(size=d)
        attr = shapley_sampled(lambda r, V: V @ a + 0.7, X, range(5), base, math.factorial(d), seed=d)
        for r in range(5):
            worst_shap = max(worst_shap, float(np.max(np.abs(attr.phi[r] - subset_shapley(f, X[r], base)))))
    ok = worst_ols < 1e-10 and worst_moran < 1e-10 and worst_shap < 1e-9 and attr.exact
    assert criterion(2, "oracle equivalence (OLS, Moran's I, Shapley)", ok,
                     f"OLS rel {worst_ols:.1e}, Moran rel {worst_moran:.1e}, Shapley abs {worst_shap:.1e}",
                     time.perf_counter() - t0, 60)


def _random_disks(rng, k):
    center = GeoPoint(45.42, -75.70)
    return [CoverageDisk(GeoPoint(center.lat + rng.uniform(-0.02, 0.02), center.lon + rng.uniform(-0.03, 0.03)),
                         float(rng.uniform(50, 900))) for _ in range(k)]


def _universe(disks):
    lat = [d.center.lat for d in disks]
    lon = [d.center.lon for d in disks]
    return tiles_in_bbox(min(lon) - 0.02, min(lat) - 0.02, max(lon) + 0.02, max(lat) + 0.02, 15)


def test_c3_conservation(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(30)
    worst = {"traffic": 0.0, "bandwidth": 0.0, "polygon": 0.0}
    for _ in range(100):
        disks = _random_disks(rng, int(rng.integers(1, 8)))
        tiles = _universe(disks)
        cells = [CellTrafficRecord(f"c{k}", d, {(day, h): float(rng.uniform(0, 80)) for day in range(2) for h in range(24)})
                 for k, d in enumerate(disks)]
        out = allocate_traffic(cells, tiles)
        total = math.fsum(busy_hour_mean(c) for c in cells)
        worst["traffic"] = max(worst["traffic"], rel(math.fsum(o.traffic_mbps for o in out), total))
        sites = [SiteRecord(f"s{k}", d, float(rng.uniform(5, 100)), float(rng.uniform(1, 60)) if rng.random() < 0.5 else None)
                 for k, d in enumerate(disks)]
        phi = power_weight(sites)
        bw = build_proxy(sites, tiles)
        expected = math.fsum(s.bandwidth_mhz * p for s, p in zip(sites, phi))
        worst["bandwidth"] = max(worst["bandwidth"], rel(math.fsum(b.deployed_bw for b in bw), expected))
    grid = block(6, 6)
    for _ in range(100):
        rects = [random_merc_rect(rng, grid) for _ in range(int(rng.integers(1, 6)))]
        metrics = rng.uniform(1, 1000, len(rects))
        zones = [Zone(str(i), lonlat_box(r), float(m)) for i, (r, m) in enumerate(zip(rects, metrics))]
        vals = interpolate_polygon_metric(PolygonMetricDataset("m", zones), 15)
        worst["polygon"] = max(worst["polygon"], rel(math.fsum(vals.values()), float(metrics.sum())))
    ok = max(worst.values()) < 1e-9
    assert criterion(3, "conservation of traffic, bandwidth and polygon metrics", ok,
                     ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (100 instances each, < 1e-9)",
                     time.perf_counter() - t0, 60)


def test_c4_fold_separation(criterion):
    t0 = time.perf_counter()
    table = grid_table(np.random.default_rng(40), cities=3, side=32)
    assert len(table.tiles[15]) >= 2000
    clusters, assignment, folds = cbcv_folds(table)
    fold_of = dict(zip(table.tiles[15], folds.tolist()))
    # every cluster's zoom-15 descendants sit in exactly one fold
    split = 0
    members = defaultdict(set)
    for t in table.tiles[15]:
        members[parent(t)].add(fold_of[t])
    for c in clusters:
        if len(set().union(*(members[m] for m in c.members))) != 1:
            split += 1
    per_class = defaultdict(Counter)
    for c in clusters:
        per_class[c.land_cover][assignment.cluster_fold[c.id]] += 1
    spread = max(max(cnt.get(f, 0) for f in range(1, 6)) - min(cnt.get(f, 0) for f in range(1, 6))
                 for cnt in per_class.values())
    covered = Counter(t for c in clusters for t in c.members)
    ok = (split == 0 and spread <= 1 and set(folds.tolist()) == {1, 2, 3, 4, 5}
          and all(v == 1 for v in covered.values()) and len(covered) == len(table.tiles[14]))
    assert criterion(4, "CB-CV fold separation", ok,
                     f"{len(table.tiles[15])} tiles, {len(clusters)} clusters, {split} split, max per-class spread {spread}",
                     time.perf_counter() - t0, 60)


# ---------------------------------------------------------------- 5-8 share the benchmark run

@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    cfg = load_config(ROOT / "configs" / "benchmark.yaml", {"data_dir": str(root / "data"), "out_dir": str(root / "out")})
    t0 = time.perf_counter()
    for stage in ("synth", "proxy", "ingest", "graph", "eval"):
        run_stage(cfg, stage)
    t_cbcv = time.perf_counter() - t0
    t0 = time.perf_counter()
    loco = load_config(ROOT / "configs" / "benchmark.yaml",
                       {"data_dir": str(root / "data"), "out_dir": str(root / "out"), "mode": "loco", "test_city": "ottawa"})
    run_stage(loco, "eval")
    t_loco = time.perf_counter() - t0
    t0 = time.perf_counter()
    run_stage(cfg, "train")
    run_stage(cfg, "explain")
    t_explain = time.perf_counter() - t0
    return {"out": root / "out", "data": root / "data", "t_cbcv": t_cbcv, "t_loco": t_loco, "t_explain": t_explain}


def test_c5_benchmark_ordering(bench, criterion):
    rep = json.loads((bench["out"] / "report.json").read_text())
    agg = rep["aggregate"]
    rmse = {m: agg[m]["median_rmse"] for m in ("hrgat", "plain_gat", "linear")}
    moran = {m: agg[m]["median_morans_i"] for m in ("hrgat", "plain_gat")}
    gain = 1 - rmse["hrgat"] / rmse["plain_gat"]
    n15 = len(read_truth(bench["data"] / "truth.csv"))
    ok = rmse["hrgat"] < rmse["plain_gat"] < rmse["linear"] and gain >= 0.10 and moran["hrgat"] < moran["plain_gat"]
    detail = (f"{n15} tiles; median RMSE hrgat {rmse['hrgat']:.3f} < plain_gat {rmse['plain_gat']:.3f} < linear "
              f"{rmse['linear']:.3f}, gain {gain:.1%} (>= 10%); Moran's I hrgat {moran['hrgat']:.3f} < plain_gat "
              f"{moran['plain_gat']:.3f}")
    assert criterion(5, "synthetic CB-CV ordering", ok, detail, bench["t_cbcv"], 900)


def test_c6_loco_ordering(bench, criterion):
    rep = json.loads((bench["out"] / "loco_report.json").read_text())
    mae = {m: rep["aggregate"][m]["median_mae"] for m in ("hrgat", "plain_gat", "linear")}
    ok = rep["scheme"] == "loco:ottawa" and mae["hrgat"] < mae["plain_gat"] < mae["linear"]
    detail = f"held out ottawa; median MAE hrgat {mae['hrgat']:.3f} < plain_gat {mae['plain_gat']:.3f} < linear {mae['linear']:.3f}"
    assert criterion(6, "LOCO generalization ordering", ok, detail, bench["t_loco"], 900)


def test_c7_node_adaptive_fusion(bench, criterion):
    truth = read_truth(bench["data"] / "truth.csv")
    a13 = {"A": [], "B": []}
    with open(bench["out"] / "fusion.csv") as fh:
        for row in csv.DictReader(fh):
            if row["model"] == "hrgat":
                a13[truth[row["quadkey"]]["region"]].append(float(row["alpha_z13"]))
    mean_a, mean_b = np.mean(a13["A"]), np.mean(a13["B"])
    ok = len(a13["A"]) + len(a13["B"]) == len(truth) and mean_a - mean_b > 0.05
    detail = (f"mean alpha13 over validation tiles: coarse-signal region {mean_a:.3f}, fine-signal region "
              f"{mean_b:.3f}, difference {mean_a - mean_b:.3f} (> 0.05)")
    assert criterion(7, "node-adaptive fusion", ok, detail, bench["t_cbcv"], 900)


def test_c8_planted_feature_recovery(bench, criterion):
    with open(bench["out"] / "attribution.csv") as fh:
        ranks = {r["feature"]: int(r["rank"]) for r in csv.DictReader(fh)}
    ok = all(ranks[f] <= 5 for f in PLANTED)
    detail = ", ".join(f"{f} #{ranks[f]}" for f in PLANTED) + f" (top 5 of {len(ranks)})"
    assert criterion(8, "planted-feature recovery", ok, detail, bench["t_explain"], 300)


# ---------------------------------------------------------------- 9

def _digests(d: Path) -> dict[str, str]:
    return {p.relative_to(d).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(d.rglob("*")) if p.is_file() and p.name != "timings.json"}


def test_c9_determinism(tmp_path, monkeypatch, criterion):
    t0 = time.perf_counter()
    small = yaml.safe_load((ROOT / "configs" / "small.yaml").read_text())
    runs = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        (d / "run.yaml").write_text(yaml.safe_dump(small))
        monkeypatch.chdir(d)
        assert main(["synth", "--config", "run.yaml"]) == 0
        assert main(["all", "--config", "run.yaml"]) == 0
        runs.append(_digests(d))
    differ = sorted(k for k in runs[0].keys() | runs[1].keys() if runs[0].get(k) != runs[1].get(k))
    ok = not differ and len(runs[0]) > 20
    detail = f"{len(runs[0])} files compared, {len(differ)} differ" + (f": {differ[:5]}" if differ else "")
    assert criterion(9, "byte-identical reruns of `all`", ok, detail, time.perf_counter() - t0, 600)
