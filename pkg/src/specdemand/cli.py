"""Configuration-driven pipeline runner.

Stages read and write files under two directories: ``data_dir`` holds the
raw inputs (written by ``synth`` for synthetic runs) and ``out_dir``
receives everything the pipeline derives. Each stage records its outputs
with SHA-256 digests in ``out_dir/manifest.json``; wall-clock timings go to
``timings.json`` so the manifest itself stays reproducible.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 invariant failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from . import __version__
from .errors import DataError, DivergenceError, InvariantError
from .evalx import cbcv_folds, check_folds, run_cbcv, run_loco, write_folds_csv, write_report
from .explain import sample_rows, shapley_sampled, write_attribution_csv, write_tile_attribution_csv
from .geotile import MODEL_ZOOMS, quadkey, tile_bounds
from .hiergraph import build_graph, default_sigma, read_edges_csv, write_edges_csv
from .hrgat.estimators import MODEL_NAMES, fit_predict, restore
from .hrgat.model import HrGatConfig, load_checkpoint, save_checkpoint, write_trace_csv
from .ingest import ingest_directory, read_feature_table, read_tiles_csv, write_feature_table
from .proxy import (
    allocate_traffic,
    build_proxy,
    ols_validate,
    read_cells_csv,
    read_proxy_csv,
    read_sites_csv,
    validation_pairs,
    write_proxy_csv,
    write_targets_csv,
)
from .synth import SyntheticSpec, generate_synthetic

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
STAGES = ("proxy", "ingest", "graph", "train", "eval", "explain")
EXPLAIN_TOL = 1e-8


class ConfigError(ValueError):
    """Invalid or unknown configuration values."""


@dataclass
class RunConfig:
    data_dir: str = "data"
    out_dir: str = "out"
    zooms: list = field(default_factory=lambda: list(MODEL_ZOOMS))
    sigma: float | dict | None = None  # meters; None means one tile width per zoom
    sigma_tiles: float | None = None  # alternative: sigma as a multiple of each zoom's tile width
    hidden: int = 32
    layers: int = 2
    slope: float = 0.2
    lam: float = 0.1
    lr: float = 1e-2
    epochs: int = 500
    seed: int = 0
    mode: str = "cbcv"
    test_city: str | None = None
    models: list = field(default_factory=lambda: list(MODEL_NAMES))
    explain_tiles: int = 100
    permutations: int = 20
    synth: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for name in ("hidden", "layers", "epochs", "seed", "explain_tiles", "permutations"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
        for name in ("slope", "lam", "lr"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigError(f"{name} must be a finite number, got {v!r}")
        if not isinstance(self.zooms, (list, tuple)) or sorted(self.zooms) != list(MODEL_ZOOMS):
            raise ConfigError(f"zooms must be exactly {list(MODEL_ZOOMS)}, got {self.zooms!r}")
        self._check_sigma()
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.mode not in ("cbcv", "loco"):
            raise ConfigError(f"mode must be cbcv or loco, got {self.mode!r}")
        if self.mode == "loco" and not self.test_city:
            raise ConfigError("mode loco needs test_city")
        if not self.models or len(set(self.models)) != len(self.models) or set(self.models) - set(MODEL_NAMES):
            raise ConfigError(f"models must be distinct names from {list(MODEL_NAMES)}, got {self.models!r}")
        if self.explain_tiles < 1 or self.permutations < 1:
            raise ConfigError("explain_tiles and permutations must be >= 1")
        if not isinstance(self.synth, dict):
            raise ConfigError("synth must be a mapping")
        try:
            self.synthetic_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"synth: {exc}") from None

    def _check_sigma(self) -> None:
        if self.sigma_tiles is not None:
            v = self.sigma_tiles
            if self.sigma is not None:
                raise ConfigError("set sigma or sigma_tiles, not both")
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not (math.isfinite(v) and v > 0):
                raise ConfigError(f"sigma_tiles must be > 0, got {v!r}")
        s = self.sigma
        if s is None:
            return
        values = s if isinstance(s, dict) else {z: s for z in MODEL_ZOOMS}
        if isinstance(s, dict) and sorted(int(z) for z in s) != list(MODEL_ZOOMS):
            raise ConfigError(f"per-zoom sigma needs keys {list(MODEL_ZOOMS)}")
        for v in values.values():
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not (math.isfinite(v) and v > 0):
                raise ConfigError(f"sigma must be > 0, got {v!r}")

    def sigma_arg(self, table=None):
        if self.sigma_tiles is not None:
            return {z: default_sigma(table.tiles[z]) * float(self.sigma_tiles) for z in table.zooms}
        if isinstance(self.sigma, dict):
            return {int(z): float(v) for z, v in self.sigma.items()}
        return None if self.sigma is None else float(self.sigma)

    def model_config(self) -> HrGatConfig:
        return HrGatConfig(self.hidden, self.layers, float(self.slope), float(self.lam),
                           float(self.lr), self.epochs, self.seed)

    def synthetic_spec(self) -> SyntheticSpec:
        d = dict(self.synth)
        d.setdefault("seed", self.seed)
        return SyntheticSpec.from_dict(d)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def data(self) -> Path:
        return Path(self.data_dir)

    @property
    def out(self) -> Path:
        return Path(self.out_dir)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    d = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            d = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    d.update(overrides or {})
    return RunConfig.from_dict(d)


# ------------------------------------------------------------------ helpers

def _need(path: Path) -> Path:
    if not path.exists():
        raise DataError(f"missing input file: {path}")
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    import scipy
    import shapely
    return {"specdemand": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "shapely": shapely.__version__, "pyyaml": yaml.__version__}


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_table(cfg: RunConfig):
    for z in MODEL_ZOOMS:
        _need(cfg.out / f"features_z{z}.csv")
    table = read_feature_table(cfg.out)
    if table.y is None:
        raise DataError(f"{cfg.out / 'features_z15.csv'} has no target column")
    return table


def _load_graph(cfg: RunConfig, table):
    meta = json.loads(_need(cfg.out / "graph.json").read_text())
    return read_edges_csv(_need(cfg.out / "edges.csv"), table, {int(z): s for z, s in meta["sigma"].items()})


# ------------------------------------------------------------------ stages

def stage_synth(cfg: RunConfig) -> list[Path]:
    cfg.data.mkdir(parents=True, exist_ok=True)
    generate_synthetic(cfg.synthetic_spec(), cfg.data)
    names = ("tiles.csv", "landcover.csv", "points.csv", "zones.csv", "shapes.csv", "tile_features.csv",
             "sites.csv", "cells.csv", "truth.csv", "synth_spec.json")
    return [cfg.data / n for n in names]


def stage_proxy(cfg: RunConfig) -> list[Path]:
    universe = sorted(read_tiles_csv(_need(cfg.data / "tiles.csv")), key=quadkey)
    sites = read_sites_csv(_need(cfg.data / "sites.csv"))
    proxy = build_proxy(sites, universe)
    if not all(math.isfinite(p.deployed_bw) and p.deployed_bw >= 0 for p in proxy):
        raise InvariantError("proxy bandwidth is negative or non-finite")
    out = [cfg.out / "proxy.csv"]
    write_proxy_csv(out[0], proxy)
    cells_path = cfg.data / "cells.csv"
    if cells_path.exists():
        targets = allocate_traffic(read_cells_csv(cells_path), universe)
        ols = ols_validate(validation_pairs(proxy, targets))
        out += [cfg.out / "targets.csv", cfg.out / "ols.json"]
        write_targets_csv(out[1], targets)
        _dump_json(out[2], {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                            for k, v in asdict(ols).items()})
    return out


def stage_ingest(cfg: RunConfig) -> list[Path]:
    proxy = {p.tile: p.deployed_bw for p in read_proxy_csv(_need(cfg.out / "proxy.csv"))}
    table = ingest_directory(cfg.data, proxy)
    return write_feature_table(cfg.out, table)


def stage_graph(cfg: RunConfig) -> list[Path]:
    table = _load_table(cfg)
    g = build_graph(table, cfg.sigma_arg(table))
    out = [cfg.out / "edges.csv", cfg.out / "graph.json"]
    write_edges_csv(out[0], g)
    _dump_json(out[1], {
        "sigma": {str(z): s for z, s in g.sigma.items()},
        "nodes": {str(z): len(g.tiles[z]) for z in g.zooms},
        "intra_edges": int(g.intra_src.size),
        "inter_edges": int(g.inter_child.size),
    })
    return out


def _geojson(table, yhat) -> dict:
    feats = []
    for i, t in enumerate(table.tiles[15]):
        w, s, e, n = tile_bounds(t)
        ring = [[w, s], [e, s], [e, n], [w, n], [w, s]]
        feats.append({"type": "Feature", "geometry": {"type": "Polygon", "coordinates": [ring]},
                      "properties": {"quadkey": quadkey(t), "city": table.city[15][i], "predicted": float(yhat[i])}})
    return {"type": "FeatureCollection", "features": feats}


def stage_train(cfg: RunConfig) -> list[Path]:
    table = _load_table(cfg)
    g = _load_graph(cfg, table)
    mcfg = cfg.model_config()
    fit = fit_predict("hrgat", table, g, np.ones(len(table.tiles[15]), dtype=bool), mcfg)
    out = cfg.out
    save_checkpoint(out / "model", fit.params)
    _dump_json(out / "model_meta.json", {
        "model": fit.name, "feature_names": table.feature_names, "y_mean": fit.y_mean, "y_scale": fit.y_scale,
        "config": asdict(mcfg), "fusion_zooms": list(fit.fusion_zooms),
    })
    write_trace_csv(out / "loss_trace.csv", fit.trace)
    with open(out / "predictions.csv", "w") as fh:
        fh.write("quadkey,city,y,yhat," + ",".join(f"alpha_z{z}" for z in fit.fusion_zooms) + "\n")
        for i, t in enumerate(table.tiles[15]):
            alphas = ",".join(repr(float(a)) for a in fit.fusion[i])
            fh.write(f"{quadkey(t)},{table.city[15][i]},{table.y[i]!r},{float(fit.yhat[i])!r},{alphas}\n")
    _dump_json(out / "predictions.geojson", _geojson(table, fit.yhat))
    return [out / n for n in ("model.bin", "model.manifest.csv", "model_meta.json", "loss_trace.csv",
                              "predictions.csv", "predictions.geojson")]


def stage_eval(cfg: RunConfig) -> list[Path]:
    table = _load_table(cfg)
    g = _load_graph(cfg, table)
    mcfg = cfg.model_config()
    if cfg.mode == "loco":
        report = run_loco(cfg.models, table, g, cfg.test_city, mcfg)
        return write_report(cfg.out, report, prefix="loco_")
    clusters, assignment, folds = cbcv_folds(table)
    check_folds(clusters, assignment, table.tiles[15])
    write_folds_csv(cfg.out / "folds.csv", table, clusters, assignment)
    report = run_cbcv(cfg.models, table, g, folds, mcfg)
    return [cfg.out / "folds.csv", *write_report(cfg.out, report)]


def stage_explain(cfg: RunConfig) -> list[Path]:
    table = _load_table(cfg)
    g = _load_graph(cfg, table)
    meta = json.loads(_need(cfg.out / "model_meta.json").read_text())
    _need(cfg.out / "model.bin")
    _need(cfg.out / "model.manifest.csv")
    params = load_checkpoint(cfg.out / "model")
    if meta["feature_names"] != table.feature_names:
        raise DataError("model_meta.json feature names differ from the feature table")
    mcfg = HrGatConfig(**meta["config"])
    fit = restore("hrgat", params, table, g, np.ones(len(table.tiles[15]), dtype=bool), mcfg)
    if not math.isclose(fit.y_mean, meta["y_mean"], rel_tol=1e-12) or not math.isclose(fit.y_scale, meta["y_scale"], rel_tol=1e-12):
        raise InvariantError("target moments differ from the trained checkpoint")
    X15 = table.X[15]
    rows = sample_rows(X15.shape[0], cfg.explain_tiles, cfg.seed)
    attr = shapley_sampled(fit.variant_predictor(), X15, rows, X15.mean(axis=0), cfg.permutations, cfg.seed,
                           table.feature_names)
    scale = max(1.0, float(np.abs(fit.yhat).max()))
    if np.max(np.abs(attr.fx - fit.yhat[rows])) > EXPLAIN_TOL * scale:
        raise InvariantError("local re-evaluation disagrees with the full forward pass")
    if np.max(np.abs(attr.phi.sum(axis=1) - (attr.fx - attr.fbase))) > EXPLAIN_TOL * scale:
        raise InvariantError("attributions do not sum to the prediction change")
    out = [cfg.out / "attribution.csv", cfg.out / "attribution_tiles.csv"]
    write_attribution_csv(out[0], attr)
    write_tile_attribution_csv(out[1], attr, [quadkey(t) for t in table.tiles[15]])
    return out


STAGE_FUNCS: dict[str, Callable[[RunConfig], list[Path]]] = {
    "synth": stage_synth, "proxy": stage_proxy, "ingest": stage_ingest, "graph": stage_graph,
    "train": stage_train, "eval": stage_eval, "explain": stage_explain,
}


def _record(cfg: RunConfig, stage: str, outputs: list[Path], seconds: float) -> None:
    man_path = cfg.out / "manifest.json"
    digest = cfg.digest()
    man = json.loads(man_path.read_text()) if man_path.exists() else {}
    if man.get("config_hash") != digest:
        man = {"config_hash": digest, "config": asdict(cfg), "seed": cfg.seed,
               "versions": _versions(), "workers": 1, "stages": {}}
    man["stages"][stage] = {"outputs": {Path(p).as_posix(): _sha256(Path(p)) for p in outputs}}
    _dump_json(man_path, man)
    tpath = cfg.out / "timings.json"
    timings = json.loads(tpath.read_text()) if tpath.exists() else {}
    timings[stage] = round(seconds, 3)
    _dump_json(tpath, timings)


def run_stage(cfg: RunConfig, stage: str) -> list[Path]:
    cfg.out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    outputs = STAGE_FUNCS[stage](cfg)
    _record(cfg, stage, outputs, time.perf_counter() - t0)
    return outputs


def run_all(cfg: RunConfig) -> list[Path]:
    outputs = []
    for stage in STAGES:
        outputs += run_stage(cfg, stage)
    return outputs


# ------------------------------------------------------------------ argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


FLAG_KEYS = {
    "data_dir": str, "out_dir": str, "seed": int, "hidden": int, "layers": int, "epochs": int,
    "lr": float, "lam": float, "sigma": float, "sigma_tiles": float, "mode": str, "test_city": str,
}


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (value parsed as YAML); repeatable")
    for key, typ in FLAG_KEYS.items():
        flag = "--" + key.replace("_", "-")
        kwargs = {"choices": ("cbcv", "loco")} if key == "mode" else {}
        common.add_argument(flag, dest=key, type=typ, default=None, **kwargs)
    common.add_argument("--models", default=None, help="comma-separated model names")

    p = _Parser(prog="specdemand", description="Tile-level spectrum demand pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "synth": "write a deterministic synthetic input set into data_dir",
        "proxy": "build the bandwidth proxy and validate it against cell traffic",
        "ingest": "aggregate raw features onto tiles",
        "graph": "build the hierarchical tile graph",
        "train": "fit HR-GAT on every tile and export predictions",
        "eval": "cross-validate the configured models",
        "explain": "Shapley attributions for the trained model",
        "all": "run proxy, ingest, graph, train, eval and explain",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return p


def config_from_args(args) -> RunConfig:
    overrides = _parse_set(args.set)
    for key in FLAG_KEYS:
        v = getattr(args, key)
        if v is not None:
            overrides[key] = v
    if args.models is not None:
        overrides["models"] = [m.strip() for m in args.models.split(",") if m.strip()]
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"specdemand: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "all":
            outputs = run_all(cfg)
        else:
            outputs = run_stage(cfg, args.command)
    except (InvariantError, DivergenceError) as exc:
        print(f"specdemand: invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (DataError, FileNotFoundError) as exc:
        print(f"specdemand: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    for p in outputs:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
