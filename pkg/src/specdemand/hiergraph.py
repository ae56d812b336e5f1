"""Hierarchical multi-resolution tile graph.

Nodes are the tiles of every zoom in a :class:`FeatureTable`, numbered
zoom by zoom (coarsest first) in table row order. Same-zoom 8-neighbours
are joined by Gaussian-weighted edges on centroid distance; each tile is
joined to its parent one zoom up with a unit-weight edge.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import DataError
from .geotile import EARTH_RADIUS_M, TileId, centroid, haversine, neighbors8, parent, parse_quadkey, quadkey
from .ingest import FeatureTable


@dataclass(frozen=True)
class HierGraph:
    zooms: tuple[int, ...]
    tiles: dict[int, list[TileId]]
    offsets: dict[int, int]
    intra_src: np.ndarray
    intra_dst: np.ndarray
    intra_w: np.ndarray
    inter_child: np.ndarray
    inter_parent: np.ndarray
    sigma: dict[int, float]

    @property
    def n_nodes(self) -> int:
        return sum(len(t) for t in self.tiles.values())

    def node(self, tile: TileId) -> int:
        try:
            return self.offsets[tile.zoom] + self._lookup[tile]
        except KeyError:
            raise KeyError(f"tile {tile} is not in the graph") from None

    def tile(self, node: int) -> TileId:
        for z in self.zooms:
            off = self.offsets[z]
            if off <= node < off + len(self.tiles[z]):
                return self.tiles[z][node - off]
        raise KeyError(f"unknown node {node}")

    def zoom_of(self, node: int) -> int:
        return self.tile(node).zoom

    @property
    def _lookup(self) -> dict[TileId, int]:
        cache = self.__dict__.get("_lookup_cache")
        if cache is None:
            cache = {t: i for z in self.zooms for i, t in enumerate(self.tiles[z])}
            object.__setattr__(self, "_lookup_cache", cache)
        return cache

    def zoom_edges(self, zoom: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Intra edges of one zoom in local row indices, stored once (i < j)."""
        off, n = self.offsets[zoom], len(self.tiles[zoom])
        sel = (self.intra_src >= off) & (self.intra_src < off + n)
        return self.intra_src[sel] - off, self.intra_dst[sel] - off, self.intra_w[sel]


def gaussian_weight(d, sigma):
    return np.exp(-(np.asarray(d, dtype=float) ** 2) / sigma**2)


def default_sigma(tiles: list[TileId]) -> float:
    """Tile width in meters at the mean centroid latitude of ``tiles``."""
    lat = float(np.mean([centroid(t).lat for t in tiles]))
    z = tiles[0].zoom
    return EARTH_RADIUS_M * math.radians(360.0 / (1 << z)) * math.cos(math.radians(lat))


def build_graph(table: FeatureTable, sigma: float | Mapping[int, float] | None = None) -> HierGraph:
    """Build the graph over all zooms present in ``table``.

    ``sigma`` is a single bandwidth in meters, a per-zoom mapping, or None
    for the per-zoom tile-width default.
    """
    zooms = table.zooms
    sig: dict[int, float] = {}
    for z in zooms:
        if not table.tiles[z]:
            raise DataError(f"zoom {z} has no tiles")
        if sigma is None:
            s = default_sigma(table.tiles[z])
        elif isinstance(sigma, Mapping):
            s = float(sigma[z])
        else:
            s = float(sigma)
        if not (math.isfinite(s) and s > 0):
            raise ValueError(f"sigma must be positive, got {s}")
        sig[z] = s

    offsets, off = {}, 0
    for z in zooms:
        offsets[z] = off
        off += len(table.tiles[z])

    src, dst, w = [], [], []
    for z in zooms:
        idx = table.index(z)
        tiles = table.tiles[z]
        pairs = []
        for i, t in enumerate(tiles):
            for u in neighbors8(t):
                j = idx.get(u)
                if j is not None and j > i:
                    pairs.append((i, j))
        if not pairs:
            continue
        a = np.array(pairs, dtype=np.int64)
        ca = np.array([(centroid(tiles[i]).lat, centroid(tiles[i]).lon) for i in range(len(tiles))])
        d = haversine(ca[a[:, 0], 0], ca[a[:, 0], 1], ca[a[:, 1], 0], ca[a[:, 1], 1])
        src.append(a[:, 0] + offsets[z])
        dst.append(a[:, 1] + offsets[z])
        w.append(gaussian_weight(d, sig[z]))

    child, par = [], []
    for z in zooms:
        if z - 1 not in zooms:
            continue
        pidx = table.index(z - 1)
        for i, t in enumerate(table.tiles[z]):
            j = pidx.get(parent(t))
            if j is not None:
                child.append(offsets[z] + i)
                par.append(offsets[z - 1] + j)

    cat = lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dtype=dt)
    return HierGraph(
        zooms=zooms,
        tiles={z: list(table.tiles[z]) for z in zooms},
        offsets=offsets,
        intra_src=cat(src, np.int64),
        intra_dst=cat(dst, np.int64),
        intra_w=cat(w, float),
        inter_child=np.array(child, dtype=np.int64),
        inter_parent=np.array(par, dtype=np.int64),
        sigma=sig,
    )


def neighborhood(g: HierGraph, node: int) -> list[tuple[int, float]]:
    """Same-zoom weighted neighbours of ``node`` sorted by node index."""
    if not 0 <= node < g.n_nodes:
        raise KeyError(f"unknown node {node}")
    a = g.intra_src == node
    b = g.intra_dst == node
    nb = np.concatenate([g.intra_dst[a], g.intra_src[b]])
    wt = np.concatenate([g.intra_w[a], g.intra_w[b]])
    order = np.argsort(nb, kind="stable")
    return [(int(nb[k]), float(wt[k])) for k in order]


def without_hierarchy(g: HierGraph, zoom: int = 15) -> HierGraph:
    """Single-zoom copy of ``g`` with inter-zoom edges removed."""
    s, d, w = g.zoom_edges(zoom)
    return HierGraph(
        zooms=(zoom,),
        tiles={zoom: g.tiles[zoom]},
        offsets={zoom: 0},
        intra_src=s, intra_dst=d, intra_w=w,
        inter_child=np.zeros(0, dtype=np.int64),
        inter_parent=np.zeros(0, dtype=np.int64),
        sigma={zoom: g.sigma[zoom]},
    )


def write_edges_csv(path, g: HierGraph) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["src_quadkey", "dst_quadkey", "kind", "weight"])
        for s, d, w in zip(g.intra_src, g.intra_dst, g.intra_w):
            out.writerow([quadkey(g.tile(int(s))), quadkey(g.tile(int(d))), "intra", repr(float(w))])
        for c, p in zip(g.inter_child, g.inter_parent):
            out.writerow([quadkey(g.tile(int(c))), quadkey(g.tile(int(p))), "inter", "1.0"])


def read_edges_csv(path, table: FeatureTable, sigma: Mapping[int, float]) -> HierGraph:
    """Rebuild a graph over the tiles of ``table`` from an edge CSV."""
    zooms = table.zooms
    offsets, off = {}, 0
    for z in zooms:
        offsets[z] = off
        off += len(table.tiles[z])
    lookup = {t: offsets[z] + i for z in zooms for i, t in enumerate(table.tiles[z])}
    src, dst, w, child, par = [], [], [], [], []
    with open(path, newline="") as fh:
        for k, row in enumerate(csv.DictReader(fh), start=2):
            try:
                a = lookup[parse_quadkey(row["src_quadkey"])]
                b = lookup[parse_quadkey(row["dst_quadkey"])]
            except (KeyError, ValueError):
                raise DataError(f"{path}:{k}: edge endpoint not in the feature table") from None
            if row["kind"] == "intra":
                src.append(a)
                dst.append(b)
                w.append(float(row["weight"]))
            elif row["kind"] == "inter":
                child.append(a)
                par.append(b)
            else:
                raise DataError(f"{path}:{k}: unknown edge kind {row['kind']!r}")
    return HierGraph(
        zooms=zooms,
        tiles={z: list(table.tiles[z]) for z in zooms},
        offsets=offsets,
        intra_src=np.array(src, dtype=np.int64),
        intra_dst=np.array(dst, dtype=np.int64),
        intra_w=np.array(w, dtype=float),
        inter_child=np.array(child, dtype=np.int64),
        inter_parent=np.array(par, dtype=np.int64),
        sigma={int(z): float(s) for z, s in sigma.items()},
    )
