"""HR-GAT parameters, forward and backward passes, loss and training loop.

Every zoom runs its own stack of attention layers on its own features.
Coarse embeddings are carried down to zoom-15 nodes along the parent
chain, gated per node, and read out by a linear head. Gradients are
written out by hand in reverse order of the forward pass.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix

from ..errors import DataError, DivergenceError
from ..geotile import MAX_ZOOM
from ..hiergraph import HierGraph
from .layers import ZoomStructure, fuse_backward, fuse_forward, gat_backward, gat_forward


@dataclass(frozen=True)
class HrGatConfig:
    hidden: int = 32
    layers: int = 2
    slope: float = 0.2
    lam: float = 0.1
    lr: float = 1e-2
    epochs: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1 or self.layers < 0 or self.epochs < 0:
            raise ValueError("hidden >= 1, layers >= 0 and epochs >= 0 required")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError(f"learning rate must be finite and nonnegative, got {self.lr}")


@dataclass(frozen=True)
class ModelGraph:
    """Graph arrays laid out for the model: per-zoom structures plus ancestor maps."""

    zooms: tuple[int, ...]
    structure: dict[int, ZoomStructure]
    # row of each zoom-15 node's ancestor at every zoom, -1 when absent
    ancestor: dict[int, np.ndarray]
    smooth_i: np.ndarray
    smooth_j: np.ndarray

    @property
    def n(self) -> int:
        return self.structure[MAX_ZOOM].n

    def available(self, z: int) -> np.ndarray:
        return self.ancestor[z] >= 0

    def gather(self, z: int) -> csr_matrix:
        """One-hot (n15 x n_z) matrix pulling each node's ancestor row."""
        anc = self.ancestor[z]
        rows = np.flatnonzero(anc >= 0)
        return csr_matrix((np.ones(rows.size), (rows, anc[rows])), shape=(self.n, self.structure[z].n))


def prepare(g: HierGraph) -> ModelGraph:
    if MAX_ZOOM not in g.zooms:
        raise DataError("graph has no zoom-15 nodes")
    structure = {}
    for z in g.zooms:
        i, j, w = g.zoom_edges(z)
        structure[z] = ZoomStructure.from_pairs(len(g.tiles[z]), i, j, w)
    n = len(g.tiles[MAX_ZOOM])
    ancestor = {MAX_ZOOM: np.arange(n, dtype=np.int64)}
    # follow inter edges upward rather than recomputing quadkey parents
    up = {int(c): int(p) for c, p in zip(g.inter_child, g.inter_parent)}
    cur = np.arange(n, dtype=np.int64) + g.offsets[MAX_ZOOM]
    for z in sorted((z for z in g.zooms if z < MAX_ZOOM), reverse=True):
        cur = np.array([up.get(int(c), -1) if c >= 0 else -1 for c in cur], dtype=np.int64)
        ancestor[z] = np.where(cur >= 0, cur - g.offsets[z], -1)
    i, j, _ = g.zoom_edges(MAX_ZOOM)
    return ModelGraph(tuple(g.zooms), structure, ancestor, i.astype(np.int64), j.astype(np.int64))


# ---------------------------------------------------------------- parameters

def param_shapes(d: int, cfg: HrGatConfig, zooms) -> dict[str, tuple[int, int]]:
    h = cfg.hidden
    shapes = {"W_in": (d, h)}
    for z in zooms:
        for l in range(cfg.layers):
            shapes[f"W_{z}_{l}"] = (h, h)
            shapes[f"a_{z}_{l}"] = (2 * h, 1)
        shapes[f"Wz_{z}"] = (h, h)
    shapes["q"] = (h, 1)
    shapes["W_out"] = (h, 1)
    shapes["b_out"] = (1, 1)
    return shapes


def init_params(d: int, cfg: HrGatConfig, zooms) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) draws in a fixed name order; bias starts at 0."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, (r, c) in param_shapes(d, cfg, zooms).items():
        if name == "b_out":
            params[name] = np.zeros((r, c))
            continue
        b = 1.0 / math.sqrt(r)
        params[name] = rng.uniform(-b, b, size=(r, c))
    return params


# ---------------------------------------------------------------- forward / backward

@dataclass
class Prediction:
    yhat: np.ndarray
    fusion: np.ndarray  # (n15, len(zooms)), columns in mg.zooms order
    zooms: tuple[int, ...]
    cache: dict = field(default_factory=dict, repr=False)


def _check(x, where):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite activation in {where}")


def zoom_stack_forward(params, X, zs: ZoomStructure, z: int, cfg: HrGatConfig):
    H = X @ params["W_in"]
    _check(H, f"input embedding (zoom {z})")
    caches = []
    for l in range(cfg.layers):
        H, c = gat_forward(H, params[f"W_{z}_{l}"], params[f"a_{z}_{l}"], zs, cfg.slope)
        _check(H, f"gat layer {l} (zoom {z})")
        caches.append(c)
    return H, caches


def zoom_stack_backward(dH, params, X, zs: ZoomStructure, z: int, cfg: HrGatConfig, caches, grads):
    for l in reversed(range(cfg.layers)):
        dH, dW, da = gat_backward(dH, params[f"W_{z}_{l}"], params[f"a_{z}_{l}"], zs, cfg.slope, caches[l])
        grads[f"W_{z}_{l}"] += dW
        grads[f"a_{z}_{l}"] += da
    grads["W_in"] += X.T @ dH


@np.errstate(over="ignore", invalid="ignore")
def forward(params, mg: ModelGraph, X: dict[int, np.ndarray], cfg: HrGatConfig) -> Prediction:
    """Predict every zoom-15 node. ``X`` maps zoom to its (standardised) features."""
    for z in mg.zooms:
        if X[z].shape != (mg.structure[z].n, params["W_in"].shape[0]):
            raise ValueError(f"zoom {z} features have shape {X[z].shape}")
    emb, stack_caches, E, avail, gathers = {}, {}, [], [], []
    for z in mg.zooms:
        emb[z], stack_caches[z] = zoom_stack_forward(params, X[z], mg.structure[z], z, cfg)
        P = mg.gather(z)
        gathers.append(P)
        E.append(P @ emb[z])
        avail.append(mg.available(z))
    Wz = [params[f"Wz_{z}"] for z in mg.zooms]
    hf, alpha, fcache = fuse_forward(E, avail, Wz, params["q"])
    _check(hf, "fusion")
    yhat = hf @ params["W_out"][:, 0] + params["b_out"][0, 0]
    _check(yhat, "output head")
    cache = {"stack": stack_caches, "fuse": fcache, "hf": hf, "gathers": gathers}
    return Prediction(yhat, alpha, mg.zooms, cache)


@np.errstate(over="ignore", invalid="ignore")
def backward(params, mg: ModelGraph, X, cfg: HrGatConfig, pred: Prediction, dyhat) -> dict[str, np.ndarray]:
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    hf = pred.cache["hf"]
    grads["W_out"][:, 0] = hf.T @ dyhat
    grads["b_out"][0, 0] = dyhat.sum()
    dhf = np.outer(dyhat, params["W_out"][:, 0])
    Wz = [params[f"Wz_{z}"] for z in mg.zooms]
    dE, dWz, dq = fuse_backward(dhf, Wz, params["q"], pred.cache["fuse"])
    grads["q"] += dq
    for k, z in enumerate(mg.zooms):
        grads[f"Wz_{z}"] += dWz[k]
        dH = pred.cache["gathers"][k].T @ dE[k]
        zoom_stack_backward(dH, params, X[z], mg.structure[z], z, cfg, pred.cache["stack"][z], grads)
    return grads


# ---------------------------------------------------------------- loss and training

@dataclass(frozen=True)
class LossValue:
    total: float
    mse: float
    spatial: float
    dyhat: np.ndarray


def loss(yhat, y, edges: tuple[np.ndarray, np.ndarray], lam: float, mask=None) -> LossValue:
    """MSE over masked nodes plus ``lam`` times the mean squared edge difference.

    Only edges with both ends in ``mask`` enter the smoothness term. NaN
    targets outside the mask are ignored.
    """
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    yhat = np.asarray(yhat, dtype=float)
    mask = np.ones(yhat.size, bool) if mask is None else np.asarray(mask, bool)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise DataError("loss mask is empty")
    r = yhat[idx] - np.asarray(y, dtype=float)[idx]
    mse = float(r @ r / idx.size)
    dy = np.zeros_like(yhat)
    dy[idx] = 2.0 * r / idx.size
    i, j = edges
    keep = mask[i] & mask[j]
    i, j = i[keep], j[keep]
    spatial = 0.0
    if i.size:
        diff = yhat[i] - yhat[j]
        spatial = float(diff @ diff / i.size)
        g = 2.0 * lam * diff / i.size
        dy += np.bincount(i, weights=g, minlength=yhat.size) - np.bincount(j, weights=g, minlength=yhat.size)
    return LossValue(mse + lam * spatial, mse, spatial, dy)


def objective(params, mg, X, y, mask, cfg):
    pred = forward(params, mg, X, cfg)
    lv = loss(pred.yhat, y, (mg.smooth_i, mg.smooth_j), cfg.lam, mask)
    return lv, backward(params, mg, X, cfg, pred, lv.dyhat)


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    total: float
    mse: float
    spatial: float


@np.errstate(over="ignore", invalid="ignore")
def train(params, mg: ModelGraph, X, y, mask, cfg: HrGatConfig):
    """Full-batch gradient descent for ``cfg.epochs`` steps.

    The trace holds the loss before each update plus one final row after
    the last update, so it has ``epochs + 1`` rows.
    """
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise DataError("training mask is empty")
    params = {k: v.copy() for k, v in params.items()}
    trace = []
    for epoch in range(cfg.epochs + 1):
        try:
            if epoch < cfg.epochs:
                lv, grads = objective(params, mg, X, y, mask, cfg)
            else:
                pred = forward(params, mg, X, cfg)
                lv = loss(pred.yhat, y, (mg.smooth_i, mg.smooth_j), cfg.lam, mask)
        except DivergenceError as exc:
            raise DivergenceError(f"diverged at epoch {epoch}: {exc}") from None
        if not math.isfinite(lv.total):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        trace.append(TraceRow(epoch, lv.total, lv.mse, lv.spatial))
        if epoch == cfg.epochs:
            break
        for k in params:
            params[k] -= cfg.lr * grads[k]
            if not np.all(np.isfinite(params[k])):
                raise DivergenceError(f"parameter {k} became non-finite at epoch {epoch}")
    return params, trace


# ---------------------------------------------------------------- serialisation

def save_checkpoint(prefix, params: dict[str, np.ndarray]) -> None:
    """Write ``prefix.bin`` (little-endian float64) and ``prefix.manifest.csv``."""
    prefix = Path(prefix)
    offset = 0
    rows = []
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        for name, arr in params.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(a.tobytes())
            rows.append((name, a.shape[0], a.shape[1], offset))
            offset += a.size
    with open(prefix.with_suffix(".manifest.csv"), "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["name", "rows", "cols", "offset"])
        out.writerows(rows)


def load_checkpoint(prefix) -> dict[str, np.ndarray]:
    prefix = Path(prefix)
    flat = np.fromfile(prefix.with_suffix(".bin"), dtype="<f8")
    params = {}
    with open(prefix.with_suffix(".manifest.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            r, c, off = int(row["rows"]), int(row["cols"]), int(row["offset"])
            if off + r * c > flat.size:
                raise DataError(f"checkpoint truncated at {row['name']}")
            params[row["name"]] = flat[off:off + r * c].reshape(r, c).copy()
    return params


def write_trace_csv(path, trace: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["epoch", "total", "mse", "spatial"])
        for t in trace:
            out.writerow([t.epoch, repr(t.total), repr(t.mse), repr(t.spatial)])


# ---------------------------------------------------------------- local re-evaluation

def embeddings(params, mg: ModelGraph, X, cfg: HrGatConfig) -> dict[int, np.ndarray]:
    """Final per-zoom node embeddings, before fusion."""
    return {z: zoom_stack_forward(params, X[z], mg.structure[z], z, cfg)[0] for z in mg.zooms}


def ego_nodes(zs: ZoomStructure, node: int, hops: int) -> np.ndarray:
    seen = {node}
    frontier = [node]
    for _ in range(hops):
        nxt = []
        for u in frontier:
            for v in zs.neighbours(u):
                v = int(v)
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    return np.array(sorted(seen), dtype=np.int64)


def induced(zs: ZoomStructure, nodes: np.ndarray, copies: int = 1) -> ZoomStructure:
    """Subgraph on ``nodes`` repeated ``copies`` times as disjoint blocks."""
    local = np.full(zs.n, -1, dtype=np.int64)
    local[nodes] = np.arange(nodes.size)
    keep = (zs.tgt < zs.src) & (local[zs.tgt] >= 0) & (local[zs.src] >= 0)
    i, j, w = local[zs.tgt[keep]], local[zs.src[keep]], zs.w[keep]
    m = nodes.size
    off = np.repeat(np.arange(copies) * m, i.size)
    return ZoomStructure.from_pairs(m * copies, np.tile(i, copies) + off, np.tile(j, copies) + off, np.tile(w, copies))


def tile_variants(params, mg: ModelGraph, X, cfg: HrGatConfig, node: int, variants, context=None) -> np.ndarray:
    """Outputs at zoom-15 ``node`` when its feature row is replaced by each row of ``variants``.

    Only the node's ``cfg.layers``-hop zoom-15 neighbourhood is re-run, which
    is exact for its output. Coarse-zoom embeddings stay fixed; pass
    ``context`` from :func:`embeddings` to avoid recomputing them.
    """
    variants = np.atleast_2d(np.asarray(variants, dtype=float))
    k = variants.shape[0]
    if context is None:
        context = embeddings(params, mg, X, cfg)
    zs = mg.structure[MAX_ZOOM]
    nodes = ego_nodes(zs, node, cfg.layers)
    pos = int(np.searchsorted(nodes, node))
    m = nodes.size
    sub = induced(zs, nodes, k)
    Xs = np.tile(X[MAX_ZOOM][nodes], (k, 1))
    at = pos + m * np.arange(k)
    Xs[at] = variants
    H, _ = zoom_stack_forward(params, Xs, sub, MAX_ZOOM, cfg)
    E, avail = [], []
    for z in mg.zooms:
        if z == MAX_ZOOM:
            E.append(H[at])
            avail.append(np.ones(k, bool))
        else:
            a = mg.ancestor[z][node]
            E.append(np.repeat(context[z][[max(a, 0)]], k, axis=0) * (a >= 0))
            avail.append(np.full(k, a >= 0))
    Wz = [params[f"Wz_{z}"] for z in mg.zooms]
    hf, _, _ = fuse_forward(E, avail, Wz, params["q"])
    return hf @ params["W_out"][:, 0] + params["b_out"][0, 0]
