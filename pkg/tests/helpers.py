"""Shared fixtures for the model tests and the acceptance suite."""
import numpy as np

from specdemand.hrgat.layers import ZoomStructure
from specdemand.hrgat.model import HrGatConfig, ModelGraph, init_params, loss, forward, backward


def random_structure(rng, n, p=0.3):
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(iu.size) < p
    return ZoomStructure.from_pairs(n, iu[keep], ju[keep], rng.uniform(0.1, 1.0, keep.sum()))


def random_instance(rng, n15=20, n14=6, n13=2, d=3, drop=True):
    """Small three-zoom instance; a few zoom-15 nodes lack coarse ancestors."""
    sizes = {13: n13, 14: n14, 15: n15}
    structure = {z: random_structure(rng, n) for z, n in sizes.items()}
    a14 = rng.integers(0, n14, n15)
    a13 = rng.integers(0, n13, n14)[a14]
    if drop:
        a14[:2] = -1
        a13[:1] = -1
    s = structure[15]
    fwd = s.tgt < s.src
    ancestor = {15: np.arange(n15), 14: a14, 13: a13}
    mg = ModelGraph((13, 14, 15), structure, ancestor, s.tgt[fwd], s.src[fwd])
    X = {z: rng.normal(size=(n, d)) for z, n in sizes.items()}
    y = rng.normal(size=n15)
    mask = rng.random(n15) < 0.7
    mask[0] = True
    return mg, X, y, mask


def full_loss(params, mg, X, y, mask, cfg):
    pred = forward(params, mg, X, cfg)
    return loss(pred.yhat, y, (mg.smooth_i, mg.smooth_j), cfg.lam, mask)


def gradient_check(seed, h=4, step=1e-5):
    """Max entrywise relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    mg, X, y, mask = random_instance(rng)
    cfg = HrGatConfig(hidden=h, layers=2, lam=0.5, seed=seed)
    params = init_params(3, cfg, mg.zooms)
    # push parameters off the tiny-init regime so every path carries signal
    params = {k: v * 2.0 + (0.1 if k == "b_out" else 0.0) for k, v in params.items()}
    pred = forward(params, mg, X, cfg)
    lv = loss(pred.yhat, y, (mg.smooth_i, mg.smooth_j), cfg.lam, mask)
    grads = backward(params, mg, X, cfg, pred, lv.dyhat)
    worst = 0.0
    for name, p in params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            up = full_loss(params, mg, X, y, mask, cfg).total
            p[idx] = old - step
            dn = full_loss(params, mg, X, y, mask, cfg).total
            p[idx] = old
            num[idx] = (up - dn) / (2 * step)
        # floor the denominator at the block's gradient scale so entries that
        # sit at round-off level do not dominate
        floor = max(1e-6, 1e-4 * float(np.max(np.abs(grads[name]))))
        denom = np.maximum(np.maximum(np.abs(num), np.abs(grads[name])), floor)
        worst = max(worst, float(np.max(np.abs(num - grads[name]) / denom)))
    return worst


def grid_table(rng, cities=2, side=16, d=3, coef=None, classes=("built_up", "grassland", "tree_cover")):
    """Feature table over ``cities`` square zoom-15 grids, built without geometry.

    With ``coef`` the target is exactly linear in the zoom-15 features.
    """
    from specdemand.geotile import TileId
    from specdemand.ingest import FeatureColumn, assemble

    tiles, city, lc = [], {}, {}
    for c in range(cities):
        x0, y0 = 9000 + 64 * c, 11000
        for i in range(side):
            for j in range(side):
                t = TileId(15, x0 + j, y0 + i)
                tiles.append(t)
                city[t] = f"city{c}"
                lc[t] = classes[(i // 4 + j // 8 + c) % len(classes)]
    vals = rng.normal(size=(len(tiles), d))
    cols = [FeatureColumn(f"f{k}", dict(zip(tiles, vals[:, k])), additive=bool(k % 2)) for k in range(d)]
    proxy = None
    if coef is not None:
        proxy = dict(zip(tiles, vals @ np.asarray(coef) + 3.0))
    else:
        proxy = dict(zip(tiles, rng.normal(size=len(tiles))))
    return assemble(cols, proxy, lc, tiles, city)
