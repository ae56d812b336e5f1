"""Graph attention and cross-scale fusion with hand-written gradients.

Edges are held receiver-sorted in CSR layout with a self loop on every node,
so each node's attention softmax runs over one contiguous segment.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix


def leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def dleaky(x, slope):
    return np.where(x > 0, 1.0, slope)


@dataclass(frozen=True)
class ZoomStructure:
    """Receiver-sorted edge list for one zoom, self loops included."""

    n: int
    tgt: np.ndarray
    src: np.ndarray
    w: np.ndarray
    indptr: np.ndarray

    @classmethod
    def from_pairs(cls, n: int, i: np.ndarray, j: np.ndarray, w: np.ndarray) -> "ZoomStructure":
        """Build from undirected pairs stored once; adds both directions and self loops."""
        nodes = np.arange(n, dtype=np.int64)
        tgt = np.concatenate([nodes, i, j]).astype(np.int64)
        src = np.concatenate([nodes, j, i]).astype(np.int64)
        ww = np.concatenate([np.ones(n), w, w]).astype(float)
        order = np.lexsort((src, tgt))
        tgt, src, ww = tgt[order], src[order], ww[order]
        indptr = np.searchsorted(tgt, np.arange(n + 1)).astype(np.int64)
        return cls(n, tgt, src, ww, indptr)

    def neighbours(self, node: int) -> np.ndarray:
        return self.src[self.indptr[node]:self.indptr[node + 1]]


def segment_softmax(e, zs: ZoomStructure):
    """Structural-weighted softmax of edge logits within each receiver segment."""
    starts = zs.indptr[:-1]
    m = np.maximum.reduceat(e, starts)
    ex = zs.w * np.exp(e - m[zs.tgt])
    den = np.add.reduceat(ex, starts)
    return ex / den[zs.tgt]


def gat_forward(H, W, a, zs: ZoomStructure, slope: float):
    """One attention layer: ``h_i' = leaky(sum_j alpha_ij W h_j)``.

    ``a`` has shape ``(2h, 1)``; its halves score receiver and sender.
    Returns the new embeddings and a cache for :func:`gat_backward`.
    """
    h = W.shape[1]
    Z = H @ W
    s1 = Z @ a[:h, 0]
    s2 = Z @ a[h:, 0]
    u = s1[zs.tgt] + s2[zs.src]
    alpha = segment_softmax(leaky(u, slope), zs)
    A = csr_matrix((alpha, zs.src, zs.indptr), shape=(zs.n, zs.n))
    M = A @ Z
    return leaky(M, slope), (H, Z, u, alpha, A, M)


def gat_backward(dout, W, a, zs: ZoomStructure, slope: float, cache):
    """Gradients ``(dH, dW, da)`` of one attention layer."""
    H, Z, u, alpha, A, M = cache
    h = W.shape[1]
    dM = dout * dleaky(M, slope)
    dalpha = np.einsum("ij,ij->i", dM[zs.tgt], Z[zs.src])
    dZ = A.T @ dM
    seg = np.add.reduceat(alpha * dalpha, zs.indptr[:-1])
    du = alpha * (dalpha - seg[zs.tgt]) * dleaky(u, slope)
    ds1 = np.bincount(zs.tgt, weights=du, minlength=zs.n)
    ds2 = np.bincount(zs.src, weights=du, minlength=zs.n)
    dZ = dZ + np.outer(ds1, a[:h, 0]) + np.outer(ds2, a[h:, 0])
    da = np.concatenate([Z.T @ ds1, Z.T @ ds2])[:, None]
    dW = H.T @ dZ
    dH = dZ @ W.T
    return dH, dW, da


def gate_softmax(S, mask):
    """Row softmax of gate logits over available zooms only."""
    S = np.where(mask, S, -np.inf)
    S = S - S.max(axis=1, keepdims=True)
    P = np.where(mask, np.exp(S), 0.0)
    return P / P.sum(axis=1, keepdims=True)


def fuse_forward(E: list[np.ndarray], avail: list[np.ndarray], Wz: list[np.ndarray], q: np.ndarray):
    """Node-adaptive softmax gate over per-zoom embeddings.

    ``E[k]`` holds zoom ``k``'s embedding aligned to the prediction nodes and
    ``avail[k]`` marks nodes that have an ancestor at that zoom; missing
    zooms drop out of the node's softmax.
    """
    G = [np.tanh(e @ w) for e, w in zip(E, Wz)]
    S = np.column_stack([g @ q[:, 0] for g in G])
    alpha = gate_softmax(S, np.column_stack(avail))
    hf = sum(alpha[:, [k]] * e for k, e in enumerate(E))
    return hf, alpha, (E, G, alpha)


def fuse_backward(dhf, Wz, q, cache):
    """Gradients ``(dE list, dWz list, dq)`` of the fusion gate."""
    E, G, alpha = cache
    dalpha = np.column_stack([np.einsum("ij,ij->i", dhf, e) for e in E])
    dS = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
    dE, dW = [], []
    dq = np.zeros_like(q)
    for k, (e, g, w) in enumerate(zip(E, G, Wz)):
        dq[:, 0] += g.T @ dS[:, k]
        dpre = np.outer(dS[:, k], q[:, 0]) * (1.0 - g**2)
        dW.append(e.T @ dpre)
        dE.append(alpha[:, [k]] * dhf + dpre @ w.T)
    return dE, dW, dq
