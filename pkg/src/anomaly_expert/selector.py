"""Visual token selection: significance-weighted pooling followed by one cross-attention block."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ExpertParams


@dataclass
class PooledQueries:
    q: Tensor  # [h*w, d_enc]
    pooled_m: Tensor  # [h*w]


def _cell_bounds(g: int, parts: int) -> list[tuple[int, int]]:
    # ceiling partition: the first (g % parts) cells get one extra row/column
    base, extra = divmod(g, parts)
    bounds, lo = [], 0
    for k in range(parts):
        hi = lo + base + (1 if k < extra else 0)
        bounds.append((lo, hi))
        lo = hi
    return bounds


@lru_cache(maxsize=32)
def _pooling_matrix(g: int, h: int, w: int) -> np.ndarray:
    if h * w > g * g or h > g or w > g:
        raise ValueError(f"cannot pool a {g}x{g} grid into {h}x{w} cells")
    P = np.zeros((h * w, g * g))
    for a, (r0, r1) in enumerate(_cell_bounds(g, h)):
        for b, (c0, c1) in enumerate(_cell_bounds(g, w)):
            idx = [r * g + c for r in range(r0, r1) for c in range(c0, c1)]
            P[a * w + b, idx] = 1.0 / len(idx)
    P.setflags(write=False)
    return P


def pooling_matrix(g: int, h: int, w: int) -> np.ndarray:
    """Row-major cell-averaging operator of shape [h*w, g*g]."""
    return _pooling_matrix(g, h, w)


def emphasize_pool(v_final: Tensor, m: Tensor, h: int = 2, w: int = 2) -> PooledQueries:
    """Scale every token by its significance, then average-pool into ``h x w`` cells."""
    t = v_final.shape[0]
    g = math.isqrt(t)
    if g * g != t or m.shape != (t,):
        raise ValueError(f"emphasize_pool: bad shapes {v_final.shape}, {m.shape}")
    if h * w > t:
        raise ValueError(f"emphasize_pool: {h}x{w} cells exceed {t} tokens")
    P = Tensor(pooling_matrix(g, h, w))
    q = ad.matmul(P, ad.scale_rows(v_final, m))
    pooled_m = ad.matmul(m, P, transpose_b=True)
    return PooledQueries(q=q, pooled_m=pooled_m)


def qformer_attend(q: Tensor, v: Tensor, params: ExpertParams, residual: bool = True) -> Tensor:
    """Multi-head cross-attention with ``q`` as queries and ``v`` as keys and values."""
    de = params.config.d_enc
    if q.shape[-1] != de or v.shape[-1] != de:
        raise ValueError(f"qformer_attend: expected width {de}, got {q.shape} and {v.shape}")
    nh = params.config.n_heads
    dh = de // nh
    Q = ad.linear(q, params["qformer.wq.weight"], params["qformer.wq.bias"])
    K = ad.linear(v, params["qformer.wk.weight"], params["qformer.wk.bias"])
    V = ad.linear(v, params["qformer.wv.weight"], params["qformer.wv.bias"])
    heads = []
    for k in range(nh):
        lo, hi = k * dh, (k + 1) * dh
        logits = ad.scale(ad.matmul(ad.cols(Q, lo, hi), ad.cols(K, lo, hi), transpose_b=True), 1.0 / math.sqrt(dh))
        heads.append(ad.matmul(ad.softmax_rows(logits), ad.cols(V, lo, hi)))
    out = ad.linear(ad.concat(heads, axis=1), params["qformer.wo.weight"], params["qformer.wo.bias"])
    return ad.add(out, q) if residual else out


def select_tokens(v_final: np.ndarray, m: Tensor, params: ExpertParams) -> tuple[list[Tensor], list[Tensor]]:
    """Apply pooling and attention to every crop (crop 0 included).

    ``v_final`` is [n_crops, g*g, d_enc]; ``m`` is the averaged significance
    flattened to [n_crops * g*g].  Returns per-crop selected tokens and pooled maps.
    """
    n, t, _ = v_final.shape
    cfg = params.config
    selected, pooled = [], []
    for j in range(n):
        vj = Tensor(v_final[j])
        pq = emphasize_pool(vj, ad.rows(m, j * t, (j + 1) * t), cfg.pool_h, cfg.pool_w)
        selected.append(qformer_attend(pq.q, vj, params))
        pooled.append(pq.pooled_m)
    return selected, pooled
