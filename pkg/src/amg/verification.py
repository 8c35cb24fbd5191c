"""Independent reference implementations and the runnable verify suites.

Everything here deliberately avoids the production code paths it checks:
the dense attention reference materializes the full masked score matrix,
and the physics-propagation reference walks the message-passing
definition with plain loops.
"""

from __future__ import annotations

import math

import numpy as np

from .graphformer import GraphAttentionParams, GraphFormerBlockParams
from .graphs import GraphTopology

__all__ = [
    "dense_attention_reference",
    "graphformer_block_reference",
    "physics_propagate_reference",
]


def dense_attention_reference(h: np.ndarray, topo: GraphTopology,
                              params: GraphAttentionParams) -> np.ndarray:
    """Masked N x N attention, row-softmaxed and applied per head."""
    n, d_h = h.shape
    heads = params.heads
    dp = d_h // heads
    w = params.w.data
    slope = params.negative_slope

    def lrelu(v):
        return np.where(v < 0, slope * v, v)

    mask = np.full((n, n), False)
    mask[topo.dst, topo.src] = True  # row = target, column = source

    out_heads = []
    for head in range(heads):
        cols = slice(head * dp, (head + 1) * dp)
        proj = h @ w[:, cols]
        act = lrelu(proj)
        t_score = act @ params.att_target.data[cols]
        s_score = act @ params.att_source.data[cols]
        scores = t_score[:, None] + s_score[None, :]
        scores = np.where(mask, scores, -np.inf)
        scores = scores - scores.max(axis=1, keepdims=True)
        weights = np.exp(scores) * mask
        weights /= weights.sum(axis=1, keepdims=True)
        out_heads.append(weights @ proj)
    return np.concatenate(out_heads, axis=1) @ params.w_out.data


def _layer_norm_ref(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                    eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gamma * (x - mean) / np.sqrt(var + eps) + beta


def _gelu_ref(x: np.ndarray) -> np.ndarray:
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def graphformer_block_reference(h: np.ndarray, topo: GraphTopology,
                                params: GraphFormerBlockParams) -> np.ndarray:
    """Block forward in plain numpy with dense attention."""
    normed = _layer_norm_ref(h, params.norm1_gamma.data, params.norm1_beta.data)
    y = h + dense_attention_reference(normed, topo, params.attn)
    z = _layer_norm_ref(y, params.norm2_gamma.data, params.norm2_beta.data)
    ffn = _gelu_ref(z @ params.ffn_w1.data + params.ffn_b1.data)
    return y + ffn @ params.ffn_w2.data + params.ffn_b2.data


def physics_propagate_reference(h_global: np.ndarray, w_v: np.ndarray,
                                block: GraphFormerBlockParams,
                                physics_topo: GraphTopology,
                                eps: float = 1e-6) -> np.ndarray:
    """Direct per-edge evaluation of the virtual-node round trip.

    Materializes every e_ij weight vector explicitly: aggregation,
    processing on the complete virtual graph, then the weighted scatter
    back with the same e_ij.
    """
    n, d = h_global.shape
    m = w_v.shape[0]
    denom = h_global.sum(axis=0)
    guard = denom + np.where(denom < 0, -eps, eps)
    e = np.zeros((n, m, d))
    for i in range(n):
        for j in range(m):
            e[i, j] = (w_v[j] @ h_global[i]) / guard
    v = np.zeros((m, d))
    for j in range(m):
        for i in range(n):
            v[j] += e[i, j] * h_global[i]
    v_proc = graphformer_block_reference(v, physics_topo, block)
    out = h_global.copy()
    for i in range(n):
        for j in range(m):
            out[i] += e[i, j] * v_proc[j]
    return out
