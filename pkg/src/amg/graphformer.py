"""Multi-head graph attention wrapped in a pre-norm residual block.

Scoring follows the GATv2 ordering: node features are projected first,
passed through LeakyReLU, and only then reduced by the attention vector.
Per head the projection W maps d_h -> d_h/heads and the attention vector
has one half for the edge's target and one for its source, so the score
of edge (j -> i) is

    a_tgt . LeakyReLU(W h_i)  +  a_src . LeakyReLU(W h_j)

which is the attention vector applied to LeakyReLU of the concatenation
[h_i || h_j] projected blockwise by W. Attention weights are a softmax
over each node's in-neighborhood; the mixed value is the weighted sum of
projected sources (no extra nonlinearity - the block's FFN provides it),
heads concatenated and passed through an output projection.

The block itself is norm -> attention -> residual -> norm -> FFN ->
residual, with a GELU two-layer FFN at 2x hidden width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import GraphTopology, build_physics_graph

__all__ = [
    "GraphAttentionParams",
    "GraphFormerBlockParams",
    "attention_scores",
    "graph_attention",
    "graphformer_block",
    "init_attention_params",
    "uniform_init",
    "init_block_params",
    "mc_integral_probe",
]


@dataclass
class GraphAttentionParams:
    """Trainable pieces of one multi-head graph attention layer.

    ``w`` packs the per-head projections as column blocks (head h owns
    columns [h*dp, (h+1)*dp) with dp = d_h // heads); ``att_target`` and
    ``att_source`` hold the two halves of each head's attention vector in
    the same block layout. ``w_out`` merges the concatenated heads.
    """

    w: Tensor
    att_target: Tensor
    att_source: Tensor
    w_out: Tensor
    heads: int
    negative_slope: float = 0.2

    def __post_init__(self):
        d_h = self.w.shape[0]
        if d_h % self.heads != 0:
            raise ValueError(f"width {d_h} not divisible by {self.heads} heads")
        if self.w.shape != (d_h, d_h) or self.w_out.shape != (d_h, d_h):
            raise ValueError("projection matrices must be square in the hidden width")
        if self.att_target.shape != (d_h,) or self.att_source.shape != (d_h,):
            raise ValueError("attention vectors must match the hidden width")

    @property
    def d_h(self) -> int:
        return self.w.shape[0]

    def named_tensors(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.att_target", self.att_target
        yield f"{prefix}.att_source", self.att_source
        yield f"{prefix}.w_out", self.w_out


@dataclass
class GraphFormerBlockParams:
    attn: GraphAttentionParams
    norm1_gamma: Tensor
    norm1_beta: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    def named_tensors(self, prefix: str):
        yield from self.attn.named_tensors(f"{prefix}.attn")
        for name in ("norm1_gamma", "norm1_beta", "norm2_gamma", "norm2_beta",
                     "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
            yield f"{prefix}.{name}", getattr(self, name)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_attention_params(d_h: int, heads: int, rng: np.random.Generator,
                          negative_slope: float = 0.2) -> GraphAttentionParams:
    """Projection weights uniform in +-1/sqrt(fan_in); attention vectors
    start at zero so training begins from uniform attention."""
    return GraphAttentionParams(
        w=uniform_init(rng, (d_h, d_h), d_h),
        att_target=Tensor(np.zeros(d_h), requires_grad=True),
        att_source=Tensor(np.zeros(d_h), requires_grad=True),
        w_out=uniform_init(rng, (d_h, d_h), d_h),
        heads=heads,
        negative_slope=negative_slope,
    )


def init_block_params(d_h: int, heads: int, rng: np.random.Generator,
                      negative_slope: float = 0.2) -> GraphFormerBlockParams:
    hidden = 2 * d_h
    return GraphFormerBlockParams(
        attn=init_attention_params(d_h, heads, rng, negative_slope),
        norm1_gamma=Tensor(np.ones(d_h), requires_grad=True),
        norm1_beta=Tensor(np.zeros(d_h), requires_grad=True),
        norm2_gamma=Tensor(np.ones(d_h), requires_grad=True),
        norm2_beta=Tensor(np.zeros(d_h), requires_grad=True),
        ffn_w1=uniform_init(rng, (d_h, hidden), d_h),
        ffn_b1=Tensor(np.zeros(hidden), requires_grad=True),
        ffn_w2=uniform_init(rng, (hidden, d_h), hidden),
        ffn_b2=Tensor(np.zeros(d_h), requires_grad=True),
    )


def _edge_scores(h: Tensor, topo: GraphTopology,
                 params: GraphAttentionParams) -> tuple[Tensor, Tensor]:
    """Scores for all edges and heads (E, heads), plus the projection."""
    n, d_h = h.shape
    dp = d_h // params.heads
    projected = ad.matmul(h, params.w)
    activated = ad.leaky_relu(projected, params.negative_slope)
    t_node = (activated * params.att_target).reshape(n, params.heads, dp).sum(axis=2)
    s_node = (activated * params.att_source).reshape(n, params.heads, dp).sum(axis=2)
    scores = (ad.gather_rows(t_node, topo.dst, plan=topo.segment_plan.scatter)
              + ad.gather_rows(s_node, topo.src, plan=topo.source_scatter))
    return scores, projected


def attention_scores(h: Tensor, topo: GraphTopology, params: GraphAttentionParams,
                     head: int) -> Tensor:
    """Per-edge score of one head, in the topology's edge order."""
    if not 0 <= head < params.heads:
        raise ValueError(f"head {head} out of range")
    scores, _ = _edge_scores(h, topo, params)
    return ad.slice_cols(scores, head, head + 1).reshape(topo.n_edges)


def graph_attention(h: Tensor, topo: GraphTopology, params: GraphAttentionParams) -> Tensor:
    """Softmax-weighted neighborhood mixing, one pass over all heads."""
    n, d_h = h.shape
    if n != topo.n_nodes:
        raise ValueError(f"feature rows ({n}) must match topology nodes ({topo.n_nodes})")
    dp = d_h // params.heads
    e = topo.n_edges
    plan = topo.segment_plan

    scores, projected = _edge_scores(h, topo, params)
    alpha = ad.segment_softmax(scores, topo.dst, n, plan=plan)
    values = ad.gather_rows(projected, topo.src, plan=topo.source_scatter)
    weighted = (alpha.reshape(e, params.heads, 1)
                * values.reshape(e, params.heads, dp)).reshape(e, d_h)
    mixed = ad.segment_sum(weighted, topo.dst, n, plan=plan)
    return ad.matmul(mixed, params.w_out)


def graphformer_block(h: Tensor, topo: GraphTopology,
                      params: GraphFormerBlockParams) -> Tensor:
    """Pre-norm token mixing and feed-forward, each behind a residual."""
    normed = ad.layer_norm(h, params.norm1_gamma, params.norm1_beta)
    y = h + graph_attention(normed, topo, params.attn)
    z = ad.layer_norm(y, params.norm2_gamma, params.norm2_beta)
    ffn = ad.linear(ad.gelu(ad.linear(z, params.ffn_w1, params.ffn_b1)),
                    params.ffn_w2, params.ffn_b2)
    return y + ffn


# ---------------------------------------------------------------------------
# attention-as-integral probe
# ---------------------------------------------------------------------------


def _probe_params(weight: float, att_target: float, att_source: float,
                  negative_slope: float) -> GraphAttentionParams:
    return GraphAttentionParams(
        w=Tensor([[weight]]),
        att_target=Tensor([att_target]),
        att_source=Tensor([att_source]),
        w_out=Tensor([[1.0]]),
        heads=1,
        negative_slope=negative_slope,
    )


def mc_integral_probe(sample_counts, a_fn=None, n_seeds: int = 20,
                      query: float = 0.37, weight: float = 0.9,
                      att_target: float = 0.7, att_source: float = -1.1,
                      negative_slope: float = 0.2,
                      quad_points: int = 10_000, seed0: int = 0) -> dict[int, np.ndarray]:
    """Error of graph attention against quadrature of its kernel integral.

    For each sample count m, the probe scatters m uniform points plus the
    query over [0, 1], runs attention over the complete graph, and
    compares the query's output against a dense trapezoid quadrature of
    the normalized exponential-score kernel applied to ``a_fn``. Returns
    per-m arrays of absolute errors across seeds; the self-normalized
    Monte-Carlo estimate should shrink like m**-0.5.
    """
    if a_fn is None:
        a_fn = lambda x: np.sin(2 * np.pi * x)
    params = _probe_params(weight, att_target, att_source, negative_slope)

    def lrelu(v):
        return np.where(v < 0, negative_slope * v, v)

    # quadrature oracle: shared numpy path, no graph machinery involved
    grid = np.linspace(0.0, 1.0, quad_points)
    a_grid = a_fn(grid)
    score_grid = (att_target * lrelu(weight * a_fn(query))
                  + att_source * lrelu(weight * a_grid))
    boltz = np.exp(score_grid)
    numer = np.trapezoid(boltz * weight * a_grid, grid)
    denom = np.trapezoid(boltz, grid)
    exact = numer / denom

    errors: dict[int, list[float]] = {int(m): [] for m in sample_counts}
    topos: dict[int, GraphTopology] = {}
    for s in range(n_seeds):
        rng = np.random.default_rng(seed0 + s)
        for m in sample_counts:
            m = int(m)
            xs = np.concatenate([[query], rng.uniform(size=m)])
            if m not in topos:
                topos[m] = build_physics_graph(m + 1)
            h = Tensor(a_fn(xs)[:, None])
            out = graph_attention(h, topos[m], params)
            errors[m].append(abs(float(out.data[0, 0]) - exact))
    return {m: np.asarray(v) for m, v in errors.items()}
