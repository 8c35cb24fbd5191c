"""The full operator: encoder, multi-graph processing layers, decoder.

Each processing layer rebuilds its local and global graphs from the
running node features (positions stay fixed), mixes features through
GraphFormer blocks on both graphs, routes global context through a small
set of fully-connected virtual physics nodes, and finishes with a
feed-forward update. Aggregation onto the physics nodes uses per-node
projection weights normalized by the channelwise feature sum; the same
edge weights scatter the processed virtual nodes back.

Checkpoints are a single file: an 8-byte magic, a little-endian u32
header length, a JSON header (config, parameter names and shapes,
optional optimizer-state table, free-form extras), then the raw float64
little-endian buffers in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import PointSet
from .graphformer import (
    uniform_init,
    GraphFormerBlockParams,
    graphformer_block,
    init_block_params,
)
from .graphs import (
    GraphTopology,
    PositionalPlan,
    build_global_graph,
    build_local_graph,
    build_physics_graph,
)

__all__ = [
    "ModelConfig",
    "LayerParams",
    "AMGModel",
    "aggregate_to_physics",
    "physics_propagate",
    "process_layer",
    "zero_residual_init",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

PHYSICS_EPS = 1e-6
CHECKPOINT_MAGIC = b"AMGCKPT1"


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass
class ModelConfig:
    """Hyperparameters; defaults follow the reference study's best rows."""

    d_h: int = 64
    layers: int = 3
    heads: int = 8
    local_n: int = 1024
    local_k: int = 6
    global_r: float = 0.25
    global_k: int = 4
    physics_m: int = 32
    hf_ratio: float = 2.0
    seed: int = 0
    d_a: int = 1
    d_pos: int = 2
    d_u: int = 1
    negative_slope: float = 0.2
    fps_start: str = "canonical"

    def __post_init__(self):
        if self.d_h % self.heads != 0:
            raise ValueError(f"d_h={self.d_h} must be divisible by heads={self.heads}")
        if self.layers < 1 or self.physics_m < 1:
            raise ValueError("need at least one layer and one physics node")
        if not 0.0 < self.global_r <= 1.0:
            raise ValueError("global_r must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {"kind": "amg", **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = {k: v for k, v in d.items() if k != "kind"}
        valid = {f.name for f in fields(cls)}
        unknown = set(d) - valid
        if unknown:
            raise CheckpointError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LayerParams:
    local: GraphFormerBlockParams
    global_: GraphFormerBlockParams
    physics: GraphFormerBlockParams
    w_v: Tensor                       # (M, d_h, d_h) per-virtual-node projections
    post_norm_gamma: Tensor
    post_norm_beta: Tensor
    post_w1: Tensor
    post_b1: Tensor
    post_w2: Tensor
    post_b2: Tensor

    def named_tensors(self, prefix: str):
        yield from self.local.named_tensors(f"{prefix}.local")
        yield from self.global_.named_tensors(f"{prefix}.global")
        yield from self.physics.named_tensors(f"{prefix}.physics")
        yield f"{prefix}.w_v", self.w_v
        for name in ("post_norm_gamma", "post_norm_beta",
                     "post_w1", "post_b1", "post_w2", "post_b2"):
            yield f"{prefix}.{name}", getattr(self, name)


def _init_layer(cfg: ModelConfig, rng: np.random.Generator) -> LayerParams:
    d = cfg.d_h
    return LayerParams(
        local=init_block_params(d, cfg.heads, rng, cfg.negative_slope),
        global_=init_block_params(d, cfg.heads, rng, cfg.negative_slope),
        physics=init_block_params(d, cfg.heads, rng, cfg.negative_slope),
        w_v=uniform_init(rng, (cfg.physics_m, d, d), d),
        post_norm_gamma=Tensor(np.ones(d), requires_grad=True),
        post_norm_beta=Tensor(np.zeros(d), requires_grad=True),
        post_w1=uniform_init(rng, (d, 2 * d), d),
        post_b1=Tensor(np.zeros(2 * d), requires_grad=True),
        post_w2=uniform_init(rng, (2 * d, d), 2 * d),
        post_b2=Tensor(np.zeros(d), requires_grad=True),
    )


class AMGModel:
    """All learnable parameters plus the configuration that shapes them."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.d_h
        d_in = config.d_a + config.d_pos
        self.enc_w1 = uniform_init(rng, (d_in, d), d_in)
        self.enc_b1 = Tensor(np.zeros(d), requires_grad=True)
        self.enc_w2 = uniform_init(rng, (d, d), d)
        self.enc_b2 = Tensor(np.zeros(d), requires_grad=True)
        self.layers = [_init_layer(config, rng) for _ in range(config.layers)]
        self.dec_w1 = uniform_init(rng, (d, d), d)
        self.dec_b1 = Tensor(np.zeros(d), requires_grad=True)
        self.dec_w2 = uniform_init(rng, (d, config.d_u), d)
        self.dec_b2 = Tensor(np.zeros(config.d_u), requires_grad=True)
        self._physics_topo = build_physics_graph(config.physics_m)

    def named_tensors(self):
        for name in ("enc_w1", "enc_b1", "enc_w2", "enc_b2"):
            yield name, getattr(self, name)
        for i, layer in enumerate(self.layers):
            yield from layer.named_tensors(f"layers.{i}")
        for name in ("dec_w1", "dec_b1", "dec_w2", "dec_b2"):
            yield name, getattr(self, name)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_tensors())

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.zero_grad()

    def config_dict(self) -> dict:
        return self.config.to_dict()

    def positional_plan(self, positions: np.ndarray) -> PositionalPlan:
        cfg = self.config
        return PositionalPlan(positions, cfg.local_n, cfg.local_k, cfg.global_r,
                              cfg.hf_ratio, cfg.fps_start)

    def encode(self, positions: np.ndarray, values: np.ndarray) -> Tensor:
        """Per-node MLP over raw input values concatenated with coordinates."""
        cfg = self.config
        positions = np.asarray(positions, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != cfg.d_pos:
            raise ValueError(f"positions must be (N, {cfg.d_pos})")
        if values.ndim != 2 or values.shape != (positions.shape[0], cfg.d_a):
            raise ValueError(f"values must be (N, {cfg.d_a})")
        x = ad.concat_rows(Tensor(values), Tensor(positions))
        h = ad.gelu(ad.linear(x, self.enc_w1, self.enc_b1))
        return ad.linear(h, self.enc_w2, self.enc_b2)

    def decode(self, h: Tensor) -> Tensor:
        z = ad.gelu(ad.linear(h, self.dec_w1, self.dec_b1))
        return ad.linear(z, self.dec_w2, self.dec_b2)

    def forward(self, positions: np.ndarray, values: np.ndarray,
                plan: PositionalPlan | None = None) -> Tensor:
        h = self.encode(positions, values)
        for layer in self.layers:
            h = process_layer(h, positions, layer, self.config,
                              physics_topo=self._physics_topo, plan=plan)
        return self.decode(h)


def _signsafe(denom: Tensor) -> np.ndarray:
    # +-1 with zeros mapped to +1; constant in the backward pass (the
    # sign is piecewise constant almost everywhere).
    return np.where(denom.data < 0.0, -1.0, 1.0)


def _aggregate_with_aux(h: Tensor, w_v: Tensor, eps: float):
    """Virtual-node features via the Gram-matrix contraction.

    e_ij = (W_v^j h_i) / (sum_i' h_i' + sign-safe eps) channelwise, and
    v_j = sum_i e_ij * h_i. Folding the node sum first gives
    v_j[c] = sum_k W_v[j,c,k] * (h^T h)[c,k] / guard[c], identical
    algebra at O(N d^2 + M d^2) instead of O(N M d^2).
    """
    denom = h.sum(axis=0)
    sign = _signsafe(denom)
    gram = ad.matmul(h.T, h)
    contracted = (w_v * gram).sum(axis=2)             # (M, d_h)
    return ad.div_eps(contracted * sign, denom * sign, eps), (denom, sign)


def aggregate_to_physics(h: Tensor, w_v: Tensor, eps: float = PHYSICS_EPS) -> Tensor:
    """Initialize the M virtual physics nodes from all data nodes."""
    if h.ndim != 2 or h.shape[0] < 1:
        raise ValueError("aggregation needs at least one node")
    v, _ = _aggregate_with_aux(h, w_v, eps)
    return v


def physics_propagate(h_global: Tensor, layer: LayerParams,
                      physics_topo: GraphTopology,
                      eps: float = PHYSICS_EPS) -> Tensor:
    """Aggregate -> process on the complete virtual graph -> scatter back.

    The scatter reuses the aggregation's edge weights: with
    U[c,k] = sum_j v'_j[c] W_v[j,c,k], the per-node update is
    (U h_i) / guard channelwise, added residually onto the input.
    """
    v, (denom, sign) = _aggregate_with_aux(h_global, layer.w_v, eps)
    v_proc = graphformer_block(v, physics_topo, layer.physics)
    m, d = v_proc.shape
    u = (v_proc.reshape(m, d, 1) * layer.w_v).sum(axis=0)   # (d_h, d_h)
    back = ad.div_eps(ad.matmul(h_global, u.T) * sign, denom * sign, eps)
    return h_global + back


def process_layer(h: Tensor, positions: np.ndarray, layer: LayerParams,
                  config: ModelConfig, physics_topo: GraphTopology | None = None,
                  plan: PositionalPlan | None = None) -> Tensor:
    """One multi-graph layer: local block, global block, physics pass, FFN.

    Graphs are rebuilt from the features entering each stage; the
    selection indices and edges are constants on the tape (gradients flow
    through the attention values, not the discrete construction).
    """
    n = h.shape[0]
    local_n = min(config.local_n, n)
    pts = PointSet(positions, features=h.data)
    _, local_topo = build_local_graph(pts, local_n, config.local_k,
                                      config.hf_ratio, config.fps_start, plan=plan)
    h_local = graphformer_block(h, local_topo, layer.local)

    pts_local = PointSet(positions, features=h_local.data)
    _, global_topo = build_global_graph(pts_local, config.global_r, config.global_k,
                                        config.fps_start, plan=plan)
    h_global = graphformer_block(h_local, global_topo, layer.global_)

    if physics_topo is None:
        physics_topo = build_physics_graph(config.physics_m)
    h_phys = physics_propagate(h_global, layer, physics_topo)

    z = ad.layer_norm(h_phys, layer.post_norm_gamma, layer.post_norm_beta)
    ffn = ad.linear(ad.gelu(ad.linear(z, layer.post_w1, layer.post_b1)),
                    layer.post_w2, layer.post_b2)
    return h_phys + ffn


def zero_residual_init(model: AMGModel) -> AMGModel:
    """Zero every residual-branch output so the processor is the identity.

    Attention output projections, second FFN layers, and the physics
    projections all start at zero; predictions then equal
    decode(encode(input)) exactly, a useful known state for testing.
    """
    for layer in model.layers:
        for block in (layer.local, layer.global_, layer.physics):
            block.attn.w_out.data[:] = 0.0
            block.ffn_w2.data[:] = 0.0
            block.ffn_b2.data[:] = 0.0
        layer.w_v.data[:] = 0.0
        layer.post_w2.data[:] = 0.0
        layer.post_b2.data[:] = 0.0
    return model


def parameter_count(config: ModelConfig) -> int:
    """Closed-form size of the parameter table."""
    d = config.d_h
    enc = (config.d_a + config.d_pos) * d + d + d * d + d
    block = 6 * d * d + 9 * d
    layer = 3 * block + config.physics_m * d * d + 4 * d * d + 5 * d
    dec = d * d + d + d * config.d_u + config.d_u
    return enc + config.layers * layer + dec


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------


def _build_model_from_config(config_dict: dict):
    kind = config_dict.get("kind")
    if kind == "amg":
        return AMGModel(ModelConfig.from_dict(config_dict))
    if kind == "mlp":
        from .training import MLPBaseline, MLPConfig
        return MLPBaseline(MLPConfig.from_dict(config_dict))
    raise CheckpointError(f"unknown model kind {kind!r}")


def save_checkpoint(path, model, extra: dict | None = None,
                    opt_state: dict[str, np.ndarray] | None = None) -> None:
    params = list(model.named_tensors())
    opt_items = sorted(opt_state.items()) if opt_state else []
    header = {
        "format_version": 1,
        "config": model.config_dict(),
        "params": [[name, list(t.shape)] for name, t in params],
        "opt": [[name, list(np.shape(arr))] for name, arr in opt_items],
        "extra": extra or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, t in params:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        for _, arr in opt_items:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (model, extra, opt_state).

    Shapes in the file are validated against the parameter table derived
    from the stored configuration before any buffer is accepted.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (header_len,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        if header.get("format_version") != 1:
            raise CheckpointError(f"{path}: unsupported version "
                                  f"{header.get('format_version')}")
        model = _build_model_from_config(header["config"])
        table = list(model.named_tensors())
        stored = [(name, tuple(shape)) for name, shape in header["params"]]
        derived = [(name, t.shape) for name, t in table]
        if stored != derived:
            raise CheckpointError(f"{path}: parameter table mismatch against config")

        def read_array(shape):
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"{path}: truncated buffer")
            return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

        for _, t in table:
            t.data = read_array(t.shape)
        opt_state = {name: read_array(tuple(shape)) for name, shape in header["opt"]}
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    return model, header.get("extra", {}), opt_state
