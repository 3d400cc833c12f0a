"""Block-structured classifier over a mesh hierarchy.

Each feature block is convolution -> ReLU -> pooling and moves the signal
one hierarchy level coarser (two for stride-4 pooling). The flattened
coarsest signal (vertex-major, channel-minor) feeds a dense hidden layer
and a softmax output.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .. import baseline
from ..hierarchy import pool_table
from ..ordering import build_gather_table, support_size
from .layers import (
    ConvFilter,
    LevelMismatch,
    MeshPool,
    ShapeMismatch,
    dense_softmax_ce,
    mesh_conv_grad_vm,
    mesh_conv_vm,
    mesh_pool_grad_vm,
    mesh_pool_vm,
    relu,
    relu_grad,
    softmax,
)

VERTEX = "vertex"
CHEBYSHEV = "chebyshev"


@dataclass(frozen=True)
class BlockSpec:
    filters: int
    k: int = 1
    pool: str = "mean"
    pool_stride: int = 2


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    For ``kind="vertex"`` a block's ``k`` is the ring order of the filter;
    for ``kind="chebyshev"`` it is the polynomial order.
    """

    blocks: tuple = field(default_factory=lambda: tuple(BlockSpec(f) for f in (8, 16, 32, 64)))
    fc_nodes: int = 512
    n_classes: int = 2
    input_level: int = 4
    in_channels: int = 1
    fc_relu: bool = True
    kind: str = VERTEX

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(
            b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks
        ))
        if self.kind not in (VERTEX, CHEBYSHEV):
            raise ValueError(f"unknown model kind {self.kind!r}")
        lvl = self.input_level
        for b in self.blocks:
            if b.pool not in ("mean", "max"):
                raise ValueError(f"unknown pooling mode {b.pool!r}")
            if b.pool_stride not in (2, 4):
                raise ValueError("pool_stride must be 2 or 4")
            if b.filters < 1 or b.k < (1 if self.kind == VERTEX else 0):
                raise ValueError(f"invalid block {b}")
            lvl -= b.pool_stride // 2
        if lvl < 0:
            raise ValueError(f"{len(self.blocks)} blocks need more than {self.input_level} coarser levels")
        if self.fc_nodes < 1 or self.n_classes < 2:
            raise ValueError("fc_nodes must be >= 1 and n_classes >= 2")

    def block_levels(self):
        """(conv level, pooled level) for each block."""
        out = []
        lvl = self.input_level
        for b in self.blocks:
            nxt = lvl - b.pool_stride // 2
            out.append((lvl, nxt))
            lvl = nxt
        return out

    @property
    def output_level(self):
        return self.block_levels()[-1][1] if self.blocks else self.input_level

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["blocks"] = tuple(BlockSpec(**b) for b in d.get("blocks", ()))
        return cls(**d)


def default_spec(input_level=4, n_classes=2):
    return ModelSpec(input_level=input_level, n_classes=n_classes)


def chebyshev_spec(input_level=4, n_classes=2, filters=(8, 16, 32), order=3, fc_nodes=128):
    return ModelSpec(
        blocks=tuple(BlockSpec(f, k=order) for f in filters),
        fc_nodes=fc_nodes,
        n_classes=n_classes,
        input_level=input_level,
        kind=CHEBYSHEV,
    )


@dataclass
class ModelParams:
    convs: list
    fc_weights: np.ndarray
    fc_bias: np.ndarray
    out_weights: np.ndarray
    out_bias: np.ndarray

    def named(self):
        """Ordered name -> array mapping; the arrays are the live parameters."""
        out = {}
        for b, f in enumerate(self.convs):
            out[f"block{b}.weights"] = f.weights
            out[f"block{b}.bias"] = f.bias
        out["fc.weights"] = self.fc_weights
        out["fc.bias"] = self.fc_bias
        out["out.weights"] = self.out_weights
        out["out.bias"] = self.out_bias
        return out

    @classmethod
    def from_named(cls, spec, arrays):
        convs = [
            ConvFilter(b.k, np.array(arrays[f"block{i}.weights"]), np.array(arrays[f"block{i}.bias"]))
            for i, b in enumerate(spec.blocks)
        ]
        return cls(
            convs=convs,
            fc_weights=np.array(arrays["fc.weights"]),
            fc_bias=np.array(arrays["fc.bias"]),
            out_weights=np.array(arrays["out.weights"]),
            out_bias=np.array(arrays["out.bias"]),
        )

    def copy(self):
        return ModelParams(
            convs=[ConvFilter(f.k, f.weights.copy(), f.bias.copy()) for f in self.convs],
            fc_weights=self.fc_weights.copy(),
            fc_bias=self.fc_bias.copy(),
            out_weights=self.out_weights.copy(),
            out_bias=self.out_bias.copy(),
        )

    def astype(self, dtype):
        p = self.copy()
        for f in p.convs:
            f.weights = f.weights.astype(dtype)
            f.bias = f.bias.astype(dtype)
        for name in ("fc_weights", "fc_bias", "out_weights", "out_bias"):
            setattr(p, name, getattr(p, name).astype(dtype))
        return p


def _conv_support(spec, block):
    return support_size(block.k) if spec.kind == VERTEX else block.k + 1


def feature_size(spec, hier):
    n = hier.levels[spec.output_level].n_vertices
    return n * (spec.blocks[-1].filters if spec.blocks else spec.in_channels)


def init_params(spec, hier, seed=0, dtype=np.float64):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)

    def glorot(shape, fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape).astype(dtype)

    convs = []
    cin = spec.in_channels
    for b in spec.blocks:
        s = _conv_support(spec, b)
        w = glorot((s, cin, b.filters), s * cin, s * b.filters)
        convs.append(ConvFilter(b.k, w, np.zeros(b.filters, dtype=dtype)))
        cin = b.filters
    f = feature_size(spec, hier)
    return ModelParams(
        convs=convs,
        fc_weights=glorot((f, spec.fc_nodes), f, spec.fc_nodes),
        fc_bias=np.zeros(spec.fc_nodes, dtype=dtype),
        out_weights=glorot((spec.fc_nodes, spec.n_classes), spec.fc_nodes, spec.n_classes),
        out_bias=np.zeros(spec.n_classes, dtype=dtype),
    )


def zero_params(spec, hier, dtype=np.float64):
    p = init_params(spec, hier, dtype=dtype)
    for arr in p.named().values():
        arr[...] = 0
    return p


@dataclass(frozen=True, eq=False)
class Operators:
    """Per-level convolution operators and per-block pooling operators."""

    convs: dict
    pools: dict


def build_operators(spec, hier):
    convs = {}
    pools = {}
    for b, (lvl, nxt) in zip(spec.blocks, spec.block_levels()):
        if spec.kind == VERTEX:
            key = (lvl, b.k)
            if key not in convs:
                convs[key] = build_gather_table(hier.levels[lvl], b.k)
        else:
            key = (lvl, None)
            if key not in convs:
                convs[key] = baseline.graph_laplacian(hier.levels[lvl])
        pkey = (nxt, b.pool_stride)
        if pkey not in pools:
            table, counts = pool_table(hier, nxt, b.pool_stride)
            pools[pkey] = MeshPool(table, counts, hier.levels[lvl].n_vertices)
    return Operators(convs=convs, pools=pools)


def _conv_key(spec, block, lvl):
    return (lvl, block.k) if spec.kind == VERTEX else (lvl, None)


def _conv_forward(spec, op, filt, x):
    if spec.kind == VERTEX:
        if op.k != filt.k or filt.weights.shape[0] != op.support_size:
            raise ShapeMismatch(f"filter k={filt.k} does not match table k={op.k}")
        return mesh_conv_vm(x, filt.weights, filt.bias, op)
    return baseline.chebyshev_conv_vm(x, op, filt.weights, filt.bias)


def _conv_backward(spec, op, filt, up, x, need_input=True):
    if spec.kind == VERTEX:
        return mesh_conv_grad_vm(up, x, filt.weights, op, need_input)
    return baseline.chebyshev_conv_grad_vm(up, x, op, filt.weights, need_input)


def model_forward(spec, params, ops, x, trace=None):
    """Class probabilities for a (B, N, C) input and the activation cache.

    ``trace``, if a list, receives ``(name, shape)`` for each layer output,
    shapes given batch-first.
    """
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ShapeMismatch(f"input must have shape (B, N, C), got {x.shape}")
    bsz = x.shape[0]
    # internal activations are vertex-major (N, B, C)
    h = np.ascontiguousarray(x.transpose(1, 0, 2))
    cache = {"blocks": []}
    for b, (block, filt, (lvl, nxt)) in enumerate(zip(spec.blocks, params.convs, spec.block_levels())):
        op = ops.convs[_conv_key(spec, block, lvl)]
        n_expected = op.n_vertices if spec.kind == VERTEX else op.n
        if h.shape[0] != n_expected:
            raise LevelMismatch(f"block {b} expects {n_expected} vertices at level {lvl}, got {h.shape[0]}")
        pre = _conv_forward(spec, op, filt, h)
        act = relu(pre)
        pooled = mesh_pool_vm(act, ops.pools[(nxt, block.pool_stride)], block.pool)
        cache["blocks"].append({"input": h, "pre": pre, "act": act})
        if trace is not None:
            trace.append((f"block{b}.conv", (bsz, pre.shape[0], pre.shape[2])))
            trace.append((f"block{b}.pool", (bsz, pooled.shape[0], pooled.shape[2])))
        h = pooled
    # flatten vertex-major, channel-minor per sample
    feats = h.transpose(1, 0, 2).reshape(bsz, -1)
    if feats.shape[1] != params.fc_weights.shape[0]:
        raise ShapeMismatch(f"flattened features have width {feats.shape[1]}, fc expects {params.fc_weights.shape[0]}")
    cache["features"] = feats
    cache["final_shape"] = h.shape
    pre = feats @ params.fc_weights + params.fc_bias
    hidden = relu(pre) if spec.fc_relu else pre
    logits = hidden @ params.out_weights + params.out_bias
    if trace is not None:
        trace.append(("features", feats.shape))
        trace.append(("fc", hidden.shape))
        trace.append(("logits", logits.shape))
    return softmax(logits), cache


def loss_and_grad(spec, params, ops, x, labels, fc_l2=0.0, want_input_grad=False):
    """Mean cross-entropy (+ fc L2 penalty), probabilities and gradients.

    Gradients are returned as a dict keyed like :meth:`ModelParams.named`,
    plus ``"input"`` (shaped like ``x``) when requested.
    """
    x = np.asarray(x)
    _, cache = model_forward(spec, params, ops, x)
    loss, probs, g = dense_softmax_ce(
        cache["features"], params.fc_weights, params.fc_bias, params.out_weights, params.out_bias,
        labels, fc_l2=fc_l2, fc_relu=spec.fc_relu,
    )
    grads = {
        "fc.weights": g["fc_weights"],
        "fc.bias": g["fc_bias"],
        "out.weights": g["out_weights"],
        "out.bias": g["out_bias"],
    }
    nc, bsz, c = cache["final_shape"]
    up = np.ascontiguousarray(g["features"].reshape(bsz, nc, c).transpose(1, 0, 2))
    levels = spec.block_levels()
    for b in range(len(spec.blocks) - 1, -1, -1):
        block = spec.blocks[b]
        lvl, nxt = levels[b]
        cb = cache["blocks"][b]
        up = mesh_pool_grad_vm(up, cb["act"], ops.pools[(nxt, block.pool_stride)], block.pool)
        up = relu_grad(up, cb["pre"])
        op = ops.convs[_conv_key(spec, block, lvl)]
        # the first layer's input gradient is only needed on request
        need = b > 0 or want_input_grad
        up, gw, gb = _conv_backward(spec, op, params.convs[b], up, cb["input"], need)
        grads[f"block{b}.weights"] = gw
        grads[f"block{b}.bias"] = gb
    ordered = {k: grads[k] for k in params.named()}
    if want_input_grad:
        gx = up.transpose(1, 0, 2)
        ordered["input"] = gx[0] if x.ndim == 2 else np.ascontiguousarray(gx)
    return loss, probs, ordered


def predict(spec, params, ops, x, batch_size=256):
    x = np.asarray(x)
    out = []
    for s in range(0, x.shape[0], batch_size):
        p, _ = model_forward(spec, params, ops, x[s : s + batch_size])
        out.append(p)
    return np.concatenate(out) if out else np.zeros((0, spec.n_classes))
