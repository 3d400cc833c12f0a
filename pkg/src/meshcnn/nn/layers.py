"""Forward and backward passes of the individual network layers.

Public functions take signals of shape (N, C) or (B, N, C) and return
the same rank. The ``*_vm`` kernels work on vertex-major (N, B, C)
arrays, which the model uses internally: gathers then copy contiguous
B*C blocks and sparse operators apply without transposes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

from ..ordering import support_size

# Fault injection for the gradient checker; 1.0 in normal operation.
CONV_WEIGHT_GRAD_SCALE = 1.0


class ShapeMismatch(ValueError):
    pass


class LevelMismatch(ValueError):
    pass


@dataclass
class ConvFilter:
    """Filter bank of one convolution layer.

    ``weights`` has shape (S, C_in, C_out) where S is the support size for
    a ring filter or the number of polynomial terms for a Chebyshev one.
    """

    k: int
    weights: np.ndarray
    bias: np.ndarray


def to_vm(x):
    """(N, C) or (B, N, C) -> vertex-major (N, B, C), plus a flag for :func:`from_vm`."""
    x = np.asarray(x)
    if x.ndim == 2:
        return x[:, None, :], True
    if x.ndim != 3:
        raise ShapeMismatch(f"signal must have shape (N, C) or (B, N, C), got {x.shape}")
    return x.transpose(1, 0, 2), False


def from_vm(y, single):
    return y[:, 0, :] if single else np.ascontiguousarray(y.transpose(1, 0, 2))


def sparse_apply(mat, x):
    """Sparse (M, N) operator applied to a vertex-major (N, B, C) array."""
    n, b, c = x.shape
    out = mat @ np.ascontiguousarray(x).reshape(n, b * c)
    return np.asarray(out, dtype=x.dtype).reshape(mat.shape[0], b, c)


def gather_vm(x, rows):
    """(N, B, C) -> (R, W, B, C) with zeros in sentinel (-1) slots."""
    n, b, c = x.shape
    pad = np.concatenate([x, np.zeros((1, b, c), dtype=x.dtype)])
    return pad[np.where(rows >= 0, rows, n)]


def _padded(x, rows):
    n = x.shape[0]
    pad = np.concatenate([x, np.zeros((1,) + x.shape[1:], dtype=x.dtype)])
    return pad, np.where(rows >= 0, rows, n)


def mesh_conv_vm(x, weights, bias, table):
    n, b, c = x.shape
    s, cin, cout = weights.shape
    if table.n_vertices != n:
        raise LevelMismatch(f"table has {table.n_vertices} vertices, signal has {n}")
    if s != table.support_size or cin != c or bias.shape != (cout,):
        raise ShapeMismatch(f"filter {weights.shape} does not fit table width {table.support_size} / {c} channels")
    if c == 1:
        # a single 4-d contraction is faster when there is one channel
        g = gather_vm(x, table.rows)  # (N, S, B, 1)
        return np.tensordot(g, weights, axes=([1, 3], [0, 1])) + bias
    pad, rows = _padded(x, table.rows)
    out = pad[rows[:, 0]] @ weights[0]
    for j in range(1, s):
        out += pad[rows[:, j]] @ weights[j]
    return out + bias


def mesh_conv_grad_vm(up, x, weights, table, need_input=True):
    n, b, c = x.shape
    s, _, cout = weights.shape
    if up.shape != (n, b, cout):
        raise ShapeMismatch("upstream gradient shape does not match the forward pass")
    pad, rows = _padded(x, table.rows)
    up2 = up.reshape(n * b, cout)
    grad_w = np.stack([pad[rows[:, j]].reshape(n * b, c).T @ up2 for j in range(s)])
    grad_w *= CONV_WEIGHT_GRAD_SCALE
    grad_b = up.sum(axis=(0, 1))
    if not need_input:
        return None, grad_w, grad_b
    grad_g = np.empty((n, s, b, c), dtype=np.result_type(up, weights))
    for j in range(s):
        np.matmul(up, weights[j].T, out=grad_g[:, j])
    grad_x = table.gather_matrix.T @ grad_g.reshape(n * s, b * c)
    return np.asarray(grad_x, dtype=x.dtype).reshape(n, b, c), grad_w, grad_b


def mesh_conv(x, filt, table):
    """Ring convolution: out[i] = bias + sum_j x[row[i, j]] @ weights[j].

    Sentinel slots of the gather table contribute zero.
    """
    if table.k != filt.k or filt.weights.shape[0] != support_size(filt.k):
        raise ShapeMismatch(f"filter k={filt.k} with {filt.weights.shape[0]} slots does not match table k={table.k}")
    xv, single = to_vm(x)
    return from_vm(mesh_conv_vm(xv, filt.weights, filt.bias, table), single)


def mesh_conv_grad(upstream, x, filt, table):
    """Gradients of :func:`mesh_conv` w.r.t. input, weights and bias."""
    xv, single = to_vm(x)
    uv, _ = to_vm(upstream)
    gx, gw, gb = mesh_conv_grad_vm(uv, xv, filt.weights, table)
    return from_vm(gx, single), gw, gb


def relu(x):
    return np.maximum(x, 0)


def relu_grad(upstream, x):
    return upstream * (x > 0)


@dataclass(frozen=True, eq=False)
class MeshPool:
    """Pooling from a finer level onto a coarser one.

    ``table`` rows list the members of each coarse vertex's neighborhood,
    sorted ascending and padded with -1; ``counts`` holds the true sizes.
    Coarse vertex ``i`` is fine vertex ``i`` (prefix embedding).
    """

    table: np.ndarray
    counts: np.ndarray
    n_fine: int

    @property
    def n_coarse(self):
        return self.table.shape[0]

    @cached_property
    def mean_matrix(self):
        """Sparse (N_coarse, N_fine) averaging operator."""
        rows, cols = np.nonzero(self.table >= 0)
        vals = 1.0 / self.counts[rows]
        return sparse.csr_matrix((vals, (rows, self.table[rows, cols])), shape=(self.n_coarse, self.n_fine))

    @cached_property
    def mean_matrix_t(self):
        return self.mean_matrix.T.tocsr()


def _max_gather_vm(x, pool):
    n, b, c = x.shape
    pad = np.concatenate([x, np.full((1, b, c), -np.inf, dtype=x.dtype)])
    return pad[np.where(pool.table >= 0, pool.table, n)]  # (Nc, W, B, C)


def mesh_pool_vm(x, pool, mode="mean"):
    if x.shape[0] != pool.n_fine:
        raise LevelMismatch(f"pool expects {pool.n_fine} fine vertices, signal has {x.shape[0]}")
    if mode == "mean":
        # center plus mean offset: exact for constant signals, where a
        # weighted sum with weights 1/7 would round
        nc = pool.n_coarse
        xc = x[:nc]
        idx = np.where(pool.table >= 0, pool.table, np.arange(nc)[:, None])
        off = (x[idx] - xc[:, None]).sum(axis=1)
        return xc + off / pool.counts[:, None, None]
    if mode == "max":
        return _max_gather_vm(x, pool).max(axis=1)
    raise ValueError(f"unknown pooling mode {mode!r}")


def mesh_pool_grad_vm(up, x, pool, mode="mean"):
    n, b, c = x.shape
    if up.shape != (pool.n_coarse, b, c):
        raise ShapeMismatch("upstream gradient shape does not match the pooled signal")
    if mode == "mean":
        return sparse_apply(pool.mean_matrix_t, up)
    if mode == "max":
        arg = _max_gather_vm(x, pool).argmax(axis=1)  # (Nc, B, C), first max wins
        src = pool.table[np.arange(pool.n_coarse)[:, None, None], arg]
        flat = (src * b + np.arange(b)[None, :, None]) * c + np.arange(c)[None, None, :]
        grad = np.bincount(flat.ravel(), weights=up.ravel(), minlength=n * b * c)
        return grad.reshape(n, b, c).astype(x.dtype, copy=False)
    raise ValueError(f"unknown pooling mode {mode!r}")


def mesh_pool(x, pool, mode="mean"):
    """Mean or max over each coarse vertex's neighborhood at the finer level."""
    xv, single = to_vm(x)
    return from_vm(mesh_pool_vm(xv, pool, mode), single)


def mesh_pool_grad(upstream, x, pool, mode="mean"):
    """Mean: spread each coarse gradient evenly over its members.
    Max: route it to the first (smallest-index) maximizing member."""
    xv, single = to_vm(x)
    uv, _ = to_vm(upstream)
    return from_vm(mesh_pool_grad_vm(uv, xv, pool, mode), single)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dense_softmax_ce(features, fc_weights, fc_bias, out_weights, out_bias, labels, fc_l2=0.0, fc_relu=True):
    """Hidden dense layer, optional ReLU, output layer and mean cross-entropy.

    Returns ``(loss, probabilities, grads)`` where ``grads`` maps
    ``features``, ``fc_weights``, ``fc_bias``, ``out_weights`` and
    ``out_bias`` to their gradients. The L2 penalty ``fc_l2 * |W_fc|^2``
    is part of the loss.
    """
    features = np.asarray(features)
    labels = np.asarray(labels, dtype=np.int64)
    bsz, f = features.shape
    if fc_weights.shape[0] != f or out_weights.shape[0] != fc_weights.shape[1]:
        raise ShapeMismatch(
            f"features of width {f} do not fit fc weights {fc_weights.shape} / out weights {out_weights.shape}"
        )
    if labels.shape != (bsz,):
        raise ShapeMismatch("one label per sample required")
    pre = features @ fc_weights + fc_bias
    hidden = relu(pre) if fc_relu else pre
    logits = hidden @ out_weights + out_bias
    probs = softmax(logits)
    # log-softmax directly for accuracy at tiny probabilities
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z[np.arange(bsz), labels] - np.log(np.exp(z).sum(axis=1))
    loss = -logp.mean() + fc_l2 * np.sum(fc_weights * fc_weights)

    d_logits = probs.copy()
    d_logits[np.arange(bsz), labels] -= 1.0
    d_logits /= bsz
    grads = {
        "out_weights": hidden.T @ d_logits,
        "out_bias": d_logits.sum(axis=0),
    }
    d_hidden = d_logits @ out_weights.T
    d_pre = relu_grad(d_hidden, pre) if fc_relu else d_hidden
    grads["fc_weights"] = features.T @ d_pre + 2.0 * fc_l2 * fc_weights
    grads["fc_bias"] = d_pre.sum(axis=0)
    grads["features"] = d_pre @ fc_weights.T
    return float(loss), probs, grads
