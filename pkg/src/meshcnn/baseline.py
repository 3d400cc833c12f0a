"""Spectral comparator: normalized graph Laplacian and Chebyshev convolution."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .nn.layers import ShapeMismatch, from_vm, sparse_apply, to_vm


class DisconnectedGraph(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SparseLaplacian:
    """Symmetric normalized Laplacian ``I - D^-1/2 A D^-1/2`` in COO form."""

    n: int
    entries: sparse.coo_matrix
    lambda_max_estimate: float

    @cached_property
    def matrix(self):
        return self.entries.tocsr()

    @cached_property
    def rescaled(self):
        """``2 L / lambda_max - I``, eigenvalues mapped into about [-1, 1]."""
        eye = sparse.identity(self.n, format="csr")
        return (2.0 / self.lambda_max_estimate) * self.matrix - eye

    def toarray(self):
        return self.entries.toarray()


def _power_lambda_max(lap, kernel, iters=100):
    # The kernel vector is projected out each step so the iteration cannot
    # lock onto eigenvalue 0; L is PSD so the dominant eigenvalue is lambda_max.
    rng = np.random.default_rng(0)
    v = rng.standard_normal(lap.shape[0])
    for _ in range(iters):
        v -= (v @ kernel) * kernel
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
        v = lap @ v
    v -= (v @ kernel) * kernel
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return 0.0
    v /= nv
    return float(v @ (lap @ v))


def laplacian_from_edges(n, edges, power_iterations=100):
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sparse.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    n_comp, _ = connected_components(adj, directed=False)
    if n_comp != 1:
        raise DisconnectedGraph(f"graph has {n_comp} connected components")
    deg = np.asarray(adj.sum(axis=1)).ravel()
    d = 1.0 / np.sqrt(deg)
    norm_adj = sparse.diags(d) @ adj @ sparse.diags(d)
    lap = (sparse.identity(n) - norm_adj).tocoo()
    lap.sum_duplicates()
    kernel = np.sqrt(deg) / np.linalg.norm(np.sqrt(deg))
    lam = _power_lambda_max(lap.tocsr(), kernel, power_iterations)
    if lam <= 0.0:
        # single vertex: L = 0; any positive scale keeps the rescaling defined
        lam = 2.0
    return SparseLaplacian(n=n, entries=lap, lambda_max_estimate=lam)


def graph_laplacian(mesh, power_iterations=100):
    return laplacian_from_edges(mesh.n_vertices, mesh.edges, power_iterations)


def chebyshev_basis_vm(x, lap, order):
    """``[T_k(L~) x for k = 0..order]`` for a vertex-major (N, B, C) array."""
    lt = lap.rescaled
    terms = [x]
    if order >= 1:
        terms.append(sparse_apply(lt, x))
    for _ in range(2, order + 1):
        terms.append(2.0 * sparse_apply(lt, terms[-1]) - terms[-2])
    return terms


def chebyshev_conv_vm(x, lap, theta, bias=None):
    n, b, c = x.shape
    if theta.ndim != 3 or theta.shape[1] != c:
        raise ShapeMismatch(f"theta of shape {theta.shape} does not fit {c} input channels")
    if n != lap.n:
        raise ShapeMismatch(f"Laplacian has {lap.n} vertices, signal has {n}")
    basis = chebyshev_basis_vm(x, lap, theta.shape[0] - 1)
    out = sum(t @ theta[k] for k, t in enumerate(basis))
    return out if bias is None else out + bias


def chebyshev_conv_grad_vm(up, x, lap, theta, need_input=True):
    n, b, c = x.shape
    order = theta.shape[0] - 1
    if up.shape != (n, b, theta.shape[2]):
        raise ShapeMismatch("upstream gradient shape does not match the forward pass")
    basis = chebyshev_basis_vm(x, lap, order)
    grad_theta = np.stack([np.tensordot(t, up, axes=([0, 1], [0, 1])) for t in basis])
    grad_bias = up.sum(axis=(0, 1))
    if not need_input:
        return None, grad_theta, grad_bias
    # Clenshaw: sum_k T_k(L~) a_k with a_k = up theta_k^T
    lt = lap.rescaled
    coef = [up @ theta[k].T for k in range(order + 1)]
    b1 = np.zeros_like(coef[0])
    b2 = np.zeros_like(coef[0])
    for k in range(order, 0, -1):
        b1, b2 = coef[k] + 2.0 * sparse_apply(lt, b1) - b2, b1
    grad_x = coef[0] + sparse_apply(lt, b1) - b2
    return grad_x.astype(x.dtype, copy=False), grad_theta, grad_bias


def chebyshev_conv(x, lap, theta, bias=None):
    """``sum_k T_k(L~) x theta_k`` (+ bias) for theta of shape (K+1, C_in, C_out).

    ``L~ = 2 L / lambda_max - I`` and ``T_k`` follows the Chebyshev
    recurrence ``T_k = 2 L~ T_{k-1} - T_{k-2}``.
    """
    xv, single = to_vm(x)
    return from_vm(chebyshev_conv_vm(xv, lap, np.asarray(theta), bias), single)


def chebyshev_conv_grad(upstream, x, lap, theta):
    """Gradients w.r.t. input, theta and bias; T_k(L~) is symmetric, so the
    input gradient reuses the same polynomial."""
    xv, single = to_vm(x)
    uv, _ = to_vm(upstream)
    gx, gt, gb = chebyshev_conv_grad_vm(uv, xv, lap, np.asarray(theta))
    return from_vm(gx, single), gt, gb
