"""Tangent-plane neighbor ordering and gather tables for k-ring convolution.

At every vertex a sphere is fitted through the vertex and its 1-ring, the
neighbors are projected onto that sphere's tangent plane and sorted
clockwise (seen from outside) starting at the neighbor closest to the
frame's x-axis. The x-axis is the projection of the global +X direction,
or of +Y when +X is within about 8 degrees of the normal. Learned filters
are therefore oriented relative to a fixed global reference.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy import sparse

from .mesh import ZeroNormal, vertex_normal

SENTINEL = -1
GTBL_MAGIC = b"GTBL"
GTBL_VERSION = 1


class OrderingError(ValueError):
    pass


class TooFewNeighbors(OrderingError):
    pass


class ZeroProjection(OrderingError):
    pass


class FanOrderError(OrderingError):
    pass


class GatherOverflow(OrderingError):
    pass


class SphereFit(NamedTuple):
    center: np.ndarray
    radius: float


class PlaneFit(NamedTuple):
    reason: str


@dataclass(frozen=True)
class TangentFrame:
    origin: np.ndarray
    normal: np.ndarray
    x_axis: np.ndarray
    y_axis: np.ndarray
    sphere_center: np.ndarray | None
    sphere_radius: float | None
    degenerate_plane: bool

    def angles(self, points):
        """Polar angle of each point's tangent-plane projection, in (-pi, pi]."""
        p = np.atleast_2d(points) - self.origin
        return np.arctan2(p @ self.y_axis, p @ self.x_axis)

    def project(self, points):
        p = np.atleast_2d(points) - self.origin
        return np.stack([p @ self.x_axis, p @ self.y_axis], axis=1)


def support_size(k):
    return 3 * k * (k + 1) + 1


def fit_sphere(center, neighbors):
    """Least-squares sphere constrained to pass through ``center``.

    With ``q = p - center`` and ``c`` the sphere center relative to
    ``center``, every neighbor satisfies ``2 q.c = |q|^2`` exactly when it
    lies on the sphere, so ``c`` solves a 3-unknown linear least-squares
    problem. Returns :class:`PlaneFit` when that system is rank-deficient
    or the radius is more than 1e6 times the neighbor spread.
    """
    center = np.asarray(center, dtype=np.float64)
    pts = np.asarray(neighbors, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < 3:
        raise TooFewNeighbors(f"need at least 3 neighbors, got {pts.shape[0]}")
    q = pts - center
    a = 2.0 * q
    b = np.einsum("ij,ij->i", q, q)
    sol, _, rank, sv = np.linalg.lstsq(a, b, rcond=None)
    if rank < 3:
        return PlaneFit("rank-deficient")
    radius = float(np.linalg.norm(sol))
    spread = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1).max()
    if radius > 1e6 * spread:
        return PlaneFit("radius exceeds 1e6 x neighbor spread")
    return SphereFit(center + sol, radius)


def tangent_frame(mesh, i):
    x = mesh.vertices[i]
    nbrs = mesh.vertices[list(mesh.adjacency[i])]
    fit = fit_sphere(x, nbrs)
    if isinstance(fit, PlaneFit):
        normal = vertex_normal(mesh, i)
        c, r = None, None
    else:
        c, r = fit
        normal = (x - c) / r
        try:
            if normal @ vertex_normal(mesh, i) < 0:
                normal = -normal
        except ZeroNormal:
            pass
    ref = np.array([1.0, 0.0, 0.0])
    if abs(ref @ normal) > 0.99:
        ref = np.array([0.0, 1.0, 0.0])
    xa = ref - (ref @ normal) * normal
    xa /= np.linalg.norm(xa)
    ya = np.cross(normal, xa)
    return TangentFrame(
        origin=x.copy(),
        normal=normal,
        x_axis=xa,
        y_axis=ya,
        sphere_center=c,
        sphere_radius=r,
        degenerate_plane=c is None,
    )


ANGLE_TIE = 1e-9


def _clockwise(ids, theta):
    """Sort ``ids`` by decreasing angle, rotated to start nearest the x-axis.

    Angles within ``ANGLE_TIE`` radians of the smallest ``|theta|`` count as
    tied (symmetric meshes produce exact mirror pairs up to rounding); the
    smallest vertex index among them starts the sequence.
    """
    ids = np.asarray(ids)
    order = np.lexsort((ids, -theta))
    ids, theta = ids[order], theta[order]
    a = np.abs(theta)
    tied = np.flatnonzero(a <= a.min() + ANGLE_TIE)
    start = tied[np.argmin(ids[tied])]
    return [int(v) for v in np.roll(ids, -start)]


def _check_projections(frame, points, ids, i):
    p = frame.project(points)
    d = np.hypot(p[:, 0], p[:, 1])
    scale = np.linalg.norm(np.atleast_2d(points) - frame.origin, axis=1)
    bad = d <= 1e-12 * np.maximum(scale, 1e-300)
    if bad.any():
        raise ZeroProjection(f"neighbor {int(np.asarray(ids)[bad][0])} of vertex {i} projects onto the vertex")


def check_fan(mesh, i, ordered):
    """Raise FanOrderError unless consecutive entries share a triangle with ``i``."""
    fan = mesh.adjacency[i]
    m = len(fan)
    if sorted(ordered) != sorted(fan):
        raise FanOrderError(f"ordered ring of vertex {i} is not a permutation of its adjacency")
    if m < 3:
        return
    pos = {v: k for k, v in enumerate(fan)}
    closed = mesh.fan_closed[i]
    gaps = 0
    for a, b in zip(ordered, ordered[1:] + ordered[:1]):
        d = (pos[a] - pos[b]) % m
        if d in (1, m - 1) and (closed or abs(pos[a] - pos[b]) == 1):
            continue
        gaps += 1
    if gaps > (0 if closed else 1):
        raise FanOrderError(f"ordered ring of vertex {i} breaks the triangle fan")


def _order_with_frame(mesh, i, frame):
    ids = list(mesh.adjacency[i])
    pts = mesh.vertices[ids]
    _check_projections(frame, pts, ids, i)
    ordered = _clockwise(ids, frame.angles(pts))
    check_fan(mesh, i, ordered)
    return ordered


def order_one_ring(mesh, i):
    """Neighbors of ``i`` in clockwise tangent-plane order (see module docs)."""
    return _order_with_frame(mesh, i, tangent_frame(mesh, i))


def rings(mesh, i, k):
    """Vertex sets at graph distance exactly 1..k from ``i``."""
    seen = {i}
    frontier = [i]
    out = []
    for _ in range(k):
        nxt = set()
        for u in frontier:
            nxt.update(mesh.adjacency[u])
        nxt -= seen
        seen |= nxt
        out.append(sorted(nxt))
        frontier = out[-1]
    return out


@dataclass(frozen=True, eq=False)
class GatherTable:
    """Per-vertex support indices; ``rows[i, 0] == i`` and -1 marks padding.

    Slot layout: 0 is the center, then ring r occupies the 6r slots
    starting at ``3r(r-1)+1``.
    """

    k: int
    rows: np.ndarray

    @property
    def n_vertices(self):
        return self.rows.shape[0]

    @property
    def support_size(self):
        return self.rows.shape[1]

    @cached_property
    def gather_matrix(self):
        """Sparse (N*S, N) selection matrix; sentinel slots are empty rows."""
        n, s = self.rows.shape
        flat = self.rows.reshape(-1)
        keep = flat >= 0
        r = np.flatnonzero(keep)
        return sparse.csr_matrix((np.ones(r.size), (r, flat[keep])), shape=(n * s, n))

    def to_bytes(self):
        n, s = self.rows.shape
        head = GTBL_MAGIC + struct.pack("<IIII", GTBL_VERSION, n, self.k, s)
        return head + self.rows.astype("<i4").tobytes()

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != GTBL_MAGIC:
            raise ValueError("not a gather table (bad magic)")
        version, n, k, s = struct.unpack("<IIII", data[4:20])
        if version != GTBL_VERSION:
            raise ValueError(f"unsupported gather table version {version}")
        if s != support_size(k):
            raise ValueError(f"support size {s} inconsistent with k={k}")
        body = np.frombuffer(data[20:], dtype="<i4")
        if body.size != n * s:
            raise ValueError("truncated gather table")
        rows = body.reshape(n, s).astype(np.int64)
        rows.setflags(write=False)
        return cls(k=k, rows=rows)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build_gather_table(mesh, k=1):
    """Ordered k-ring support table for every vertex of ``mesh``.

    Ring 1 is the clockwise ordering of :func:`order_one_ring`; rings
    r >= 2 are sorted the same way by their tangent-plane angle at the
    center vertex, ties broken by vertex index. Each ring is padded at its
    end to 6r slots.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = mesh.n_vertices
    rows = np.full((n, support_size(k)), SENTINEL, dtype=np.int64)
    for i in range(n):
        frame = tangent_frame(mesh, i)
        rows[i, 0] = i
        ring_sets = rings(mesh, i, k)
        for r, members in enumerate(ring_sets, start=1):
            if r == 1:
                ordered = _order_with_frame(mesh, i, frame)
            elif members:
                pts = mesh.vertices[members]
                _check_projections(frame, pts, members, i)
                ordered = _clockwise(members, frame.angles(pts))
            else:
                ordered = []
            if len(ordered) > 6 * r:
                raise GatherOverflow(f"vertex {i} has {len(ordered)} vertices in ring {r}, more than {6 * r}")
            start = 3 * r * (r - 1) + 1
            rows[i, start : start + len(ordered)] = ordered
    rows.setflags(write=False)
    return GatherTable(k=k, rows=rows)
