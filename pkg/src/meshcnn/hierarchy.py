"""Midpoint subdivision, nested mesh hierarchies and pooling neighborhoods."""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass

import numpy as np

from .mesh import build_mesh, load_off, save_off

FLAT = "flat-midpoint"
SPHERE = "sphere-projected"
GEOMETRY_MODES = (FLAT, SPHERE)


class LevelOutOfRange(IndexError):
    pass


class HierarchyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MeshHierarchy:
    """Nested meshes, coarsest first.

    ``midpoint_parents[j - 1]`` is an (E_{j-1}, 2) array giving, for the
    new vertex ``n_{j-1} + e`` of level ``j``, the endpoints of the edge
    ``e`` of level ``j - 1`` it was inserted on.
    """

    levels: tuple
    midpoint_parents: tuple
    geometry_mode: str

    @property
    def depth(self):
        return len(self.levels) - 1

    def vertex_counts(self):
        return [m.n_vertices for m in self.levels]

    def __getitem__(self, j):
        return self.levels[j]


@dataclass(frozen=True)
class PoolNeighborhood:
    center: int
    members: tuple


def subdivide(mesh, geometry_mode=FLAT):
    """Split every triangle into four at its edge midpoints.

    Midpoints are appended after the existing vertices in the order of
    ``mesh.edges`` (ascending (min, max) endpoint pairs). Returns the
    finer mesh and the (E, 2) parent array.
    """
    if geometry_mode not in GEOMETRY_MODES:
        raise ValueError(f"unknown geometry mode {geometry_mode!r}")
    n = mesh.n_vertices
    edges = np.asarray(mesh.edges)
    edge_id = {(int(a), int(b)): n + k for k, (a, b) in enumerate(edges.tolist())}

    v = mesh.vertices
    mid = 0.5 * (v[edges[:, 0]] + v[edges[:, 1]])
    if geometry_mode == SPHERE:
        mid = mid / np.linalg.norm(mid, axis=1, keepdims=True)
    verts = np.concatenate([v, mid])

    def w(a, b):
        return edge_id[(a, b) if a < b else (b, a)]

    tris = []
    for v0, v1, v2 in mesh.triangles.tolist():
        w0, w1, w2 = w(v1, v2), w(v2, v0), w(v0, v1)
        tris.extend(((v0, w2, w1), (v1, w0, w2), (v2, w1, w0), (w0, w1, w2)))
    level = None if mesh.level_hint is None else mesh.level_hint + 1
    fine = build_mesh(verts, tris, level_hint=level)
    parents = edges.copy()
    parents.setflags(write=False)
    return fine, parents


def build_hierarchy(base, depth, geometry_mode=FLAT):
    if depth < 0:
        raise ValueError("depth must be non-negative")
    levels = [base]
    parents = []
    for _ in range(depth):
        fine, par = subdivide(levels[-1], geometry_mode)
        levels.append(fine)
        parents.append(par)
    return MeshHierarchy(tuple(levels), tuple(parents), geometry_mode)


def icosahedron():
    """Unit icosahedron on the cyclic (0, ±1, ±φ) vertex set, outward winding."""
    phi = (1.0 + 5.0 ** 0.5) / 2.0
    signs = ((1, 1), (1, -1), (-1, 1), (-1, -1))
    raw = []
    for shift in range(3):
        for s1, s2 in signs:
            p = [0.0, s1 * 1.0, s2 * phi]
            raw.append(p[-shift:] + p[:-shift] if shift else p)
    raw = np.array(raw)
    # edges of the unnormalized solid have length exactly 2
    tris = []
    for a, b, c in itertools.combinations(range(12), 3):
        if all(abs(np.linalg.norm(raw[p] - raw[q]) - 2.0) < 1e-9 for p, q in ((a, b), (b, c), (a, c))):
            n = np.cross(raw[b] - raw[a], raw[c] - raw[a])
            tris.append((a, b, c) if n @ (raw[a] + raw[b] + raw[c]) > 0 else (a, c, b))
    verts = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return build_mesh(verts, tris, level_hint=0)


def icosphere(depth):
    """Unit-sphere hierarchy from the icosahedron with ``depth`` subdivisions."""
    if depth < 0:
        raise ValueError("depth must be non-negative")
    return build_hierarchy(icosahedron(), depth, SPHERE)


def _check_pool_level(hier, level, stride):
    if stride not in (2, 4):
        raise ValueError(f"pool stride must be 2 or 4, got {stride}")
    finer = level + stride // 2
    if level < 0 or finer > hier.depth:
        raise LevelOutOfRange(
            f"stride-{stride} pooling onto level {level} needs level {finer}, hierarchy depth is {hier.depth}"
        )
    return finer


def _ring_members(mesh, i, rings):
    members = {i}
    frontier = {i}
    for _ in range(rings):
        nxt = set()
        for u in frontier:
            nxt.update(mesh.adjacency[u])
        frontier = nxt - members
        members |= nxt
    return members


def pool_neighborhood(hier, level, i, stride=2):
    """Coarse vertex ``i`` of ``level`` plus its rings at the finer level."""
    finer = _check_pool_level(hier, level, stride)
    if not 0 <= i < hier.levels[level].n_vertices:
        raise IndexError(f"vertex {i} not in level {level}")
    members = _ring_members(hier.levels[finer], i, stride // 2)
    return PoolNeighborhood(center=i, members=tuple(sorted(members)))


def pool_table(hier, level, stride=2):
    """Padded member table for all coarse vertices of ``level``.

    Returns ``(table, counts)``; ``table`` has shape (N_level, width) with
    each row sorted ascending and padded with -1.
    """
    finer = _check_pool_level(hier, level, stride)
    n = hier.levels[level].n_vertices
    fine = hier.levels[finer]
    rows = [sorted(_ring_members(fine, i, stride // 2)) for i in range(n)]
    width = max(len(r) for r in rows)
    table = np.full((n, width), -1, dtype=np.int64)
    counts = np.empty(n, dtype=np.int64)
    for i, r in enumerate(rows):
        table[i, : len(r)] = r
        counts[i] = len(r)
    return table, counts


def save_hierarchy(hier, directory):
    os.makedirs(directory, exist_ok=True)
    files = []
    for j, m in enumerate(hier.levels):
        name = f"level_{j:02d}.off"
        save_off(m, os.path.join(directory, name))
        files.append(name)
    manifest = {
        "format": "meshcnn-hierarchy",
        "version": 1,
        "geometry_mode": hier.geometry_mode,
        "depth": hier.depth,
        "levels": files,
        "vertex_counts": hier.vertex_counts(),
        "face_counts": [m.n_faces for m in hier.levels],
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_hierarchy(directory):
    """Read a hierarchy directory and verify each level subdivides the previous one."""
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    mode = manifest["geometry_mode"]
    levels = [load_off(os.path.join(directory, name), level_hint=j) for j, name in enumerate(manifest["levels"])]
    parents = []
    for j in range(1, len(levels)):
        expect, par = subdivide(levels[j - 1], FLAT)
        got = levels[j]
        if expect.n_vertices != got.n_vertices or not np.array_equal(expect.triangles, got.triangles):
            raise HierarchyError(f"level {j} is not the midpoint subdivision of level {j - 1}")
        if not np.array_equal(got.vertices[: levels[j - 1].n_vertices], levels[j - 1].vertices):
            raise HierarchyError(f"level {j} does not embed the vertices of level {j - 1}")
        parents.append(par)
    return MeshHierarchy(tuple(levels), tuple(parents), mode)
