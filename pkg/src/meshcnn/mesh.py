"""Triangle mesh container, connectivity validation, normals and OFF I/O."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    """Base class for mesh construction failures."""


class OutOfRangeIndex(MeshError):
    pass


class DegenerateTriangle(MeshError):
    pass


class NonManifoldEdge(MeshError):
    pass


class NonManifoldVertex(MeshError):
    pass


class InconsistentOrientation(MeshError):
    pass


class ZeroNormal(MeshError):
    pass


class ParseError(MeshError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class ValidationReport:
    is_manifold: bool
    is_consistently_oriented: bool
    valence_histogram: dict
    boundary_edge_count: int
    euler_characteristic: int


@dataclass(frozen=True, eq=False)
class SemiRegularMesh:
    """Immutable oriented triangle mesh.

    Use :func:`build_mesh` to construct one; it checks connectivity and
    fills ``adjacency`` with each vertex's 1-ring as a fan ordered
    counter-clockwise with respect to the triangle winding.

    Attributes
    ----------
    vertices : ndarray, shape (N, 3), float64
    triangles : ndarray, shape (F, 3), int64
    adjacency : tuple of tuple of int
        Per-vertex cyclic fan. Open fans (boundary vertices) start at the
        neighbor that has no predecessor; closed fans start at the
        smallest neighbor index.
    edges : ndarray, shape (E, 2)
        Undirected edges as (min, max) pairs, sorted lexicographically.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    adjacency: tuple
    edges: np.ndarray
    boundary_edge_count: int
    vertex_faces: tuple = field(repr=False)
    fan_closed: tuple = field(repr=False)
    level_hint: int | None = None

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.triangles.shape[0]

    @property
    def n_edges(self):
        return self.edges.shape[0]

    @property
    def valences(self):
        return np.array([len(a) for a in self.adjacency], dtype=np.int64)

    def is_boundary_vertex(self, i):
        return bool(self.adjacency[i]) and not self.fan_closed[i]

    def with_vertices(self, vertices):
        """Return a copy carrying new coordinates and identical connectivity."""
        vertices = np.array(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise ValueError("vertex array shape must not change")
        vertices.setflags(write=False)
        return SemiRegularMesh(
            vertices=vertices,
            triangles=self.triangles,
            adjacency=self.adjacency,
            edges=self.edges,
            boundary_edge_count=self.boundary_edge_count,
            vertex_faces=self.vertex_faces,
            fan_closed=self.fan_closed,
            level_hint=self.level_hint,
        )


def build_mesh(vertices, triangles, level_hint=None):
    """Validate connectivity and build a :class:`SemiRegularMesh`.

    Raises
    ------
    OutOfRangeIndex, DegenerateTriangle, NonManifoldEdge,
    InconsistentOrientation, NonManifoldVertex
    """
    verts = np.array(vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[0] == 0 or verts.shape[1] != 3:
        raise MeshError("vertices must be a non-empty (N, 3) array")
    tris = np.array(triangles, dtype=np.int64).reshape(-1, 3)
    n = verts.shape[0]
    if tris.size and (tris.min() < 0 or tris.max() >= n):
        raise OutOfRangeIndex(f"triangle index outside [0, {n})")
    bad = (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
    if bad.any():
        f = int(np.flatnonzero(bad)[0])
        raise DegenerateTriangle(f"triangle {f} repeats a vertex: {tris[f].tolist()}")

    directed = Counter()
    undirected = Counter()
    for a, b, c in tris.tolist():
        for u, v in ((a, b), (b, c), (c, a)):
            directed[(u, v)] += 1
            undirected[(min(u, v), max(u, v))] += 1
    for e, count in undirected.items():
        if count > 2:
            raise NonManifoldEdge(f"edge {e} belongs to {count} triangles")
    for (u, v), count in directed.items():
        if count > 1:
            raise InconsistentOrientation(f"directed edge ({u}, {v}) appears {count} times")

    vertex_faces = [[] for _ in range(n)]
    # succ[i][p] = q when triangle (i, p, q) appears in winding order
    succ = [dict() for _ in range(n)]
    for f, (a, b, c) in enumerate(tris.tolist()):
        for i, p, q in ((a, b, c), (b, c, a), (c, a, b)):
            vertex_faces[i].append(f)
            succ[i][p] = q

    adjacency = []
    fan_closed = []
    for i in range(n):
        s = succ[i]
        if not s:
            adjacency.append(())
            fan_closed.append(False)
            continue
        heads = set(s) - set(s.values())
        if len(heads) > 1:
            raise NonManifoldVertex(f"vertex {i} has {len(heads)} separate fans")
        heads_present = bool(heads)
        start = heads.pop() if heads else min(s)
        fan = [start]
        cur = start
        while cur in s:
            cur = s[cur]
            if cur == start:
                break
            fan.append(cur)
        if len(fan) != len(set(s) | set(s.values())):
            raise NonManifoldVertex(f"vertex {i} has a fan that does not form a single ring")
        adjacency.append(tuple(fan))
        fan_closed.append(not heads_present)

    edges = np.array(sorted(undirected), dtype=np.int64).reshape(-1, 2)
    boundary = sum(1 for c in undirected.values() if c == 1)
    verts.setflags(write=False)
    tris.setflags(write=False)
    edges.setflags(write=False)
    return SemiRegularMesh(
        vertices=verts,
        triangles=tris,
        adjacency=tuple(adjacency),
        edges=edges,
        boundary_edge_count=boundary,
        vertex_faces=tuple(tuple(v) for v in vertex_faces),
        fan_closed=tuple(fan_closed),
        level_hint=level_hint,
    )


def validate(mesh):
    """Compute a :class:`ValidationReport` from connectivity alone."""
    directed = Counter()
    undirected = Counter()
    for a, b, c in mesh.triangles.tolist():
        for u, v in ((a, b), (b, c), (c, a)):
            directed[(u, v)] += 1
            undirected[(min(u, v), max(u, v))] += 1
    hist = Counter(len(a) for a in mesh.adjacency)
    n_edges = len(undirected)
    return ValidationReport(
        is_manifold=all(c <= 2 for c in undirected.values()),
        is_consistently_oriented=all(c == 1 for c in directed.values()),
        valence_histogram=dict(sorted(hist.items())),
        boundary_edge_count=sum(1 for c in undirected.values() if c == 1),
        euler_characteristic=mesh.n_vertices - n_edges + mesh.n_faces,
    )


def face_normals(mesh, normalize=True):
    v = mesh.vertices
    t = mesh.triangles
    n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    if normalize:
        n = n / np.linalg.norm(n, axis=1, keepdims=True)
    return n


def vertex_normal(mesh, i):
    """Area-weighted unit normal at vertex ``i``.

    Raises ZeroNormal when the vertex has no incident triangle or the
    incident normals cancel.
    """
    faces = list(mesh.vertex_faces[i])
    if not faces:
        raise ZeroNormal(f"vertex {i} has no incident triangles")
    v = mesh.vertices
    t = mesh.triangles[faces]
    # the cross product is already weighted by twice the triangle area
    acc = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]]).sum(axis=0)
    norm = np.linalg.norm(acc)
    scale = max(np.abs(v[t]).max(), 1.0) ** 2
    if norm <= 1e-14 * scale:
        raise ZeroNormal(f"incident triangle normals cancel at vertex {i}")
    return acc / norm


def vertex_normals(mesh):
    """Area-weighted unit normals for all vertices (zero rows where undefined)."""
    fn = face_normals(mesh, normalize=False)
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.triangles[:, k], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return np.divide(acc, norm, out=np.zeros_like(acc), where=norm > 0)


def save_off(mesh, path):
    """Write ``mesh`` as an OFF file with 17 significant digits per coordinate."""
    lines = ["OFF", f"{mesh.n_vertices} {mesh.n_faces} {mesh.n_edges}"]
    lines.extend(" ".join(f"{x:.17g}" for x in row) for row in mesh.vertices.tolist())
    lines.extend(f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist())
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_off(path, level_hint=None):
    """Read a triangle-only OFF file and build the mesh.

    Raises
    ------
    ParseError
        Malformed content, with the offending 1-based line number.
    OSError
        The file cannot be read.
    """
    with open(path, "r", encoding="utf-8", newline=None) as fh:
        raw = fh.read().split("\n")

    records = []
    for lineno, line in enumerate(raw, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        records.append((lineno, s))
    if not records:
        raise ParseError("empty file", line=1)

    lineno, header = records[0]
    if header != "OFF":
        raise ParseError(f"expected 'OFF' header, got {header!r}", line=lineno)
    if len(records) < 2:
        raise ParseError("missing counts line", line=lineno + 1)
    lineno, counts = records[1]
    parts = counts.split()
    try:
        if len(parts) != 3:
            raise ValueError
        n_v, n_f, _ = (int(p) for p in parts)
    except ValueError:
        raise ParseError(f"bad counts line {counts!r}", line=lineno) from None
    if n_v <= 0 or n_f < 0:
        raise ParseError("vertex count must be positive", line=lineno)
    body = records[2:]
    if len(body) < n_v + n_f:
        last = body[-1][0] if body else lineno
        raise ParseError(f"expected {n_v + n_f} data lines, found {len(body)}", line=last + 1)
    if len(body) > n_v + n_f:
        raise ParseError("trailing data after faces", line=body[n_v + n_f][0])

    verts = np.empty((n_v, 3), dtype=np.float64)
    for k, (ln, s) in enumerate(body[:n_v]):
        parts = s.split()
        if len(parts) != 3:
            raise ParseError(f"vertex line needs 3 coordinates, got {len(parts)}", line=ln)
        try:
            verts[k] = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"bad vertex coordinates {s!r}", line=ln) from None

    tris = np.empty((n_f, 3), dtype=np.int64)
    for k, (ln, s) in enumerate(body[n_v:]):
        parts = s.split()
        try:
            nums = [int(p) for p in parts]
        except ValueError:
            raise ParseError(f"bad face line {s!r}", line=ln) from None
        if not nums or nums[0] != 3:
            raise ParseError("only triangular faces are supported", line=ln)
        if len(nums) != 4:
            raise ParseError(f"face line needs 3 indices, got {len(nums) - 1}", line=ln)
        tris[k] = nums[1:]
    return build_mesh(verts, tris, level_hint=level_hint)
