"""Triangulated surfaces for boundary-element computations.

A surface is stored as a flat triangle soup: vertex coordinates, triangle
connectivity, and one integer tag per triangle for marking regions.  Two
kinds of surface appear in practice and both are supported here:

* closed surfaces (watertight, consistently outward-oriented), used for
  scattering off bounded obstacles, and
* open screens (surfaces with boundary), used for crack/screen problems.

The `closed` flag records which case a mesh is in; validation enforces the
corresponding manifold conditions.  Meshes are treated as immutable after
construction -- operations that change tags or geometry return new objects.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, TextIO

import numpy as np

logger = logging.getLogger(__name__)

# File format magic for the ASCII mesh container.
MESH_MAGIC = "tdbem-mesh 1"

_GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0


@dataclass
class Mesh:
    """Oriented triangle mesh.

    Parameters
    ----------
    vertices : ndarray of shape (nv, 3)
        Vertex coordinates.
    triangles : ndarray of shape (nt, 3)
        Vertex indices per triangle, counterclockwise seen from the side
        the normal points to.
    tags : ndarray of shape (nt,), optional
        Integer region tag per triangle.  Defaults to all zero.
    closed : bool
        Whether the surface is watertight.  Closed meshes must be
        edge-manifold with every edge shared by exactly two triangles of
        opposite induced orientation; open meshes may have boundary edges.

    Notes
    -----
    Derived quantities (areas, normals, edge tables) are computed lazily
    and cached; do not mutate the arrays in place.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    tags: np.ndarray = None
    closed: bool = True

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if self.tags is None:
            self.tags = np.zeros(len(self.triangles), dtype=np.int64)
        else:
            self.tags = np.ascontiguousarray(self.tags, dtype=np.int64)
        self.validate()

    # -- validation ---------------------------------------------------------

    def validate(self):
        """Check shapes, index bounds, degeneracy, and manifold structure.

        Raises
        ------
        ValueError
            If any structural invariant is violated.
        """
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (nv, 3), got {self.vertices.shape}")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError(f"triangles must be (nt, 3), got {self.triangles.shape}")
        if self.tags.shape != (len(self.triangles),):
            raise ValueError("tags must have one entry per triangle")
        if not np.isfinite(self.vertices).all():
            raise ValueError("vertex coordinates must be finite")
        nv = len(self.vertices)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= nv):
            raise ValueError("triangle indices out of range")
        if len(self.triangles) == 0:
            raise ValueError("mesh has no triangles")
        # repeated vertex within a triangle
        t = self.triangles
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise ValueError("degenerate triangle (repeated vertex)")
        if np.any(self.areas <= 0) or np.any(self.areas < 1e-14 * self.areas.max()):
            raise ValueError("degenerate triangle (vanishing area)")
        counts = self._edge_counts
        if self.closed:
            if np.any(counts != 2):
                raise ValueError("closed mesh must have every edge shared by exactly 2 triangles")
            # opposite induced orientation: each undirected edge appears once
            # per direction among the directed edges
            if self._directed_edge_collisions:
                raise ValueError("closed mesh has inconsistently oriented triangles")
        else:
            if np.any(counts > 2):
                raise ValueError("edge shared by more than 2 triangles")

    # -- derived geometry ---------------------------------------------------

    @cached_property
    def corners(self) -> np.ndarray:
        """Vertex coordinates per triangle, shape (nt, 3, 3)."""
        return self.vertices[self.triangles]

    @cached_property
    def _cross(self) -> np.ndarray:
        c = self.corners
        return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @cached_property
    def normals(self) -> np.ndarray:
        """Unit normals, orientation induced by vertex order."""
        return self._cross / (2.0 * self.areas[:, None])

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.corners.mean(axis=1)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        """Edge lengths per triangle, shape (nt, 3); edge k is opposite vertex k."""
        c = self.corners
        e0 = np.linalg.norm(c[:, 2] - c[:, 1], axis=1)
        e1 = np.linalg.norm(c[:, 0] - c[:, 2], axis=1)
        e2 = np.linalg.norm(c[:, 1] - c[:, 0], axis=1)
        return np.stack([e0, e1, e2], axis=1)

    @cached_property
    def _directed_edges(self) -> np.ndarray:
        t = self.triangles
        return np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])

    @cached_property
    def _undirected_unique(self):
        und = np.sort(self._directed_edges, axis=1)
        uniq, counts = np.unique(und, axis=0, return_counts=True)
        return uniq, counts

    @property
    def _edge_counts(self) -> np.ndarray:
        return self._undirected_unique[1]

    @cached_property
    def _directed_edge_collisions(self) -> int:
        de = self._directed_edges
        uniq, counts = np.unique(de, axis=0, return_counts=True)
        return int(np.sum(counts > 1))

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, shape (ne, 2)."""
        return self._undirected_unique[0]

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        """Edges incident to exactly one triangle (empty for closed meshes)."""
        uniq, counts = self._undirected_unique
        return uniq[counts == 1]

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        """Sorted indices of vertices lying on a boundary edge."""
        be = self.boundary_edges
        return np.unique(be) if len(be) else np.empty(0, dtype=np.int64)

    @cached_property
    def vertex_to_triangles(self) -> list:
        """List mapping vertex index -> array of incident triangle indices."""
        nv = len(self.vertices)
        flat = self.triangles.ravel()
        order = np.argsort(flat, kind="stable")
        tri_of = order // 3
        starts = np.searchsorted(flat[order], np.arange(nv + 1))
        return [tri_of[starts[v]:starts[v + 1]] for v in range(nv)]

    def signed_volume(self) -> float:
        """Signed enclosed volume; positive iff a closed mesh is outward-oriented."""
        c = self.corners
        return float(np.einsum("ij,ij->", c[:, 0], np.cross(c[:, 1], c[:, 2]))) / 6.0

    def h_max(self) -> float:
        return float(self.edge_lengths.max())

    def h_min(self) -> float:
        return float(self.edge_lengths.min())

    def min_quality(self) -> float:
        """Worst triangle shape quality, inradius/circumradius scaled to 1.

        Equals 2*r_in/r_circ, which is 1 for the equilateral triangle and
        tends to 0 for slivers.
        """
        a, b, c = self.edge_lengths[:, 0], self.edge_lengths[:, 1], self.edge_lengths[:, 2]
        s = 0.5 * (a + b + c)
        r_in = self.areas / s
        r_circ = a * b * c / (4.0 * self.areas)
        return float((2.0 * r_in / r_circ).min())

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edges) + len(self.triangles)

    def with_tags(self, tags: np.ndarray) -> "Mesh":
        """Return a copy of this mesh carrying new triangle tags."""
        return Mesh(self.vertices.copy(), self.triangles.copy(),
                    np.asarray(tags, dtype=np.int64).copy(), self.closed)


def build_icosphere(level: int, radius: float = 1.0) -> Mesh:
    """Geodesic sphere from repeated subdivision of an icosahedron.

    Parameters
    ----------
    level : int
        Number of quadrisection passes; the result has ``20 * 4**level``
        triangles.  Level 0 is the icosahedron itself.
    radius : float
        Sphere radius; every vertex sits exactly at this distance from the
        origin.

    Returns
    -------
    Mesh
        Closed, outward-oriented mesh.
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    if radius <= 0:
        raise ValueError("radius must be positive")
    verts, tris = _icosahedron()
    for _ in range(level):
        verts, tris = _subdivide(verts, tris)
    verts = verts * (radius / np.linalg.norm(verts, axis=1)[:, None])
    return Mesh(verts, tris, closed=True)


def build_screen_square(n: int, side: float = 1.0) -> Mesh:
    """Flat open screen: the square [0, side]^2 x {0} split into 2*n^2 triangles.

    The normal of every triangle points in +z.  Longest edge is the cell
    diagonal, sqrt(2)*side/n.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if side <= 0:
        raise ValueError("side must be positive")
    h = side / n
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    verts = np.stack([ii.ravel() * h, jj.ravel() * h, np.zeros((n + 1) ** 2)], axis=1)

    def vid(i, j):
        return i * (n + 1) + j

    tris = []
    for i in range(n):
        for j in range(n):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            # counterclockwise seen from +z
            tris.append([v00, v10, v11])
            tris.append([v00, v11, v01])
    return Mesh(verts, np.array(tris), closed=False)


def tag_partition(mesh: Mesh, predicate: Callable[[np.ndarray], np.ndarray],
                  tag_true: int = 1, tag_false: int = 0) -> Mesh:
    """Tag triangles by a centroid predicate, returning a new mesh.

    `predicate` receives the (nt, 3) centroid array and must return a
    boolean array; matching triangles get `tag_true`, the rest `tag_false`.
    """
    sel = np.asarray(predicate(mesh.centroids), dtype=bool)
    if sel.shape != (len(mesh.triangles),):
        raise ValueError("predicate must return one boolean per triangle")
    tags = np.where(sel, tag_true, tag_false)
    return mesh.with_tags(tags)


def mesh_stats(mesh: Mesh) -> dict:
    """Summary statistics used by validation tests and reports."""
    stats = {
        "n_vertices": len(mesh.vertices),
        "n_triangles": len(mesh.triangles),
        "n_edges": len(mesh.edges),
        "euler_characteristic": mesh.euler_characteristic(),
        "total_area": float(mesh.areas.sum()),
        "h_max": mesh.h_max(),
        "h_min": mesh.h_min(),
        "min_quality": mesh.min_quality(),
        "closed": mesh.closed,
    }
    if mesh.closed:
        stats["signed_volume"] = mesh.signed_volume()
    else:
        stats["n_boundary_edges"] = len(mesh.boundary_edges)
    return stats


# -- ASCII container ---------------------------------------------------------

def save_mesh(mesh: Mesh, path_or_file) -> None:
    """Write a mesh in the plain-text container format.

    Layout: a magic line, a `closed` line, then `v x y z` lines and
    `t i j k tag` lines with 0-based indices.  `#` starts a comment.
    """
    own = isinstance(path_or_file, (str, bytes))
    f: TextIO = open(path_or_file, "w") if own else path_or_file
    try:
        f.write(MESH_MAGIC + "\n")
        f.write(f"closed {1 if mesh.closed else 0}\n")
        for v in mesh.vertices:
            f.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t, tag in zip(mesh.triangles, mesh.tags):
            f.write(f"t {t[0]} {t[1]} {t[2]} {tag}\n")
    finally:
        if own:
            f.close()


def load_mesh(path_or_file) -> Mesh:
    """Read a mesh written by :func:`save_mesh`.

    Raises
    ------
    ValueError
        On a missing or wrong magic line or any malformed record; the
        message includes the offending line number.
    """
    own = isinstance(path_or_file, (str, bytes))
    f: TextIO = open(path_or_file, "r") if own else path_or_file
    try:
        lines = f.readlines()
    finally:
        if own:
            f.close()

    verts, tris, tags = [], [], []
    closed = None
    seen_magic = False
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if not seen_magic:
            if line != MESH_MAGIC:
                raise ValueError(f"line {lineno}: expected magic '{MESH_MAGIC}', got '{line}'")
            seen_magic = True
            continue
        parts = line.split()
        try:
            if parts[0] == "closed" and len(parts) == 2:
                closed = bool(int(parts[1]))
            elif parts[0] == "v" and len(parts) == 4:
                verts.append([float(x) for x in parts[1:]])
            elif parts[0] == "t" and len(parts) == 5:
                tris.append([int(x) for x in parts[1:4]])
                tags.append(int(parts[4]))
            else:
                raise ValueError
        except ValueError:
            raise ValueError(f"line {lineno}: malformed record '{line}'") from None
    if not seen_magic:
        raise ValueError("missing magic line")
    if closed is None:
        raise ValueError("missing 'closed' line")
    if not tris:
        raise ValueError("mesh file contains no triangles")
    return Mesh(np.array(verts), np.array(tris), np.array(tags), closed)


# -- icosahedron construction ------------------------------------------------

def _icosahedron():
    # 12 vertices from three orthogonal golden rectangles; 20 faces listed
    # counterclockwise seen from outside.
    p = _GOLDEN
    verts = np.array([
        [-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
        [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
        [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1],
    ], dtype=np.float64)
    tris = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return verts, tris


def _subdivide(verts: np.ndarray, tris: np.ndarray):
    # Quadrisect every face; midpoints are shared through a cache so the
    # result stays watertight.
    verts = list(map(tuple, verts))
    cache = {}

    def midpoint(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in cache:
            va, vb = np.array(verts[a]), np.array(verts[b])
            verts.append(tuple(0.5 * (va + vb)))
            cache[key] = len(verts) - 1
        return cache[key]

    out = []
    for a, b, c in tris:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
    return np.array(verts), np.array(out, dtype=np.int64)
