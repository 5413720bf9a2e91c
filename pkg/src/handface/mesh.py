"""Indexed triangle meshes with the derived topology used by the solvers.

Edges are stored as sorted vertex pairs in lexicographic order so that
constraint iteration order is reproducible. A *bend pair* is the quadruple
``(p1, p2, p3, p4)`` of two triangles ``(p1, p3, p2)`` and ``(p1, p2, p4)``
sharing the edge ``p1-p2``; its angle is the arccosine of the dot product
of the normals ``(p2-p1) x (p3-p1)`` and ``(p2-p1) x (p4-p1)``, which is
``pi`` for a flat pair and ``0`` for a pair folded shut.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


class MeshError(ValueError):
    """Invalid mesh input (bad index, degenerate or non-manifold element)."""


class DegenerateGeometryError(ValueError):
    """A geometric quantity is undefined for the given (collapsed) input."""


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray  # (V, 3) rest positions, meters
    triangles: np.ndarray  # (F, 3) int
    edges: np.ndarray  # (E, 2) sorted pairs
    bend_pairs: np.ndarray  # (B, 4) p1, p2 shared; p3, p4 wings
    rest_edge_lengths: np.ndarray  # (E,)
    rest_dihedral_angles: np.ndarray  # (B,)
    tri_edges: np.ndarray  # (F, 3) edge id of local edge (k, k+1)
    bend_edges: np.ndarray  # (B,) edge id of the shared edge
    edge_face_count: np.ndarray  # (E,)
    triangle_components: np.ndarray  # (F,) connected component id
    n_components: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def is_closed(self) -> bool:
        """True when every edge is shared by exactly two triangles."""
        return bool(np.all(self.edge_face_count == 2))

    def with_vertices(self, vertices) -> "TriMesh":
        """Same connectivity, rest state recomputed from ``vertices``."""
        return build_topology(vertices, self.triangles)

    def vertex_adjacency(self):
        """Sparse symmetric vertex graph weighted by rest edge length."""
        if "adjacency" not in self._cache:
            e = self.edges
            n = self.n_vertices
            w = self.rest_edge_lengths
            m = coo_matrix(
                (np.concatenate([w, w]), (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))),
                shape=(n, n),
            ).tocsr()
            self._cache["adjacency"] = m
        return self._cache["adjacency"]


def triangle_normals(positions, triangles, normalize=True):
    p = np.asarray(positions, dtype=np.float64)
    t = np.asarray(triangles)
    n = np.cross(p[t[:, 1]] - p[t[:, 0]], p[t[:, 2]] - p[t[:, 0]])
    if not normalize:
        return n
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def build_topology(vertices, triangles) -> TriMesh:
    """Validate a triangle soup with shared indices and derive its topology.

    Raises
    ------
    MeshError
        On out-of-range indices, zero-area triangles, repeated corners or
        edges shared by more than two triangles.
    """
    verts = np.ascontiguousarray(vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise MeshError(f"vertices must have shape (V, 3), got {verts.shape}")
    tris = np.asarray(triangles)
    if tris.size == 0:
        raise MeshError("mesh needs at least one triangle")
    if tris.ndim != 2 or tris.shape[1] != 3:
        raise MeshError(f"triangles must have shape (F, 3), got {tris.shape}")
    if not np.issubdtype(tris.dtype, np.integer):
        if not np.all(np.equal(np.mod(tris, 1), 0)):
            raise MeshError("triangle indices must be integers")
    tris = np.ascontiguousarray(tris, dtype=np.int64)
    nv = len(verts)
    bad = np.nonzero((tris < 0) | (tris >= nv))[0]
    if len(bad):
        raise MeshError(f"triangle {int(bad[0])} has a vertex index outside [0, {nv})")
    if not np.all(np.isfinite(verts)):
        raise MeshError("vertices contain non-finite coordinates")

    e1 = verts[tris[:, 1]] - verts[tris[:, 0]]
    e2 = verts[tris[:, 2]] - verts[tris[:, 0]]
    area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
    scale = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    degenerate = (area2 <= 1e-12 * scale) | (scale == 0.0)
    repeated = (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
    bad = np.nonzero(degenerate | repeated)[0]
    if len(bad):
        raise MeshError(f"triangle {int(bad[0])} is degenerate (zero area)")

    # directed half-edges: local edge k runs tris[k] -> tris[(k+1) % 3]
    heads = tris.reshape(-1)
    tails = tris[:, [1, 2, 0]].reshape(-1)
    lo = np.minimum(heads, tails)
    hi = np.maximum(heads, tails)
    keys = np.stack([lo, hi], axis=1)
    edges, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    if np.any(counts > 2):
        bad_edge = edges[np.argmax(counts > 2)]
        raise MeshError(f"edge {tuple(int(i) for i in bad_edge)} is shared by more than two triangles")
    tri_edges = inverse.reshape(-1, 3)

    # half-edge slots per edge, ordered by half-edge index
    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    interior = np.nonzero(counts == 2)[0]
    first = order[starts[interior]]
    second = order[starts[interior] + 1]
    bend_pairs = np.empty((len(interior), 4), dtype=np.int64)
    for slot, (ha, hb) in enumerate(zip(first, second)):
        # the triangle walking the edge as p1 -> p2 supplies p4, the other p3
        ta, ka = divmod(int(ha), 3)
        tb, kb = divmod(int(hb), 3)
        a0, a1 = tris[ta, ka], tris[ta, (ka + 1) % 3]
        wing_a = tris[ta, (ka + 2) % 3]
        wing_b = tris[tb, (kb + 2) % 3]
        bend_pairs[slot] = (a0, a1, wing_b, wing_a)

    rest_lengths = np.linalg.norm(verts[edges[:, 1]] - verts[edges[:, 0]], axis=1)
    if np.any(rest_lengths <= 0):
        raise MeshError("mesh has a zero-length edge")
    angles, valid = dihedral_angles(verts, bend_pairs)
    if not np.all(valid):
        raise MeshError(f"bend pair {int(np.argmin(valid))} has a degenerate wing")

    adj = coo_matrix(
        (np.ones(2 * len(edges)), (np.concatenate([edges[:, 0], edges[:, 1]]), np.concatenate([edges[:, 1], edges[:, 0]]))),
        shape=(nv, nv),
    )
    n_comp, labels = connected_components(adj, directed=False)
    tri_comp_raw = labels[tris[:, 0]]
    # relabel so components are numbered in order of first triangle
    _, first_idx, relabel = np.unique(tri_comp_raw, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first_idx))
    tri_comp = rank[relabel.reshape(-1)]

    return TriMesh(
        vertices=verts,
        triangles=tris,
        edges=edges.astype(np.int64),
        bend_pairs=bend_pairs,
        rest_edge_lengths=rest_lengths,
        rest_dihedral_angles=angles,
        tri_edges=tri_edges.astype(np.int64),
        bend_edges=interior.astype(np.int64),
        edge_face_count=counts.astype(np.int64),
        triangle_components=tri_comp.astype(np.int64),
        n_components=int(len(first_idx)),
    )


def _wing_normals(p1, p2, p3, p4):
    e = p2 - p1
    c1 = np.cross(e, p3 - p1)
    c2 = np.cross(e, p4 - p1)
    return e, c1, c2


def dihedral_angle(p1, p2, p3, p4) -> float:
    """Angle in [0, pi] between the wing normals of a bend pair.

    Raises DegenerateGeometryError if either wing triangle has zero area.
    """
    p1, p2, p3, p4 = (np.asarray(p, dtype=np.float64) for p in (p1, p2, p3, p4))
    _, c1, c2 = _wing_normals(p1, p2, p3, p4)
    n1 = np.linalg.norm(c1)
    n2 = np.linalg.norm(c2)
    if n1 == 0.0 or n2 == 0.0:
        raise DegenerateGeometryError("wing triangle has zero area")
    d = float(np.dot(c1, c2) / (n1 * n2))
    return float(np.arccos(min(1.0, max(-1.0, d))))


def dihedral_angles(positions, bend_pairs):
    """Vectorized :func:`dihedral_angle`; returns ``(angles, valid_mask)``."""
    p = np.asarray(positions, dtype=np.float64)
    b = np.asarray(bend_pairs, dtype=np.int64).reshape(-1, 4)
    _, c1, c2 = _wing_normals(p[b[:, 0]], p[b[:, 1]], p[b[:, 2]], p[b[:, 3]])
    n1 = np.linalg.norm(c1, axis=1)
    n2 = np.linalg.norm(c2, axis=1)
    valid = (n1 > 0) & (n2 > 0)
    denom = np.where(valid, n1 * n2, 1.0)
    d = np.clip(np.einsum("ij,ij->i", c1, c2) / denom, -1.0, 1.0)
    return np.arccos(d), valid


def dihedral_angle_gradients(positions, bend_pairs):
    """Angles and their gradients w.r.t. the four points of each pair.

    Returns ``(angles, grads)`` with ``grads`` of shape (B, 4, 3). The
    gradient is taken in the form that stays finite away from the two
    fold singularities (angle exactly 0 or pi), where it is set to zero.
    """
    p = np.asarray(positions, dtype=np.float64)
    b = np.asarray(bend_pairs, dtype=np.int64).reshape(-1, 4)
    x1, x2, x3, x4 = p[b[:, 0]], p[b[:, 1]], p[b[:, 2]], p[b[:, 3]]
    e = x2 - x1
    elen2 = np.einsum("ij,ij->i", e, e)
    c1 = np.cross(e, x3 - x1)
    c2 = np.cross(e, x4 - x1)
    n1 = np.linalg.norm(c1, axis=1)
    n2 = np.linalg.norm(c2, axis=1)
    safe1 = np.where(n1 > 0, n1, 1.0)
    safe2 = np.where(n2 > 0, n2, 1.0)
    u1 = c1 / safe1[:, None]
    u2 = c2 / safe2[:, None]
    cosv = np.clip(np.einsum("ij,ij->i", u1, u2), -1.0, 1.0)
    sinv = np.linalg.norm(np.cross(u1, u2), axis=1)
    angles = np.arctan2(sinv, cosv)

    elen = np.sqrt(elen2)
    # heights of the wings over the shared edge
    h3 = n1 / np.where(elen > 0, elen, 1.0)
    h4 = n2 / np.where(elen > 0, elen, 1.0)
    # a wing moves along its own normal, towards the side facing away from the other wing
    ehat = e / np.where(elen > 0, elen, 1.0)[:, None]
    s3 = -np.sign(np.einsum("ij,ij->i", np.cross(ehat, u1), u2))
    s4 = -np.sign(np.einsum("ij,ij->i", np.cross(ehat, u2), u1))
    g3 = (s3 / np.where(h3 > 0, h3, 1.0))[:, None] * u1
    g4 = (s4 / np.where(h4 > 0, h4, 1.0))[:, None] * u2
    safe_e2 = np.where(elen2 > 0, elen2, 1.0)
    a3 = np.einsum("ij,ij->i", x3 - x1, e) / safe_e2
    a4 = np.einsum("ij,ij->i", x4 - x1, e) / safe_e2
    g1 = -(1.0 - a3)[:, None] * g3 - (1.0 - a4)[:, None] * g4
    g2 = -a3[:, None] * g3 - a4[:, None] * g4
    grads = np.stack([g1, g2, g3, g4], axis=1)
    ok = (n1 > 0) & (n2 > 0) & (sinv > 1e-12)
    grads[~ok] = 0.0
    return angles, grads


def scatter_add(target, index, values):
    """In-place ``target[index] += values`` with repeated indices accumulated (rows of 3)."""
    index = np.asarray(index).ravel()
    if len(index) == 0:
        return target
    values = np.asarray(values, dtype=np.float64).reshape(len(index), -1)
    n = len(target)
    for c in range(values.shape[1]):
        target[:, c] += np.bincount(index, weights=values[:, c], minlength=n)
    return target


def edge_lengths(positions, edges):
    p = np.asarray(positions, dtype=np.float64)
    return np.linalg.norm(p[edges[:, 1]] - p[edges[:, 0]], axis=1)


def vertex_normals(positions, triangles):
    """Area-weighted vertex normals (unit length)."""
    p = np.asarray(positions, dtype=np.float64)
    fn = triangle_normals(p, triangles, normalize=False)
    vn = np.zeros_like(p)
    for k in range(3):
        scatter_add(vn, triangles[:, k], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.where(norm > 0, norm, 1.0)
