"""Closest-point and signed-distance queries against triangle meshes.

The sign comes from angle-weighted pseudo-normals of the closest feature
(face, edge or vertex), which is exact for closed, consistently oriented
meshes. For open meshes the sign falls back to the face normal of the
closest triangle. Meshes made of several closed shells are treated as the
union of solids when testing for penetration.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numba
import numpy as np

from .mesh import TriMesh, scatter_add, triangle_normals

_FACE = 0
_VERTEX = 1  # 1, 2, 3 -> triangle corner 0, 1, 2
_EDGE = 4  # 4, 5, 6 -> local edge 0, 1, 2


class OpenMeshWarning(UserWarning):
    """Signed distance requested against a mesh that is not watertight."""


@dataclass(frozen=True)
class SurfaceQueryResult:
    point: np.ndarray
    triangle_index: int
    normal: np.ndarray
    signed_distance: float


@dataclass
class SurfaceQueryBatch:
    points: np.ndarray  # (Q, 3)
    triangle_index: np.ndarray  # (Q,)
    normals: np.ndarray  # (Q, 3) unit, outward; sd = n . (q - point)
    signed_distance: np.ndarray  # (Q,)

    def __len__(self):
        return len(self.signed_distance)

    def __getitem__(self, i) -> SurfaceQueryResult:
        return SurfaceQueryResult(
            point=self.points[i].copy(),
            triangle_index=int(self.triangle_index[i]),
            normal=self.normals[i].copy(),
            signed_distance=float(self.signed_distance[i]),
        )


@numba.njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    # Ericson, Real-Time Collision Detection, 5.1.5 with region codes
    ab0 = b[0] - a[0]; ab1 = b[1] - a[1]; ab2 = b[2] - a[2]
    ac0 = c[0] - a[0]; ac1 = c[1] - a[1]; ac2 = c[2] - a[2]
    ap0 = p[0] - a[0]; ap1 = p[1] - a[1]; ap2 = p[2] - a[2]
    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    if d1 <= 0.0 and d2 <= 0.0:
        return a[0], a[1], a[2], 1
    bp0 = p[0] - b[0]; bp1 = p[1] - b[1]; bp2 = p[2] - b[2]
    d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
    d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
    if d3 >= 0.0 and d4 <= d3:
        return b[0], b[1], b[2], 2
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a[0] + v * ab0, a[1] + v * ab1, a[2] + v * ab2, 4
    cp0 = p[0] - c[0]; cp1 = p[1] - c[1]; cp2 = p[2] - c[2]
    d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
    d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
    if d6 >= 0.0 and d5 <= d6:
        return c[0], c[1], c[2], 3
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a[0] + w * ac0, a[1] + w * ac1, a[2] + w * ac2, 6
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b[0] + w * (c[0] - b[0]), b[1] + w * (c[1] - b[1]), b[2] + w * (c[2] - b[2]), 5
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (
        a[0] + ab0 * v + ac0 * w,
        a[1] + ab1 * v + ac1 * w,
        a[2] + ab2 * v + ac2 * w,
        0,
    )


@numba.njit(cache=True)
def _query_kernel(
    queries, P, T, tri_comp, vert_comp, n_comp, centroids, radii,
    face_n, vert_n, edge_n, tri_edges, closed, union, active,
    out_point, out_tri, out_normal, out_sd,
):
    nq = queries.shape[0]
    nf = T.shape[0]
    nv = P.shape[0]
    best_d2 = np.empty(n_comp)
    best_t = np.empty(n_comp, dtype=np.int64)
    best_r = np.empty(n_comp, dtype=np.int64)
    best_p = np.empty((n_comp, 3))
    q = np.empty(3)
    for qi in range(nq):
        if not active[qi]:
            continue
        q[0] = queries[qi, 0]; q[1] = queries[qi, 1]; q[2] = queries[qi, 2]
        for c in range(n_comp):
            best_d2[c] = np.inf
            best_t[c] = -1
        # nearest vertex per shell gives an upper bound for pruning
        for v in range(nv):
            c = vert_comp[v]
            if c < 0:
                continue
            dx = P[v, 0] - q[0]; dy = P[v, 1] - q[1]; dz = P[v, 2] - q[2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best_d2[c]:
                best_d2[c] = d2
        for c in range(n_comp):
            best_d2[c] = best_d2[c] * (1.0 + 1e-12) + 1e-300
        for t in range(nf):
            c = tri_comp[t]
            dx = centroids[t, 0] - q[0]; dy = centroids[t, 1] - q[1]; dz = centroids[t, 2] - q[2]
            lb = np.sqrt(dx * dx + dy * dy + dz * dz) - radii[t]
            if lb > 0.0 and lb * lb > best_d2[c]:
                continue
            x, y, z, reg = _closest_on_triangle(q, P[T[t, 0]], P[T[t, 1]], P[T[t, 2]])
            dx = x - q[0]; dy = y - q[1]; dz = z - q[2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best_d2[c] or (best_t[c] < 0 and d2 <= best_d2[c]):
                best_d2[c] = d2
                best_t[c] = t
                best_r[c] = reg
                best_p[c, 0] = x; best_p[c, 1] = y; best_p[c, 2] = z
        chosen = -1
        chosen_key = np.inf
        chosen_sd = 0.0
        chosen_n = np.zeros(3)
        for c in range(n_comp):
            t = best_t[c]
            if t < 0:
                continue
            reg = best_r[c]
            if not closed:
                nx = face_n[t, 0]; ny = face_n[t, 1]; nz = face_n[t, 2]
            elif reg == 0:
                nx = face_n[t, 0]; ny = face_n[t, 1]; nz = face_n[t, 2]
            elif reg < 4:
                vid = T[t, reg - 1]
                nx = vert_n[vid, 0]; ny = vert_n[vid, 1]; nz = vert_n[vid, 2]
            else:
                eid = tri_edges[t, reg - 4]
                nx = edge_n[eid, 0]; ny = edge_n[eid, 1]; nz = edge_n[eid, 2]
            dx = q[0] - best_p[c, 0]; dy = q[1] - best_p[c, 1]; dz = q[2] - best_p[c, 2]
            dist = np.sqrt(dx * dx + dy * dy + dz * dz)
            s = 1.0
            if dx * nx + dy * ny + dz * nz < 0.0:
                s = -1.0
            sd = s * dist
            key = dist
            if union:
                key = sd
            if key < chosen_key:
                chosen_key = key
                chosen = c
                chosen_sd = sd
                if dist > 0.0:
                    chosen_n[0] = s * dx / dist; chosen_n[1] = s * dy / dist; chosen_n[2] = s * dz / dist
                else:
                    nn = np.sqrt(nx * nx + ny * ny + nz * nz)
                    chosen_n[0] = nx / nn; chosen_n[1] = ny / nn; chosen_n[2] = nz / nn
        out_tri[qi] = best_t[chosen]
        out_point[qi, 0] = best_p[chosen, 0]
        out_point[qi, 1] = best_p[chosen, 1]
        out_point[qi, 2] = best_p[chosen, 2]
        out_normal[qi, 0] = chosen_n[0]
        out_normal[qi, 1] = chosen_n[1]
        out_normal[qi, 2] = chosen_n[2]
        out_sd[qi] = chosen_sd


def pseudo_normals(mesh: TriMesh, positions):
    """Face normals, angle-weighted vertex normals and edge normals."""
    P = np.asarray(positions, dtype=np.float64)
    T = mesh.triangles
    fn = triangle_normals(P, T)
    vn = np.zeros_like(P)
    for k in range(3):
        a = P[T[:, k]]
        b = P[T[:, (k + 1) % 3]]
        c = P[T[:, (k + 2) % 3]]
        u = b - a
        w = c - a
        cosang = np.einsum("ij,ij->i", u, w) / (np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1))
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        scatter_add(vn, T[:, k], ang[:, None] * fn)
    en = np.zeros((len(mesh.edges), 3))
    scatter_add(en, mesh.tri_edges.ravel(), np.repeat(fn, 3, axis=0))
    for arr in (vn, en):
        norm = np.linalg.norm(arr, axis=1, keepdims=True)
        arr /= np.where(norm > 0, norm, 1.0)
    return fn, vn, en


def _prepare(mesh: TriMesh, positions):
    P = np.ascontiguousarray(positions, dtype=np.float64)
    if P.shape != (mesh.n_vertices, 3):
        raise ValueError(f"positions shape {P.shape} does not match mesh with {mesh.n_vertices} vertices")
    T = mesh.triangles
    tri_pts = P[T]
    centroids = tri_pts.mean(axis=1)
    radii = np.sqrt(((tri_pts - centroids[:, None, :]) ** 2).sum(axis=2).max(axis=1))
    fn, vn, en = pseudo_normals(mesh, P)
    vert_comp = np.full(mesh.n_vertices, -1, dtype=np.int64)
    for k in range(3):
        vert_comp[T[:, k]] = mesh.triangle_components
    return P, np.ascontiguousarray(centroids), radii, fn, vn, en, vert_comp


def closest_points(queries, mesh: TriMesh, positions, *, union=False, max_distance=None) -> SurfaceQueryBatch:
    """Exact closest surface points for many queries.

    With ``max_distance`` set, queries outside the mesh bounding box grown
    by that margin are skipped and reported with ``signed_distance=inf``.
    With ``union`` the result is the shell giving the smallest signed
    distance (union-of-solids semantics) instead of the nearest shell.
    """
    if mesh.n_triangles == 0:
        raise ValueError("empty mesh")
    Q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
    P, centroids, radii, fn, vn, en, vert_comp = _prepare(mesh, positions)
    active = np.ones(len(Q), dtype=np.bool_)
    if max_distance is not None:
        lo = P.min(axis=0) - max_distance
        hi = P.max(axis=0) + max_distance
        active = np.all((Q >= lo) & (Q <= hi), axis=1)
    n = len(Q)
    out_point = np.full((n, 3), np.nan)
    out_tri = np.full(n, -1, dtype=np.int64)
    out_normal = np.zeros((n, 3))
    out_sd = np.full(n, np.inf)
    _query_kernel(
        Q, P, mesh.triangles, mesh.triangle_components, vert_comp, mesh.n_components,
        centroids, radii, fn, vn, en, mesh.tri_edges, mesh.is_closed, union, active,
        out_point, out_tri, out_normal, out_sd,
    )
    return SurfaceQueryBatch(out_point, out_tri, out_normal, out_sd)


def closest_point(query, mesh: TriMesh, positions) -> SurfaceQueryResult:
    return closest_points(np.asarray(query, dtype=np.float64)[None], mesh, positions)[0]


def signed_distances(queries, mesh: TriMesh, positions, max_distance=None):
    """Union-of-shells signed distance for each query (negative inside)."""
    return closest_points(queries, mesh, positions, union=True, max_distance=max_distance).signed_distance


def penetration_set(probe_positions, target_mesh: TriMesh, target_positions):
    """Probes strictly inside the target surface.

    Returns a list of ``(probe_index, SurfaceQueryResult)`` sorted by probe
    index. An open target triggers :class:`OpenMeshWarning`; the sign then
    comes from the closest face normal.
    """
    if not target_mesh.is_closed:
        warnings.warn("target mesh is not watertight; using face-normal sign test", OpenMeshWarning, stacklevel=2)
        batch = closest_points(probe_positions, target_mesh, target_positions, union=True)
    else:
        batch = closest_points(probe_positions, target_mesh, target_positions, union=True, max_distance=0.0)
    idx = np.nonzero(batch.signed_distance < 0.0)[0]
    return [(int(i), batch[i]) for i in idx]


def penetration_depths(probe_positions, target_mesh: TriMesh, target_positions):
    """Per-probe penetration depth (>= 0), zero for probes outside."""
    if target_mesh.is_closed:
        sd = signed_distances(probe_positions, target_mesh, target_positions, max_distance=0.0)
    else:
        sd = signed_distances(probe_positions, target_mesh, target_positions)
    return np.where(sd < 0.0, -sd, 0.0)
