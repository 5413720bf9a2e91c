"""Tissue stiffness from skin-to-skull distance.

Thin tissue over bone (small distance) is stiff, thick tissue is soft:
distances are min-max normalized to ``d_hat`` and mapped to
``s = (1 - d_hat) ** b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriMesh
from .query import closest_points

DEFAULT_EXPONENT = 4.0


@dataclass(frozen=True)
class StiffnessMap:
    vertex_stiffness: np.ndarray
    edge_stiffness: np.ndarray
    bend_stiffness: np.ndarray

    def __post_init__(self):
        for name in ("vertex_stiffness", "edge_stiffness", "bend_stiffness"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError(f"{name} outside [0, 1]")
            object.__setattr__(self, name, arr)

    def check(self, mesh: TriMesh):
        if len(self.vertex_stiffness) != mesh.n_vertices:
            raise ValueError("vertex stiffness count does not match mesh")
        if len(self.edge_stiffness) != len(mesh.edges):
            raise ValueError("edge stiffness count does not match mesh")
        if len(self.bend_stiffness) != len(mesh.bend_pairs):
            raise ValueError("bend stiffness count does not match mesh")

    @classmethod
    def uniform(cls, mesh: TriMesh, value: float) -> "StiffnessMap":
        return cls(
            np.full(mesh.n_vertices, float(value)),
            np.full(len(mesh.edges), float(value)),
            np.full(len(mesh.bend_pairs), float(value)),
        )

    @classmethod
    def from_vertex_stiffness(cls, mesh: TriMesh, vertex_s) -> "StiffnessMap":
        s_edge, s_bend = derive_edge_bend_stiffness(mesh, vertex_s)
        return cls(np.asarray(vertex_s, dtype=np.float64), s_edge, s_bend)

    def to_dict(self):
        return {
            "vertex_stiffness": self.vertex_stiffness.tolist(),
            "edge_stiffness": self.edge_stiffness.tolist(),
            "bend_stiffness": self.bend_stiffness.tolist(),
        }

    @classmethod
    def from_dict(cls, data) -> "StiffnessMap":
        return cls(
            np.asarray(data["vertex_stiffness"], dtype=np.float64),
            np.asarray(data["edge_stiffness"], dtype=np.float64),
            np.asarray(data["bend_stiffness"], dtype=np.float64),
        )


def ssd_distances(skin_mesh: TriMesh, skull_mesh: TriMesh, skin_positions=None, skull_positions=None):
    """Unsigned distance from every skin vertex to the skull surface."""
    if skull_mesh is None or skull_mesh.n_triangles == 0:
        raise ValueError("empty skull mesh")
    skin_p = skin_mesh.vertices if skin_positions is None else skin_positions
    skull_p = skull_mesh.vertices if skull_positions is None else skull_positions
    batch = closest_points(skin_p, skull_mesh, skull_p)
    return np.abs(batch.signed_distance)


def stiffness_from_distances(distances, exponent: float = DEFAULT_EXPONENT):
    """``(1 - d_hat) ** exponent``; constant input maps to all ones."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no distances given")
    lo = d.min()
    hi = d.max()
    if hi <= lo:
        return np.ones_like(d)
    d_hat = (d - lo) / (hi - lo)
    return np.clip(1.0 - d_hat, 0.0, 1.0) ** exponent


def transfer_stiffness(source_vertices, source_s, target_vertices):
    """Nearest source vertex wins; exact ties go to the lowest source index."""
    src = np.asarray(source_vertices, dtype=np.float64).reshape(-1, 3)
    s = np.asarray(source_s, dtype=np.float64)
    if len(src) == 0:
        raise ValueError("empty source")
    if len(s) != len(src):
        raise ValueError("stiffness count does not match source vertices")
    tgt = np.asarray(target_vertices, dtype=np.float64).reshape(-1, 3)
    tree = cKDTree(src)
    k = min(8, len(src))
    dist, idx = tree.query(tgt, k=k)
    dist = np.atleast_2d(dist.reshape(len(tgt), k))
    idx = np.atleast_2d(idx.reshape(len(tgt), k))
    # cKDTree tie order is unspecified; resolve among exact ties explicitly
    d2 = ((src[idx] - tgt[:, None, :]) ** 2).sum(axis=2)
    best = d2.min(axis=1, keepdims=True)
    cand = np.where(d2 == best, idx, np.iinfo(np.int64).max)
    winner = cand.min(axis=1)
    return s[winner]


def derive_edge_bend_stiffness(mesh: TriMesh, vertex_s):
    """Edge stiffness = mean over its 2 vertices, bend = mean over its 4."""
    s = np.asarray(vertex_s, dtype=np.float64)
    if len(s) != mesh.n_vertices:
        raise ValueError(f"expected {mesh.n_vertices} vertex stiffness values, got {len(s)}")
    s_edge = s[mesh.edges].mean(axis=1)
    s_bend = s[mesh.bend_pairs].mean(axis=1) if len(mesh.bend_pairs) else np.zeros(0)
    return s_edge, s_bend


def ssd_stiffness_map(skin_mesh: TriMesh, skull_mesh: TriMesh, target_mesh: TriMesh, exponent=DEFAULT_EXPONENT):
    """Full pipeline: SSD on the skin, transfer to the target, edge/bend averages."""
    d = ssd_distances(skin_mesh, skull_mesh)
    s_skin = stiffness_from_distances(d, exponent)
    s_target = transfer_stiffness(skin_mesh.vertices, s_skin, target_mesh.vertices)
    return StiffnessMap.from_vertex_stiffness(target_mesh, s_target)
