"""Position-based dynamics for a deformable surface pushed by kinematic colliders.

Constraints: edge stretch, dihedral bending, target tracking and unilateral
collision planes, projected Gauss-Seidel style in that fixed order, followed
by Coulomb-like position friction on the contacts. Constraint stiffness
``k`` is converted to a per-iteration value ``1 - (1 - k) ** (1 / n)`` so
the effective stiffness does not depend on the iteration count.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .mesh import TriMesh, dihedral_angles, edge_lengths
from .query import closest_points
from .stiffness import StiffnessMap

BEND_EPS = 1e-9


class SimulationError(RuntimeError):
    pass


class DegenerateConstraintWarning(UserWarning):
    pass


@dataclass
class SimState:
    positions: np.ndarray
    prev_positions: np.ndarray
    velocities: np.ndarray
    inv_mass: np.ndarray

    @classmethod
    def at_rest(cls, positions, inv_mass=None) -> "SimState":
        x = np.array(positions, dtype=np.float64)
        w = np.ones(len(x)) if inv_mass is None else np.array(inv_mass, dtype=np.float64)
        return cls(x, x.copy(), np.zeros_like(x), w)

    def copy(self) -> "SimState":
        return SimState(self.positions.copy(), self.prev_positions.copy(), self.velocities.copy(), self.inv_mass.copy())

    def validate(self):
        n = len(self.positions)
        for name in ("prev_positions", "velocities", "inv_mass"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length does not match positions")
        if np.any(self.inv_mass < 0):
            raise ValueError("inverse masses must be non-negative")
        if not np.all(np.isfinite(self.velocities)):
            raise ValueError("velocities must be finite")


@dataclass
class ConstraintSet:
    """Index arrays plus rest values and stiffness per constraint."""

    stretch_edges: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    stretch_rest: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stretch_k: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bend_pairs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    bend_rest: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bend_k: np.ndarray = field(default_factory=lambda: np.zeros(0))
    track_vertices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    track_targets: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    track_k: np.ndarray = field(default_factory=lambda: np.zeros(0))
    collision_vertices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    collision_normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    collision_offsets: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def from_mesh(
        cls,
        mesh: TriMesh,
        stiffness: StiffnessMap | None = None,
        rest_positions=None,
        track_targets=None,
        track_k=None,
    ) -> "ConstraintSet":
        """Stretch and bend on every edge / bend pair, optional tracking.

        Rest lengths and angles come from ``rest_positions`` (default: the
        mesh rest pose). Bend pairs whose rest wings are degenerate are left out.
        """
        rest = mesh.vertices if rest_positions is None else np.asarray(rest_positions, dtype=np.float64)
        s_edge = np.ones(len(mesh.edges)) if stiffness is None else stiffness.edge_stiffness
        s_bend = np.ones(len(mesh.bend_pairs)) if stiffness is None else stiffness.bend_stiffness
        angles, ok = dihedral_angles(rest, mesh.bend_pairs)
        cs = cls(
            stretch_edges=np.arange(len(mesh.edges), dtype=np.int64),
            stretch_rest=edge_lengths(rest, mesh.edges),
            stretch_k=np.asarray(s_edge, dtype=np.float64).copy(),
            bend_pairs=np.nonzero(ok)[0].astype(np.int64),
            bend_rest=angles[ok],
            bend_k=np.asarray(s_bend, dtype=np.float64)[ok].copy(),
        )
        if track_targets is not None:
            targets = np.asarray(track_targets, dtype=np.float64)
            cs.track_vertices = np.arange(len(targets), dtype=np.int64)
            cs.track_targets = targets.copy()
            k = 1.0 if track_k is None else track_k
            cs.track_k = np.broadcast_to(np.asarray(k, dtype=np.float64), (len(targets),)).copy()
        return cs

    def validate(self, mesh: TriMesh):
        for name in ("stretch_k", "bend_k", "track_k"):
            k = getattr(self, name)
            if len(k) and (k.min() < 0 or k.max() > 1):
                raise ValueError(f"{name} must lie in [0, 1]")
        if len(self.stretch_edges) and self.stretch_edges.max() >= len(mesh.edges):
            raise ValueError("stretch constraint references a missing edge")
        if len(self.bend_pairs) and self.bend_pairs.max() >= len(mesh.bend_pairs):
            raise ValueError("bend constraint references a missing bend pair")
        if len(self.track_vertices) and self.track_vertices.max() >= mesh.n_vertices:
            raise ValueError("track constraint references a missing vertex")
        if len(self.collision_normals):
            if not np.allclose(np.linalg.norm(self.collision_normals, axis=1), 1.0, atol=1e-9):
                raise ValueError("collision normals must be unit length")


@dataclass
class SolverConfig:
    dt: float = 0.02
    iterations: int = 20
    substeps: int = 1
    friction_static: float = 0.5
    friction_kinetic: float = 0.5
    gravity: tuple = (0.0, 0.0, 0.0)
    skin_offset: float = 0.002
    contact_margin: float = 0.005
    velocity_damping: float = 0.0  # fraction of velocity removed per sub-step

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.iterations < 1 or self.substeps < 1:
            raise ValueError("iterations and substeps must be >= 1")
        if not 0.0 <= self.velocity_damping <= 1.0:
            raise ValueError("velocity_damping must lie in [0, 1]")
        for mu in (self.friction_static, self.friction_kinetic):
            if not 0.0 <= mu <= 1.0:
                raise ValueError("friction coefficients must lie in [0, 1]")

    def to_dict(self):
        return {
            "dt": self.dt,
            "iterations": self.iterations,
            "substeps": self.substeps,
            "friction_static": self.friction_static,
            "friction_kinetic": self.friction_kinetic,
            "gravity": list(self.gravity),
            "skin_offset": self.skin_offset,
            "contact_margin": self.contact_margin,
            "velocity_damping": self.velocity_damping,
        }

    @classmethod
    def from_dict(cls, data) -> "SolverConfig":
        data = dict(data)
        if "gravity" in data:
            data["gravity"] = tuple(data["gravity"])
        return cls(**data)


@dataclass
class Collider:
    """Kinematic obstacle: mesh topology with its current and previous pose."""

    mesh: TriMesh
    positions: np.ndarray
    prev_positions: np.ndarray | None = None

    def at(self, alpha: float) -> np.ndarray:
        if self.prev_positions is None:
            return self.positions
        return self.prev_positions + alpha * (self.positions - self.prev_positions)


def iteration_stiffness(k, iterations):
    """Per-iteration stiffness giving stiffness ``k`` after ``iterations`` passes."""
    k = np.clip(np.asarray(k, dtype=np.float64), 0.0, 1.0)
    return 1.0 - (1.0 - k) ** (1.0 / iterations)


# -- single-constraint kernels ------------------------------------------------


@numba.njit(cache=True)
def _stretch_delta(pa, pb, wa, wb, l0, k, out_a, out_b):
    dx = pa[0] - pb[0]; dy = pa[1] - pb[1]; dz = pa[2] - pb[2]
    dist = np.sqrt(dx * dx + dy * dy + dz * dz)
    wsum = wa + wb
    out_a[:] = 0.0
    out_b[:] = 0.0
    if dist <= 0.0 or wsum <= 0.0:
        return False
    s = k * (dist - l0) / (wsum * dist)
    out_a[0] = -wa * s * dx; out_a[1] = -wa * s * dy; out_a[2] = -wa * s * dz
    out_b[0] = wb * s * dx; out_b[1] = wb * s * dy; out_b[2] = wb * s * dz
    return True


@numba.njit(cache=True)
def _bend_delta(P, w, phi0, k, out):
    """Corrections along the gradient of acos(n1 . n2) - phi0.

    ``P`` holds p1..p4 as rows; ``out`` (4, 3) receives the corrections.
    Written with scalars only so the solver loop does not allocate.
    """
    for i in range(4):
        for a in range(3):
            out[i, a] = 0.0
    ex = P[1, 0] - P[0, 0]; ey = P[1, 1] - P[0, 1]; ez = P[1, 2] - P[0, 2]
    ax = P[2, 0] - P[0, 0]; ay = P[2, 1] - P[0, 1]; az = P[2, 2] - P[0, 2]
    bx = P[3, 0] - P[0, 0]; by = P[3, 1] - P[0, 1]; bz = P[3, 2] - P[0, 2]
    # c1 = e x u3, c2 = e x u4
    c1x = ey * az - ez * ay; c1y = ez * ax - ex * az; c1z = ex * ay - ey * ax
    c2x = ey * bz - ez * by; c2y = ez * bx - ex * bz; c2z = ex * by - ey * bx
    l1 = np.sqrt(c1x * c1x + c1y * c1y + c1z * c1z)
    l2 = np.sqrt(c2x * c2x + c2y * c2y + c2z * c2z)
    if l1 <= 0.0 or l2 <= 0.0:
        return False
    n1x = c1x / l1; n1y = c1y / l1; n1z = c1z / l1
    n2x = c2x / l2; n2y = c2y / l2; n2z = c2z / l2
    d = n1x * n2x + n1y * n2y + n1z * n2z
    if abs(d) >= 1.0 - BEND_EPS:
        return False
    C = np.arccos(d) - phi0
    # dd/dc1 = (n2 - d n1) / |c1|, dd/dc2 = (n1 - d n2) / |c2|
    g1x = (n2x - d * n1x) / l1; g1y = (n2y - d * n1y) / l1; g1z = (n2z - d * n1z) / l1
    g2x = (n1x - d * n2x) / l2; g2y = (n1y - d * n2y) / l2; g2z = (n1z - d * n2z) / l2
    # dc1 = de x u3 + e x du3  ->  dd/dp3 = g1 x e, dd/dp2 = u3 x g1 + u4 x g2
    f = -1.0 / np.sqrt(1.0 - d * d)
    g3x = f * (g1y * ez - g1z * ey); g3y = f * (g1z * ex - g1x * ez); g3z = f * (g1x * ey - g1y * ex)
    g4x = f * (g2y * ez - g2z * ey); g4y = f * (g2z * ex - g2x * ez); g4z = f * (g2x * ey - g2y * ex)
    g2vx = f * ((ay * g1z - az * g1y) + (by * g2z - bz * g2y))
    g2vy = f * ((az * g1x - ax * g1z) + (bz * g2x - bx * g2z))
    g2vz = f * ((ax * g1y - ay * g1x) + (bx * g2y - by * g2x))
    g1vx = -(g2vx + g3x + g4x); g1vy = -(g2vy + g3y + g4y); g1vz = -(g2vz + g3z + g4z)
    denom = (
        w[0] * (g1vx * g1vx + g1vy * g1vy + g1vz * g1vz)
        + w[1] * (g2vx * g2vx + g2vy * g2vy + g2vz * g2vz)
        + w[2] * (g3x * g3x + g3y * g3y + g3z * g3z)
        + w[3] * (g4x * g4x + g4y * g4y + g4z * g4z)
    )
    if denom <= 1e-30:
        return False
    s = k * C / denom
    out[0, 0] = -s * w[0] * g1vx; out[0, 1] = -s * w[0] * g1vy; out[0, 2] = -s * w[0] * g1vz
    out[1, 0] = -s * w[1] * g2vx; out[1, 1] = -s * w[1] * g2vy; out[1, 2] = -s * w[1] * g2vz
    out[2, 0] = -s * w[2] * g3x; out[2, 1] = -s * w[2] * g3y; out[2, 2] = -s * w[2] * g3z
    out[3, 0] = -s * w[3] * g4x; out[3, 1] = -s * w[3] * g4y; out[3, 2] = -s * w[3] * g4z
    return True


@numba.njit(cache=True)
def _solve_iterations(
    x, w, edges, st_e, st_l0, st_k,
    bends, bd_b, bd_phi0, bd_k,
    tr_v, tr_t, tr_k,
    co_v, co_n, co_h, co_depth,
    iterations,
):
    dbend = np.empty((4, 3))
    wq = np.empty(4)
    pq = np.empty((4, 3))
    for _ in range(iterations):
        for c in range(st_e.shape[0]):
            e = st_e[c]
            i = edges[e, 0]
            j = edges[e, 1]
            wsum = w[i] + w[j]
            dx = x[i, 0] - x[j, 0]; dy = x[i, 1] - x[j, 1]; dz = x[i, 2] - x[j, 2]
            dist = np.sqrt(dx * dx + dy * dy + dz * dz)
            if dist <= 0.0 or wsum <= 0.0:
                continue
            s = st_k[c] * (dist - st_l0[c]) / (wsum * dist)
            x[i, 0] -= w[i] * s * dx; x[i, 1] -= w[i] * s * dy; x[i, 2] -= w[i] * s * dz
            x[j, 0] += w[j] * s * dx; x[j, 1] += w[j] * s * dy; x[j, 2] += w[j] * s * dz
        for c in range(bd_b.shape[0]):
            b = bd_b[c]
            for q in range(4):
                wq[q] = w[bends[b, q]]
                for a in range(3):
                    pq[q, a] = x[bends[b, q], a]
            if _bend_delta(pq, wq, bd_phi0[c], bd_k[c], dbend):
                for q in range(4):
                    for a in range(3):
                        x[bends[b, q], a] += dbend[q, a]
        for c in range(tr_v.shape[0]):
            v = tr_v[c]
            if w[v] > 0.0:
                k = tr_k[c]
                for a in range(3):
                    x[v, a] += k * (tr_t[c, a] - x[v, a])
        for c in range(co_v.shape[0]):
            v = co_v[c]
            if w[v] <= 0.0:
                continue
            gap = co_n[c, 0] * x[v, 0] + co_n[c, 1] * x[v, 1] + co_n[c, 2] * x[v, 2] - co_h[c]
            if gap < 0.0:
                for a in range(3):
                    x[v, a] -= gap * co_n[c, a]
                if -gap > co_depth[c]:
                    co_depth[c] = -gap


# -- public single-constraint projections ---------------------------------------


def project_stretch(pA, pB, wA, wB, l0, k_iter):
    """Mass-weighted correction restoring ``|pA - pB|`` towards ``l0``.

    Coincident points (or two pinned points) yield zero correction and a
    :class:`DegenerateConstraintWarning`.
    """
    da = np.zeros(3)
    db = np.zeros(3)
    ok = _stretch_delta(
        np.asarray(pA, dtype=np.float64), np.asarray(pB, dtype=np.float64),
        float(wA), float(wB), float(l0), float(k_iter), da, db,
    )
    if not ok:
        warnings.warn("stretch constraint skipped: coincident points or zero mass", DegenerateConstraintWarning, stacklevel=2)
    return da, db


def project_bend(p1, p2, p3, p4, w1, w2, w3, w4, phi0, k_iter):
    """Corrections (4, 3) along the dihedral-angle gradient.

    Returns zeros with a warning when the wing normals are (anti)parallel,
    where the arccosine gradient is singular.
    """
    pts = [np.asarray(p, dtype=np.float64) for p in (p1, p2, p3, p4)]
    out = np.zeros((4, 3))
    ok = _bend_delta(np.stack(pts), np.array([w1, w2, w3, w4], dtype=np.float64), float(phi0), float(k_iter), out)
    if not ok:
        warnings.warn("bend constraint skipped: singular gradient", DegenerateConstraintWarning, stacklevel=2)
    return out


def project_collision(p, n, h):
    """Push ``p`` onto the half-space ``n . p >= h``; zero if already there."""
    p = np.asarray(p, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    gap = float(n @ p) - h
    return -gap * n if gap < 0.0 else np.zeros(3)


def project_track(p, p_ref, k_iter):
    return k_iter * (np.asarray(p_ref, dtype=np.float64) - np.asarray(p, dtype=np.float64))


@dataclass
class ContactRecord:
    """Collision constraints of one step and what the solver did with them."""

    vertices: np.ndarray
    normals: np.ndarray
    offsets: np.ndarray
    depths: np.ndarray  # largest correction applied, >= 0
    collider_motion: np.ndarray  # displacement of the touched collider point during the step


def friction_correction(delta, normal, depth, mu_s, mu_k):
    """Position correction removing (part of) the tangential motion ``delta``.

    Static: the whole tangential part is cancelled when it is shorter than
    ``mu_s * depth``. Kinetic: it is reduced by ``mu_k * depth`` (never past zero).
    """
    delta = np.asarray(delta, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    tangential = delta - np.sum(delta * n, axis=-1, keepdims=True) * n
    t_norm = np.linalg.norm(tangential, axis=-1, keepdims=True)
    depth = np.asarray(depth, dtype=np.float64)[..., None]
    static = t_norm < mu_s * depth
    scale = np.where(t_norm > 0, np.minimum(mu_k * depth / np.where(t_norm > 0, t_norm, 1.0), 1.0), 0.0)
    return -np.where(static, tangential, tangential * scale)


def apply_friction(state: SimState, contacts: ContactRecord, mu_s: float, mu_k: float) -> SimState:
    """Damp tangential motion of vertices whose collision constraint fired."""
    if len(contacts.vertices) == 0:
        return state
    hit = contacts.depths > 0.0
    v = contacts.vertices[hit]
    if len(v) == 0:
        return state
    delta = state.positions[v] - state.prev_positions[v] - contacts.collider_motion[hit]
    corr = friction_correction(delta, contacts.normals[hit], contacts.depths[hit], mu_s, mu_k)
    corr *= (state.inv_mass[v] > 0)[:, None]
    # a vertex touching several colliders gets each correction in turn
    np.add.at(state.positions, v, corr)
    return state


def _barycentric(p, a, b, c):
    v0 = b - a
    v1 = c - a
    v2 = p - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    den = d00 * d11 - d01 * d01
    den = np.where(den != 0, den, 1.0)
    bv = (d11 * d20 - d01 * d21) / den
    bw = (d00 * d21 - d01 * d20) / den
    return np.stack([1.0 - bv - bw, bv, bw], axis=1)


def generate_collisions(predicted, colliders, config: SolverConfig, alpha_prev=0.0, alpha_now=1.0):
    """Collision planes for vertices near or inside any collider.

    The plane passes through the closest collider point, offset outward by
    the skin offset, with the outward surface direction as normal.
    """
    verts, normals, offsets, motion = [], [], [], []
    reach = config.skin_offset + config.contact_margin
    for col in colliders:
        pos_now = col.at(alpha_now)
        pos_prev = col.at(alpha_prev)
        batch = closest_points(predicted, col.mesh, pos_now, union=True, max_distance=reach)
        near = np.nonzero(batch.signed_distance < reach)[0]
        if len(near) == 0:
            continue
        n = batch.normals[near]
        cp = batch.points[near]
        tri = col.mesh.triangles[batch.triangle_index[near]]
        bary = _barycentric(cp, pos_now[tri[:, 0]], pos_now[tri[:, 1]], pos_now[tri[:, 2]])
        disp = pos_now[tri] - pos_prev[tri]
        verts.append(near)
        normals.append(n)
        offsets.append(np.einsum("ij,ij->i", n, cp) + config.skin_offset)
        motion.append(np.einsum("ik,ikj->ij", bary, disp))
    if not verts:
        return ContactRecord(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros((0, 3)))
    return ContactRecord(
        np.concatenate(verts).astype(np.int64),
        np.concatenate(normals),
        np.concatenate(offsets),
        np.zeros(sum(len(v) for v in verts)),
        np.concatenate(motion),
    )


def step(
    state: SimState,
    mesh: TriMesh,
    stiffness_map: StiffnessMap | None,
    constraints: ConstraintSet,
    colliders=(),
    config: SolverConfig | None = None,
) -> SimState:
    """Advance one frame (``config.substeps`` sub-steps of ``dt / substeps``).

    ``stiffness_map`` is only used to check sizes; constraint stiffness
    lives in ``constraints``. Collision constraints in ``constraints`` are
    replaced by the ones generated against ``colliders`` each sub-step.
    """
    config = config or SolverConfig()
    state.validate()
    if len(state.positions) != mesh.n_vertices:
        raise ValueError("state size does not match mesh")
    if stiffness_map is not None:
        stiffness_map.check(mesh)
    constraints.validate(mesh)
    n = config.iterations
    st_k = iteration_stiffness(constraints.stretch_k, n)
    bd_k = iteration_stiffness(constraints.bend_k, n)
    tr_k = iteration_stiffness(constraints.track_k, n)
    gravity = np.asarray(config.gravity, dtype=np.float64)
    h = config.dt / config.substeps
    w = np.ascontiguousarray(state.inv_mass)
    movable = (w > 0)[:, None]
    state = state.copy()
    for sub in range(config.substeps):
        start = state.positions.copy()
        vel = state.velocities + h * gravity * movable
        x = np.ascontiguousarray(start + h * vel * movable)
        contacts = generate_collisions(x, colliders, config, sub / config.substeps, (sub + 1) / config.substeps)
        constraints.collision_vertices = contacts.vertices
        constraints.collision_normals = contacts.normals
        constraints.collision_offsets = contacts.offsets
        _solve_iterations(
            x, w, mesh.edges, constraints.stretch_edges, constraints.stretch_rest, st_k,
            mesh.bend_pairs, constraints.bend_pairs, constraints.bend_rest, bd_k,
            constraints.track_vertices, np.ascontiguousarray(constraints.track_targets), tr_k,
            contacts.vertices, np.ascontiguousarray(contacts.normals), contacts.offsets, contacts.depths,
            n,
        )
        state.prev_positions = start
        state.positions = x
        apply_friction(state, contacts, config.friction_static, config.friction_kinetic)
        if not np.all(np.isfinite(state.positions)):
            bad = int(np.nonzero(~np.all(np.isfinite(state.positions), axis=1))[0][0])
            raise SimulationError(f"non-finite position at vertex {bad} (substep {sub})")
        state.velocities = (1.0 - config.velocity_damping) * (state.positions - start) / h
    return state


def track_stiffness_from_vertices(vertex_s, base: float, floor: float):
    """Per-vertex tracking stiffness ``base * (floor + (1 - floor) * s)``."""
    s = np.asarray(vertex_s, dtype=np.float64)
    return np.clip(base * (floor + (1.0 - floor) * s), 0.0, 1.0)


@dataclass
class TrackingConfig:
    """How stiffness values become constraint stiffness in tracking runs."""

    solver: SolverConfig = field(default_factory=lambda: SolverConfig(velocity_damping=0.5))
    stretch_scale: float = 1.0
    bend_scale: float = 1.0
    track_base: float = 0.5
    track_floor: float = 0.05
    steps_per_frame: int = 4

    def to_dict(self):
        return {
            "solver": self.solver.to_dict(),
            "stretch_scale": self.stretch_scale,
            "bend_scale": self.bend_scale,
            "track_base": self.track_base,
            "track_floor": self.track_floor,
            "steps_per_frame": self.steps_per_frame,
        }

    @classmethod
    def from_dict(cls, data) -> "TrackingConfig":
        data = dict(data)
        solver = SolverConfig.from_dict(data.pop("solver", {"velocity_damping": 0.5}))
        return cls(solver=solver, **data)


def simulate_tracking(
    template_mesh: TriMesh,
    stiffness_map: StiffnessMap,
    reference_sequence,
    collider_sequence,
    config: TrackingConfig | None = None,
    collider_mesh: TriMesh | None = None,
):
    """Follow a reference animation while resolving collider contact.

    ``collider_sequence`` is either a list (per frame) of :class:`Collider`
    lists, or an array (T, N, 3) of positions for ``collider_mesh``. The
    state is carried along with the reference motion between frames, so a
    frame without contact reproduces its reference exactly.

    Returns ``(deformed, displacements)``, each (T, V, 3).
    """
    config = config or TrackingConfig()
    ref = np.asarray(reference_sequence, dtype=np.float64)
    if ref.ndim != 3 or ref.shape[1:] != (template_mesh.n_vertices, 3):
        raise ValueError(f"reference sequence shape {ref.shape} does not match template topology")
    n_frames = len(ref)
    frames = _collider_frames(collider_sequence, collider_mesh, n_frames)
    stiffness_map.check(template_mesh)
    k_track = track_stiffness_from_vertices(stiffness_map.vertex_stiffness, config.track_base, config.track_floor)
    scaled = StiffnessMap(
        stiffness_map.vertex_stiffness,
        np.clip(stiffness_map.edge_stiffness * config.stretch_scale, 0.0, 1.0),
        np.clip(stiffness_map.bend_stiffness * config.bend_scale, 0.0, 1.0),
    )
    solver = replace(config.solver)
    state = SimState.at_rest(ref[0])
    deformed = np.empty_like(ref)
    prev_frame_colliders = None
    for t in range(n_frames):
        if t > 0:
            shift = ref[t] - ref[t - 1]
            state.positions = state.positions + shift
            state.prev_positions = state.prev_positions + shift
        cs = ConstraintSet.from_mesh(template_mesh, scaled, rest_positions=ref[t], track_targets=ref[t], track_k=k_track)
        colliders_now = frames[t]
        for s in range(config.steps_per_frame):
            stepped = []
            for ci, col in enumerate(colliders_now):
                if prev_frame_colliders is not None and s == 0:
                    prev = prev_frame_colliders[ci].positions
                else:
                    prev = col.positions
                stepped.append(Collider(col.mesh, col.positions, prev))
            try:
                state = step(state, template_mesh, scaled, cs, stepped, solver)
            except SimulationError as exc:
                raise SimulationError(f"frame {t}: {exc}") from exc
        deformed[t] = state.positions
        prev_frame_colliders = colliders_now
    return deformed, deformed - ref


def _collider_frames(collider_sequence, collider_mesh, n_frames):
    if collider_mesh is not None:
        arr = np.asarray(collider_sequence, dtype=np.float64)
        if arr.ndim != 3 or len(arr) != n_frames:
            raise ValueError("collider positions must be (T, N, 3) with one frame per reference frame")
        if arr.shape[1] != collider_mesh.n_vertices:
            raise ValueError("collider positions do not match collider mesh")
        return [[Collider(collider_mesh, arr[t])] for t in range(n_frames)]
    frames = list(collider_sequence)
    if len(frames) != n_frames:
        raise ValueError("one collider list per frame is required")
    return [list(f) if isinstance(f, (list, tuple)) else [f] for f in frames]
