"""Loss terms of the contact-aware fitting objective, each with its gradient.

All geometric quantities are in meters; 2D terms are in pixels. Gradients
are returned with respect to the 3D points a term consumes; chaining into
model parameters happens in :mod:`handface.fitting`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriMesh, dihedral_angle_gradients, edge_lengths, scatter_add
from .model import Camera, RigidTransform, project
from .query import penetration_set

BCE_EPS = 1e-7
DEF_PSI = 0.1
CONTACT_THRESHOLD = 0.5


@dataclass
class ContactSet:
    face_probs: np.ndarray
    hand_probs: np.ndarray

    def __post_init__(self):
        self.face_probs = np.asarray(self.face_probs, dtype=np.float64)
        self.hand_probs = np.asarray(self.hand_probs, dtype=np.float64)
        for name in ("face_probs", "hand_probs"):
            a = getattr(self, name)
            if a.size and (a.min() < 0 or a.max() > 1):
                raise ValueError(f"{name} outside [0, 1]")

    @property
    def face_indices(self):
        return np.nonzero(self.face_probs > CONTACT_THRESHOLD)[0]

    @property
    def hand_indices(self):
        return np.nonzero(self.hand_probs > CONTACT_THRESHOLD)[0]

    def to_dict(self):
        return {"face_probs": self.face_probs.tolist(), "hand_probs": self.hand_probs.tolist()}

    @classmethod
    def from_dict(cls, d) -> "ContactSet":
        return cls(d["face_probs"], d["hand_probs"])


def depth_weights(latent_norms):
    """``1 - minmax(eta)``; a constant ``eta`` gives all ones."""
    eta = np.asarray(latent_norms, dtype=np.float64)
    if eta.size == 0:
        raise ValueError("at least one sample is required")
    lo, hi = eta.min(), eta.max()
    if hi <= lo:
        return np.ones_like(eta)
    return 1.0 - (eta - lo) / (hi - lo)


@dataclass
class PriorSampleSet:
    samples: np.ndarray  # (u, K, 3) hand landmarks in the canonical face frame
    latent_norms: np.ndarray  # (u,)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.latent_norms = np.asarray(self.latent_norms, dtype=np.float64)
        if self.samples.ndim != 3 or self.samples.shape[2] != 3:
            raise ValueError("samples must be (u, K, 3)")
        if len(self.samples) < 1 or len(self.samples) != len(self.latent_norms):
            raise ValueError("one latent norm per sample is required")

    @property
    def weights(self):
        return depth_weights(self.latent_norms)

    def to_dict(self):
        return {"samples": self.samples.tolist(), "latent_norms": self.latent_norms.tolist()}

    @classmethod
    def from_dict(cls, d) -> "PriorSampleSet":
        return cls(np.asarray(d["samples"]), np.asarray(d["latent_norms"]))


# -- reprojection ---------------------------------------------------------------


def loss_2d(camera: Camera, points3d, points2d, confidences):
    """Confidence-weighted mean squared reprojection error (px^2) and d/dpoints."""
    X = np.asarray(points3d, dtype=np.float64)
    ref = np.asarray(points2d, dtype=np.float64)
    conf = np.asarray(confidences, dtype=np.float64)
    if len(conf) != len(X) or len(ref) != len(X):
        raise ValueError("landmark, observation and confidence counts differ")
    uv, J = project(camera, X, jacobian=True)
    r = uv - ref
    K = len(X)
    value = float(np.sum(conf * np.sum(r * r, axis=1)) / K)
    grad = (2.0 / K) * conf[:, None] * np.einsum("ka,kab->kb", r, J)
    return value, grad


# -- temporal / coefficient prior ------------------------------------------------


@dataclass
class RegTerms:
    value: float
    beta: float
    psi: float
    velocity: float
    acceleration: float
    grad_vertices: np.ndarray  # (T, V, 3)
    grad_beta: list
    grad_psi: list


def loss_reg(betas, psis, vertex_sequence, lambda_beta, lambda_psi, lambda_vel, lambda_acc, dt):
    """Coefficient L2 penalties plus finite-difference velocity / acceleration.

    Velocity and acceleration are averaged over vertices and over the
    available differences; with fewer than 3 frames the acceleration term
    is omitted, with a single frame the velocity term too.
    """
    V = np.asarray(vertex_sequence, dtype=np.float64)
    T = len(V)
    gv = np.zeros_like(V)
    beta_val = sum(float(np.dot(b, b)) for b in betas)
    psi_val = sum(float(np.dot(p, p)) for p in psis)
    g_beta = [2.0 * lambda_beta * np.asarray(b, dtype=np.float64) for b in betas]
    g_psi = [2.0 * lambda_psi * np.asarray(p, dtype=np.float64) for p in psis]
    vel = acc = 0.0
    nv = V.shape[1]
    if T >= 2:
        d = (V[1:] - V[:-1]) / dt
        n = (T - 1) * nv
        vel = float(np.sum(d * d) / n)
        g = lambda_vel * 2.0 * d / (n * dt)
        gv[1:] += g
        gv[:-1] -= g
    if T >= 3:
        a = (V[2:] - 2.0 * V[1:-1] + V[:-2]) / dt**2
        n = (T - 2) * nv
        acc = float(np.sum(a * a) / n)
        g = lambda_acc * 2.0 * a / (n * dt**2)
        gv[2:] += g
        gv[1:-1] -= 2.0 * g
        gv[:-2] += g
    value = lambda_beta * beta_val + lambda_psi * psi_val + lambda_vel * vel + lambda_acc * acc
    return RegTerms(value, beta_val, psi_val, vel, acc, gv, g_beta, g_psi)


# -- touch ----------------------------------------------------------------------


@dataclass
class TouchTerms:
    value: float
    grad_face: np.ndarray
    grad_hand: np.ndarray
    active: bool


def chamfer(A, B):
    """Symmetric mean squared-nearest-neighbour distance and gradients."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    _, ia = cKDTree(B).query(A)
    _, ib = cKDTree(A).query(B)
    da = A - B[ia]
    db = B - A[ib]
    value = float(np.sum(da * da) / len(A) + np.sum(db * db) / len(B))
    gA = 2.0 * da / len(A)
    gB = -2.0 * da / len(A)
    gB_full = np.zeros_like(B)
    scatter_add(gB_full, ia, gB)
    gA_full = gA.copy()
    scatter_add(gA_full, ib, -2.0 * db / len(B))
    gB_full += 2.0 * db / len(B)
    return value, gA_full, gB_full


def loss_touch(face_vertices, hand_vertices, contacts: ContactSet) -> TouchTerms:
    """Chamfer between the effective face and hand contact vertices.

    Inactive (value 0) when either effective set is empty.
    """
    Vf = np.asarray(face_vertices, dtype=np.float64)
    Vh = np.asarray(hand_vertices, dtype=np.float64)
    gf = np.zeros_like(Vf)
    gh = np.zeros_like(Vh)
    if len(contacts.face_probs) != len(Vf) or len(contacts.hand_probs) != len(Vh):
        raise ValueError("contact probabilities do not match vertex counts")
    cf, ch = contacts.face_indices, contacts.hand_indices
    if len(cf) == 0 or len(ch) == 0:
        return TouchTerms(0.0, gf, gh, False)
    value, ga, gb = chamfer(Vf[cf], Vh[ch])
    gf[cf] = ga
    gh[ch] = gb
    return TouchTerms(value, gf, gh, True)


# -- collision + deformation regulariser -------------------------------------------


@dataclass
class RestData:
    """Fixed rest edge lengths and dihedral angles for the regulariser."""

    edge_lengths: np.ndarray
    dihedral_angles: np.ndarray

    @classmethod
    def from_positions(cls, mesh: TriMesh, positions) -> "RestData":
        ang, _ = dihedral_angle_gradients(positions, mesh.bend_pairs)
        return cls(edge_lengths(positions, mesh.edges), ang)


@dataclass
class CollisionTerms:
    value: float
    penetration: float
    edge: float
    bend: float
    anchor: float
    n_penetrating: int
    grad_hand: np.ndarray
    grad_surface: np.ndarray  # w.r.t. the deformed face vertices V* = V_f + p
    grad_rest: np.ndarray | None  # w.r.t. the rest positions (when given as positions)
    grad_p: np.ndarray  # the explicit ||p - p0||^2 part only


def _edge_term(positions, edges, rest_len, weights):
    a = positions[edges[:, 0]]
    b = positions[edges[:, 1]]
    d = a - b
    ln = np.linalg.norm(d, axis=1)
    r = ln - rest_len
    value = float(np.sum(weights * r * r))
    unit = d / np.where(ln > 0, ln, 1.0)[:, None]
    ge = (2.0 * weights * r)[:, None] * unit
    g = np.zeros_like(positions)
    scatter_add(g, edges[:, 0], ge)
    scatter_add(g, edges[:, 1], -ge)
    return value, g, ge


def loss_regdef(surface, rest, mesh: TriMesh, p, p0, s_edge, s_bend):
    """Stiffness-weighted edge and dihedral deviation from rest, plus ``||p - p0||^2``.

    ``rest`` is either a :class:`RestData` (constant) or an array of rest
    positions, in which case its gradient is returned as well.
    """
    X = np.asarray(surface, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    p0 = np.asarray(p0, dtype=np.float64)
    s_edge = np.asarray(s_edge, dtype=np.float64)
    s_bend = np.asarray(s_bend, dtype=np.float64)
    grad_rest = None
    if isinstance(rest, RestData):
        l0, phi0 = rest.edge_lengths, rest.dihedral_angles
        Xr = None
    else:
        Xr = np.asarray(rest, dtype=np.float64)
        l0 = edge_lengths(Xr, mesh.edges)
        phi0, gphi0 = dihedral_angle_gradients(Xr, mesh.bend_pairs)
    edge_val, g, ge = _edge_term(X, mesh.edges, l0, s_edge)
    phi, gphi = dihedral_angle_gradients(X, mesh.bend_pairs)
    rb = phi - phi0
    bend_val = float(np.sum(s_bend * rb * rb))
    coef = 2.0 * s_bend * rb
    scatter_add(g, mesh.bend_pairs.ravel(), (coef[:, None, None] * gphi).reshape(-1, 3))
    if Xr is not None:
        grad_rest = np.zeros_like(Xr)
        dr = Xr[mesh.edges[:, 0]] - Xr[mesh.edges[:, 1]]
        unit0 = dr / np.where(l0 > 0, l0, 1.0)[:, None]
        c = (-2.0 * s_edge * (edge_lengths(X, mesh.edges) - l0))[:, None] * unit0
        scatter_add(grad_rest, mesh.edges[:, 0], c)
        scatter_add(grad_rest, mesh.edges[:, 1], -c)
        scatter_add(grad_rest, mesh.bend_pairs.ravel(), (-coef[:, None, None] * gphi0).reshape(-1, 3))
    dp = p - p0
    anchor = float(np.sum(dp * dp))
    return edge_val, bend_val, anchor, g, grad_rest, 2.0 * dp


def loss_collision(
    hand_vertices,
    face_vertices,
    face_mesh: TriMesh,
    p,
    p0,
    s_edge,
    s_bend,
    rest,
    use_regdef: bool = True,
) -> CollisionTerms:
    """Penetration of hand vertices into the deformed face plus the regulariser.

    ``face_vertices`` are the deformed positions ``V_f + p``. Penetrating hand
    vertices are those with negative signed distance to that surface; each is
    pulled towards its nearest face vertex.
    """
    Vh = np.asarray(hand_vertices, dtype=np.float64)
    Vs = np.asarray(face_vertices, dtype=np.float64)
    gh = np.zeros_like(Vh)
    gs = np.zeros_like(Vs)
    pen = penetration_set(Vh, face_mesh, Vs)
    idx = np.array([i for i, _ in pen], dtype=np.int64)
    pen_val = 0.0
    if len(idx):
        _, nn = cKDTree(Vs).query(Vh[idx])
        d = Vh[idx] - Vs[nn]
        pen_val = float(np.sum(d * d))
        gh[idx] = 2.0 * d
        scatter_add(gs, nn, -2.0 * d)
    edge_val = bend_val = anchor = 0.0
    grad_rest = None
    gp = np.zeros_like(Vs)
    if use_regdef:
        edge_val, bend_val, anchor, g_reg, grad_rest, gp = loss_regdef(Vs, rest, face_mesh, p, p0, s_edge, s_bend)
        gs += g_reg
    value = pen_val + edge_val + bend_val + anchor
    return CollisionTerms(value, pen_val, edge_val, bend_val, anchor, len(idx), gh, gs, grad_rest, gp)


# -- depth prior ----------------------------------------------------------------------


@dataclass
class DepthTerms:
    value: float
    grad_landmarks: np.ndarray  # (K, 3), only z non-zero
    grad_translation: np.ndarray  # (3,)
    grad_rotation_matrix: np.ndarray  # (3, 3)


def loss_depth(hand_landmarks, samples: PriorSampleSet, transform: RigidTransform) -> DepthTerms:
    """Weighted squared gap between landmark depths and transformed sample depths."""
    J = np.asarray(hand_landmarks, dtype=np.float64)
    S = samples.samples
    if S.shape[1] != len(J):
        raise ValueError("sample landmark count does not match hand landmarks")
    w = samples.weights
    R = transform.rotation
    zs = S @ R[2] + transform.translation[2]  # (u, K)
    r = J[None, :, 2] - zs
    value = float(np.sum(w[:, None] * r * r))
    gz = 2.0 * np.sum(w[:, None] * r, axis=0)
    gJ = np.zeros_like(J)
    gJ[:, 2] = gz
    gt = np.zeros(3)
    gt[2] = -float(np.sum(gz))
    gR = np.zeros((3, 3))
    gR[2] = -2.0 * np.einsum("u,uk,ukc->c", w, r, S)
    return DepthTerms(value, gJ, gt, gR)


# -- training losses -------------------------------------------------------------------


def binary_cross_entropy(pred, target, eps=BCE_EPS):
    """Mean BCE with predictions clamped to [eps, 1 - eps]; returns (value, d/dpred)."""
    c = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if c.shape != t.shape:
        raise ValueError("prediction and label sizes differ")
    cc = np.clip(c, eps, 1.0 - eps)
    n = c.size
    value = float(-np.mean(t * np.log(cc) + (1.0 - t) * np.log(1.0 - cc)))
    inside = (c > eps) & (c < 1.0 - eps)
    grad = np.where(inside, (cc - t) / (cc * (1.0 - cc)) / n, 0.0)
    return value, grad


def train_loss_labels(pred_cf, pred_ch, gt_cf, gt_ch):
    vf, _ = binary_cross_entropy(pred_cf, gt_cf)
    vh, _ = binary_cross_entropy(pred_ch, gt_ch)
    return vf + vh


def train_loss_def(pred_p, gt_p, psi=DEF_PSI, return_grad=False):
    """Weighted displacement error plus a norm penalty on displacements above ``psi``."""
    p = np.asarray(pred_p, dtype=np.float64)
    g = np.asarray(gt_p, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError("prediction and ground truth sizes differ")
    M = len(p)
    w = np.where(np.linalg.norm(g, axis=1) == 0.0, 0.3, 1.0)
    pn = np.linalg.norm(p, axis=1)
    b = (pn > psi).astype(np.float64)
    diff = p - g
    value = float(np.sum(w * np.sum(diff * diff, axis=1) + b * pn) / M)
    if not return_grad:
        return value
    grad = (2.0 * w[:, None] * diff + (b / np.where(pn > 0, pn, 1.0))[:, None] * p) / M
    return value, grad


def merge_union(deformations, contact_labels):
    """Merge per-hand predictions: larger-norm displacement wins, labels are OR-ed."""
    D = np.asarray(deformations, dtype=np.float64)  # (H, M, 3)
    L = np.asarray(contact_labels, dtype=bool)  # (H, M)
    norms = np.linalg.norm(D, axis=2)
    pick = np.argmax(norms, axis=0)  # first hand wins ties
    merged = D[pick, np.arange(D.shape[1])]
    return merged, np.any(L, axis=0)
