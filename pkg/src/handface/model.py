"""Generic parametric surface model: rigid + linear blendshapes + joint chains.

    V = R(r) . LBS(T + B_s beta + B_e psi, theta) + tau

Joints form a forest; each joint rotates its subtree about a fixed rest-space
pivot. Skinning weights not assigned to any joint stay with the root (the
identity transform). All parameter Jacobians are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import math

import numpy as np

from .mesh import TriMesh, build_topology


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rodrigues(w):
    """Rotation matrix of the axis-angle vector ``w``."""
    w = np.asarray(w, dtype=np.float64)
    theta = math.sqrt(float(w @ w))
    K = skew(w)
    if theta < 1e-12:
        return np.eye(3) + K
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def rodrigues_jacobian(w):
    """``(R, dR)`` with ``dR[i] = dR / dw_i`` (3, 3, 3)."""
    w = np.asarray(w, dtype=np.float64)
    R = rodrigues(w)
    t2 = float(w @ w)
    if t2 < 1e-16:
        return R, _GENERATORS.copy()
    # dR_i = (w_i [w]x + [w x (I - R) e_i]x) R / |w|^2
    C = np.cross(w, (np.eye(3) - R).T)  # row i: w x (I - R) e_i
    S = np.zeros((3, 3, 3))
    S[:, 0, 1], S[:, 0, 2], S[:, 1, 2] = -C[:, 2], C[:, 1], -C[:, 0]
    S[:, 1, 0], S[:, 2, 0], S[:, 2, 1] = C[:, 2], -C[:, 1], C[:, 0]
    S += w[:, None, None] * skew(w)[None]
    return R, (S @ R) / t2


_GENERATORS = np.array([skew(e) for e in np.eye(3)])


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, x):
        return np.asarray(x, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_inverse(self, y):
        return (np.asarray(y, dtype=np.float64) - self.translation) @ self.rotation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)


@dataclass(frozen=True)
class Joint:
    pivot: np.ndarray
    parent: int  # -1 for a root joint
    weights: np.ndarray  # (V,)
    name: str = ""
    pivot_shape: np.ndarray | None = None  # (3, S): pivot moves with the shape coefficients


@dataclass(frozen=True)
class DeformableModel:
    template: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (F, 3)
    shape_basis: np.ndarray  # (V, 3, S)
    expression_basis: np.ndarray  # (V, 3, E)
    joints: tuple = ()
    landmark_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    name: str = "model"

    def __post_init__(self):
        V = len(self.template)
        if self.shape_basis.shape[:2] != (V, 3) or self.expression_basis.shape[:2] != (V, 3):
            raise ValueError("basis dimensions do not match the template")
        total = np.zeros(V)
        for j, joint in enumerate(self.joints):
            if joint.weights.shape != (V,):
                raise ValueError(f"joint {j} weight vector has the wrong length")
            if joint.weights.min() < 0 or joint.weights.max() > 1:
                raise ValueError(f"joint {j} weights outside [0, 1]")
            if not -1 <= joint.parent < j:
                raise ValueError(f"joint {j} must have a parent listed before it")
            if joint.pivot_shape is not None and joint.pivot_shape.shape != (3, self.n_shape):
                raise ValueError(f"joint {j} pivot shape basis must be (3, {self.n_shape})")
            total += joint.weights
        if np.any(total > 1 + 1e-9):
            raise ValueError("skinning weights sum above 1")
        if len(self.landmark_indices) and (self.landmark_indices.min() < 0 or self.landmark_indices.max() >= V):
            raise ValueError("landmark index out of range")

    @property
    def n_vertices(self):
        return len(self.template)

    @property
    def n_shape(self):
        return self.shape_basis.shape[2]

    @property
    def n_expression(self):
        return self.expression_basis.shape[2]

    @property
    def n_joints(self):
        return len(self.joints)

    @cached_property
    def mesh(self) -> TriMesh:
        return build_topology(self.template, self.triangles)

    @cached_property
    def _chains(self):
        chains = []
        for j, joint in enumerate(self.joints):
            chain = [j]
            p = joint.parent
            while p >= 0:
                chain.append(p)
                p = self.joints[p].parent
            chains.append(chain[::-1])  # root first
        return chains

    def zero_params(self) -> "ModelParams":
        return ModelParams.zeros(self)


@dataclass
class ModelParams:
    translation: np.ndarray
    rotation: np.ndarray
    shape: np.ndarray
    expression: np.ndarray
    articulation: np.ndarray  # (J, 3)

    @classmethod
    def zeros(cls, model: DeformableModel) -> "ModelParams":
        return cls(np.zeros(3), np.zeros(3), np.zeros(model.n_shape), np.zeros(model.n_expression), np.zeros((model.n_joints, 3)))

    def copy(self) -> "ModelParams":
        return ModelParams(*(np.array(a, dtype=np.float64) for a in (self.translation, self.rotation, self.shape, self.expression, self.articulation)))

    def check(self, model: DeformableModel):
        if np.shape(self.translation) != (3,) or np.shape(self.rotation) != (3,):
            raise ValueError("translation and rotation must be 3-vectors")
        if len(self.shape) != model.n_shape:
            raise ValueError(f"expected {model.n_shape} shape coefficients, got {len(self.shape)}")
        if len(self.expression) != model.n_expression:
            raise ValueError(f"expected {model.n_expression} expression coefficients, got {len(self.expression)}")
        if np.shape(self.articulation) != (model.n_joints, 3):
            raise ValueError(f"expected articulation of shape ({model.n_joints}, 3), got {np.shape(self.articulation)}")
        for a in (self.translation, self.rotation, self.shape, self.expression, self.articulation):
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite parameter")

    def to_vector(self) -> np.ndarray:
        """Layout: [translation, rotation, shape, expression, articulation]."""
        return np.concatenate([self.translation, self.rotation, self.shape, self.expression, np.ravel(self.articulation)])

    @classmethod
    def from_vector(cls, model: DeformableModel, vec) -> "ModelParams":
        v = np.asarray(vec, dtype=np.float64)
        S, E, J = model.n_shape, model.n_expression, model.n_joints
        if len(v) != 6 + S + E + 3 * J:
            raise ValueError("parameter vector length does not match model")
        return cls(v[0:3].copy(), v[3:6].copy(), v[6:6 + S].copy(), v[6 + S:6 + S + E].copy(), v[6 + S + E:].reshape(J, 3).copy())

    def to_dict(self):
        return {
            "translation": self.translation.tolist(),
            "rotation": self.rotation.tolist(),
            "shape": np.asarray(self.shape).tolist(),
            "expression": np.asarray(self.expression).tolist(),
            "articulation": np.asarray(self.articulation).tolist(),
        }

    @classmethod
    def from_dict(cls, data, model: DeformableModel | None = None) -> "ModelParams":
        p = cls(
            np.asarray(data["translation"], dtype=np.float64),
            np.asarray(data["rotation"], dtype=np.float64),
            np.asarray(data.get("shape", []), dtype=np.float64),
            np.asarray(data.get("expression", []), dtype=np.float64),
            np.asarray(data.get("articulation", []), dtype=np.float64).reshape(-1, 3),
        )
        if model is not None:
            p.check(model)
        return p


def param_slices(model: DeformableModel):
    S, E, J = model.n_shape, model.n_expression, model.n_joints
    return {
        "translation": slice(0, 3),
        "rotation": slice(3, 6),
        "shape": slice(6, 6 + S),
        "expression": slice(6 + S, 6 + S + E),
        "articulation": slice(6 + S + E, 6 + S + E + 3 * J),
    }


def joint_pivots(model: DeformableModel, shape):
    """Pivot positions (J, 3) for the given shape coefficients."""
    out = np.empty((model.n_joints, 3))
    for j, joint in enumerate(model.joints):
        out[j] = joint.pivot if joint.pivot_shape is None else joint.pivot + joint.pivot_shape @ shape
    return out


def _joint_transforms(model: DeformableModel, theta, pivots):
    """Global affine (A_j, b_j) per joint, local rotations with derivatives and db_j/dshape."""
    J = model.n_joints
    S = model.n_shape
    local = [rodrigues_jacobian(theta[j]) for j in range(J)]
    A = np.empty((J, 3, 3))
    b = np.empty((J, 3))
    Db = np.zeros((J, 3, S))
    for j, joint in enumerate(model.joints):
        R = local[j][0]
        c = pivots[j]
        dc = joint.pivot_shape
        if joint.parent < 0:
            A[j] = R
            b[j] = c - R @ c
            if dc is not None:
                Db[j] = (np.eye(3) - R) @ dc
        else:
            p = joint.parent
            A[j] = A[p] @ R
            b[j] = A[p] @ (c - R @ c) + b[p]
            Db[j] = Db[p]
            if dc is not None:
                Db[j] = Db[j] + A[p] @ (np.eye(3) - R) @ dc
    return A, b, local, Db


def evaluate(model: DeformableModel, params: ModelParams, jacobian: bool = False):
    """Posed vertices (V, 3); with ``jacobian`` also dV/dparams (V, 3, P)."""
    params.check(model)
    rest = model.template + model.shape_basis @ params.shape + model.expression_basis @ params.expression
    V = model.n_vertices
    J = model.n_joints
    theta = np.asarray(params.articulation, dtype=np.float64).reshape(J, 3)
    if J:
        pivots = joint_pivots(model, params.shape)
        A, b, local, Db = _joint_transforms(model, theta, pivots)
        W = np.stack([jt.weights for jt in model.joints], axis=1)  # (V, J)
        w_root = 1.0 - W.sum(axis=1)
        M = (W @ A.reshape(J, 9)).reshape(V, 3, 3) + w_root[:, None, None] * np.eye(3)
        t = W @ b
        U = (M @ rest[:, :, None])[:, :, 0] + t
    else:
        M = None
        U = rest
    R, dR = rodrigues_jacobian(params.rotation)
    out = U @ R.T + params.translation
    if not jacobian:
        return out
    sl = param_slices(model)
    P = sl["articulation"].stop
    Jac = np.zeros((V, 3, P))
    Jac[:, :, 0:3] = np.eye(3)
    for i in range(3):
        Jac[:, :, 3 + i] = U @ dR[i].T
    if M is None:
        RM = np.broadcast_to(R, (V, 3, 3))
    else:
        RM = R @ M
    if model.n_shape:
        Jac[:, :, sl["shape"]] = RM @ model.shape_basis
        if J and Db.any():
            Jac[:, :, sl["shape"]] += R @ (W @ Db.reshape(J, -1)).reshape(V, 3, -1)
    if model.n_expression:
        Jac[:, :, sl["expression"]] = RM @ model.expression_basis
    if J:
        off = sl["articulation"].start
        for j in range(J):
            wj = W[:, j]
            active = np.nonzero(wj)[0]
            if len(active) == 0:
                continue
            x = rest[active]
            chain = model._chains[j]
            # G_j = prefix(k) o L_k o suffix(k); derivative acts on L_k only
            for pos, k in enumerate(chain):
                parent = model.joints[k].parent
                A_pre = np.eye(3) if parent < 0 else A[parent]
                # suffix transform: joints after k in the chain, applied to x
                y = x
                for q in reversed(chain[pos + 1:]):
                    Rq = local[q][0]
                    cq = pivots[q]
                    y = (y - cq) @ Rq.T + cq
                rel = y - pivots[k]
                dRk = local[k][1]
                for i in range(3):
                    d = rel @ (R @ A_pre @ dRk[i]).T
                    Jac[active, :, off + 3 * k + i] += wj[active, None] * d
    return out, Jac


def compose_deformed(vertices, deformation):
    v = np.asarray(vertices, dtype=np.float64)
    p = np.asarray(deformation, dtype=np.float64)
    if v.shape != p.shape:
        raise ValueError(f"deformation shape {p.shape} does not match vertices {v.shape}")
    return v + p


def landmarks(model: DeformableModel, vertices):
    return np.asarray(vertices)[model.landmark_indices]


def face_frame_transform(params: ModelParams) -> RigidTransform:
    """Canonical face space to camera frame: x -> R(r) x + tau."""
    return RigidTransform(rodrigues(params.rotation), np.asarray(params.translation, dtype=np.float64).copy())


class ProjectionError(ValueError):
    def __init__(self, indices):
        self.indices = np.asarray(indices)
        super().__init__(f"points behind the camera (z <= 0) at indices {self.indices.tolist()[:10]}")


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, data) -> "Camera":
        return cls(float(data["fx"]), float(data["fy"]), float(data["cx"]), float(data["cy"]))


def project(camera: Camera, points, jacobian: bool = False):
    """Pinhole projection to pixels; ``jacobian`` adds d(u,v)/d(x,y,z) (N, 2, 3)."""
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = X[:, 2]
    bad = np.nonzero(~(z > 0))[0]
    if len(bad):
        raise ProjectionError(bad)
    u = camera.fx * X[:, 0] / z + camera.cx
    v = camera.fy * X[:, 1] / z + camera.cy
    uv = np.stack([u, v], axis=1)
    if not jacobian:
        return uv
    Jp = np.zeros((len(X), 2, 3))
    Jp[:, 0, 0] = camera.fx / z
    Jp[:, 0, 2] = -camera.fx * X[:, 0] / z**2
    Jp[:, 1, 1] = camera.fy / z
    Jp[:, 1, 2] = -camera.fy * X[:, 1] / z**2
    return uv, Jp
