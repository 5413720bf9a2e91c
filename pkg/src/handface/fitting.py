"""Joint face / hand / deformation fitting over a window of frames.

The objective is the sum over frames of the face and hand terms:
reprojection, coefficient and temporal priors, touch (Chamfer between
predicted contact regions), collision with the deformation regulariser,
and the canonical-frame depth prior. Gradients are analytic and chained
through the model Jacobians; minimisation uses Adam with cosine decay.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .losses import ContactSet, PriorSampleSet, RestData
from .mesh import scatter_add
from .model import Camera, DeformableModel, ModelParams, evaluate, face_frame_transform, landmarks, param_slices, rodrigues_jacobian
from .stiffness import StiffnessMap


class OptimizationError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class FitConfig:
    lambda_touch: float = 0.1
    lambda_col: float = 1.0
    lambda_depth: float = 3e-3
    lambda_beta: float = 1e-5
    lambda_psi: float = 1e-3
    lambda_vel: float = 3e-4
    lambda_acc: float = 3e-4
    keypoint_scale: float = 30.0  # pixels per unit of normalised 2D residual
    steps: int = 500
    lr_translation: float = 2e-3  # metres per step
    lr_rigid: float = 1e-2  # rotation, rad per step
    lr_pose: float = 1e-2
    lr_deform: float = 1e-4
    lr_final_fraction: float = 0.01
    shared_deform_moment: bool = True
    warmup_steps: int = 25  # linear learning-rate ramp at the start
    tolerance: float = 0.0
    dt: float = 0.02
    use_regdef: bool = True
    optimize_face: bool = True
    fit_hand_shape: bool = False
    fit_face_shape: bool = False
    optimize_deformation: bool = True

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k.startswith("lambda_") and v < 0:
                raise ValueError(f"{k} must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")

    def naive(self) -> "FitConfig":
        """Same settings with the touch, collision and depth terms switched off."""
        d = asdict(self)
        d.update(lambda_touch=0.0, lambda_col=0.0, lambda_depth=0.0)
        return FitConfig(**d)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "FitConfig":
        return cls(**d)


@dataclass
class FrameObservation:
    face_2d: np.ndarray
    face_conf: np.ndarray
    hand_2d: np.ndarray
    hand_conf: np.ndarray

    def __post_init__(self):
        for name in ("face_2d", "face_conf", "hand_2d", "hand_conf"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if len(self.face_2d) != len(self.face_conf) or len(self.hand_2d) != len(self.hand_conf):
            raise ValueError("confidence count does not match landmark count")
        for c in (self.face_conf, self.hand_conf):
            if c.size and (c.min() < 0 or c.max() > 1):
                raise ValueError("confidences must lie in [0, 1]")

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("face_2d", "face_conf", "hand_2d", "hand_conf")}

    @classmethod
    def from_dict(cls, d) -> "FrameObservation":
        return cls(d["face_2d"], d["face_conf"], d["hand_2d"], d["hand_conf"])


@dataclass
class SceneState:
    face: list  # ModelParams per frame
    hand: list
    p: np.ndarray  # (T, M, 3)

    def copy(self) -> "SceneState":
        return SceneState([f.copy() for f in self.face], [h.copy() for h in self.hand], self.p.copy())


@dataclass
class FitProblem:
    face_model: DeformableModel
    hand_model: DeformableModel
    camera: Camera
    face_stiffness: StiffnessMap
    observations: list
    p0: np.ndarray
    face_init: list
    hand_init: list
    contacts: list | None = None
    priors: list | None = None
    rest: list | None = None  # RestData per frame; derived from rest_mode when None
    rest_mode: str = "estimate"  # "estimate": initial deformed surface, "model": current undeformed surface

    def __post_init__(self):
        if self.rest_mode not in ("estimate", "model"):
            raise ValueError("rest_mode must be 'estimate' or 'model'")
        T = len(self.observations)
        if T == 0:
            raise ValueError("at least one frame is required")
        self.p0 = np.asarray(self.p0, dtype=np.float64)
        if self.p0.shape != (T, self.face_model.n_vertices, 3):
            raise ValueError("p0 must be (frames, face vertices, 3)")
        if len(self.face_init) != T or len(self.hand_init) != T:
            raise ValueError("one initial parameter set per frame is required")
        for name in ("contacts", "priors"):
            seq = getattr(self, name)
            if seq is not None and len(seq) != T:
                raise ValueError(f"{name} must have one entry per frame")
        self.face_stiffness.check(self.face_model.mesh)
        if self.rest is None and self.rest_mode == "estimate":
            mesh = self.face_model.mesh
            self.rest = [RestData.from_positions(mesh, evaluate(self.face_model, f) + p) for f, p in zip(self.face_init, self.p0)]
        if self.rest is not None and len(self.rest) != T:
            raise ValueError("rest must have one entry per frame")

    @property
    def n_frames(self):
        return len(self.observations)

    def initial_state(self) -> SceneState:
        return SceneState([f.copy() for f in self.face_init], [h.copy() for h in self.hand_init], self.p0.copy())


@dataclass
class ObjectiveResult:
    value: float
    terms: dict
    grad_face: list  # parameter-vector gradients per frame
    grad_hand: list
    grad_p: np.ndarray


def _rotation_grad(gR, rotation):
    _, dR = rodrigues_jacobian(rotation)
    return np.array([np.sum(gR * dR[i]) for i in range(3)])


def total_objective(problem: FitProblem, state: SceneState, config: FitConfig) -> ObjectiveResult:
    """Value, named term breakdown and gradients of the window objective."""
    T = problem.n_frames
    fm, hm = problem.face_model, problem.hand_model
    mesh = fm.mesh
    scale = config.keypoint_scale
    inv_s2 = 1.0 / scale**2
    terms = dict.fromkeys(
        ["face_2d", "hand_2d", "face_reg", "hand_reg", "touch", "collision", "penetration", "regdef_edge", "regdef_bend", "regdef_anchor", "depth"],
        0.0,
    )
    Vf, Jf, Vh, Jh = [], [], [], []
    for t in range(T):
        v, j = evaluate(fm, state.face[t], jacobian=True)
        Vf.append(v)
        Jf.append(j)
        v, j = evaluate(hm, state.hand[t], jacobian=True)
        Vh.append(v)
        Jh.append(j)
    Vf = np.array(Vf)
    Vh = np.array(Vh)
    gVf = np.zeros_like(Vf)
    gVh = np.zeros_like(Vh)
    gp = np.zeros_like(state.p)
    g_face_extra = [np.zeros(Jf[0].shape[2]) for _ in range(T)]
    s_edge = problem.face_stiffness.edge_stiffness
    s_bend = problem.face_stiffness.bend_stiffness
    for t in range(T):
        obs = problem.observations[t]
        try:
            v, g = losses.loss_2d(problem.camera, landmarks(fm, Vf[t]), obs.face_2d, obs.face_conf)
        except ValueError as exc:
            raise ValueError(f"face_2d term, frame {t}: {exc}") from exc
        terms["face_2d"] += v * inv_s2
        scatter_add(gVf[t], fm.landmark_indices, g * inv_s2)
        try:
            v, g = losses.loss_2d(problem.camera, landmarks(hm, Vh[t]), obs.hand_2d, obs.hand_conf)
        except ValueError as exc:
            raise ValueError(f"hand_2d term, frame {t}: {exc}") from exc
        terms["hand_2d"] += v * inv_s2
        scatter_add(gVh[t], hm.landmark_indices, g * inv_s2)
        surface = Vf[t] + state.p[t]
        if config.lambda_touch > 0 and problem.contacts is not None and problem.contacts[t] is not None:
            tt = losses.loss_touch(surface, Vh[t], problem.contacts[t])
            terms["touch"] += config.lambda_touch * tt.value
            gVf[t] += config.lambda_touch * tt.grad_face
            gp[t] += config.lambda_touch * tt.grad_face
            gVh[t] += config.lambda_touch * tt.grad_hand
        if config.lambda_col > 0:
            rest = problem.rest[t] if problem.rest is not None else Vf[t]
            ct = losses.loss_collision(Vh[t], surface, mesh, state.p[t], problem.p0[t], s_edge, s_bend, rest, config.use_regdef)
            lam = config.lambda_col
            terms["collision"] += lam * ct.value
            terms["penetration"] += lam * ct.penetration
            terms["regdef_edge"] += lam * ct.edge
            terms["regdef_bend"] += lam * ct.bend
            terms["regdef_anchor"] += lam * ct.anchor
            gVh[t] += lam * ct.grad_hand
            gVf[t] += lam * ct.grad_surface
            gp[t] += lam * (ct.grad_surface + ct.grad_p)
            if ct.grad_rest is not None:
                gVf[t] += lam * ct.grad_rest
        if config.lambda_depth > 0 and problem.priors is not None and problem.priors[t] is not None:
            tf = face_frame_transform(state.face[t])
            dt_ = losses.loss_depth(landmarks(hm, Vh[t]), problem.priors[t], tf)
            lam = config.lambda_depth
            terms["depth"] += lam * dt_.value
            scatter_add(gVh[t], hm.landmark_indices, lam * dt_.grad_landmarks)
            g_face_extra[t][0:3] += lam * dt_.grad_translation
            g_face_extra[t][3:6] += lam * _rotation_grad(dt_.grad_rotation_matrix, state.face[t].rotation)
    fr = losses.loss_reg(
        [f.shape for f in state.face], [f.expression for f in state.face], Vf,
        config.lambda_beta, config.lambda_psi, config.lambda_vel, config.lambda_acc, config.dt,
    )
    terms["face_reg"] = fr.value
    gVf += fr.grad_vertices
    hr = losses.loss_reg([h.shape for h in state.hand], [], Vh, config.lambda_beta, 0.0, config.lambda_vel, config.lambda_acc, config.dt)
    terms["hand_reg"] = hr.value
    gVh += hr.grad_vertices
    fsl = param_slices(fm)
    hsl = param_slices(hm)
    grad_face, grad_hand = [], []
    for t in range(T):
        gf = np.einsum("va,vap->p", gVf[t], Jf[t]) + g_face_extra[t]
        gf[fsl["shape"]] += fr.grad_beta[t]
        gf[fsl["expression"]] += fr.grad_psi[t]
        gh = np.einsum("va,vap->p", gVh[t], Jh[t])
        gh[hsl["shape"]] += hr.grad_beta[t]
        grad_face.append(gf)
        grad_hand.append(gh)
    value = sum(terms[k] for k in ("face_2d", "hand_2d", "face_reg", "hand_reg", "touch", "collision", "depth"))
    terms["total"] = value
    return ObjectiveResult(float(value), terms, grad_face, grad_hand, gp)


# -- optimizer ---------------------------------------------------------------------


class Adam:
    """Adam with per-entry step sizes.

    Blocks flagged in ``shared`` keep one second-moment scalar (the mean of
    g^2) instead of one per entry, so the update stays proportional to the
    gradient. Used for the deformation field, where per-entry normalisation
    turns tiny noisy gradients into full-size steps and roughens the surface.
    """

    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8, shared=None):
        self.shared = list(shared) if shared is not None else [False] * len(shapes)
        self.m = [np.zeros(s) for s in shapes]
        self.v = [0.0 if sh else np.zeros(s) for s, sh in zip(shapes, self.shared)]
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads, lrs):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = []
        for i, (x, g, lr) in enumerate(zip(params, grads, lrs)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            g2 = float(np.mean(g * g)) if self.shared[i] else g * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g2
            out.append(x - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def cosine_factor(step, steps, final_fraction):
    if steps <= 1:
        return 1.0
    return final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + math.cos(math.pi * step / (steps - 1)))


def _lr_vector(model: DeformableModel, lr_translation, lr_rigid, lr_pose, fixed_shape=True):
    sl = param_slices(model)
    lr = np.zeros(sl["articulation"].stop)
    lr[sl["translation"]] = lr_translation
    lr[sl["rotation"]] = lr_rigid
    lr[sl["expression"]] = lr_pose
    lr[sl["articulation"]] = lr_pose
    if not fixed_shape:
        lr[sl["shape"]] = lr_pose
    return lr


@dataclass
class FitResult:
    state: SceneState
    trace: list = field(default_factory=list)

    @property
    def final_value(self):
        return self.trace[-1]["total"] if self.trace else float("nan")


def optimize(problem: FitProblem, config: FitConfig | None = None, state: SceneState | None = None) -> FitResult:
    """Adam over face pose/expression, hand pose and shape, and the deformation.

    The trace holds one row per step (objective before the update) plus the
    final objective. Nearest-neighbour and penetration sets are recomputed
    at every evaluation.
    """
    config = config or FitConfig()
    state = (state or problem.initial_state()).copy()
    T = problem.n_frames
    fm, hm = problem.face_model, problem.hand_model
    lr_f = _lr_vector(fm, config.lr_translation, config.lr_rigid, config.lr_pose, not config.fit_face_shape)
    lr_f *= 1.0 if config.optimize_face else 0.0
    lr_h = _lr_vector(hm, config.lr_translation, config.lr_rigid, config.lr_pose, not config.fit_hand_shape)
    lr_p = config.lr_deform if config.optimize_deformation else 0.0
    xs = [f.to_vector() for f in state.face] + [h.to_vector() for h in state.hand] + [state.p[t] for t in range(T)]
    adam = Adam([x.shape for x in xs], shared=[False] * (2 * T) + [config.shared_deform_moment] * T)
    trace = []
    prev = None
    stall = 0

    def unpack(xs):
        return SceneState(
            [ModelParams.from_vector(fm, xs[t]) for t in range(T)],
            [ModelParams.from_vector(hm, xs[T + t]) for t in range(T)],
            np.array(xs[2 * T:]),
        )

    for step in range(config.steps + 1):
        cur = unpack(xs)
        res = total_objective(problem, cur, config)
        row = {"step": step, **{k: float(v) for k, v in res.terms.items()}}
        trace.append(row)
        if not np.isfinite(res.value):
            raise OptimizationError(f"objective became non-finite at step {step}", trace)
        if step == config.steps:
            break
        if config.tolerance > 0 and prev is not None:
            stall = stall + 1 if abs(prev - res.value) <= config.tolerance * max(abs(prev), 1e-300) else 0
            if stall >= 10:
                break
        prev = res.value
        f = cosine_factor(step, config.steps, config.lr_final_fraction)
        if step < config.warmup_steps:
            f *= (step + 1) / (config.warmup_steps + 1)
        grads = res.grad_face + res.grad_hand + [res.grad_p[t] for t in range(T)]
        lrs = [lr_f * f] * T + [lr_h * f] * T + [lr_p * f] * T
        xs = adam.step(xs, grads, lrs)
    return FitResult(unpack(xs), trace)


def write_trace_csv(path, trace):
    import csv
    import os

    keys = list(trace[0].keys()) if trace else ["step", "total"]
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    os.replace(tmp, path)
