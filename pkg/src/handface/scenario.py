"""Synthetic hand-face interaction sequences with pseudo ground truth.

A scenario picks an action (which part of the hand presses where on the
face), an expression and a press trajectory. Generation poses the head and
hand proxies, runs PBD tracking of the face against the hand, then derives
contact labels, noisy 2D landmark observations and depth-prior samples.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .losses import ContactSet, PriorSampleSet
from .mesh import vertex_normals
from .model import Camera, DeformableModel, ModelParams, evaluate, face_frame_transform, landmarks, project, rodrigues
from .pbd import TrackingConfig, simulate_tracking
from .proxies import HAND_SIZE_STEP, HEAD_AXES, Proxies, _front_point, build_proxies, finger_flex_axis, smoothstep
from .query import signed_distances

ACTION_KINDS = (
    "poke_open_hand",
    "poke_pointing",
    "punch",
    "push_palm",
    "rub",
    "pinch_chin",
    "touch_nose_front",
    "touch_nose_side",
)
EXPRESSION_KINDS = ("neutral", "open_mouth", "smile")
CONTACT_DISTANCE = 0.005

# per action: hand pose, approach axis in the hand frame, secondary hand axis and
# the world direction it should lean towards, target (x, y) on the face front
_ACTIONS = {
    "poke_open_hand": ("flat", (0.0, -1.0, 0.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0), (0.45, 0.25)),
    "poke_pointing": ("point", (-0.08, -1.0, 0.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0), (-0.55, 0.0)),
    "punch": ("fist", (0.0, -1.0, 0.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0), (-0.5, 0.35)),
    "push_palm": ("flat", (0.0, 0.0, 1.0), (0.0, -1.0, 0.0), (0.0, -1.0, 0.0), (0.5, 0.2)),
    "rub": ("point", (-0.08, -1.0, 0.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0), (0.55, 0.1)),
    "pinch_chin": ("pinch", (-0.3, -1.0, 0.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0), (0.0, 0.85)),
    "touch_nose_front": ("point", (-0.08, -1.0, 0.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0), (0.0, 0.05)),
    "touch_nose_side": ("point", (-0.08, -1.0, 0.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0), (0.2, 0.05)),
}
_CURLS = {  # flexion per finger (rad, applied at each of the three joints)
    "flat": {},
    "point": {"thumb": 0.5, "middle": 1.3, "ring": 1.3, "pinky": 1.3},
    "fist": {"thumb": 0.6, "index": 1.4, "middle": 1.4, "ring": 1.4, "pinky": 1.4},
    "pinch": {"thumb": 0.45, "index": 0.45, "middle": 1.3, "ring": 1.3, "pinky": 1.3},
}


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    action_kind: str = "poke_pointing"
    expression_kind: str = "neutral"
    frame_count: int = 24
    approach_depth: float = 0.008  # press depth below the undeformed surface, m
    tangential_speed: float = 0.0  # mean speed of the in-contact slide, m/s
    clearance: float = 0.03  # start and end distance from the surface, m
    dt: float = 0.02

    def __post_init__(self):
        if self.action_kind not in ACTION_KINDS:
            raise ScenarioError(f"unknown action kind {self.action_kind!r}")
        if self.expression_kind not in EXPRESSION_KINDS:
            raise ScenarioError(f"unknown expression kind {self.expression_kind!r}")
        if self.frame_count < 1:
            raise ScenarioError("frame_count must be >= 1")
        if self.approach_depth < 0 or self.clearance < 0:
            raise ScenarioError("approach depth and clearance must be non-negative")
        if self.action_kind == "rub" and self.tangential_speed == 0.0:
            self.tangential_speed = 0.05

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "Scenario":
        return cls(**d)


@dataclass
class GenerateConfig:
    seed: int = 0
    camera: Camera = field(default_factory=lambda: Camera(1000.0, 1000.0, 320.0, 240.0))
    face_translation: tuple = (0.0, 0.0, 0.5)
    face_rotation: tuple = (0.0, 0.0, 0.0)
    hand_shape: tuple = ()  # ground-truth hand shape coefficients; missing entries are 0
    noise_px: float = 1.0
    dropout: float = 0.0
    n_prior_samples: int = 100
    prior_sigma: float = 0.005
    contact_distance: float = CONTACT_DISTANCE
    tracking: TrackingConfig = field(default_factory=TrackingConfig)

    def to_dict(self):
        d = asdict(self)
        d["camera"] = self.camera.to_dict()
        d["tracking"] = self.tracking.to_dict()
        d["face_translation"] = list(self.face_translation)
        d["face_rotation"] = list(self.face_rotation)
        d["hand_shape"] = list(self.hand_shape)
        return d

    @classmethod
    def from_dict(cls, d) -> "GenerateConfig":
        d = dict(d)
        if "camera" in d:
            d["camera"] = Camera.from_dict(d["camera"])
        if "tracking" in d:
            d["tracking"] = TrackingConfig.from_dict(d["tracking"])
        for k in ("face_translation", "face_rotation", "hand_shape"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class GeneratedSequence:
    scenario: Scenario
    camera: Camera
    face_params: list
    hand_params: list
    reference: np.ndarray  # (T, Vf, 3) face without deformation
    hand_vertices: np.ndarray  # (T, Vh, 3)
    deformed: np.ndarray  # (T, Vf, 3)
    displacements: np.ndarray  # (T, Vf, 3)
    face_contacts: np.ndarray  # (T, Vf) bool
    hand_contacts: np.ndarray  # (T, Vh) bool
    observations: list
    priors: list

    @property
    def n_frames(self):
        return len(self.reference)

    @property
    def frame_contact(self):
        return self.face_contacts.any(axis=1)

    def contact_sets(self):
        return [ContactSet(f.astype(np.float64), h.astype(np.float64)) for f, h in zip(self.face_contacts, self.hand_contacts)]


# -- trajectory ---------------------------------------------------------------------


def press_profile(n_frames):
    """Press progress in [0, 1]: C1 approach, hold, C1 retreat."""
    if n_frames == 1:
        return np.ones(1)
    t = np.linspace(0.0, 1.0, n_frames)
    up = smoothstep(t / 0.35)
    down = smoothstep((1.0 - t) / 0.25)
    return np.minimum(up, down)


def slide_profile(n_frames):
    """Tangential progress in [0, 1] across the hold phase, C1 at both ends."""
    if n_frames == 1:
        return np.zeros(1)
    t = np.linspace(0.0, 1.0, n_frames)
    return smoothstep((t - 0.35) / 0.4)


def hand_articulation(model: DeformableModel, pose: str):
    curls = _CURLS[pose]
    theta = np.zeros((model.n_joints, 3))
    for j, joint in enumerate(model.joints):
        finger = joint.name.split("_")[0]
        if finger in curls:
            theta[j] = curls[finger] * finger_flex_axis(model, j)
    return theta


def _frame_from(a, b):
    """Orthonormal frame with first axis ``a`` and second axis as close to ``b`` as possible."""
    a = a / np.linalg.norm(a)
    b = b - np.dot(b, a) * a
    b = b / np.linalg.norm(b)
    return np.stack([a, b, np.cross(a, b)], axis=1)


def _rotation_vector(R):
    """Axis-angle vector of a rotation matrix (angle < pi)."""
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    ang = np.arccos(c)
    if ang < 1e-12:
        return np.zeros(3)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(w)
    if s < 1e-9:  # near pi: take the dominant column of R + I
        M = R + np.eye(3)
        k = M[:, np.argmax(np.linalg.norm(M, axis=0))]
        return np.pi * k / np.linalg.norm(k)
    return ang * w / s


def target_vertex(model: DeformableModel, xy):
    p = _front_point(xy[0], xy[1], HEAD_AXES)
    return int(np.argmin(np.linalg.norm(model.template - p, axis=1)))


def face_parameters(model: DeformableModel, scenario: Scenario, config: GenerateConfig):
    T = scenario.frame_count
    ramp = smoothstep(np.linspace(0.0, 1.0, T) / 0.5) if T > 1 else np.ones(1)
    out = []
    for t in range(T):
        p = ModelParams.zeros(model)
        p.translation = np.asarray(config.face_translation, dtype=np.float64).copy()
        p.rotation = np.asarray(config.face_rotation, dtype=np.float64).copy()
        if scenario.expression_kind == "open_mouth" and model.n_joints:
            p.articulation[0, 0] = 0.2 * ramp[t]
        elif scenario.expression_kind == "smile" and model.n_expression >= 2:
            p.expression[:2] = 1.5 * ramp[t]
        out.append(p)
    return out


def drive_trajectory(scenario: Scenario, hand: DeformableModel, face: DeformableModel, face_sequence, hand_shape=None):
    """Hand parameters per frame pressing the action's effector into the face.

    ``face_sequence`` holds the reference face vertices per frame. The
    effector is the hand vertex furthest along the approach axis; it moves
    along the inward surface normal of the target vertex from
    ``clearance`` outside to ``approach_depth`` inside and back out.
    """
    pose, axis, second, lean, xy = _ACTIONS[scenario.action_kind]
    theta = hand_articulation(hand, pose)
    beta = np.zeros(hand.n_shape)
    if hand_shape is not None and len(hand_shape):
        beta[: len(hand_shape)] = hand_shape
    local = evaluate(hand, ModelParams(np.zeros(3), np.zeros(3), beta, np.zeros(0), theta))
    a = np.asarray(axis, dtype=np.float64)
    a /= np.linalg.norm(a)
    eff = int(np.argmax(local @ a))
    tv = target_vertex(face, xy)
    prog = press_profile(scenario.frame_count)
    slide = slide_profile(scenario.frame_count)
    travel = scenario.tangential_speed * scenario.dt * scenario.frame_count * 0.4
    out = []
    for t, V in enumerate(face_sequence):
        n = vertex_normals(V, face.triangles)[tv]
        up = np.cross(n, [1.0, 0.0, 0.0])
        up /= np.linalg.norm(up)
        target = V[tv] + n * (scenario.clearance - (scenario.clearance + scenario.approach_depth) * prog[t]) + up * travel * slide[t]
        R = _frame_from(-n, np.asarray(lean, dtype=np.float64)) @ _frame_from(a, np.asarray(second, dtype=np.float64)).T
        r = _rotation_vector(R)
        R = rodrigues(r)
        out.append(ModelParams(target - R @ local[eff], r, beta.copy(), np.zeros(0), theta.copy()))
    return out, eff, tv


# -- labels and priors --------------------------------------------------------------


def contact_labels(face_vertices, face_mesh, hand_vertices, hand_mesh, threshold=CONTACT_DISTANCE):
    """Face and hand vertices within ``threshold`` of the other surface (inside counts as within)."""
    df = signed_distances(face_vertices, hand_mesh, hand_vertices, max_distance=threshold)
    dh = signed_distances(hand_vertices, face_mesh, face_vertices, max_distance=threshold)
    return df < threshold, dh < threshold


def geodesic_distances(mesh, positions, source):
    e = mesh.edges
    w = np.linalg.norm(positions[e[:, 0]] - positions[e[:, 1]], axis=1)
    n = len(positions)
    g = coo_matrix((np.r_[w, w], (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n)).tocsr()
    return dijkstra(g, indices=source)


def footprint_ok(mesh, positions, labels, centre, radius=0.03):
    """True when every labelled vertex lies within ``radius`` geodesic distance of ``centre``."""
    if not np.any(labels):
        return True
    d = geodesic_distances(mesh, positions, centre)
    return bool(np.all(d[labels] <= radius))


def prior_samples(hand_landmarks_canonical, rng, n=100, sigma=0.005):
    """Noisy copies of the true canonical landmarks; eta is the L1 norm of the noise draw."""
    J = np.asarray(hand_landmarks_canonical, dtype=np.float64)
    z = rng.standard_normal((n, J.size))
    samples = J[None] + sigma * z.reshape(n, *J.shape)
    return PriorSampleSet(samples, np.abs(z).sum(axis=1))


# -- generation ---------------------------------------------------------------------


def generate(scenario: Scenario, config: GenerateConfig | None = None, proxies: Proxies | None = None) -> GeneratedSequence:
    config = config or GenerateConfig()
    proxies = proxies or build_proxies(config.seed)
    face, hand = proxies.head, proxies.hand
    rng = np.random.default_rng(config.seed)
    face_params = face_parameters(face, scenario, config)
    reference = np.array([evaluate(face, p) for p in face_params])
    if len(config.hand_shape) > hand.n_shape:
        raise ScenarioError("too many hand shape coefficients")
    hand_params, _, _ = drive_trajectory(scenario, hand, face, reference, config.hand_shape)
    hand_vertices = np.array([evaluate(hand, p) for p in hand_params])
    try:
        deformed, displacements = simulate_tracking(face.mesh, proxies.head_stiffness, reference, hand_vertices, config.tracking, collider_mesh=hand.mesh)
    except Exception as exc:
        raise RuntimeError(f"tracking failed for {scenario.action_kind}: {exc}") from exc
    T = scenario.frame_count
    fl = np.zeros((T, face.n_vertices), dtype=bool)
    hl = np.zeros((T, hand.n_vertices), dtype=bool)
    observations, priors = [], []
    from .fitting import FrameObservation

    cam = config.camera
    for t in range(T):
        fl[t], hl[t] = contact_labels(deformed[t], face.mesh, hand_vertices[t], hand.mesh, config.contact_distance)
        jf = landmarks(face, reference[t])
        jh = landmarks(hand, hand_vertices[t])
        uf = project(cam, jf) + rng.normal(0.0, config.noise_px, (len(jf), 2))
        uh = project(cam, jh) + rng.normal(0.0, config.noise_px, (len(jh), 2))
        cf = np.ones(len(jf))
        ch = np.ones(len(jh))
        if config.dropout > 0:
            cf[rng.random(len(jf)) < config.dropout] = 0.0
            ch[rng.random(len(jh)) < config.dropout] = 0.0
        observations.append(FrameObservation(uf, cf, uh, ch))
        canon = face_frame_transform(face_params[t]).apply_inverse(jh)
        priors.append(prior_samples(canon, rng, config.n_prior_samples, config.prior_sigma))
    return GeneratedSequence(scenario, cam, face_params, hand_params, reference, hand_vertices, deformed, displacements, fl, hl, observations, priors)


def depth_shifted_hand(params: ModelParams, depth_offset: float, rescale: bool = True) -> ModelParams:
    """Slide the hand along its viewing ray so its root depth grows by ``depth_offset``.

    With ``rescale`` the size coefficient grows by the same factor, so the
    projected hand is unchanged: the classic monocular scale/depth ambiguity.
    """
    out = params.copy()
    z = float(out.translation[2])
    if z <= 0 or z + depth_offset <= 0:
        raise ValueError("hand must stay in front of the camera")
    k = (z + depth_offset) / z
    out.translation = out.translation * k
    if rescale:
        if len(out.shape) == 0:
            raise ValueError("rescaling needs a hand model with a size coefficient")
        out.shape[0] = ((1.0 + HAND_SIZE_STEP * out.shape[0]) * k - 1.0) / HAND_SIZE_STEP
    return out
