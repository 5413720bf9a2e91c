"""Procedural stand-ins for the head, hand, skin and skull assets.

Canonical axes follow the camera convention: x right, y down, z away from
the viewer. The face looks towards -z; the hand's fingers extend along -y
with the palm facing +z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import TriMesh, build_topology, vertex_normals
from .model import DeformableModel, Joint
from .stiffness import StiffnessMap, ssd_stiffness_map

HEAD_AXES = (0.075, 0.095, 0.09)
PALM_AXES = (0.042, 0.045, 0.014)
HAND_SIZE_STEP = 0.1


def smoothstep(x):
    """C1 ramp from 0 (x <= 0) to 1 (x >= 1)."""
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def icosphere(level: int):
    """Unit icosphere: 10 * 4**level + 2 vertices."""
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    V = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    F = list(faces)
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = V[a] + V[b]
                V.append(m / np.linalg.norm(m))
                cache[key] = len(V) - 1
            return cache[key]

        nf = []
        for a, b, c in F:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        F = nf
    return np.array(V), np.array(F, dtype=np.int64)


def ellipsoid(level: int, axes):
    v, f = icosphere(level)
    return v * np.asarray(axes, dtype=np.float64), f


def _unit_dirs(points, axes):
    d = np.asarray(points) / np.asarray(axes)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def head_regions(points, axes=HEAD_AXES):
    """Soft region memberships in [0, 1] for forehead, cheeks, chin and nose."""
    d = _unit_dirs(points, axes)
    front = smoothstep((-d[:, 2] - 0.1) / 0.3)
    # the two bands mirror each other about the cheekbone line y = 0
    forehead = front * smoothstep((-d[:, 1] - 0.15) / 0.15)
    cheeks = front * smoothstep((np.abs(d[:, 0]) - 0.3) / 0.15) * smoothstep((d[:, 1] - 0.15) / 0.15) * smoothstep((0.75 - d[:, 1]) / 0.15)
    chin = front * smoothstep((d[:, 1] - 0.6) / 0.15)
    nose = np.exp(-((d[:, 0] / 0.15) ** 2 + ((d[:, 1] - 0.05) / 0.2) ** 2)) * front
    return {"forehead": forehead, "cheeks": cheeks, "chin": chin, "nose": nose}


def skull_offsets(points, axes=HEAD_AXES, forehead=0.004, cheek=0.02, base=0.007):
    """Soft tissue thickness per skin point: thin on the forehead, thick on the cheeks."""
    r = head_regions(points, axes)
    return base + (forehead - base) * r["forehead"] + (cheek - base) * r["cheeks"]


def _front_point(x, y, axes=HEAD_AXES):
    """Point on the ellipsoid front for normalized coordinates (x, y)."""
    zz = max(1.0 - x * x - y * y, 0.0)
    return np.array([x * axes[0], y * axes[1], -np.sqrt(zz) * axes[2]])


def face_landmark_targets(axes=HEAD_AXES):
    """68 canonical feature points on the front of the head ellipsoid."""
    pts = []
    for t in np.linspace(-1.2, 1.2, 17):  # jaw line
        pts.append((0.92 * np.sin(t), 0.15 + 0.7 * np.cos(t)))
    for side in (-1, 1):  # brows
        for x in np.linspace(0.7, 0.15, 5):
            pts.append((side * x, -0.42))
    for y in np.linspace(-0.25, 0.1, 4):  # nose bridge
        pts.append((0.0, y))
    for x in np.linspace(-0.16, 0.16, 5):  # nostrils
        pts.append((x, 0.2))
    for side in (-1, 1):  # eyes
        for a in np.linspace(0, 2 * np.pi, 6, endpoint=False):
            pts.append((side * 0.4 + 0.15 * np.cos(a), -0.22 + 0.06 * np.sin(a)))
    for a in np.linspace(0, 2 * np.pi, 12, endpoint=False):  # outer lip
        pts.append((0.35 * np.cos(a), 0.5 + 0.1 * np.sin(a)))
    for a in np.linspace(0, 2 * np.pi, 8, endpoint=False):  # inner lip
        pts.append((0.2 * np.cos(a), 0.5 + 0.04 * np.sin(a)))
    return np.array([_front_point(x, y, axes) for x, y in pts])


def snap_unique(vertices, targets):
    """Greedy nearest-vertex assignment with distinct indices."""
    used = set()
    out = []
    for t in targets:
        order = np.argsort(np.linalg.norm(vertices - t, axis=1), kind="stable")
        for i in order:
            if int(i) not in used:
                used.add(int(i))
                out.append(int(i))
                break
    return np.array(out, dtype=np.int64)


def _smooth_fields(dirs, rng, n, scale, degree=2):
    """n random low-order polynomial scalar fields over unit directions."""
    x, y, z = dirs.T
    monos = [np.ones_like(x), x, y, z]
    if degree >= 2:
        monos += [x * x, y * y, z * z, x * y, y * z, z * x]
    Mo = np.stack(monos, axis=1)
    coef = rng.normal(size=(Mo.shape[1], n))
    coef /= np.linalg.norm(coef, axis=0, keepdims=True)
    return scale * (Mo @ coef)


def build_head(level: int = 4, seed: int = 0, n_shape: int = 8, n_expression: int = 8, axes=HEAD_AXES) -> DeformableModel:
    rng = np.random.default_rng(seed)
    v, f = ellipsoid(level, axes)
    regions = head_regions(v, axes)
    n0 = vertex_normals(v, f)
    v = v + 0.012 * regions["nose"][:, None] * n0  # nose bump
    n = vertex_normals(v, f)
    d = _unit_dirs(v, axes)
    shape = _smooth_fields(d, rng, n_shape, 0.003)[:, None, :] * n[:, :, None]
    expr = np.zeros((len(v), 3, n_expression))
    # localized expression modes around mouth, cheeks and brows
    centres = [(0.35, 0.5), (-0.35, 0.5), (0.0, 0.55), (0.45, 0.2), (-0.45, 0.2), (0.4, -0.42), (-0.4, -0.42), (0.0, 0.8)]
    for e in range(n_expression):
        cx, cy = centres[e % len(centres)]
        g = np.exp(-(((d[:, 0] - cx) / 0.18) ** 2 + ((d[:, 1] - cy) / 0.15) ** 2)) * (d[:, 2] < 0.2)
        tang = np.array([np.sign(cx) * 0.5 if cx else 0.0, -0.5, 0.0]) + rng.normal(0, 0.2, 3)
        expr[:, :, e] = 0.004 * g[:, None] * (n + tang)
    jaw_w = smoothstep((d[:, 1] - 0.35) / 0.25) * smoothstep((0.3 - d[:, 2]) / 0.3)
    jaw = Joint(np.array([0.0, 0.03, 0.02]), -1, np.clip(jaw_w, 0.0, 1.0), "jaw")
    lmk = snap_unique(v, face_landmark_targets(axes))
    return DeformableModel(v, f, shape, expr, (jaw,), lmk, "head")


def capsule(base, direction, length, radius, around=8, rings=12, cap_rings=2):
    """Closed capsule from ``base`` along ``direction``; returns (V, F, axial coordinate)."""
    u = np.asarray(direction, dtype=np.float64)
    u = u / np.linalg.norm(u)
    a = np.cross(u, [0.0, 0.0, 1.0])
    if np.linalg.norm(a) < 1e-6:
        a = np.cross(u, [1.0, 0.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(u, a)
    profile = []  # (axial, radius) from bottom to top
    for k in range(1, cap_rings + 1):
        ang = np.pi / 2 * k / (cap_rings + 1)
        profile.append((-radius * np.cos(ang), radius * np.sin(ang)))
    for s in np.linspace(0.0, length, rings):
        profile.append((s, radius))
    for k in range(cap_rings, 0, -1):
        ang = np.pi / 2 * k / (cap_rings + 1)
        profile.append((length + radius * np.cos(ang), radius * np.sin(ang)))
    phi = np.linspace(0, 2 * np.pi, around, endpoint=False)
    verts = [base - radius * u]
    axial = [-radius]
    for s, r in profile:
        for p in phi:
            verts.append(base + s * u + r * (np.cos(p) * a + np.sin(p) * b))
            axial.append(s)
    verts.append(base + (length + radius) * u)
    axial.append(length + radius)
    nr = len(profile)
    F = []
    for j in range(around):  # bottom fan, outward = away from the axis
        F.append((0, 1 + (j + 1) % around, 1 + j))
    for r_ in range(nr - 1):
        o0 = 1 + r_ * around
        o1 = o0 + around
        for j in range(around):
            j1 = (j + 1) % around
            F.append((o0 + j, o0 + j1, o1 + j))
            F.append((o0 + j1, o1 + j1, o1 + j))
    top = len(verts) - 1
    o = 1 + (nr - 1) * around
    for j in range(around):
        F.append((top, o + j, o + (j + 1) % around))
    return np.array(verts), np.array(F, dtype=np.int64), np.array(axial)


# name, MCP pivot (x, y), direction (x, y), segment lengths, radius
FINGERS = (
    ("thumb", (-0.036, -0.005), (-0.6, -0.8), (0.032, 0.028, 0.024), 0.0095),
    ("index", (-0.027, -0.040), (-0.08, -1.0), (0.040, 0.025, 0.021), 0.0085),
    ("middle", (-0.009, -0.044), (0.0, -1.0), (0.044, 0.028, 0.022), 0.0085),
    ("ring", (0.009, -0.042), (0.06, -1.0), (0.041, 0.026, 0.021), 0.008),
    ("pinky", (0.026, -0.036), (0.14, -1.0), (0.032, 0.020, 0.018), 0.007),
)


def build_hand(seed: int = 0, n_shape: int = 5, palm_level: int = 2, around: int = 8, rings: int = 12) -> DeformableModel:
    rng = np.random.default_rng(seed + 1)
    pv, pf = ellipsoid(palm_level, PALM_AXES)
    parts_v = [pv]
    parts_f = [pf]
    offset = len(pv)
    weights_rows = []  # (vertex slice, per-joint weights)
    joints = []
    landmarks = [int(np.argmax(pv[:, 1]))]  # wrist: lowest palm point
    blend = 0.008
    for name, (mx, my), (dx, dy), segs, radius in FINGERS:
        u = np.array([dx, dy, 0.0])
        u /= np.linalg.norm(u)
        mcp = np.array([mx, my, 0.0])
        start = mcp - 0.014 * u  # root of the tube sits inside the palm
        total = sum(segs)
        cv, cf, axial = capsule(start, u, total + 0.014 - radius, radius, around, rings)
        a = axial - 0.014  # axial coordinate relative to the MCP pivot
        bounds = [0.0, segs[0], segs[0] + segs[1]]
        ramps = [np.clip((a - bnd) / blend + 0.5, 0.0, 1.0) for bnd in bounds]
        w = np.stack([ramps[0] - ramps[1], ramps[1] - ramps[2], ramps[2]], axis=1)
        base_j = len(joints)
        pivots = [mcp + bnd * u for bnd in bounds]
        for k in range(3):
            joints.append((pivots[k], -1 if k == 0 else base_j + k - 1, f"{name}_{k}"))
        weights_rows.append((offset, len(cv), base_j, w))
        # landmarks: a dorsal-side vertex at each joint, then the tip pole
        for p in pivots:
            landmarks.append(offset + int(np.argmin(np.linalg.norm(cv - (p - radius * np.array([0, 0, 1.0])), axis=1))))
        landmarks.append(offset + len(cv) - 1)
        parts_v.append(cv)
        parts_f.append(cf + offset)
        offset += len(cv)
    V = np.concatenate(parts_v)
    F = np.concatenate(parts_f)
    W = np.zeros((len(V), len(joints)))
    for off, n, j0, w in weights_rows:
        W[off:off + n, j0:j0 + 3] = w
    def pivot_shape(p):
        ps = np.zeros((3, n_shape))
        if n_shape:
            ps[:, 0] = HAND_SIZE_STEP * np.asarray(p)
        return ps

    joint_objs = tuple(
        Joint(np.asarray(p), parent, W[:, j].copy(), nm, pivot_shape(p)) for j, (p, parent, nm) in enumerate(joints)
    )
    nrm = vertex_normals(V, F)
    d = V / np.linalg.norm(V, axis=1, keepdims=True).clip(1e-9)
    # first mode: overall hand size (+10 % per unit) about the palm centre; the rest are local bulges
    shape = np.zeros((len(V), 3, n_shape))
    if n_shape:
        shape[:, :, 0] = HAND_SIZE_STEP * V
        shape[:, :, 1:] = _smooth_fields(d, rng, n_shape - 1, 0.0015, degree=1)[:, None, :] * nrm[:, :, None]
    return DeformableModel(V, F, shape, np.zeros((len(V), 3, 0)), joint_objs, np.array(landmarks, dtype=np.int64), "hand")


def finger_flex_axis(model: DeformableModel, joint: int):
    """Natural flexion axis of a hand joint (perpendicular to finger and palm normal)."""
    nm = model.joints[joint].name.split("_")[0]
    for name, _, (dx, dy), _, _ in FINGERS:
        if name == nm:
            u = np.array([dx, dy, 0.0]) / np.hypot(dx, dy)
            return np.cross(u, [0.0, 0.0, 1.0])
    raise KeyError(nm)


def build_skin_and_skull(level: int = 3, axes=HEAD_AXES):
    """Skin ellipsoid and a skull obtained by moving it inward by the tissue thickness."""
    v, f = ellipsoid(level, axes)
    n = vertex_normals(v, f)
    skull = v - skull_offsets(v, axes)[:, None] * n
    return build_topology(v, f), build_topology(skull, f)


@dataclass
class Proxies:
    head: DeformableModel
    hand: DeformableModel
    skin: TriMesh
    skull: TriMesh
    head_stiffness: StiffnessMap
    regions: dict = field(default_factory=dict)


def build_proxies(seed: int = 0, head_level: int = 4, skin_level: int = 3, exponent: float = 4.0) -> Proxies:
    head = build_head(head_level, seed)
    hand = build_hand(seed)
    skin, skull = build_skin_and_skull(skin_level)
    stiffness = ssd_stiffness_map(skin, skull, head.mesh, exponent)
    return Proxies(head, hand, skin, skull, stiffness, head_regions(head.template))
