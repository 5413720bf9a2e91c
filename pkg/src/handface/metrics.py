"""Accuracy and interaction-plausibility metrics.

Inputs are in metres, reported distances in millimetres and ratios in
percent. Col. Dist. sums penetration depths of hand vertices into the face
and divides by (hand vertex count x frame count).
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .mesh import TriMesh
from .query import OpenMeshWarning, penetration_depths, signed_distances

MM = 1000.0
CONTACT_DISTANCE = 0.005
PLUS_THRESHOLD = 0.005
COL_DIST_CONVENTION = "sum of hand penetration depths / (hand vertices x frames)"


def _seq(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"{name} must be (frames, vertices, 3)")
    return a


def _same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def pve(pred_face, gt_face, centered=False, pred_hand=None, gt_hand=None):
    """Mean per-vertex error (mm) over face (and hand, if given) and frames.

    ``centered`` moves each frame's face centroid to the origin, shifting the
    hand of the same frame by the same offset.
    """
    pf, gf = _seq(pred_face, "pred_face"), _seq(gt_face, "gt_face")
    _same(pf, gf)
    parts_p, parts_g = [pf], [gf]
    if (pred_hand is None) != (gt_hand is None):
        raise ValueError("pass both hand sequences or neither")
    if pred_hand is not None:
        ph, gh = _seq(pred_hand, "pred_hand"), _seq(gt_hand, "gt_hand")
        _same(ph, gh)
        if len(ph) != len(pf):
            raise ValueError("hand and face frame counts differ")
        parts_p.append(ph)
        parts_g.append(gh)
    P = np.concatenate(parts_p, axis=1)
    G = np.concatenate(parts_g, axis=1)
    if centered:
        P = P - pf.mean(axis=1, keepdims=True)
        G = G - gf.mean(axis=1, keepdims=True)
    return float(np.mean(np.linalg.norm(P - G, axis=2)) * MM)


def defe(pred_fields, gt_fields, plus_only=False, threshold=PLUS_THRESHOLD):
    """Mean displacement-vector error (mm); with ``plus_only`` restricted to
    ground-truth norms above ``threshold``. Returns None if that set is empty."""
    p, g = _seq(pred_fields, "pred_fields"), _seq(gt_fields, "gt_fields")
    _same(p, g)
    err = np.linalg.norm(p - g, axis=2)
    if plus_only:
        mask = np.linalg.norm(g, axis=2) > threshold
        if not mask.any():
            return None
        err = err[mask]
    return float(np.mean(err) * MM)


def penetration_per_frame(hand_seq, face_seq, face_mesh: TriMesh):
    """(frames, hand vertices) penetration depths in metres."""
    H, F = _seq(hand_seq, "hand_seq"), _seq(face_seq, "face_seq")
    if len(H) != len(F):
        raise ValueError("hand and face frame counts differ")
    if not face_mesh.is_closed:
        warnings.warn("face mesh is not watertight; penetration uses the face-normal sign test", OpenMeshWarning, stacklevel=2)
    return np.array([penetration_depths(h, face_mesh, f) for h, f in zip(H, F)])


def collision_metrics(hand_seq, face_seq, face_mesh: TriMesh):
    """(Col. Dist. in mm, Non-Col. in %)."""
    d = penetration_per_frame(hand_seq, face_seq, face_mesh)
    T, N = d.shape
    col = float(np.sum(d) / (N * T) * MM)
    non_col = float(100.0 * np.count_nonzero(~(d > 0).any(axis=1)) / T)
    return col, non_col


def min_hand_face_distance(hand_seq, face_seq, face_mesh: TriMesh):
    """Per frame, the smallest signed distance from a hand vertex to the face surface."""
    H, F = _seq(hand_seq, "hand_seq"), _seq(face_seq, "face_seq")
    return np.array([signed_distances(h, face_mesh, f).min() for h, f in zip(H, F)])


def touchness(pred_hand_seq, pred_face_seq, face_mesh: TriMesh, gt_contact_flags, threshold=CONTACT_DISTANCE):
    """Percentage of ground-truth contact frames predicted within ``threshold``; None without such frames."""
    flags = np.asarray(gt_contact_flags, dtype=bool)
    H = _seq(pred_hand_seq, "pred_hand_seq")
    if len(flags) != len(H):
        raise ValueError("one contact flag per frame is required")
    if not flags.any():
        return None
    d = min_hand_face_distance(H[flags], _seq(pred_face_seq, "pred_face_seq")[flags], face_mesh)
    return float(100.0 * np.count_nonzero(d < threshold) / len(d))


def f_score(non_col, touch):
    """Harmonic mean of two percentages; 0 when both are 0."""
    if non_col is None or touch is None:
        return None
    a, b = float(non_col), float(touch)
    if a + b == 0.0:
        return 0.0
    return 2.0 * a * b / (a + b)


@dataclass
class MetricsReport:
    pve: float
    pve_centered: float
    defe: float | None
    defe_plus: float | None
    col_dist: float
    non_col: float
    touchness: float | None
    f_score: float | None
    col_dist_convention: str = COL_DIST_CONVENTION
    frames: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "MetricsReport":
        return cls(**d)


def evaluate_sequences(pred_face, gt_face, pred_hand, gt_hand, face_mesh: TriMesh, gt_contact_flags, pred_disp=None, gt_disp=None):
    """Full report plus a per-frame breakdown."""
    pf, gf = _seq(pred_face, "pred_face"), _seq(gt_face, "gt_face")
    ph, gh = _seq(pred_hand, "pred_hand"), _seq(gt_hand, "gt_hand")
    flags = np.asarray(gt_contact_flags, dtype=bool)
    pen = penetration_per_frame(ph, pf, face_mesh)
    dmin = min_hand_face_distance(ph, pf, face_mesh)
    col, non_col = collision_metrics(ph, pf, face_mesh)
    touch = touchness(ph, pf, face_mesh, flags)
    de = dp = None
    if pred_disp is not None and gt_disp is not None:
        de = defe(pred_disp, gt_disp)
        dp = defe(pred_disp, gt_disp, plus_only=True)
    frames = []
    for t in range(len(pf)):
        frames.append({
            "frame": t,
            "pve": pve(pf[t], gf[t], pred_hand=ph[t], gt_hand=gh[t]),
            "col_dist": float(pen[t].sum() / pen.shape[1] * MM),
            "penetrating_vertices": int(np.count_nonzero(pen[t])),
            "min_distance": float(dmin[t] * MM),
            "gt_contact": bool(flags[t]),
            "touching": bool(dmin[t] < CONTACT_DISTANCE),
        })
    return MetricsReport(
        pve=pve(pf, gf, pred_hand=ph, gt_hand=gh),
        pve_centered=pve(pf, gf, centered=True, pred_hand=ph, gt_hand=gh),
        defe=de,
        defe_plus=dp,
        col_dist=col,
        non_col=non_col,
        touchness=touch,
        f_score=f_score(non_col, touch),
        frames=frames,
    )
