"""On-disk formats: JSON documents, OBJ sequences and model files.

A sequence directory holds one ``frame_XXXX`` sub-directory per frame with
``face.obj``, ``hand.obj`` and ``deformation.json`` (the per-vertex face
displacement, ``{"displacements": [[dx, dy, dz], ...]}``). Frame indices are
those of the source sequence, so a fitted window keeps its original numbering.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import DeformableModel, Joint
from .objio import read_obj, write_obj

FRAME_PATTERN = re.compile(r"^frame_(\d{4,})$")


def frame_dir(root, index: int) -> Path:
    return Path(root) / f"frame_{index:04d}"


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def dumps(data) -> str:
    return json.dumps(data, indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, data):
    atomic_write_text(path, dumps(data))


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_npy(path, array):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.save(fh, np.ascontiguousarray(array))
    os.replace(tmp, path)


# -- sequences ------------------------------------------------------------------------


@dataclass
class SequenceFrames:
    indices: list
    face: np.ndarray  # (T, Vf, 3), deformed face
    hand: np.ndarray  # (T, Vh, 3)
    displacements: np.ndarray  # (T, Vf, 3)
    face_triangles: np.ndarray
    hand_triangles: np.ndarray


def list_frames(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {root}")
    out = []
    for p in root.iterdir():
        m = FRAME_PATTERN.match(p.name)
        if m and p.is_dir():
            out.append(int(m.group(1)))
    return sorted(out)


def write_frame(root, index, face, face_triangles, hand=None, hand_triangles=None, displacements=None):
    d = frame_dir(root, index)
    write_obj(d / "face.obj", face, face_triangles)
    if hand is not None:
        write_obj(d / "hand.obj", hand, hand_triangles)
    if displacements is None:
        displacements = np.zeros_like(np.asarray(face))
    write_json(d / "deformation.json", {"displacements": np.round(np.asarray(displacements, dtype=np.float64), 12).tolist()})


def read_sequence(root, indices=None) -> SequenceFrames:
    """Load frames (all, or the given indices) from a sequence directory."""
    available = list_frames(root)
    if not available:
        raise FileNotFoundError(f"no frame_XXXX directories in {root}")
    indices = available if indices is None else list(indices)
    faces, hands, disps = [], [], []
    ftri = htri = None
    for i in indices:
        d = frame_dir(root, i)
        fv, ft, _ = read_obj(d / "face.obj")
        hv, ht, _ = read_obj(d / "hand.obj")
        disp = np.asarray(read_json(d / "deformation.json")["displacements"], dtype=np.float64).reshape(-1, 3)
        if disp.shape != fv.shape:
            raise ValueError(f"{d}: deformation field has {len(disp)} rows for {len(fv)} face vertices")
        if ftri is None:
            ftri, htri = ft, ht
        elif not (np.array_equal(ft, ftri) and np.array_equal(ht, htri)):
            raise ValueError(f"{d}: mesh topology changes within the sequence")
        faces.append(fv)
        hands.append(hv)
        disps.append(disp)
    return SequenceFrames(indices, np.array(faces), np.array(hands), np.array(disps), ftri, htri)


# -- models ---------------------------------------------------------------------------


def save_model(path, model: DeformableModel):
    """JSON description plus an OBJ template and ``.npy`` sidecars next to it."""
    path = Path(path)
    stem = path.stem
    base = path.parent
    write_obj(base / f"{stem}_template.obj", model.template, model.triangles)
    write_npy(base / f"{stem}_shape.npy", model.shape_basis)
    write_npy(base / f"{stem}_expression.npy", model.expression_basis)
    joints = []
    if model.joints:
        write_npy(base / f"{stem}_weights.npy", np.stack([j.weights for j in model.joints], axis=1))
    for j in model.joints:
        joints.append({
            "name": j.name,
            "parent": j.parent,
            "pivot": np.asarray(j.pivot).tolist(),
            "pivot_shape": None if j.pivot_shape is None else np.asarray(j.pivot_shape).tolist(),
        })
    doc = {
        "name": model.name,
        "template": f"{stem}_template.obj",
        "shape_basis": f"{stem}_shape.npy",
        "expression_basis": f"{stem}_expression.npy",
        "skinning_weights": f"{stem}_weights.npy" if model.joints else None,
        "landmark_indices": np.asarray(model.landmark_indices).tolist(),
        "joints": joints,
    }
    write_json(path, doc)


def load_model(path) -> DeformableModel:
    path = Path(path)
    doc = read_json(path)
    base = path.parent
    template, triangles, _ = read_obj(base / doc["template"])
    shape = np.load(base / doc["shape_basis"])
    expr = np.load(base / doc["expression_basis"])
    joints = ()
    if doc.get("joints"):
        W = np.load(base / doc["skinning_weights"])
        if W.shape != (len(template), len(doc["joints"])):
            raise ValueError(f"{path}: skinning weight table has shape {W.shape}")
        joints = tuple(
            Joint(
                np.asarray(j["pivot"], dtype=np.float64),
                int(j["parent"]),
                np.ascontiguousarray(W[:, k]),
                j.get("name", ""),
                None if j.get("pivot_shape") is None else np.asarray(j["pivot_shape"], dtype=np.float64),
            )
            for k, j in enumerate(doc["joints"])
        )
    return DeformableModel(
        template,
        triangles,
        shape,
        expr,
        joints,
        np.asarray(doc.get("landmark_indices", []), dtype=np.int64),
        doc.get("name", "model"),
    )
