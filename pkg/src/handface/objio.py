"""Minimal Wavefront OBJ reader/writer (positions and triangles only)."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .mesh import MeshError


def read_obj(path):
    """Return ``(vertices, triangles, colors)``; ``colors`` is None unless every
    ``v`` line carries an RGB triple. Faces with other than three corners are
    rejected."""
    verts, cols, tris = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                vals = [float(x) for x in parts[1:]]
                if len(vals) < 3:
                    raise MeshError(f"{path}:{lineno}: vertex needs 3 coordinates")
                verts.append(vals[:3])
                cols.append(vals[3:6] if len(vals) >= 6 else None)
            elif tag == "f":
                corners = parts[1:]
                if len(corners) != 3:
                    raise MeshError(f"{path}:{lineno}: only triangles are supported, got {len(corners)} corners")
                idx = []
                for c in corners:
                    i = int(c.split("/")[0])
                    # negative indices count back from the latest vertex
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                tris.append(idx)
    vertices = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    colors = None
    if cols and all(c is not None for c in cols):
        colors = np.asarray(cols, dtype=np.float64)
    return vertices, triangles, colors


def format_obj(vertices, triangles, colors=None) -> str:
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles, dtype=np.int64)
    lines = []
    if colors is None:
        lines.extend(f"v {x:.9f} {y:.9f} {z:.9f}" for x, y, z in v)
    else:
        c = np.asarray(colors, dtype=np.float64)
        lines.extend(
            f"v {x:.9f} {y:.9f} {z:.9f} {r:.6f} {g:.6f} {b:.6f}" for (x, y, z), (r, g, b) in zip(v, c)
        )
    lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in t)
    return "\n".join(lines) + "\n"


def write_obj(path, vertices, triangles, colors=None):
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(format_obj(vertices, triangles, colors), encoding="utf-8")
    os.replace(tmp, path)
