"""Command-line entry point: ``handface <subcommand> ...``.

Numeric results go to JSON/CSV/OBJ files under ``--out``; standard output
only carries a short human summary. Errors are reported on standard error as
one JSON object. Exit codes: 0 success, 2 usage, 65 invalid data,
66 missing input, 70 internal failure.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .io import (
    atomic_write_text,
    list_frames,
    load_model,
    read_json,
    read_sequence,
    save_model,
    write_frame,
    write_json,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATAERR = 65
EXIT_NOINPUT = 66
EXIT_SOFTWARE = 70


class CliError(Exception):
    def __init__(self, message, code=EXIT_DATAERR):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    subcommand: str
    argv: list
    config_path: str | None
    config: dict | None
    inputs: list
    outputs: list = field(default_factory=list)
    seed: int | None = None
    tool_version: str = __version__
    wall_time: float = 0.0

    def to_dict(self):
        return {
            "subcommand": self.subcommand,
            "argv": list(self.argv),
            "config_path": self.config_path,
            "config": self.config,
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "seed": self.seed,
            "tool_version": self.tool_version,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, d) -> "RunManifest":
        return cls(**d)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"error": "usage", "message": message}) + "\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="random seed (u64)")
    common.add_argument("--threads", type=int, help="worker threads for parallel kernels")
    common.add_argument("--quiet", action="store_true", help="suppress the human summary")

    p = _Parser(prog="handface", description="Hand-face interaction reconstruction toolkit.")
    p.add_argument("--version", action="version", version=f"handface {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("stiffness", parents=[common], help="skull-skin distance stiffness map")
    s.add_argument("skin", help="skin surface OBJ")
    s.add_argument("skull", help="skull surface OBJ")
    s.add_argument("--exponent", type=float, help="stiffness exponent b")
    s.add_argument("--target", help="mesh receiving the stiffness (default: skin)")

    s = sub.add_parser("simulate", parents=[common], help="track a face sequence against a hand collider")
    s.add_argument("face_dir", help="sequence directory with reference face.obj per frame")
    s.add_argument("hand_dir", nargs="?", help="sequence directory with hand.obj per frame (default: face_dir)")

    s = sub.add_parser("gen-data", parents=[common], help="generate a synthetic interaction sequence")
    s.add_argument("scenario", help="scenario JSON")

    s = sub.add_parser("fit", parents=[common], help="fit face, hand and deformation to a sequence")
    s.add_argument("data", help="directory written by gen-data (or with the same files)")
    s.add_argument("--init", help="initial parameters JSON (default: DATA/init.json)")
    s.add_argument("--p0-dir", help="sequence directory holding the deformation estimate (default: DATA)")
    s.add_argument("--naive", action="store_true", help="drop the touch, collision and depth terms")

    s = sub.add_parser("eval", parents=[common], help="compare a predicted sequence with ground truth")
    s.add_argument("pred", help="predicted sequence directory")
    s.add_argument("gt", help="ground-truth sequence directory")
    s.add_argument("--contacts", help="ground-truth contacts JSON (default: GT/contacts.json)")

    s = sub.add_parser("inspect", parents=[common], help="mesh or sequence statistics")
    s.add_argument("path", help="OBJ file or sequence directory")
    return p


# -- helpers ---------------------------------------------------------------------------


def _require_file(path, what="input"):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load_config(args):
    if not args.config:
        return {}
    cfg = read_json(_require_file(args.config, "config"))
    if not isinstance(cfg, dict):
        raise CliError("config must be a JSON object")
    return cfg


def _out_dir(args, required=True):
    if not args.out:
        if required:
            raise CliError("--out is required for this subcommand", EXIT_USAGE)
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _say(args, text):
    if not args.quiet:
        print(text)


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise CliError("--threads must be >= 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _params_doc(indices, face, hand):
    return {"frames": [{"index": i, "face": f.to_dict(), "hand": h.to_dict()} for i, f, h in zip(indices, face, hand)]}


def _by_index(doc, key="frames"):
    return {int(fr["index"]): fr for fr in doc[key]}


def _pick(table, indices, what):
    missing = [i for i in indices if i not in table]
    if missing:
        raise CliError(f"{what} has no entry for frames {missing[:5]}")
    return [table[i] for i in indices]


def _mesh_stats(vertices, triangles):
    from .mesh import build_topology

    m = build_topology(vertices, triangles)
    return {
        "vertices": m.n_vertices,
        "triangles": m.n_triangles,
        "edges": int(len(m.edges)),
        "boundary_edges": int(np.count_nonzero(m.edge_face_count == 1)),
        "closed": m.is_closed,
        "components": int(m.n_components),
        "bbox_min": m.vertices.min(axis=0).tolist(),
        "bbox_max": m.vertices.max(axis=0).tolist(),
        "mean_edge_length": float(m.rest_edge_lengths.mean()) if len(m.edges) else 0.0,
    }


# -- subcommands -------------------------------------------------------------------------


def cmd_stiffness(args, cfg, manifest):
    from .mesh import build_topology
    from .objio import read_obj, write_obj
    from .stiffness import DEFAULT_EXPONENT, ssd_stiffness_map

    out = _out_dir(args)
    b = args.exponent if args.exponent is not None else float(cfg.get("exponent", DEFAULT_EXPONENT))
    skin = build_topology(*read_obj(_require_file(args.skin))[:2])
    skull = build_topology(*read_obj(_require_file(args.skull))[:2])
    target = skin if not args.target else build_topology(*read_obj(_require_file(args.target))[:2])
    manifest.inputs += [args.skin, args.skull] + ([args.target] if args.target else [])
    smap = ssd_stiffness_map(skin, skull, target, b)
    write_json(out / "stiffness.json", smap.to_dict())
    gray = np.repeat(smap.vertex_stiffness[:, None], 3, axis=1)
    write_obj(out / "stiffness.obj", target.vertices, target.triangles, colors=gray)
    s = smap.vertex_stiffness
    _say(args, f"stiffness: {len(s)} vertices, b={b:g}, s in [{s.min():.3f}, {s.max():.3f}], mean {s.mean():.3f}")


def _stiffness_source(cfg, mesh, seed, config_dir):
    from .stiffness import StiffnessMap, ssd_stiffness_map

    source = cfg.get("stiffness", "ssd")
    if source == "ssd":
        from .proxies import build_skin_and_skull

        skin, skull = build_skin_and_skull()
        return ssd_stiffness_map(skin, skull, mesh, float(cfg.get("exponent", 4.0)))
    if source == "uniform":
        return StiffnessMap.uniform(mesh, float(cfg.get("uniform_value", 1.0)))
    path = Path(source)
    if not path.is_absolute() and config_dir is not None:
        path = config_dir / path
    smap = StiffnessMap.from_dict(read_json(_require_file(path, "stiffness map")))
    smap.check(mesh)
    return smap


def cmd_simulate(args, cfg, manifest):
    from .mesh import build_topology
    from .pbd import TrackingConfig, simulate_tracking

    out = _out_dir(args)
    hand_dir = args.hand_dir or args.face_dir
    manifest.inputs += [args.face_dir, hand_dir]
    faces = read_sequence(args.face_dir)
    hands = faces if hand_dir == args.face_dir else read_sequence(hand_dir, faces.indices)
    mesh = build_topology(faces.face[0], faces.face_triangles)
    hand_mesh = build_topology(hands.hand[0], hands.hand_triangles)
    config_dir = Path(args.config).parent if args.config else None
    smap = _stiffness_source(cfg, mesh, args.seed or 0, config_dir)
    tracking = TrackingConfig.from_dict(cfg.get("tracking", {}))
    deformed, disp = simulate_tracking(mesh, smap, faces.face, hands.hand, tracking, collider_mesh=hand_mesh)
    for k, i in enumerate(faces.indices):
        write_frame(out, i, deformed[k], mesh.triangles, hands.hand[k], hand_mesh.triangles, disp[k])
    write_json(out / "simulate.json", {"scenario": cfg.get("scenario"), "tracking": tracking.to_dict(), "stiffness": cfg.get("stiffness", "ssd")})
    peak = np.linalg.norm(disp, axis=2).max() * 1000.0
    _say(args, f"simulate: {len(faces.indices)} frames, peak displacement {peak:.2f} mm")


def cmd_gen_data(args, cfg, manifest):
    from .proxies import build_proxies
    from .scenario import GenerateConfig, Scenario, depth_shifted_hand, generate

    out = _out_dir(args)
    doc = read_json(_require_file(args.scenario, "scenario"))
    manifest.inputs.append(args.scenario)
    scen_doc = doc.get("scenario", doc) if isinstance(doc, dict) else None
    if not isinstance(scen_doc, dict):
        raise CliError("scenario JSON must be an object")
    scen_doc = {k: v for k, v in scen_doc.items() if k not in ("generate", "init")}
    gen_doc = {**doc.get("generate", {}), **cfg.get("generate", {})}
    init_doc = {"depth_offset": 0.02, "rescale": True, **doc.get("init", {}), **cfg.get("init", {})}
    if args.seed is not None:
        gen_doc["seed"] = args.seed
    scenario = Scenario.from_dict(scen_doc)
    gen = GenerateConfig.from_dict(gen_doc)
    manifest.seed = gen.seed
    proxies = build_proxies(gen.seed)
    seq = generate(scenario, gen, proxies)
    T = seq.n_frames
    idx = list(range(T))
    face, hand = proxies.head, proxies.hand

    write_json(out / "scenario.json", scenario.to_dict())
    write_json(out / "generate.json", gen.to_dict())
    write_json(out / "camera.json", seq.camera.to_dict())
    save_model(out / "models" / "head.json", face)
    save_model(out / "models" / "hand.json", hand)
    write_json(out / "models" / "head_stiffness.json", proxies.head_stiffness.to_dict())
    write_json(out / "observations.json", {"frames": [{"index": i, **o.to_dict()} for i, o in zip(idx, seq.observations)]})
    write_json(out / "contacts.json", {
        "frames": [{"index": i, **c.to_dict()} for i, c in zip(idx, seq.contact_sets())],
        "frame_contact": seq.frame_contact.tolist(),
    })
    write_json(out / "priors.json", {"frames": [{"index": i, **p.to_dict()} for i, p in zip(idx, seq.priors)]})
    write_json(out / "params.json", _params_doc(idx, seq.face_params, seq.hand_params))
    init_hand = [depth_shifted_hand(h, float(init_doc["depth_offset"]), bool(init_doc["rescale"])) for h in seq.hand_params]
    write_json(out / "init.json", {**_params_doc(idx, seq.face_params, init_hand), "init": init_doc})
    for t in idx:
        write_frame(out, t, seq.deformed[t], face.triangles, seq.hand_vertices[t], hand.triangles, seq.displacements[t])
        write_frame(out / "reference", t, seq.reference[t], face.triangles, seq.hand_vertices[t], hand.triangles)
    peak = np.linalg.norm(seq.displacements, axis=2).max() * 1000.0
    _say(args, f"gen-data: {scenario.action_kind}/{scenario.expression_kind}, {T} frames, "
               f"{int(seq.frame_contact.sum())} contact frames, peak displacement {peak:.2f} mm")


def cmd_fit(args, cfg, manifest):
    from .fitting import FitConfig, FitProblem, FrameObservation, optimize, write_trace_csv
    from .losses import ContactSet, PriorSampleSet
    from .model import Camera, ModelParams, evaluate
    from .stiffness import StiffnessMap

    out = _out_dir(args)
    data = Path(args.data)
    if not data.is_dir():
        raise FileNotFoundError(f"data directory not found: {data}")
    cfg = dict(cfg)
    frames = cfg.pop("frames", None)
    rest_mode = cfg.pop("rest_mode", "estimate")
    config = FitConfig.from_dict(cfg)
    if args.naive:
        config = config.naive()

    face_model = load_model(_require_file(data / "models" / "head.json"))
    hand_model = load_model(_require_file(data / "models" / "hand.json"))
    stiff = StiffnessMap.from_dict(read_json(_require_file(data / "models" / "head_stiffness.json")))
    camera = Camera.from_dict(read_json(_require_file(data / "camera.json")))
    obs = _by_index(read_json(_require_file(data / "observations.json")))
    contacts = _by_index(read_json(_require_file(data / "contacts.json")))
    priors = _by_index(read_json(_require_file(data / "priors.json")))
    init_path = Path(args.init) if args.init else data / "init.json"
    init = _by_index(read_json(_require_file(init_path, "initialisation")))
    p0_dir = Path(args.p0_dir) if args.p0_dir else data
    manifest.inputs += [str(data), str(init_path), str(p0_dir)]

    indices = sorted(obs)
    if frames is not None:
        if not (isinstance(frames, list) and len(frames) == 2):
            raise CliError("config 'frames' must be [start, stop]")
        indices = [i for i in indices if frames[0] <= i < frames[1]]
    if not indices:
        raise CliError("no frames selected")
    p0 = read_sequence(p0_dir, indices).displacements
    problem = FitProblem(
        face_model,
        hand_model,
        camera,
        stiff,
        [FrameObservation.from_dict(o) for o in _pick(obs, indices, "observations")],
        p0,
        [ModelParams.from_dict(f["face"], face_model) for f in _pick(init, indices, "init")],
        [ModelParams.from_dict(f["hand"], hand_model) for f in _pick(init, indices, "init")],
        [ContactSet.from_dict(c) for c in _pick(contacts, indices, "contacts")],
        [PriorSampleSet.from_dict(p) for p in _pick(priors, indices, "priors")],
        rest_mode=rest_mode,
    )
    result = optimize(problem, config)
    st = result.state
    write_json(out / "fit_config.json", {**config.to_dict(), "frames": frames, "rest_mode": rest_mode})
    write_json(out / "params.json", _params_doc(indices, st.face, st.hand))
    write_trace_csv(out / "trace.csv", result.trace)
    for k, i in enumerate(indices):
        vf = evaluate(face_model, st.face[k]) + st.p[k]
        vh = evaluate(hand_model, st.hand[k])
        write_frame(out, i, vf, face_model.triangles, vh, hand_model.triangles, st.p[k])
    first, last = result.trace[0]["total"], result.trace[-1]["total"]
    _say(args, f"fit: {len(indices)} frames, {len(result.trace) - 1} steps, objective {first:.4e} -> {last:.4e}")


def cmd_eval(args, cfg, manifest):
    from .mesh import build_topology
    from .metrics import evaluate_sequences

    out = _out_dir(args)
    pred_idx = list_frames(args.pred)
    gt_idx = set(list_frames(args.gt))
    missing = [i for i in pred_idx if i not in gt_idx]
    if missing:
        raise CliError(f"ground truth lacks frames {missing[:5]}")
    contacts_path = Path(args.contacts) if args.contacts else Path(args.gt) / "contacts.json"
    if not contacts_path.exists() and not args.contacts:
        contacts_path = Path(args.gt).parent / "contacts.json"
    flags_all = read_json(_require_file(contacts_path, "contacts"))["frame_contact"]
    manifest.inputs += [args.pred, args.gt, str(contacts_path)]
    if max(pred_idx) >= len(flags_all):
        raise CliError("contact flags do not cover all frames")
    pred = read_sequence(args.pred, pred_idx)
    gt = read_sequence(args.gt, pred_idx)
    if pred.face.shape != gt.face.shape or pred.hand.shape != gt.hand.shape:
        raise CliError("predicted and ground-truth meshes differ in vertex count")
    mesh = build_topology(gt.face[0], gt.face_triangles)
    flags = np.array([bool(flags_all[i]) for i in pred_idx])
    rep = evaluate_sequences(pred.face, gt.face, pred.hand, gt.hand, mesh, flags, pred.displacements, gt.displacements)
    for row, i in zip(rep.frames, pred_idx):
        row["frame"] = i
    write_json(out / "report.json", rep.to_dict())
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rep.frames[0].keys()), lineterminator="\n")
    w.writeheader()
    for row in rep.frames:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    atomic_write_text(out / "frames.csv", buf.getvalue())

    def fmt(v):
        return "n/a" if v is None else f"{v:.3f}"

    _say(args, f"eval: {len(pred_idx)} frames, PVE {rep.pve:.3f} mm, DefE {fmt(rep.defe)}, +DefE {fmt(rep.defe_plus)}, "
               f"Col. Dist. {rep.col_dist:.3f} mm, Non-Col. {rep.non_col:.1f}%, Touchness {fmt(rep.touchness)}, F {fmt(rep.f_score)}")


def cmd_inspect(args, cfg, manifest):
    from .objio import read_obj

    path = _require_file(args.path)
    manifest.inputs.append(str(path))
    if path.is_dir():
        seq = read_sequence(path)
        disp = np.linalg.norm(seq.displacements, axis=2).max(axis=1) * 1000.0
        stats = {
            "kind": "sequence",
            "frames": seq.indices,
            "face": _mesh_stats(seq.face[0], seq.face_triangles),
            "hand": _mesh_stats(seq.hand[0], seq.hand_triangles),
            "max_displacement_mm": disp.tolist(),
        }
        summary = f"sequence: {len(seq.indices)} frames, face {stats['face']['vertices']} vertices, peak displacement {disp.max():.2f} mm"
    else:
        v, t, _ = read_obj(path)
        stats = {"kind": "mesh", **_mesh_stats(v, t)}
        summary = f"mesh: {stats['vertices']} vertices, {stats['triangles']} triangles, closed={stats['closed']}"
    out = _out_dir(args, required=False)
    if out is not None:
        write_json(out / "inspect.json", stats)
    else:
        sys.stdout.write(json.dumps(stats, sort_keys=True) + "\n")
    _say(args, summary)


COMMANDS = {
    "stiffness": cmd_stiffness,
    "simulate": cmd_simulate,
    "gen-data": cmd_gen_data,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def _error(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message), "exit_code": code}) + "\n")
    return code


def _list_outputs(out: Path):
    return sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")


def dispatch(argv=None) -> int:
    from .fitting import OptimizationError
    from .pbd import SimulationError

    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    start = time.perf_counter()
    manifest = RunManifest(args.command, argv, args.config, None, [], seed=args.seed)
    try:
        _set_threads(args.threads)
        cfg = _load_config(args)
        manifest.config = cfg or None
        COMMANDS[args.command](args, cfg, manifest)
    except CliError as exc:
        return _error("usage" if exc.code == EXIT_USAGE else "validation", exc, exc.code)
    except FileNotFoundError as exc:
        return _error("missing_input", exc, EXIT_NOINPUT)
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        return _error("validation", f"{type(exc).__name__}: {exc}", EXIT_DATAERR)
    except (OptimizationError, SimulationError, RuntimeError) as exc:
        return _error("failure", exc, EXIT_SOFTWARE)
    if args.out:
        out = Path(args.out)
        manifest.outputs = _list_outputs(out)
        manifest.wall_time = round(time.perf_counter() - start, 3)
        write_json(out / "manifest.json", manifest.to_dict())
    return EXIT_OK


def replay(manifest_path) -> int:
    """Re-run the command recorded in a manifest."""
    return dispatch(RunManifest.from_dict(read_json(manifest_path)).argv)


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
