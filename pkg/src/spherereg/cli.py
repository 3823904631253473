"""Command-line interface: icosphere, resample, register, train, synth, metrics."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import net as netmod
from .formats import FormatError, MeshRecord, format_report, read_mesh, write_deform, write_mesh
from .fileio import atomic_write_text
from .interp import build_locator, locate_many, resample_values
from .loss import LossWeights
from .mesh import build_icosphere
from .metrics import dice_hard, distortion_report, mae, ncc
from .registry import DivergenceError, RegistrationConfig, TrainConfig, evaluate, register, train
from .synth import synth_corpus

EXIT_OK, EXIT_USAGE, EXIT_FOLDS, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _levels(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from e


def _require_sphere(rec: MeshRecord, what: str):
    r = np.linalg.norm(rec.vertices, axis=1)
    if len(r) == 0 or np.abs(r - 1.0).max() > 1e-6:
        raise UsageError(f"{what}: vertices are not on the unit sphere")


def cmd_icosphere(args) -> int:
    write_mesh(args.out, build_icosphere(args.level).mesh)
    return EXIT_OK


def cmd_resample(args) -> int:
    src = read_mesh(args.src)
    _require_sphere(src, args.src)
    if args.dst is not None:
        dst = read_mesh(args.dst)
        _require_sphere(dst, args.dst)
        dv, df = dst.vertices, dst.faces
    else:
        ico = build_icosphere(args.dst_level).mesh
        dv, df = ico.vertices, ico.faces
    mesh = src.mesh
    loc = build_locator(mesh)
    feats = resample_values(mesh, src.features, dv, loc) if src.features.shape[1] else np.zeros((len(dv), 0))
    labels = None
    if src.labels is not None:
        # majority of the containing face's corner labels, weighted barycentrically
        soft = np.zeros((len(src.labels), src.parcel_count))
        soft[np.arange(len(src.labels)), src.labels] = 1.0
        labels = resample_values(mesh, soft, dv, loc).argmax(1)
    write_mesh(args.out, MeshRecord(dv, df, feats, labels, src.parcel_count if labels is not None else 0))
    return EXIT_OK


def load_weights(path) -> LossWeights:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    allowed = {f.name for f in dc_fields(LossWeights)}
    unknown = set(data) - allowed
    if unknown:
        raise UsageError(f"unknown weight keys {sorted(unknown)}")
    return LossWeights(**{k: tuple(v) for k, v in data.items()})


def _deform_path(template: str, level: int) -> Path:
    if "{level}" in template:
        return Path(template.format(level=level))
    p = Path(template)
    return p.with_name(f"{p.stem}.ico{level}{p.suffix}")


def cmd_register(args) -> int:
    if args.mode == "learned" and not args.model:
        raise UsageError("--mode learned requires --model")
    moving = read_mesh(args.moving)
    fixed = read_mesh(args.fixed)
    _require_sphere(moving, args.moving)
    _require_sphere(fixed, args.fixed)
    weights = load_weights(args.weights_file) if args.weights_file else LossWeights()
    model = netmod.load(args.model) if args.model else None
    levels = args.levels
    if levels is None:
        levels = tuple(model.meta.get("levels", (3, 4, 5, 6))) if model else (3, 4, 5, 6)
    cfg = RegistrationConfig(levels=levels, mode=args.mode, weights=weights, seed=args.seed)
    ms, fs = moving.subject("moving"), fixed.subject("fixed")
    res = register(ms, fs, cfg, model)
    report = evaluate([(ms, fs)], [res])["pairs"][0]
    out = {
        "ncc": report.ncc,
        "mae": report.mae,
    }
    if report.dice is not None:
        out["dice"] = report.dice
    out.update(
        {
            "areal_distortion": report.areal,
            "shape_distortion": report.shape,
            "edge_distortion": report.edge,
            "fold_count": report.fold_count,
            "post_rigid_sim": report.post_rigid_sim,
            "final_sim": report.final_sim,
            "sim_reduction": 1.0 - report.final_sim / report.post_rigid_sim if report.post_rigid_sim > 0 else 0.0,
            "rigid_alpha": float(res.rigid_angles[0, 0]),
            "rigid_beta": float(res.rigid_angles[0, 1]),
            "rigid_gamma": float(res.rigid_angles[0, 2]),
            "levels": ",".join(str(l) for l in cfg.levels),
            "mode": cfg.mode,
            "success": res.success,
        }
    )
    if args.timings:
        out.update({f"time_{k}": v for k, v in res.timings.items()})
    if args.out_mesh:
        write_mesh(args.out_mesh, MeshRecord(res.moved_mesh.vertices, res.moved_mesh.faces,
                                             res.moved_features.values, None, 0))
    if args.out_deform:
        for level, field in res.fields.items():
            write_deform(_deform_path(args.out_deform, level), field)
    text = format_report(out)
    if args.report:
        atomic_write_text(args.report, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK if res.success else EXIT_FOLDS


def load_train_config(path, seed: int):
    """JSON with optional "train" (TrainConfig fields) and "registration" sections."""
    data = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    unknown = set(data) - {"train", "registration"}
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}")
    tdata = dict(data.get("train", {}))
    rdata = dict(data.get("registration", {}))
    tdata["seed"] = seed
    if "widths" in tdata:
        tdata["widths"] = tuple(tdata["widths"])
    if "weights" in rdata:
        rdata["weights"] = LossWeights(**{k: tuple(v) for k, v in rdata["weights"].items()})
    rdata.setdefault("levels", (3, 4))
    rdata["levels"] = tuple(rdata["levels"])
    rdata["mode"] = "learned"
    rdata["seed"] = seed
    return TrainConfig(**tdata), RegistrationConfig(**rdata)


def read_corpus(directory) -> list:
    paths = sorted(Path(directory).glob("*.mesh"))
    if not paths:
        raise UsageError(f"no .mesh files in {directory}")
    return [read_mesh(p).subject(p.stem) for p in paths]


def cmd_train(args) -> int:
    tc, rc = load_train_config(args.config, args.seed)
    if args.epochs is not None:
        tc = TrainConfig(**{**{f.name: getattr(tc, f.name) for f in dc_fields(tc)}, "epochs": args.epochs})
    corpus = read_corpus(args.corpus_dir)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    model, history = train(corpus, tc, rc, log=log)
    netmod.save(model, args.out_model)
    if args.history:
        atomic_write_text(args.history, "".join(json.dumps(r, sort_keys=True) + "\n" for r in history.records))
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in synth_corpus(args.seed, args.n, args.level, args.parcels):
        write_mesh(out / f"{s.name}.mesh", s)
    return EXIT_OK


def cmd_metrics(args) -> int:
    if not ((args.a and args.b) or (args.deformed and args.original)):
        raise UsageError("give --a/--b and/or --original/--deformed")
    out = {}
    if args.a or args.b:
        if not (args.a and args.b):
            raise UsageError("--a and --b go together")
        a, b = read_mesh(args.a), read_mesh(args.b)
        if len(a.vertices) != len(b.vertices) or a.features.shape != b.features.shape:
            raise UsageError("--a and --b must have matching vertices and channels")
        for c in range(a.features.shape[1]):
            sfx = "" if a.features.shape[1] == 1 else f"_c{c}"
            out[f"ncc{sfx}"] = ncc(a.features, b.features, c)
            out[f"mae{sfx}"] = mae(a.features, b.features, c)
        if a.labels is not None and b.labels is not None:
            out["dice"] = dice_hard(a.labels, b.labels)[1]
    if args.original or args.deformed:
        if not (args.original and args.deformed):
            raise UsageError("--original and --deformed go together")
        o, d = read_mesh(args.original), read_mesh(args.deformed)
        if not np.array_equal(o.faces, d.faces):
            raise UsageError("--original and --deformed must share connectivity")
        rep = distortion_report(o.mesh, d.vertices)
        out.update(rep.summary())
    text = format_report(out)
    if args.report:
        atomic_write_text(args.report, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spherereg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("icosphere", help="write an icosphere mesh")
    s.add_argument("--level", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_icosphere)

    s = sub.add_parser("resample", help="resample features onto another sphere mesh")
    s.add_argument("--src", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--dst-level", type=int)
    g.add_argument("--dst")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_resample)

    s = sub.add_parser("register", help="rigid + non-rigid registration of two spheres")
    s.add_argument("--moving", required=True)
    s.add_argument("--fixed", required=True)
    s.add_argument("--mode", choices=("direct", "learned"), default="direct")
    s.add_argument("--model")
    s.add_argument("--levels", type=_levels)
    s.add_argument("--weights-file")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-mesh")
    s.add_argument("--out-deform", help="path; '.ico<l>' is inserted per level unless it contains {level}")
    s.add_argument("--report")
    s.add_argument("--timings", action="store_true", help="add wall-clock times to the report")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("train", help="train S-GAT models on a corpus directory of .mesh files")
    s.add_argument("--corpus-dir", required=True)
    s.add_argument("--config")
    s.add_argument("--out-model", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int)
    s.add_argument("--history")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--level", type=int, required=True)
    s.add_argument("--parcels", type=int, default=34)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("metrics", help="accuracy and distortion metrics")
    s.add_argument("--a")
    s.add_argument("--b")
    s.add_argument("--deformed")
    s.add_argument("--original")
    s.add_argument("--report")
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, FormatError, TypeError, ValueError, KeyError, LookupError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
