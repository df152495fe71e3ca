"""``anchorcodec`` command line.

Exit codes: 0 success, 2 usage or input error, 3 data or CRC error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .codec import CodecError, decode_scene, encode_scene, storage_report
from .entropy import SequencingError, SymbolOverflowError
from .modelio import ModelFormatError, load_model, save_model
from .partition import PartitionConfig, partition
from .plan import VARIANTS
from .scene import DataValidationError, SceneError, load_scene, save_scene, similarity_report
from .synth import KINDS, SynthConfig, synthesize
from .trainer import TrainConfig, TrainingDivergedError, ablation_run, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
DEFAULT_RD_LAMBDAS = (0.0005, 0.001, 0.004)

log = logging.getLogger("anchorcodec")


class UsageError(Exception):
    pass


# ----------------------------------------------------------------- helpers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_manifest(artifact, args: argparse.Namespace, inputs=(), config=None) -> Path:
    """Write ``<artifact>.manifest.json`` describing how the artifact was made."""
    artifact = Path(artifact)
    import scipy  # version only

    manifest = {
        "artifact": artifact.name,
        "sha256": _sha256(artifact),
        "command": args.command,
        "argv": sys.argv[1:],
        "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in inputs],
        "config": _jsonable(config or {}),
        "seed": getattr(args, "seed", None),
        "versions": {"anchorcodec": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }
    out = artifact.with_name(artifact.name + ".manifest.json")
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _format_rows(rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(_jsonable(rows), indent=2) + "\n"
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (json.dumps(_jsonable(v)) if isinstance(v, (list, dict)) else v)
                             for k, v in row.items()})
    return buf.getvalue()


def _emit(rows: list[dict], args, config=None, inputs=()) -> None:
    text = _format_rows(rows, args.format)
    sys.stdout.write(text)
    if getattr(args, "report", None):
        path = Path(args.report)
        path.write_text(text)
        write_manifest(path, args, inputs, config)


def _figures(args) -> Path | None:
    if getattr(args, "figures", None):
        path = Path(args.figures)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return None


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {p}")
    return p


def _mapping(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"--map expects NAME=PROPERTY, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def _load(args) -> tuple[object, Path]:
    path = _existing(args.scene)
    return load_scene(path, _mapping(getattr(args, "map", None))), path


def _partition_config(args) -> PartitionConfig:
    try:
        return PartitionConfig(levels=args.levels, tau=args.tau, eps0=args.eps0)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _train_config(args, **overrides) -> TrainConfig:
    try:
        cfg = TrainConfig(lambda_e=args.lambda_e, lambda_d=args.lambda_d,
                          iterations=args.iterations, lr=args.lr, lr_z=args.lr_z,
                          seed=args.seed, per_feature_dim=args.per_feature_dim,
                          hyper_dim=args.hyper_dim, hidden=args.hidden,
                          log_every=args.log_every)
        return replace(cfg, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _progress(it: int, loss: float, bits: float) -> None:
    print(f"iter {it:6d}  loss {loss:.5f}  bits/anchor {bits:.2f}", file=sys.stderr)


def _partition_meta(pcfg: PartitionConfig, part) -> dict:
    return {"levels": pcfg.levels, "tau": pcfg.tau, "eps0": part.eps[0], "eps": part.eps}


# ------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    try:
        cfg = SynthConfig(kind=args.kind, n_anchors=args.anchors, seed=args.seed, rho=args.rho,
                          mask_fraction=args.mask_fraction, levels=args.levels, tau=args.tau)
        scene = synthesize(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.output)
    save_scene(scene, out)
    write_manifest(out, args, config=cfg.to_dict())
    print(f"wrote {len(scene)} anchors to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_partition(args) -> int:
    scene, path = _load(args)
    pcfg = _partition_config(args)
    part = partition(scene, pcfg)
    summary = part.summary(pcfg.tau)
    summary["n_anchors"] = len(scene)
    if args.format == "json":
        text = json.dumps(_jsonable(summary), indent=2) + "\n"
    else:
        rows = [{"level": k, "eps": part.eps[k], "kappa": part.kappa[k],
                 "count": part.level_counts[k], "cumulative": part.hat_counts[k],
                 "ratio": (summary["achieved_ratios"][k - 1] if k else ""),
                 "tau": pcfg.tau if k else ""} for k in range(part.levels)]
        text = _format_rows(rows, "csv")
    sys.stdout.write(text)
    for w in part.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.report:
        Path(args.report).write_text(text)
        write_manifest(args.report, args, [path], {"partition": vars(pcfg)})
    figs = _figures(args)
    if figs is not None:
        rep = similarity_report(scene, part)
        out = figs / "similarity.png"
        from .plotting import similarity_figure

        similarity_figure(rep, out)
        write_manifest(out, args, [path], {"partition": vars(pcfg)})
    return EXIT_OK


def cmd_train(args) -> int:
    scene, path = _load(args)
    pcfg = _partition_config(args)
    tcfg = _train_config(args)
    part = partition(scene, pcfg)
    model, rep = train(scene, part, tcfg, progress=_progress)
    model.meta["partition"] = _partition_meta(pcfg, part)
    out = Path(args.output)
    save_model(model, out, include_z=True)
    config = {"partition": vars(pcfg), "train": tcfg.to_dict()}
    write_manifest(out, args, [path], config)
    summary = rep.summary()
    if args.format == "json":
        sys.stdout.write(json.dumps(_jsonable(summary), indent=2) + "\n")
    else:
        flat = {k: v for k, v in summary.items() if k != "final_breakdown_bits"}
        flat.update({f"final_{k}_bits": v for k, v in summary["final_breakdown_bits"].items()})
        sys.stdout.write(_format_rows([flat], "csv"))
    if args.report:
        Path(args.report).write_text(_format_rows(rep.curve_rows(), "csv"))
        write_manifest(args.report, args, [path], config)
    figs = _figures(args)
    if figs is not None:
        from .plotting import loss_figure

        write_manifest(loss_figure(rep.bits_per_anchor, figs / "loss.png"), args, [path], config)
    return EXIT_OK


def _model_for_scene(model, scene):
    meta = model.meta.get("partition")
    if meta is None:
        raise UsageError("model file carries no partition settings; retrain with this tool")
    pcfg = PartitionConfig(levels=int(meta["levels"]), tau=float(meta["tau"]),
                           eps0=float(meta["eps0"]))
    part = partition(scene, pcfg)
    if len(model.hyper.z) != len(scene):
        raise UsageError(f"model was trained on {len(model.hyper.z)} anchors, "
                         f"scene has {len(scene)}")
    if [float(e) for e in meta.get("eps", part.eps)] != part.eps:
        raise UsageError("scene does not reproduce the model's partition; wrong scene?")
    return part


def cmd_encode(args) -> int:
    scene, path = _load(args)
    model_path = _existing(args.model)
    model = load_model(model_path)
    part = _model_for_scene(model, scene)
    bs = encode_scene(scene, part, model, embed_model=not args.external_model)
    out = Path(args.output)
    out.write_bytes(bs.data)
    write_manifest(out, args, [path, model_path], {"embed_model": not args.external_model})
    n = max(len(scene), 1)
    print(f"wrote {len(bs.data)} bytes to {out} "
          f"(payload {bs.payload_bytes()} B, estimate {bs.estimate.total / 8:.0f} B, "
          f"{8 * bs.payload_bytes() / n:.2f} bits/anchor)", file=sys.stderr)
    status = EXIT_OK
    if args.stats:
        _emit([storage_report(bs.data)], args)
    if args.verify:
        decoded, dpart = decode_scene(bs.data, None if not args.external_model else model)
        ok = (np.array_equal(decoded.positions, bs.reconstruction.positions)
              and np.array_equal(decoded.attributes(), bs.reconstruction.attributes())
              and ((decoded.masks is None and scene.masks is None)
                   or np.array_equal(decoded.masks, scene.masks))
              and dpart.same_as(part))
        print("verify: PASS" if ok else "verify: FAIL")
        status = EXIT_OK if ok else EXIT_DATA
    figs = _figures(args)
    if figs is not None:
        from .plotting import storage_figure

        write_manifest(storage_figure(storage_report(bs.data), figs / "storage.png"), args,
                       [out])
    return status


def cmd_decode(args) -> int:
    stream_path = _existing(args.stream)
    model = load_model(_existing(args.model)) if args.model else None
    scene, _ = decode_scene(stream_path.read_bytes(), model)
    out = Path(args.output)
    save_scene(scene, out)
    inputs = [stream_path] + ([Path(args.model)] if args.model else [])
    write_manifest(out, args, inputs)
    print(f"decoded {len(scene)} anchors to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_stats(args) -> int:
    path = _existing(args.stream)
    data = path.read_bytes()
    decode_scene(data)  # validates CRC and structure; raises on damage
    report = storage_report(data)
    _emit([report], args, inputs=[path])
    figs = _figures(args)
    if figs is not None:
        from .plotting import storage_figure

        write_manifest(storage_figure(report, figs / "storage.png"), args, [path])
    return EXIT_OK


def cmd_ablate(args) -> int:
    scene, path = _load(args)
    pcfg = _partition_config(args)
    tcfg = _train_config(args)
    variants = args.variants or list(VARIANTS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variant(s): {', '.join(unknown)}")
    part = partition(scene, pcfg)
    rows = [r.as_dict() for r in ablation_run(scene, part, tcfg, variants)]
    config = {"partition": vars(pcfg), "train": tcfg.to_dict(), "variants": variants}
    _emit(rows, args, config, [path])
    figs = _figures(args)
    if figs is not None:
        from .plotting import ablation_figure

        write_manifest(ablation_figure(rows, figs / "ablation.png"), args, [path], config)
    return EXIT_OK


def cmd_rd(args) -> int:
    scene, path = _load(args)
    pcfg = _partition_config(args)
    lambdas = sorted(args.lambdas or DEFAULT_RD_LAMBDAS)
    part = partition(scene, pcfg)
    rows = []
    n = max(len(scene), 1)
    for lam in lambdas:
        tcfg = _train_config(args, lambda_e=lam)
        model, rep = train(scene, part, tcfg)
        bs = encode_scene(scene, part, model)
        rows.append({"lambda_e": lam, "lambda_d": tcfg.lambda_d,
                     "bits_per_anchor": 8.0 * bs.payload_bytes() / n,
                     "estimated_bits_per_anchor": bs.estimate.total / n,
                     "distortion": rep.distortion,
                     "total_bytes": len(bs.data)})
    for a, b in zip(rows, rows[1:]):
        if b["bits_per_anchor"] >= a["bits_per_anchor"]:
            print(f"warning: bits per anchor did not decrease from lambda_e={a['lambda_e']:g} "
                  f"to {b['lambda_e']:g}", file=sys.stderr)
    config = {"partition": vars(pcfg), "train": _train_config(args).to_dict(),
              "lambdas": lambdas}
    _emit(rows, args, config, [path])
    figs = _figures(args)
    if figs is not None:
        from .plotting import rd_figure

        write_manifest(rd_figure(rows, figs / "rd.png"), args, [path], config)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_scene(p: argparse.ArgumentParser) -> None:
    p.add_argument("scene", help="anchor scene (binary PLY)")
    p.add_argument("--map", action="append", metavar="NAME=PROPERTY",
                   help="read property NAME (or indexed prefix ending in _) from PROPERTY")


def _add_partition(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("partition")
    g.add_argument("--levels", type=int, default=3, help="number of anchor levels K")
    g.add_argument("--tau", type=float, default=0.2, help="target size ratio between levels")
    g.add_argument("--eps0", type=float, default=None,
                   help="finest voxel size (default: median nearest-neighbour distance)")


def _add_train(p: argparse.ArgumentParser, lambda_d: float = 0.0) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lambda-e", type=float, default=0.004, help="rate weight")
    g.add_argument("--lambda-d", type=float, default=lambda_d, help="distortion weight")
    g.add_argument("--iterations", type=int, default=30000)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--lr-z", type=float, default=1e-2, help="learning rate for per-anchor z")
    g.add_argument("--hidden", type=int, default=128, help="context MLP width")
    g.add_argument("--hyper-dim", type=int, default=None,
                   help="hyperprior channels (default feature_dim // 4)")
    g.add_argument("--per-feature-dim", action="store_true",
                   help="also divide the rate term by the feature dimension")
    g.add_argument("--log-every", type=int, default=0, metavar="N",
                   help="print progress to stderr every N iterations")


def _add_report(p: argparse.ArgumentParser, figures: bool = True) -> None:
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--report", metavar="PATH", help="also write the report to PATH")
    if figures:
        p.add_argument("--figures", metavar="DIR", help="render PNG figures into DIR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchorcodec", description="Hierarchical context coding of anchor scenes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help, parents=[common])

    p = add("synth", "generate a synthetic anchor scene")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--anchors", type=int, default=1000)
    p.add_argument("--rho", type=float, default=0.95, help="parent-child correlation")
    p.add_argument("--mask-fraction", type=float, default=0.1)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--tau", type=float, default=0.2)
    p.set_defaults(func=cmd_synth)

    p = add("partition", "split a scene into anchor levels")
    _add_scene(p)
    _add_partition(p)
    _add_report(p)
    p.set_defaults(func=cmd_partition)

    p = add("train", "fit the entropy model to a scene")
    _add_scene(p)
    p.add_argument("-o", "--output", required=True, help="model file (CGSM)")
    _add_partition(p)
    _add_train(p)
    _add_report(p)
    p.set_defaults(func=cmd_train)

    p = add("encode", "compress a scene with a trained model")
    _add_scene(p)
    p.add_argument("model", help="model file (CGSM)")
    p.add_argument("-o", "--output", required=True, help="bitstream (CGSC)")
    p.add_argument("--external-model", action="store_true",
                   help="leave the model out of the bitstream")
    p.add_argument("--stats", action="store_true", help="print the storage breakdown")
    p.add_argument("--verify", action="store_true",
                   help="decode the result and compare; prints PASS or FAIL")
    _add_report(p)
    p.set_defaults(func=cmd_encode)

    p = add("decode", "decompress a bitstream to a scene")
    p.add_argument("stream", help="bitstream (CGSC)")
    p.add_argument("-o", "--output", required=True, help="scene (binary PLY)")
    p.add_argument("--model", help="model file, for streams encoded with --external-model")
    p.set_defaults(func=cmd_decode)

    p = add("stats", "storage breakdown of a bitstream")
    p.add_argument("stream")
    _add_report(p)
    p.set_defaults(func=cmd_stats)

    p = add("ablate", "train and compare model variants")
    _add_scene(p)
    p.add_argument("--variants", nargs="+", metavar="VARIANT",
                   help=f"subset of: {', '.join(VARIANTS)}")
    _add_partition(p)
    _add_train(p)
    _add_report(p)
    p.set_defaults(func=cmd_ablate)

    p = add("rd", "rate-distortion sweep over lambda_e")
    _add_scene(p)
    p.add_argument("--lambdas", type=float, nargs="+", metavar="L",
                   help="rate weights (default 0.0005 0.001 0.004)")
    _add_partition(p)
    _add_train(p, lambda_d=1.0)
    _add_report(p)
    p.set_defaults(func=cmd_rd)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataValidationError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SceneError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CodecError, ModelFormatError, SymbolOverflowError, SequencingError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
