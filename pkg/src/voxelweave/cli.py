"""Command-line interface.

Subcommands: generate, train, infer, extract, evaluate, gradcheck. Every
subcommand accepts --config pointing at a JSON file of defaults for its
flags; explicit command-line flags win over config values.

Exit codes: 0 success, 2 bad usage or contract violation, 3 numeric failure
(divergence, non-finite values), 1 check failed (gradcheck).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ContractError, NumericError, VoxelWeaveError

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser,
                  argv: list[str]) -> argparse.Namespace:
    """Fill args from a JSON config file; explicit flags keep priority."""
    if not getattr(args, "config", None):
        return args
    with open(args.config) as fh:
        overrides = json.load(fh)
    if not isinstance(overrides, dict):
        raise ContractError("config file must hold a JSON object")
    explicit = {a.lstrip("-").split("=")[0].replace("-", "_")
                for a in argv if a.startswith("--")}
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ContractError(f"config key {key!r} is not a flag of this command")
        if attr not in explicit:
            setattr(args, attr, value)
    return args


def _add_config_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None,
                   help="JSON file of default values for this command's flags")


def _families(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(s.strip() for s in str(text).split(",") if s.strip())


# -- generate -------------------------------------------------------------------------


def cmd_generate(args) -> int:
    from .scenes import DatasetConfig, SceneConfig, make_dataset

    config = DatasetConfig(
        num_scenes=int(args.scenes),
        objects_per_scene=int(args.objects),
        families=_families(args.families),
        grid_shape=(int(args.grid),) * 3,
        scene=SceneConfig(image_size=int(args.image_size),
                          focal=float(args.focal),
                          ground=not args.no_ground),
    )
    manifest = make_dataset(args.out, config, seed=int(args.seed))
    print(f"wrote {config.num_scenes} scenes to {args.out} "
          f"({len(manifest['train'])} train / {len(manifest['test'])} test)")
    return EXIT_OK


# -- train ----------------------------------------------------------------------------


def _load_records(data_dir, split: str):
    from .scenes import load_dataset

    manifest, config, records = load_dataset(data_dir)
    if split == "all":
        picked = records
    elif split in ("train", "test"):
        picked = [records[i] for i in manifest[split]]
    else:
        raise ContractError(f"unknown split {split!r}")
    return manifest, config, picked


def cmd_train(args) -> int:
    from .model import ModelConfig, ReconModel, load_checkpoint, save_checkpoint
    from .train import TrainConfig, train

    manifest, dconf, records = _load_records(args.data, "train")
    base = dconf.base_grid()
    start_step = 0
    adam = None
    if args.resume:
        model, adam, extra = load_checkpoint(args.resume)
        start_step = adam.step if adam else 0
        print(f"resuming from {args.resume} at step {start_step}")
    else:
        mconf = ModelConfig.for_data(dconf.num_classes,
                                     image_size=dconf.scene.image_size,
                                     grid_shape=dconf.grid_shape,
                                     use_skips=not args.no_skips)
        model = ReconModel.create(mconf, seed=int(args.seed))
    tconf = TrainConfig(steps=int(args.steps), lr=float(args.lr),
                        loss=args.loss, seed=int(args.seed),
                        random_offsets=not args.fixed_offset,
                        log_every=int(args.log_every))
    result = train(model, records, base, tconf, adam=adam, start_step=start_step,
                   progress=lambda s, l: print(f"step {s:5d}  loss {l:.4f}",
                                               flush=True))
    save_checkpoint(args.out, result.model, result.adam,
                    extra={"dataset": str(args.data), "steps": tconf.steps,
                           "loss": tconf.loss, "seed": tconf.seed})
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".loss.csv")
    _write_loss_log(log_path, result.history, start_step,
                    carry_from=log_path if args.resume else None)
    final = result.history[-1][1] if result.history else float("nan")
    print(f"saved checkpoint to {args.out} (final loss {final:.4f})")
    print(f"wrote loss log to {log_path}")
    return EXIT_OK


def _write_loss_log(path: Path, history, start_step: int, carry_from=None) -> None:
    """Write step,loss CSV; on resume keep prior rows below start_step."""
    rows: list[tuple[int, float]] = []
    if carry_from is not None and Path(carry_from).exists():
        with open(carry_from, newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            rows = [(int(s), float(l)) for s, l in reader if int(s) < start_step]
    rows.extend(history)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, value in rows:
            writer.writerow([step, repr(value)])


# -- infer / extract ------------------------------------------------------------------


def _load_model_scene(args):
    from .model import load_checkpoint

    manifest, dconf, records = _load_records(args.data, "all")
    idx = int(args.scene)
    if not 0 <= idx < len(records):
        raise ContractError(f"scene index {idx} out of range "
                            f"(dataset has {len(records)})")
    model, _, _ = load_checkpoint(args.checkpoint)
    if getattr(args, "resolution", None) is not None:
        want = int(args.resolution)
        if (want,) * 3 != model.config.grid_shape:
            raise ContractError(
                f"resolution mismatch: requested {want}, checkpoint grid is "
                f"{model.config.grid_shape[0]}")
    if dconf.grid_shape != model.config.grid_shape:
        raise ContractError(
            f"resolution mismatch: dataset grid {dconf.grid_shape} vs "
            f"checkpoint grid {model.config.grid_shape}")
    return dconf, records[idx], model, dconf.base_grid()


def _save_volume(path: Path, vol, num_classes: int, scene_name=None) -> None:
    from .tensor import save_tensor

    save_tensor(path, vol.values)
    sidecar = {"grid": vol.spec.to_json(),
               "num_classes": num_classes,
               "scene": scene_name,
               "layout": "(W, H, D, C) class probabilities"}
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)


def _load_volume(path: Path):
    from .tensor import load_tensor
    from .volume import GridSpec, VolumeGrid

    with open(Path(path).with_suffix(Path(path).suffix + ".json")) as fh:
        sidecar = json.load(fh)
    spec = GridSpec.from_json(sidecar["grid"])
    return VolumeGrid(spec, load_tensor(path))


def cmd_infer(args) -> int:
    from .train import predict_labels
    from .volume import interleave, superres_offsets

    dconf, record, model, base = _load_model_scene(args)
    n = int(args.superres)
    out = Path(args.out)
    scene_name = record.path.name if record.path else None
    if args.debug and n > 1:
        grids = []
        for pidx, off in enumerate(superres_offsets(n, base.spacing)):
            grid = model.predict_volume(record.image, base.with_offset(off),
                                        record.scene.camera)
            grids.append(grid)
            ppath = out.with_name(f"{out.stem}.pass{pidx:03d}{out.suffix}")
            _save_volume(ppath, grid, dconf.num_classes, scene_name)
        vol = interleave(grids, n)
        print(f"wrote {len(grids)} per-pass volumes next to {out}")
    else:
        vol, _ = predict_labels(model, record, base, superres=n)
    _save_volume(out, vol, dconf.num_classes, scene_name)
    print(f"wrote probability volume {tuple(vol.values.shape)} to {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    from .mesher import extract_scene_meshes
    from .meshes import save_obj, save_ply
    from .train import predict_labels

    if args.volume:
        vol = _load_volume(args.volume)
    else:
        if not (args.checkpoint and args.data and args.scene is not None):
            raise ContractError(
                "extract needs either --volume or --checkpoint/--data/--scene")
        dconf, record, model, base = _load_model_scene(args)
        vol, _ = predict_labels(model, record, base, superres=int(args.superres))
    meshes = extract_scene_meshes(vol)
    non_empty = {c: m for c, m in meshes.items() if m.num_faces}
    out = Path(args.out)
    for c, mesh in non_empty.items():
        path = out.with_name(f"{out.stem}.class{c}{out.suffix}")
        if args.format == "obj":
            save_obj([mesh], path)
        else:
            save_ply(mesh, path)
        print(f"wrote class {c} mesh ({mesh.num_faces} faces) to {path}")
    if not non_empty:
        print("no class field crossed the surface level; nothing written")
    return EXIT_OK


# -- evaluate -------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    from .model import load_checkpoint
    from .train import evaluate

    manifest, dconf, records = _load_records(args.data, args.split)
    model, _, _ = load_checkpoint(args.checkpoint)
    report = evaluate(model, records, dconf.base_grid(),
                      superres=int(args.superres),
                      num_samples=int(args.samples))
    overall = report.overall()
    print(f"instances: {overall['count']}  iou {overall['iou']:.4f}  "
          f"fscore {overall['fscore']:.4f}  chamfer {overall['chamfer']:.5f}")
    print(f"mean per-class iou: {report.mean_iou():.4f}")
    for name, row in report.occlusion_bins().items():
        if row["count"]:
            print(f"  occlusion {name:8s} n={row['count']:3d} iou {row['iou']:.4f}")
    for name, row in report.depth_bins().items():
        if row["count"]:
            print(f"  depth     {name:8s} n={row['count']:3d} iou {row['iou']:.4f}")
    if args.out:
        report.save(args.out)
        print(f"wrote report to {args.out}")
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from . import ops
    from .gradcheck import build_cases, run_suite
    from .losses import LOSSES

    names = _families(args.only) if args.only else None
    results = run_suite(seeds=[int(s) for s in _families(args.seeds)],
                        tol=float(args.tol), corrupt=args.corrupt,
                        names=names)
    worst = 0.0
    failed = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        if args.verbose or not r.passed:
            print(f"  {r.name:24s} rel_err {r.max_rel_err:.3e}  {status}")
        worst = max(worst, r.max_rel_err)
        if not r.passed:
            failed.append(r.name)
    print(f"{len(results)} cases, worst relative error {worst:.3e}, "
          f"tolerance {args.tol}")
    if names is None:
        required = set(ops.DIFFERENTIABLE_OPS)
        required.update("loss_" + n.replace("-", "_") for n in LOSSES)
        covered = {c.op for c in build_cases()}
        missing = sorted(required - covered)
        print(f"coverage: {len(required - set(missing))}/{len(required)} "
              f"registered ops have cases")
        if missing:
            print(f"UNCOVERED: {', '.join(missing)}")
            return EXIT_CHECK_FAILED
    if failed:
        print(f"FAILED: {', '.join(sorted(set(failed)))}")
        return EXIT_CHECK_FAILED
    print("all gradients match finite differences")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelweave",
        description="Single-image multi-class 3D reconstruction on offset grids.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", default=40, type=int)
    g.add_argument("--objects", default=2, type=int)
    g.add_argument("--families", default="box,sphere,cylinder")
    g.add_argument("--grid", default=32, type=int)
    g.add_argument("--image-size", default=64, type=int)
    g.add_argument("--focal", default=64.0, type=float)
    g.add_argument("--no-ground", action="store_true")
    g.add_argument("--seed", default=0, type=int)
    _add_config_flag(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a reconstruction model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", default=1500, type=int)
    t.add_argument("--lr", default=2e-3, type=float)
    t.add_argument("--loss", default="iou-xent",
                   choices=["iou", "xent", "focal", "iou-xent"])
    t.add_argument("--seed", default=0, type=int)
    t.add_argument("--no-skips", action="store_true",
                   help="ablation: drop the projected image-feature gathers")
    t.add_argument("--fixed-offset", action="store_true",
                   help="train only at the half-cell reference offset")
    t.add_argument("--resume", default=None,
                   help="checkpoint to continue from")
    t.add_argument("--log", default=None,
                   help="loss CSV path (default: <out>.loss.csv)")
    t.add_argument("--log-every", default=50, type=int)
    _add_config_flag(t)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict a probability volume for one scene")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--scene", required=True, type=int)
    i.add_argument("--out", required=True)
    i.add_argument("--superres", "--n", dest="superres", default=1, type=int,
                   help="interleave n^3 offset passes into an n-times finer grid")
    i.add_argument("--resolution", default=None, type=int,
                   help="expected base grid resolution; mismatch is an error")
    i.add_argument("--debug", action="store_true",
                   help="also write each of the n^3 per-offset volumes")
    _add_config_flag(i)
    i.set_defaults(func=cmd_infer)

    x = sub.add_parser("extract", help="extract per-class surface meshes")
    x.add_argument("--checkpoint", default=None)
    x.add_argument("--data", default=None)
    x.add_argument("--scene", default=None, type=int)
    x.add_argument("--volume", default=None,
                   help="saved probability volume (from infer) instead of "
                        "checkpoint+data+scene")
    x.add_argument("--out", required=True)
    x.add_argument("--format", default="obj", choices=["obj", "ply"])
    x.add_argument("--superres", "--n", dest="superres", default=1, type=int)
    _add_config_flag(x)
    x.set_defaults(func=cmd_extract)

    e = sub.add_parser("evaluate", help="score a checkpoint against a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["train", "test", "all"])
    e.add_argument("--out", default=None, help="write the full JSON report here")
    e.add_argument("--superres", "--n", dest="superres", default=1, type=int)
    e.add_argument("--samples", default=20000, type=int)
    _add_config_flag(e)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("gradcheck",
                       help="verify every op's gradient against finite differences")
    c.add_argument("--tol", default=1e-4, type=float)
    c.add_argument("--seeds", default="0,1")
    c.add_argument("--only", default=None,
                   help="comma-separated case names to run")
    c.add_argument("--corrupt", default=None,
                   help="intentionally corrupt one case's gradient "
                        "(self-test of the checker)")
    c.add_argument("--verbose", action="store_true")
    _add_config_flag(c)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(args, parser, argv)
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VoxelWeaveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
