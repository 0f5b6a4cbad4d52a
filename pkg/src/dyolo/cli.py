"""Command-line entry point: ``dyolo <command> [options]``."""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import platform
import sys
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .config import DEFAULTS, HELP, ConfigError, dump_config, flat_keys, load_config, merge

log = logging.getLogger("dyolo")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
LOCK_NAME = ".dyolo.lock"
RUN_MANIFEST = "run.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config_epilog():
    lines = ["config keys (set with --override section.key=value):"]
    for key in flat_keys():
        section, name = key.split(".")
        lines.append(f"  {key} (default {DEFAULTS[section][name]!r}): {HELP[key]}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# run bookkeeping


@contextmanager
def output_lock(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{out} is in use by another process (remove {lock} if it is stale)") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


def write_run_manifest(out, command, argv, cfg_tree, seed, started):
    payload = {
        "command": command,
        "argv": list(argv),
        "config": cfg_tree,
        "seed": seed,
        "version": f"dyolo-{__version__}",
        "python": platform.python_version(),
        "out": str(Path(out).resolve()),
        "started": started,
        "finished": _now(),
    }
    Path(out, RUN_MANIFEST).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return payload


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _resolve_config(args, extra=None):
    over = list(args.override or [])
    tree = load_config(args.config, over)
    if extra:
        tree = merge(tree, extra, "command line")
    if args.seed is not None:
        tree = merge(tree, {"train": {"seed": args.seed}, "data": {"seed": args.seed}}, "--seed")
    from .config import validate

    validate(tree)
    return tree


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg):
    from .hazegen import DatasetSpec, build_dataset

    d = cfg["data"]
    spec = DatasetSpec(out=str(args.out), train=int(d["train"]), test=int(d["test"]), seed=int(d["seed"]),
                       A=float(d["A"]), beta_min=float(d["beta_min"]), beta_max=float(d["beta_max"]),
                       canvas=(int(d["canvas"]), int(d["canvas"])), rain=bool(d["rain"]),
                       source=args.source, voc_root=args.voc_root)
    man = build_dataset(spec)
    print(f"wrote {len(man.rows)} samples to {args.out}")
    return man


def _cfe_file(path):
    import torch

    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError):
        raise
    except Exception as exc:
        raise RuntimeError(f"{path}: unreadable clear-branch file ({exc})") from exc
    if not isinstance(blob, dict) or blob.get("format") != "dyolo-cfe/1":
        raise RuntimeError(f"{path}: not a clear-branch file written by pretrain-cfe")
    return blob


def cmd_pretrain_cfe(args, cfg):
    import torch

    from .config import detector_config
    from .detector import DYOLO
    from .train import load_data, pretrain_cfe, state_digest

    data = load_data(_data_root(cfg), "train")
    torch.set_num_threads(int(cfg["train"]["threads"]))
    det = detector_config(cfg)
    holder = DYOLO(det, build_cfe=True)
    teacher = pretrain_cfe(holder, data, int(cfg["train"]["cfe_epochs"]), cfg["train"], int(cfg["train"]["seed"]))
    state = teacher.backbone.state_dict()
    path = Path(args.out) / "cfe.pt"
    torch.save({"format": "dyolo-cfe/1", "backbone": state, "config": cfg, "digest": state_digest(state)}, path)
    print(f"clear branch saved to {path}")
    return path


def _data_root(cfg):
    root = cfg["data"]["root"]
    if not root:
        raise ConfigError("data.root must point at a dataset directory (use --data or --override data.root=DIR)")
    return root


def cmd_train(args, cfg):
    from .train import export_inference, train_from_config

    _data_root(cfg)
    cfe_state = _cfe_file(args.cfe)["backbone"] if args.cfe else None
    (Path(args.out) / "config.yaml").write_text(dump_config(cfg))
    res = train_from_config(cfg, args.out, resume=args.resume, stop_after=args.stop_after, cfe_state=cfe_state)
    if res.checkpoints and res.checkpoints[-1].name == f"epoch_{int(cfg['train']['epochs']) - 1:03d}.pt":
        export_inference(res.model, Path(args.out) / "inference.pt", cfg, epoch=int(cfg["train"]["epochs"]) - 1)
    print(f"final val mAP@{cfg['train']['eval_iou']}: {res.final_map:.4f}")
    return res


def _eval_inputs(args, cfg):
    from .hazegen import load_split, read_manifest

    man = read_manifest(_data_root(cfg))
    _, gts, rows = load_split(man, args.split, "hazy")
    if not rows:
        raise ConfigError(f"split {args.split!r} of {man.root} is empty")
    return man, rows, {r.hazy_path: g for r, g in zip(rows, gts)}


def cmd_eval(args, cfg):
    import numpy as np

    from .evaluation import class_pr_curves, mean_ap, read_detections, write_detections

    man, rows, per_gts = _eval_inputs(args, cfg)
    t = cfg["train"]
    if args.detections:
        per_dets = {k: v for k, v in read_detections(args.detections).items()}
    else:
        import torch

        from .hazegen import load_split
        from .train import load_checkpoint, model_from_checkpoint, predict

        model = model_from_checkpoint(load_checkpoint(args.checkpoint))
        images, _, _ = load_split(man, args.split, args.images)
        x = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()
        dets = predict(model, x, t["conf_thr"], t["nms_iou"])
        per_dets = {r.hazy_path: d for r, d in zip(rows, dets)}
        write_detections(Path(args.out) / "detections.tsv",
                         [(k, d) for k in per_dets for d in per_dets[k]])
    for k in per_gts:
        per_dets.setdefault(k, [])
    report = mean_ap(per_dets, per_gts, iou_thr=t["eval_iou"])
    (Path(args.out) / "eval.json").write_text(report.to_json() + "\n")
    curves = class_pr_curves(per_dets, per_gts, iou_thr=t["eval_iou"])
    (Path(args.out) / "pr_curves.json").write_text(json.dumps(
        {c: {"recall": r.tolist(), "precision": p.tolist()} for c, (r, p) in curves.items()}, sort_keys=True) + "\n")
    print(report.to_table())
    return report


def cmd_detect(args, cfg):
    import numpy as np
    import torch

    from .detector import decode_and_nms
    from .evaluation import write_detections
    from .hazegen import load_png
    from .train import load_checkpoint, model_from_checkpoint

    model = model_from_checkpoint(load_checkpoint(args.checkpoint)).eval()
    paths = sorted(p for p in Path(args.images).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not paths:
        raise ConfigError(f"no .png/.jpg images in {args.images}")
    rows = []
    with torch.no_grad():
        for p in paths:
            img = load_png(p)
            h, w = img.shape[:2]
            if h % 32 or w % 32:
                raise ConfigError(f"{p}: height and width must be multiples of 32, got {w}x{h}")
            x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None].float()
            dets = decode_and_nms(model(x).head, args.conf_thr, cfg["train"]["nms_iou"], model.cfg.num_classes,
                                  image_size=(h, w))[0]
            rows += [(p.name, d) for d in dets]
    out = Path(args.out) / "detections.tsv"
    write_detections(out, rows)
    print(f"{len(rows)} detections from {len(paths)} images written to {out}")
    return rows


def cmd_ablate(args, cfg):
    from .ablate import run_ablation, table_rows
    from .detector import ABLATIONS

    variants = tuple(args.variants.split(",")) if args.variants else tuple(ABLATIONS)
    bad = [v for v in variants if v not in ABLATIONS]
    if bad:
        raise ConfigError(f"unknown variants {bad}; choose from {sorted(ABLATIONS)}")
    seeds = tuple(int(s) for s in args.seeds.split(","))
    _data_root(cfg)
    results = run_ablation(cfg, args.out, variants, seeds)
    print("\t".join(["variant", *(f"seed{s}" for s in seeds), "median"]))
    for row in table_rows(results, seeds):
        print("\t".join(row))
    return results


def cmd_report(args, cfg):
    from .report import write_report

    written = write_report([Path(r) for r in args.runs], Path(args.out))
    for p in written:
        print(p)
    return written


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-cfe": cmd_pretrain_cfe,
    "train": cmd_train,
    "eval": cmd_eval,
    "detect": cmd_detect,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser():
    epilog = _config_epilog()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="dyolo", description="Hazy-scene detector toolkit.", epilog=epilog, formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"dyolo {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, epilog=epilog, formatter_class=fmt)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="sets train.seed and data.seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("synth", "generate a paired clean/hazy dataset")
    p.add_argument("--train", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--A", type=float, dest="A", help="atmospheric light")
    p.add_argument("--beta-min", type=float)
    p.add_argument("--beta-max", type=float)
    p.add_argument("--canvas", type=int, help="square image side in pixels")
    p.add_argument("--rain", action="store_true", default=None)
    p.add_argument("--source", choices=("toy", "voc"), default="toy")
    p.add_argument("--voc-root", help="VOC-layout directory to haze (with --source voc)")

    for name, help_ in (("pretrain-cfe", "train the clear feature branch on clean images"),
                        ("train", "train a detector"),
                        ("ablate", "run the module-combination sweep")):
        p = add(name, help_)
        p.add_argument("--data", help="dataset directory (sets data.root)")
        p.add_argument("--ablation", help="model variant V0..V6 (sets model.ablation)")
        p.add_argument("--epochs", type=int, help="sets train.epochs")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to resume from")
            p.add_argument("--cfe", help="clear branch file from pretrain-cfe")
            p.add_argument("--stop-after", type=int, help="stop after this many epochs in this call")
        if name == "ablate":
            p.add_argument("--variants", help="comma-separated subset, default all")
            p.add_argument("--seeds", default="0,1,2")

    p = add("eval", "compute per-class AP and mAP on a dataset split")
    p.add_argument("--data", help="dataset directory (sets data.root)")
    p.add_argument("--split", default="test")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--detections", help="detections TSV keyed by the manifest's hazy paths")
    p.add_argument("--images", choices=("hazy", "clean"), default="hazy")

    p = add("detect", "run a checkpoint over an image directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="directory of .png/.jpg images")
    p.add_argument("--conf-thr", type=float, default=0.25)

    p = add("report", "plot metrics, PR curves and ablation tables")
    p.add_argument("runs", nargs="+", help="run directories to summarize")
    return parser


def _extra_from_args(args):
    extra = {}

    def put(section, key, value):
        if value is not None:
            extra.setdefault(section, {})[key] = value

    if args.command == "synth":
        for k in ("train", "test", "A", "beta_min", "beta_max", "canvas", "rain"):
            put("data", k, getattr(args, k))
    put("data", "root", getattr(args, "data", None))
    put("model", "ablation", getattr(args, "ablation", None))
    put("train", "epochs", getattr(args, "epochs", None))
    return extra


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    started = _now()
    try:
        cfg = _resolve_config(args, _extra_from_args(args))
        with output_lock(args.out):
            COMMANDS[args.command](args, cfg)
            write_run_manifest(args.out, args.command, argv, cfg, cfg["train"]["seed"], started)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"dyolo {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, RuntimeError) as exc:
        print(f"dyolo {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
