"""``scconvdet`` command line: synth, train, eval, gradcheck, count, compare.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 gradient check
failure. Errors go to stderr as one line, ``scconvdet: error[<kind>]: <msg>``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .blocks import BlockConfig, BlockKind, block_forward, init_block_params
from .config import RunConfig, dump_config, load_config_file, resolve
from .data import SyntheticSpec, generate_synthetic, load_dataset, split_dataset
from .gradcheck import grad_check
from .metrics import (SCHEMES, compare_reports, evaluate, load_report, parse_detections,
                      pr_curve, pr_curve_svg, pr_points_csv, match_detections, save_report, table_header,
                      write_detections)
from .model import build_model, format_stats_table, load_checkpoint, model_stats, save_checkpoint
from .serialize import ContainerError
from .tensor import Tensor
from .train import format_log, ground_truths, predict, train

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_CHECK = 0, 2, 3, 4
PROG = "scconvdet"


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise CliError("usage", message, EXIT_VALIDATION)


# -- manifests ---------------------------------------------------------------------

def content_hash(paths: Sequence[Path]) -> str:
    """sha256 over (relative path, file sha256) for every file under ``paths``, sorted."""
    h = hashlib.sha256()
    for root in paths:
        root = Path(root)
        files = [root] if root.is_file() else sorted(p for p in root.rglob("*") if p.is_file())
        for f in files:
            rel = f.name if f == root else f.relative_to(root).as_posix()
            h.update(f"{rel}\0{hashlib.sha256(f.read_bytes()).hexdigest()}\n".encode())
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(path: Path, command: str, config: dict, seed: int, inputs: Sequence[Path],
                   outputs: Sequence[Path], started: str) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "input_hash": content_hash([p for p in inputs if Path(p).exists()]),
        "outputs": [str(p) for p in outputs],
        "started": started,
        "finished": _now(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- commands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SyntheticSpec(args.images, args.size, args.classes, seed=args.seed)
    spec.validate()
    if args.out:
        out = Path(args.out)
        stems = generate_synthetic(out, spec)
        meta = {"spec": {"images": spec.num_images, "size": spec.image_size, "classes": spec.num_classes,
                         "objects": list(spec.objects), "size_range": list(spec.size_range), "seed": spec.seed},
                "content_hash": content_hash([out / "images", out / "labels"])}
        (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        print(f"wrote {len(stems)} images to {out}")
    if args.split is not None:
        print(split_dataset(range(args.images), args.split, args.seed).division())
    return EXIT_OK


def _load_items(path):
    if not Path(path).is_dir():
        raise CliError("io", f"dataset directory not found: {path}", EXIT_IO)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # the empty case is reported below as an error
        items = load_dataset(path)
    if not items:
        raise CliError("validation", f"no images found under {path}", EXIT_VALIDATION)
    return items


def _check_classes(items, num_classes: int, source: str) -> None:
    seen = {lb.class_id for it in items for lb in it.labels}
    if seen and max(seen) >= num_classes:
        raise CliError("validation", f"dataset has class {max(seen)} but {source} has num_classes={num_classes}",
                       EXIT_VALIDATION)


def run_config_from_args(args) -> RunConfig:
    file_data = load_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = {
        "block.kind": getattr(args, "block", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train.learning_rate": getattr(args, "lr", None),
        "train.momentum": getattr(args, "momentum", None),
        "seed": getattr(args, "seed", None),
        "num_classes": getattr(args, "num_classes", None),
    }
    return resolve(file_data, overrides)


def cmd_train(args) -> int:
    started = _now()
    cfg = run_config_from_args(args)
    tr = cfg.train
    print(f"block={cfg.block.kind.value} lr={tr.learning_rate:g} momentum={tr.momentum:g} "
          f"batch={tr.batch_size} epochs={tr.epochs} seed={cfg.seed}")
    items = _load_items(args.data)
    _check_classes(items, cfg.num_classes, "config")
    test = None
    if args.test:
        test = _load_items(args.test)
        _check_classes(test, cfg.num_classes, "config")
    model = build_model(cfg.backbone, cfg.block, cfg.num_classes, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def on_epoch(e):
        print(f"epoch {e.epoch:>3}  loss {e.train_loss:.6f}  mAP50 {e.map50:.3f}  mAP50:95 {e.map50_95:.3f}",
              flush=True)

    result = train(model, items, tr, rng_seed=cfg.seed, test=test, on_epoch=None if args.quiet else on_epoch)
    ckpt = save_checkpoint(model, out / "checkpoint", {"train": {"epochs": tr.epochs}})
    log_path = out / "train_log.csv"
    log_path.write_text(format_log(result.log))
    (out / "config.json").write_text(dump_config(cfg))
    inputs = [Path(args.data)] + ([Path(args.test)] if args.test else []) + \
             ([Path(args.config)] if args.config else [])
    write_manifest(out / "run_manifest.json", "train", cfg.to_dict(), cfg.seed, inputs,
                   [ckpt, log_path, out / "config.json"], started)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _now()
    if args.scheme not in SCHEMES:
        raise CliError("validation", f"--scheme must be one of {sorted(SCHEMES)}", EXIT_VALIDATION)
    if not 0.0 < args.iou_thresh <= 1.0:
        raise CliError("validation", f"--iou-thresh must lie in (0, 1], got {args.iou_thresh}", EXIT_VALIDATION)
    model = load_checkpoint(args.weights).model if args.weights else None
    items = _load_items(args.data)
    gts = ground_truths(items)
    classes = None
    if model is not None:
        _check_classes(items, model.num_classes, "checkpoint")
        classes = range(model.num_classes)
    if args.detections:
        dets = parse_detections(Path(args.detections).read_text())
        known = {it.stem for it in items}
        unknown = sorted({d.image_id for d in dets} - known)
        if unknown:
            raise CliError("validation", f"detections reference unknown images: {unknown[:5]}", EXIT_VALIDATION)
    elif model is not None:
        dets = predict(model, items)
    else:
        raise CliError("validation", "eval needs --weights or --detections", EXIT_VALIDATION)

    report = evaluate(dets, gts, scheme=args.scheme, iou_threshold=args.iou_thresh,
                      conf_threshold=args.conf, classes=classes, name=args.name)
    print(table_header())
    print(report.row())
    if report.degenerate:
        print(f"note: 0/0 {', '.join(report.degenerate)} reported as 0")
    outputs = []
    if args.report:
        rp = Path(args.report)
        rp.parent.mkdir(parents=True, exist_ok=True)
        save_report(report, rp)
        csv_path = rp.with_suffix(".pr.csv")
        csv_path.write_text(pr_points_csv(dets, gts))
        outputs += [rp, csv_path]
        flags = match_detections(dets, gts, args.iou_thresh).flags
        for c in sorted({g.class_id for g in gts}):
            idx = [i for i, d in enumerate(dets) if d.class_id == c]
            _, rec, prec = pr_curve([dets[i].score for i in idx], [flags[i] for i in idx],
                                    sum(g.class_id == c for g in gts))
            svg = rp.with_name(f"{rp.stem}.class{c}.svg")
            svg.write_text(pr_curve_svg(rec, prec, f"class {c} @ IoU {args.iou_thresh:.2f}"))
            outputs.append(svg)
        if args.save_detections:
            dp = rp.with_suffix(".detections.txt")
            dp.write_text(write_detections(dets))
            outputs.append(dp)
        inputs = [Path(args.data)] + [Path(p) for p in (args.weights, args.detections) if p]
        write_manifest(rp.with_suffix(".manifest.json"), "eval",
                       {"iou_thresh": args.iou_thresh, "scheme": args.scheme, "conf": args.conf},
                       0, inputs, outputs, started)
    return EXIT_OK


def gradcheck_block(kind: str, width: int, tol: float, seed: int = 0, instances: int = 1,
                    size: int = 4) -> tuple[bool, list[str]]:
    """Finite-difference check of a block's input and parameter gradients."""
    cfg = BlockConfig(kind=BlockKind.parse(kind))
    cfg.validate(width)
    lines, ok = [], True
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        params = init_block_params(cfg, width, rng)
        if not params:
            lines.append(f"instance {i}: block {cfg.kind.value} has no parameters; nothing to check")
            continue
        for p in params.values():  # perturb away from the symmetric init
            p.data = p.data + rng.normal(0, 0.1, p.shape)
        names = sorted(params)
        x = Tensor(rng.normal(size=(1, width, size, size)))
        proj = rng.normal(size=(1, width, size, size))

        def fn(x, *ps):
            return (block_forward(cfg, x, dict(zip(names, ps))) * proj).sum()

        rep = grad_check(fn, [x] + [params[n] for n in names], h=1e-5, tol=tol)
        ok &= rep.passed
        lines.append(f"instance {i}: {rep.summary()}")
        for c in rep.failures[:10]:
            where = "x" if c.input_index == 0 else names[c.input_index - 1]
            lines.append(f"  {where}[{c.flat_index}] analytic={c.analytic:.8g} numeric={c.numeric:.8g} "
                         f"rel={c.rel_error:.3g}")
    return ok, lines


def cmd_gradcheck(args) -> int:
    ok, lines = gradcheck_block(args.block, args.width, args.tol, args.seed, args.instances)
    for line in lines:
        print(line)
    print(f"gradcheck {args.block} width={args.width} tol={args.tol:g}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_count(args) -> int:
    base = run_config_from_args(argparse.Namespace(config=args.config, num_classes=args.num_classes))
    kinds = args.block or [k.value for k in BlockKind]
    rows = {}
    for k in kinds:
        block = BlockConfig(BlockKind.parse(k), base.block.sru, base.block.cru, base.block.se)
        block.validate(base.backbone.anchors()[base.backbone.insertion_anchor])
        rows[block.kind.value] = model_stats(build_model(base.backbone, block, base.num_classes, base.seed))
    print(format_stats_table(rows))
    return EXIT_OK


def cmd_compare(args) -> int:
    a, b = load_report(args.report_a), load_report(args.report_b)
    delta = compare_reports(a, b)
    print(delta.render(args.label_a or a.name or "A", args.label_b or b.name or "B"))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog=PROG, description="Block-splicing detector toolkit.")
    p.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic shapes dataset")
    s.add_argument("--out", help="dataset directory to write (omit to only print the split)")
    s.add_argument("--images", type=int, default=100)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", type=float, help="print the train / test / total division at this ratio")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", help="YAML/JSON run configuration")
    t.add_argument("--data", required=True)
    t.add_argument("--test", help="held-out dataset evaluated after every epoch")
    t.add_argument("--block", choices=[k.value for k in BlockKind])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--num-classes", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a detections file")
    e.add_argument("--weights", help="checkpoint directory")
    e.add_argument("--detections", help="detections file instead of running the model")
    e.add_argument("--data", required=True)
    e.add_argument("--iou-thresh", type=float, default=0.5)
    e.add_argument("--scheme", default="101", choices=sorted(SCHEMES))
    e.add_argument("--conf", type=float, default=0.25)
    e.add_argument("--report", help="report path (.json); PR CSV and SVGs are written beside it")
    e.add_argument("--save-detections", action="store_true")
    e.add_argument("--name", default="")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of a block")
    g.add_argument("--block", default="scconv", choices=[k.value for k in BlockKind])
    g.add_argument("--width", type=int, default=8)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--instances", type=int, default=1)
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("count", help="parameter / layer / gradient counts")
    c.add_argument("--config")
    c.add_argument("--block", action="append", choices=[k.value for k in BlockKind],
                   help="repeatable; default is all kinds side by side")
    c.add_argument("--num-classes", type=int)
    c.set_defaults(func=cmd_count)

    m = sub.add_parser("compare", help="metric deltas between two reports")
    m.add_argument("--report-a", required=True)
    m.add_argument("--report-b", required=True)
    m.add_argument("--label-a")
    m.add_argument("--label-b")
    m.set_defaults(func=cmd_compare)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(f"{PROG}: error[{kind}]: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except (FileNotFoundError, IsADirectoryError, PermissionError, ContainerError) as exc:
        return _fail("io", exc, EXIT_IO)
    except OSError as exc:
        return _fail("io", exc, EXIT_IO)
    except (ValueError, KeyError) as exc:
        return _fail("validation", exc, EXIT_VALIDATION)


if __name__ == "__main__":
    sys.exit(main())
