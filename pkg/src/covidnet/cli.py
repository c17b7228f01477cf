"""``covidnet`` command line: build-dataset, train, evaluate, explain, analyze.

Exit codes: 0 success, 1 design-requirement gate failure, 2 invalid input or
configuration, 3 training halted on a non-finite value.
"""
import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import arch, config, data, evaluation, explain, training
from .errors import (ArchitectureError, CheckpointError, ConfigError, ImageError, ManifestError, ShapeError,
                     TrainingHalted)

EXIT_OK, EXIT_GATE, EXIT_INVALID, EXIT_HALT = 0, 1, 2, 3

logger = logging.getLogger("covidnet")


class CliError(Exception):
    pass


def _out_dir(cfg):
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from None
    return out


def _write(path, text):
    Path(path).write_text(text, encoding="utf-8")


def _parse_source(spec):
    """``NAME:PATH[:LABELS]``; LABELS is comma separated, default from the recipe or all classes."""
    parts = spec.split(":")
    if len(parts) < 2 or not parts[0] or not parts[1]:
        raise CliError(f"--source must look like NAME:PATH[:LABELS], got {spec!r}")
    name, path = parts[0], parts[1]
    if len(parts) > 2 and parts[2]:
        labels = frozenset(x.strip() for x in parts[2].split(","))
    else:
        labels = frozenset(data.COVIDX_RECIPE.get(name, data.LABELS))
    manifest = data.Manifest.read_csv(path)
    return manifest, data.SelectionRule(name, labels)


def _relocate(manifest, out):
    """Rewrite image paths relative to ``out`` so the written CSVs resolve from there."""
    recs = []
    for r in manifest:
        p = Path(r.image_path) if Path(r.image_path).is_absolute() else manifest.resolve(r)
        rel = os.path.relpath(Path(p).resolve(), Path(out).resolve())
        recs.append(data.SampleRecord(r.patient_id, Path(rel).as_posix(), r.label, r.source))
    return data.Manifest(recs, root=out)


def cmd_build_dataset(args, cfg):
    if not args.source:
        raise CliError("build-dataset needs at least one --source NAME:PATH[:LABELS]")
    out = _out_dir(cfg)
    merged = data.merge_manifests([_parse_source(s) for s in args.source])
    if len(merged) == 0:
        raise CliError("no records admitted by the selection rules")
    merged = _relocate(merged, out)
    train, test = data.patient_split(merged, cfg.data.test_fraction, cfg.seed)
    merged.write_csv(out / "merged.csv")
    train.write_csv(out / "train.csv")
    test.write_csv(out / "test.csv")
    report = f"seed {cfg.seed}\n" + data.distribution_report(train, test)
    _write(out / "distribution.txt", report)
    print(report, end="")
    return EXIT_OK


def _manifest_arg(explicit, configured, what):
    path = explicit or configured
    if not path:
        raise CliError(f"no {what} manifest given (flag or [data] {what}_manifest)")
    return data.Manifest.read_csv(path)


def cmd_train(args, cfg):
    out = _out_dir(cfg)
    manifest = _manifest_arg(args.train_manifest, cfg.data.train_manifest, "train")
    graph = arch.build_covidnet(cfg.architecture)
    graph.validate()
    params = arch.init_params(graph, cfg.seed)
    tcfg = cfg.training
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    tcfg = replace(tcfg, checkpoint_dir=str(out / "checkpoints"))
    _write(out / "run_config.ini", config.to_ini(cfg))
    result = training.train(graph, params, manifest, tcfg, resume=args.resume, log_path=out / "train_log.tsv")
    last = result.log[-1] if result.log else None
    if last is not None:
        print(f"trained {last.epoch} epochs; val_loss {last.val_loss:.4f} val_acc {last.val_acc:.3f}")
    return EXIT_OK


def _load_model(path):
    params, arch_cfg = training.load_params(path)
    graph = arch.build_covidnet(arch_cfg or arch.ArchConfig())
    missing = set(arch.param_shapes(graph)) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:5]}")
    return graph, params


def cmd_evaluate(args, cfg):
    out = _out_dir(cfg)
    graph, params = _load_model(args.checkpoint)
    manifest = _manifest_arg(args.test_manifest, cfg.data.test_manifest, "test")
    size = graph.config.input_size
    images = np.stack([data.preprocess(manifest.resolve(r), size) for r in manifest])
    probs = arch.predict(graph, params, images, batch_size=cfg.evaluation.batch_size)
    cm = evaluation.confusion(probs.argmax(axis=1), manifest.labels)
    report = evaluation.metrics(cm)
    tables = evaluation.render_tables(report, cfg.evaluation.name)
    _write(out / "metrics.txt", f"seed = {cfg.seed}\n" + evaluation.render_keyvalue(report))
    _write(out / "tables.txt", tables)
    print(tables, end="")
    for g in report.gates.values():
        print(f"gate {g.name}: {'PASS' if g.passed else 'FAIL'} ({g.reason})")
    return EXIT_OK if report.all_gates_pass else EXIT_GATE


def _class_arg(value):
    if value is None:
        return None
    if value in data.LABEL_INDEX:
        return data.LABEL_INDEX[value]
    try:
        idx = int(value)
    except ValueError:
        raise CliError(f"--class must be one of {data.LABELS} or 0-2, got {value!r}") from None
    if idx not in (0, 1, 2):
        raise CliError(f"--class index must be 0, 1 or 2, got {idx}")
    return idx


def cmd_explain(args, cfg):
    out = _out_dir(cfg)
    graph, params = _load_model(args.checkpoint)
    image = data.preprocess(args.image, graph.config.input_size)
    model = explain.graph_model(graph, params)
    target = _class_arg(args.target_class)
    if target is None:
        target = int(np.argmax(model(image[None])[0]))
    mask = explain.critical_factors(model, image, target, cfg.explain)
    stem = Path(args.image).stem
    overlay_path = out / f"{stem}.overlay{args.format}"
    # only patches whose occlusion actually lowers the score are highlighted
    explain.overlay(image, mask.pixel_mask(positive_only=True), overlay_path)
    explain.write_drop_map(mask, out / f"{stem}.drops.csv")
    print(f"seed {cfg.seed}")
    print(f"target {data.LABELS[target]} score {mask.base_score:.6f}")
    print(f"selected {len(mask.selected())} of {mask.grid.size} patches, threshold {mask.threshold:.6g}")
    if mask.no_critical_factors:
        print("no critical factors: no patch lowers the target score")
    print(f"overlay {overlay_path}")
    return EXIT_OK


def cmd_analyze(args, cfg):
    out = _out_dir(cfg)
    graph = arch.build_covidnet(cfg.architecture)
    graph.validate()
    report = arch.complexity(graph)
    text = report.dump()
    _write(out / "complexity.txt", text)
    print(text, end="")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")

    p = argparse.ArgumentParser(prog="covidnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-dataset", parents=[common], help="merge source manifests and split by patient")
    b.add_argument("--source", action="append", default=[], metavar="NAME:PATH[:LABELS]")
    b.set_defaults(func=cmd_build_dataset)

    t = sub.add_parser("train", parents=[common], help="train from a manifest")
    t.add_argument("--train-manifest")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="metrics and gates on a test manifest")
    e.add_argument("checkpoint")
    e.add_argument("--test-manifest")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("explain", parents=[common], help="occlusion mask for one image")
    x.add_argument("checkpoint")
    x.add_argument("image")
    x.add_argument("--class", dest="target_class", help="class name or index (default: predicted)")
    x.add_argument("--format", choices=(".png", ".pgm"), default=".png")
    x.set_defaults(func=cmd_explain)

    a = sub.add_parser("analyze", parents=[common], help="parameter and MAC counts")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = config.load(args.config, seed=args.seed, out=args.out)
        return args.func(args, cfg)
    except TrainingHalted as exc:
        print(f"covidnet: training halted: {exc}", file=sys.stderr)
        return EXIT_HALT
    except (CliError, ConfigError, ManifestError, ArchitectureError, CheckpointError, ImageError, ShapeError,
            OSError, ValueError) as exc:
        print(f"covidnet: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
