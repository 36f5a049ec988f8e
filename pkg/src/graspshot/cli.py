"""Command-line entry points for the full pipeline.

Subcommands mirror the stages: gen-data, train-detector,
extract-features, fit-classifier, then the experiment drivers
run-experiment, run-sweep and run-ablation. A `--config` file holds
`key value` (or `key = value`) lines using ExperimentConfig field
names; explicit flags override file entries, which override presets.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .detector import DetectorConfig, TrainConfig, load_checkpoint, \
    save_checkpoint, train_detector
from .errors import GraspShotError
from .experiments import default_config, human_table, machine_records, \
    run_ablation, run_experiment, run_sweep, sweep_records, sweep_table, \
    K_GRID, SUPPORT_GRID
from .fewshot import fit_all_layers, save_bundle
from .refine import extract_all, load_cache, save_cache
from .scenes import SceneConfig, TRAINED_KINDS, load_dataset, \
    sample_dataset, save_dataset


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_str_tuple(text: str):
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _parse_float_pair(text: str):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated numbers: {text!r}")
    return tuple(parts)


_CONFIG_FIELD_PARSERS = {
    "experiment_id": str,
    "checkpoint": str,
    "seed": int,
    "support_per_class": int,
    "pca_k": int,
    "pca_fit_scope": str,
    "num_test_scenes": int,
    "objects_per_scene": int,
    "mixed": _parse_bool,
    "kinds": _parse_str_tuple,
    "required_kinds": _parse_str_tuple,
    "support_kinds": _parse_str_tuple,
    "scale_range": _parse_float_pair,
    "support_scale_range": _parse_float_pair,
    "image_size": int,
    "noise_sigma": float,
    "association_iou": float,
    "score_threshold": float,
    "nms_iou": float,
}


def load_config_file(path) -> dict:
    """Parse `key value` / `key = value` lines into typed overrides."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, _, val = line.partition("=")
        else:
            key, _, val = line.partition(" ")
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_FIELD_PARSERS:
            raise GraspShotError(
                f"{path}:{lineno}: unknown config field {key!r}")
        try:
            out[key] = _CONFIG_FIELD_PARSERS[key](val)
        except ValueError as exc:
            raise GraspShotError(f"{path}:{lineno}: {exc}") from exc
    return out


def _experiment_flags(sub, default_experiment=None):
    sub.add_argument("--experiment", default=default_experiment,
                     help="experiment id (1-5 or ablation)")
    sub.add_argument("--checkpoint", help="trained detector checkpoint")
    sub.add_argument("--config", help="key-value config file")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--out-dir", default=None)
    sub.add_argument("--support-per-class", type=int)
    sub.add_argument("--pca-k", type=int)
    sub.add_argument("--pca-fit-scope", choices=("joint", "support_only"))
    sub.add_argument("--num-test-scenes", type=int)
    sub.add_argument("--objects-per-scene", type=int)
    sub.add_argument("--mixed", type=_parse_bool, metavar="BOOL")
    sub.add_argument("--kinds", type=_parse_str_tuple)
    sub.add_argument("--required-kinds", type=_parse_str_tuple)
    sub.add_argument("--support-kinds", type=_parse_str_tuple)
    sub.add_argument("--scale-range", type=_parse_float_pair, metavar="LO,HI")
    sub.add_argument("--support-scale-range", type=_parse_float_pair,
                     metavar="LO,HI")
    sub.add_argument("--image-size", type=int)
    sub.add_argument("--noise-sigma", type=float)
    sub.add_argument("--association-iou", type=float)
    sub.add_argument("--score-threshold", type=float)
    sub.add_argument("--nms-iou", type=float)


def _build_experiment_config(args, fallback_experiment=None):
    overrides = dict(load_config_file(args.config)) if args.config else {}
    for field in _CONFIG_FIELD_PARSERS:
        if field in ("experiment_id", "checkpoint"):
            continue
        val = getattr(args, field, None)
        if val is not None:
            overrides[field] = val
    experiment = args.experiment or overrides.pop("experiment_id", None) \
        or fallback_experiment
    overrides.pop("experiment_id", None)
    checkpoint = args.checkpoint or overrides.pop("checkpoint", None)
    if experiment is None:
        raise GraspShotError("an experiment id is required "
                             "(--experiment or config file)")
    if checkpoint is None:
        raise GraspShotError("a detector checkpoint is required "
                             "(--checkpoint or config file)")
    return default_config(experiment, checkpoint, **overrides)


def _out_dir(args, default_name: str) -> Path:
    out = Path(args.out_dir) if args.out_dir else Path("runs") / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_gen_data(args) -> int:
    cfg = SceneConfig(num_scenes=args.num_scenes,
                      objects_per_scene=args.objects_per_scene,
                      allowed_kinds=args.kinds, mixed=args.mixed,
                      required_kinds=args.required_kinds,
                      image_size=args.image_size,
                      scale_range=args.scale_range,
                      noise_sigma=args.noise_sigma, seed=args.seed)
    scenes = sample_dataset(cfg)
    save_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _cmd_train_detector(args) -> int:
    dataset = load_dataset(args.data)
    net, log = train_detector(dataset, DetectorConfig(),
                              TrainConfig(epochs=args.epochs,
                                          batch_size=args.batch_size,
                                          lr=args.lr, seed=args.seed),
                              log_path=args.log)
    save_checkpoint(net, args.out)
    print(f"trained on {len(dataset)} scenes for {args.epochs} epochs; "
          f"final loss {log[-1]['total_loss']:.4f}; checkpoint at {args.out}")
    return 0


def _cmd_extract_features(args) -> int:
    network = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    feats = extract_all(network, dataset,
                        association_iou=args.association_iou,
                        unrefined=args.unrefined,
                        score_threshold=args.score_threshold,
                        nms_iou=args.nms_iou)
    if not feats:
        raise GraspShotError("no detections above threshold; nothing to save")
    save_cache(feats, args.out)
    labeled = sum(1 for f in feats if f.true_shape is not None)
    print(f"extracted {len(feats)} detections ({labeled} associated) "
          f"from {len(dataset)} scenes to {args.out}")
    return 0


def _cmd_fit_classifier(args) -> int:
    support = load_cache(args.support)
    labeled = [f for f in support if f.true_shape is not None]
    dropped = len(support) - len(labeled)
    if dropped:
        print(f"dropping {dropped} unassociated detections from the "
              f"support cache")
    test = load_cache(args.test) if args.test else []
    classifiers, selection = fit_all_layers(
        labeled, test, k=args.pca_k, pca_fit_scope=args.pca_fit_scope)
    save_bundle(classifiers, selection, args.out)
    for clf in classifiers:
        marker = " *" if clf.layer_id == selection.chosen_layer_id else ""
        print(f"layer {clf.layer_id}: support accuracy "
              f"{clf.support_accuracy:.4f}{marker}")
    print(f"bundle at {args.out}")
    return 0


def _cmd_run_experiment(args) -> int:
    config = _build_experiment_config(args)
    report = run_experiment(config)
    out = _out_dir(args, f"exp{config.experiment_id}")
    (out / "report.records").write_text(machine_records(report))
    (out / "report.txt").write_text(human_table(report))
    sys.stdout.write(human_table(report))
    print(f"report files in {out}")
    return 0


def _cmd_run_ablation(args) -> int:
    config = _build_experiment_config(args, fallback_experiment="ablation")
    refined, unrefined = run_ablation(config)
    out = _out_dir(args, f"ablation-exp{config.experiment_id}")
    (out / "report_refined.records").write_text(machine_records(refined))
    (out / "report_unrefined.records").write_text(machine_records(unrefined))
    text = human_table(refined) + "\n" + human_table(unrefined)
    if refined.accuracy is not None and unrefined.accuracy is not None:
        text += (f"\nrefined - unrefined accuracy: "
                 f"{refined.accuracy - unrefined.accuracy:+.4f}\n")
    (out / "report.txt").write_text(text)
    sys.stdout.write(text)
    print(f"report files in {out}")
    return 0


def _cmd_run_sweep(args) -> int:
    config = _build_experiment_config(args, fallback_experiment="1")
    result = run_sweep(config, support_grid=args.support_grid,
                       k_grid=args.k_grid)
    out = _out_dir(args, f"sweep-exp{config.experiment_id}")
    (out / "sweep.records").write_text(sweep_records(result))
    (out / "sweep.txt").write_text(sweep_table(result))
    sys.stdout.write(sweep_table(result))
    print(f"sweep files in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graspshot",
        description="grasp detection with guided-gradient feature "
                    "refinement and few-shot shape classification")
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen-data", help="synthesize a labeled scene set")
    gen.add_argument("--out", required=True)
    gen.add_argument("--num-scenes", type=int, default=500)
    gen.add_argument("--objects-per-scene", type=int, default=1)
    gen.add_argument("--mixed", type=_parse_bool, default=False,
                     metavar="BOOL")
    gen.add_argument("--kinds", type=_parse_str_tuple,
                     default=TRAINED_KINDS)
    gen.add_argument("--required-kinds", type=_parse_str_tuple, default=())
    gen.add_argument("--image-size", type=int, default=64)
    gen.add_argument("--scale-range", type=_parse_float_pair,
                     default=(8.0, 12.0), metavar="LO,HI")
    gen.add_argument("--noise-sigma", type=float, default=0.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=_cmd_gen_data)

    tr = subs.add_parser("train-detector", help="train the grasp detector")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    defaults = TrainConfig()
    tr.add_argument("--epochs", type=int, default=defaults.epochs)
    tr.add_argument("--batch-size", type=int, default=defaults.batch_size)
    tr.add_argument("--lr", type=float, default=defaults.lr)
    tr.add_argument("--seed", type=int, default=defaults.seed)
    tr.add_argument("--log", default=None, help="JSONL training log path")
    tr.set_defaults(func=_cmd_train_detector)

    ex = subs.add_parser("extract-features",
                         help="detect and refine features over a scene set")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--data", required=True)
    ex.add_argument("--out", required=True)
    ex.add_argument("--unrefined", action="store_true",
                    help="store raw activations instead of guided features")
    ex.add_argument("--association-iou", type=float, default=0.3)
    ex.add_argument("--score-threshold", type=float, default=None)
    ex.add_argument("--nms-iou", type=float, default=None)
    ex.set_defaults(func=_cmd_extract_features)

    fc = subs.add_parser("fit-classifier",
                         help="fit per-layer PCA+SVM and pick a layer")
    fc.add_argument("--support", required=True,
                    help="labeled feature cache")
    fc.add_argument("--test", default=None,
                    help="feature cache included in joint PCA scope")
    fc.add_argument("--pca-k", type=int, default=20)
    fc.add_argument("--pca-fit-scope", choices=("joint", "support_only"),
                    default="joint")
    fc.add_argument("--out", required=True)
    fc.set_defaults(func=_cmd_fit_classifier)

    re_ = subs.add_parser("run-experiment", help="run one experiment preset")
    _experiment_flags(re_)
    re_.set_defaults(func=_cmd_run_experiment)

    ab = subs.add_parser("run-ablation",
                         help="refined vs unrefined paired runs")
    _experiment_flags(ab, default_experiment=None)
    ab.set_defaults(func=_cmd_run_ablation)

    sw = subs.add_parser("run-sweep",
                         help="support-size x component-count accuracy grid")
    _experiment_flags(sw, default_experiment=None)
    sw.add_argument("--support-grid", type=lambda t: tuple(
        int(p) for p in t.split(",")), default=SUPPORT_GRID)
    sw.add_argument("--k-grid", type=lambda t: tuple(
        int(p) for p in t.split(",")), default=K_GRID)
    sw.set_defaults(func=_cmd_run_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GraspShotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
