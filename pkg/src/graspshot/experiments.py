"""Experiment harness: composes scene generation, the trained detector,
guided feature refinement and few-shot classification into named
experiment presets, and renders the results as reports.

Each report is emitted twice: a human-readable aligned table and a
machine-readable record block (one `key value` line per metric, sorted
by key). Wall-clock time appears only in the human table so that two
runs with the same config produce byte-identical record blocks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .detector import DetectorNetwork, load_checkpoint
from .errors import (ConfigurationError, DegenerateDataError,
                     InsufficientRankError)
from .fewshot import LayerSelection, classify, fit_all_layers
from .refine import RefinedFeatureSet, extract_all
from .scenes import SHAPE_KINDS, TRAINED_KINDS, SceneConfig, sample_dataset

SCALE_SINGLE = (8.0, 12.0)
SCALE_MULTI = (5.0, 7.0)

EXPERIMENT_IDS = ("1", "2", "3", "4", "5", "ablation")

SUPPORT_GRID = (3, 5, 10, 20, 30, 40)
K_GRID = (3, 5, 10, 20, 30, 40)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that affects an experiment's outcome.

    The composition fields describe the test scenes; the support set is
    always built from fresh single-object scenes, one class per
    support_kinds entry.
    """
    experiment_id: str
    checkpoint: str
    seed: int = 0
    support_per_class: int = 30
    pca_k: int = 20
    pca_fit_scope: str = "joint"
    num_test_scenes: int = 200
    objects_per_scene: int = 1
    mixed: bool = False
    kinds: tuple = TRAINED_KINDS
    required_kinds: tuple = ()
    support_kinds: tuple = TRAINED_KINDS
    scale_range: tuple = SCALE_SINGLE
    support_scale_range: tuple = SCALE_SINGLE
    image_size: int = 64
    noise_sigma: float = 0.0
    association_iou: float = 0.3
    # detector operating point; None defers to the checkpoint's config
    score_threshold: float | None = None
    nms_iou: float | None = None

    def __post_init__(self):
        if self.experiment_id not in EXPERIMENT_IDS:
            raise ConfigurationError(
                f"unknown experiment_id {self.experiment_id!r}; "
                f"expected one of {EXPERIMENT_IDS}")
        if self.support_per_class < 1:
            raise ConfigurationError("support_per_class must be >= 1")
        if self.pca_k < 1:
            raise ConfigurationError("pca_k must be >= 1")
        if self.pca_fit_scope not in ("joint", "support_only"):
            raise ConfigurationError(
                f"pca_fit_scope must be 'joint' or 'support_only', "
                f"got {self.pca_fit_scope!r}")
        if self.num_test_scenes < 1:
            raise ConfigurationError("num_test_scenes must be >= 1")
        self._check_composition()

    def _check_composition(self):
        eid = self.experiment_id
        if eid in ("1", "2") and self.objects_per_scene != 1:
            raise ConfigurationError(
                f"experiment {eid} uses single-object scenes, got "
                f"objects_per_scene={self.objects_per_scene}")
        if eid == "3" and (self.objects_per_scene < 2 or self.mixed):
            raise ConfigurationError(
                "experiment 3 uses same-kind multi-object scenes")
        if eid == "4" and (self.objects_per_scene < 2 or not self.mixed):
            raise ConfigurationError(
                "experiment 4 uses mixed multi-object scenes")
        if eid == "5":
            if "Ring" not in self.required_kinds:
                raise ConfigurationError(
                    "experiment 5 requires a Ring in every scene")
            if "Ring" not in self.support_kinds:
                raise ConfigurationError(
                    "experiment 5 requires Ring among the support classes")


_COMPOSITIONS = {
    "1": dict(num_test_scenes=200, objects_per_scene=1, mixed=False,
              kinds=TRAINED_KINDS, required_kinds=(),
              support_kinds=TRAINED_KINDS, scale_range=SCALE_SINGLE),
    "2": dict(num_test_scenes=200, objects_per_scene=1, mixed=False,
              kinds=TRAINED_KINDS, required_kinds=(),
              support_kinds=TRAINED_KINDS, scale_range=SCALE_SINGLE),
    "3": dict(num_test_scenes=200, objects_per_scene=4, mixed=False,
              kinds=TRAINED_KINDS, required_kinds=(),
              support_kinds=TRAINED_KINDS, scale_range=SCALE_MULTI,
              support_scale_range=SCALE_MULTI),
    "4": dict(num_test_scenes=50, objects_per_scene=4, mixed=True,
              kinds=TRAINED_KINDS, required_kinds=(),
              support_kinds=TRAINED_KINDS, scale_range=SCALE_MULTI,
              support_scale_range=SCALE_MULTI),
    "5": dict(num_test_scenes=50, objects_per_scene=3, mixed=True,
              kinds=TRAINED_KINDS, required_kinds=("Ring",),
              support_kinds=TRAINED_KINDS + ("Ring",),
              scale_range=SCALE_MULTI,
              support_scale_range=SCALE_MULTI),
}
_COMPOSITIONS["ablation"] = dict(_COMPOSITIONS["3"])


def default_config(experiment_id, checkpoint, **overrides) -> ExperimentConfig:
    """Config preset for a named experiment; overrides win over the
    preset but the composition invariants still apply."""
    eid = str(experiment_id)
    if eid not in _COMPOSITIONS:
        raise ConfigurationError(
            f"unknown experiment_id {eid!r}; expected one of {EXPERIMENT_IDS}")
    merged = dict(_COMPOSITIONS[eid])
    merged.update(overrides)
    return ExperimentConfig(experiment_id=eid, checkpoint=str(checkpoint),
                            **merged)


@dataclass(frozen=True)
class LayerRow:
    layer_id: str
    support_accuracy: float
    test_accuracy: float | None


@dataclass(frozen=True)
class ExperimentReport:
    experiment_id: str
    arm: str  # "refined" or "unrefined"
    scenes_count: int
    detections_count: int
    associated_count: int
    unassociated_count: int
    correct_count: int
    accuracy: float | None  # None when no detection could be scored
    selected_layer: str
    per_layer: tuple = ()
    config_echo: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0


def _echo_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(e) for e in v)
    return str(v)


def config_echo(config: ExperimentConfig) -> dict:
    return {f.name: _echo_value(getattr(config, f.name))
            for f in fields(config)}


def machine_records(report: ExperimentReport) -> str:
    """One `key value` line per metric, sorted by key. Excludes wall
    clock so identical runs serialize identically."""
    rec = {
        "experiment_id": report.experiment_id,
        "arm": report.arm,
        "scenes_count": str(report.scenes_count),
        "detections_count": str(report.detections_count),
        "associated_count": str(report.associated_count),
        "unassociated_count": str(report.unassociated_count),
        "correct_count": str(report.correct_count),
        "accuracy": "NA" if report.accuracy is None else repr(report.accuracy),
        "selected_layer": report.selected_layer or "NA",
    }
    for row in report.per_layer:
        rec[f"layer.{row.layer_id}.support_accuracy"] = repr(
            row.support_accuracy)
        rec[f"layer.{row.layer_id}.test_accuracy"] = (
            "NA" if row.test_accuracy is None else repr(row.test_accuracy))
    for key, val in report.config_echo.items():
        rec[f"config.{key}"] = val
    return "".join(f"{k} {rec[k]}\n" for k in sorted(rec))


def parse_records(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, val = line.partition(" ")
        out[key] = val
    return out


def human_table(report: ExperimentReport) -> str:
    acc = "undefined" if report.accuracy is None else f"{report.accuracy:.4f}"
    lines = [
        f"experiment {report.experiment_id} ({report.arm})",
        f"  scenes            {report.scenes_count}",
        f"  detections        {report.detections_count}",
        f"  associated        {report.associated_count}",
        f"  unassociated      {report.unassociated_count}",
        f"  correct           {report.correct_count}",
        f"  accuracy          {acc}",
        f"  selected layer    {report.selected_layer or 'none'}",
        f"  wall clock        {report.wall_clock_seconds:.1f}s",
    ]
    if report.per_layer:
        lines.append("  layer   support   test")
        for row in report.per_layer:
            t = "   NA " if row.test_accuracy is None else (
                f"{row.test_accuracy:.4f}")
            lines.append(f"  {row.layer_id:<6}  {row.support_accuracy:.4f}"
                         f"    {t}")
    return "\n".join(lines) + "\n"


def _derived_seeds(seed: int, n: int):
    return [int(s) for s in
            np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)]


def build_support(network: DetectorNetwork, kinds, per_class: int, seed: int,
                  scale_range=SCALE_SINGLE, image_size: int = 64,
                  noise_sigma: float = 0.0, unrefined: bool = False,
                  association_iou: float = 0.3, score_threshold=None,
                  nms_iou=None):
    """Labeled support features from fresh single-object scenes, the
    first per_class associated detections of each kind in scene order."""
    out = []
    for kind, kind_seed in zip(kinds, _derived_seeds(seed, len(kinds))):
        cfg = SceneConfig(num_scenes=per_class * 3, objects_per_scene=1,
                          allowed_kinds=(kind,), image_size=image_size,
                          scale_range=scale_range, noise_sigma=noise_sigma,
                          seed=kind_seed)
        feats = extract_all(network, sample_dataset(cfg),
                            association_iou=association_iou,
                            unrefined=unrefined,
                            score_threshold=score_threshold,
                            nms_iou=nms_iou)
        kept = [f for f in feats if f.true_shape == kind][:per_class]
        if len(kept) < per_class:
            raise DegenerateDataError(
                f"only {len(kept)} usable support detections for {kind}, "
                f"wanted {per_class}")
        out.extend(kept)
    return out


def _test_scene_config(config: ExperimentConfig, seed: int) -> SceneConfig:
    return SceneConfig(num_scenes=config.num_test_scenes,
                       objects_per_scene=config.objects_per_scene,
                       allowed_kinds=config.kinds, mixed=config.mixed,
                       required_kinds=config.required_kinds,
                       image_size=config.image_size,
                       scale_range=config.scale_range,
                       noise_sigma=config.noise_sigma, seed=seed)


def _score(classifiers, selection, test_feats):
    """(correct, associated) for the given layer selection."""
    preds = classify(selection, classifiers, test_feats)
    correct = 0
    associated = 0
    for (_, pred), feat in zip(preds, test_feats):
        if feat.true_shape is None:
            continue
        associated += 1
        correct += int(pred == feat.true_shape)
    return correct, associated


def evaluate(network: DetectorNetwork, config: ExperimentConfig,
             support, test_feats, scenes_count: int,
             arm: str = "refined") -> ExperimentReport:
    """Fit the classification stage on prepared features and assemble a
    report. Accuracy is over associated detections; spurious detections
    are counted and reported but never scored."""
    start = time.monotonic()
    unassociated = sum(1 for f in test_feats if f.true_shape is None)
    classifiers, selection = fit_all_layers(
        support, test_feats, k=config.pca_k,
        pca_fit_scope=config.pca_fit_scope)
    if not test_feats:
        # no detections to score: accuracy undefined but the support-fit
        # layer table is still worth reporting
        rows = tuple(LayerRow(c.layer_id, c.support_accuracy, None)
                     for c in classifiers)
        return ExperimentReport(
            experiment_id=config.experiment_id, arm=arm,
            scenes_count=scenes_count, detections_count=0,
            associated_count=0, unassociated_count=0, correct_count=0,
            accuracy=None, selected_layer=selection.chosen_layer_id,
            per_layer=rows, config_echo=config_echo(config),
            wall_clock_seconds=time.monotonic() - start)

    rows = []
    chosen_correct = 0
    associated = 0
    for clf in classifiers:
        forced = LayerSelection(chosen_layer_id=clf.layer_id,
                                per_layer=selection.per_layer)
        correct, associated = _score(classifiers, forced, test_feats)
        test_acc = correct / associated if associated else None
        rows.append(LayerRow(clf.layer_id, clf.support_accuracy, test_acc))
        if clf.layer_id == selection.chosen_layer_id:
            chosen_correct = correct

    accuracy = chosen_correct / associated if associated else None
    return ExperimentReport(
        experiment_id=config.experiment_id, arm=arm,
        scenes_count=scenes_count, detections_count=len(test_feats),
        associated_count=associated, unassociated_count=unassociated,
        correct_count=chosen_correct, accuracy=accuracy,
        selected_layer=selection.chosen_layer_id, per_layer=tuple(rows),
        config_echo=config_echo(config),
        wall_clock_seconds=time.monotonic() - start)


def run_experiment(config: ExperimentConfig,
                   network: DetectorNetwork | None = None,
                   unrefined: bool = False) -> ExperimentReport:
    start = time.monotonic()
    if network is None:
        network = load_checkpoint(config.checkpoint)
    test_seed, support_seed = _derived_seeds(config.seed, 2)
    support = build_support(
        network, config.support_kinds, config.support_per_class,
        support_seed, scale_range=config.support_scale_range,
        image_size=config.image_size, noise_sigma=config.noise_sigma,
        unrefined=unrefined, association_iou=config.association_iou,
        score_threshold=config.score_threshold, nms_iou=config.nms_iou)
    scenes = sample_dataset(_test_scene_config(config, test_seed))
    test_feats = extract_all(network, scenes,
                             association_iou=config.association_iou,
                             unrefined=unrefined,
                             score_threshold=config.score_threshold,
                             nms_iou=config.nms_iou)
    report = evaluate(network, config, support, test_feats, len(scenes),
                      arm="unrefined" if unrefined else "refined")
    return replace(report, wall_clock_seconds=time.monotonic() - start)


def run_ablation(config: ExperimentConfig,
                 network: DetectorNetwork | None = None):
    """(refined, unrefined) reports over identical scenes and detector.

    The unrefined arm swaps every guided-gradient feature for the raw
    whole-scene activations; support and test sides both swap so the
    downstream pipeline stays identical.
    """
    if network is None:
        network = load_checkpoint(config.checkpoint)
    refined = run_experiment(config, network=network, unrefined=False)
    unrefined = run_experiment(config, network=network, unrefined=True)
    return refined, unrefined


@dataclass(frozen=True)
class SweepResult:
    support_grid: tuple
    k_grid: tuple
    # (support, k) -> accuracy; infeasible cells are absent, not zero
    cells: dict
    config_echo: dict = field(default_factory=dict)


def run_sweep(config: ExperimentConfig, support_grid=SUPPORT_GRID,
              k_grid=K_GRID,
              network: DetectorNetwork | None = None) -> SweepResult:
    """Accuracy over the support-size x component-count grid.

    The support pool is built once at the largest grid size; smaller
    cells take a per-class prefix, so cells are nested rather than
    independently resampled.
    """
    if network is None:
        network = load_checkpoint(config.checkpoint)
    support_grid = tuple(sorted(set(int(s) for s in support_grid)))
    k_grid = tuple(sorted(set(int(k) for k in k_grid)))
    if not support_grid or not k_grid:
        raise ConfigurationError("sweep grids must be non-empty")

    test_seed, support_seed = _derived_seeds(config.seed, 2)
    pool = build_support(
        network, config.support_kinds, max(support_grid), support_seed,
        scale_range=config.support_scale_range, image_size=config.image_size,
        noise_sigma=config.noise_sigma,
        association_iou=config.association_iou,
        score_threshold=config.score_threshold, nms_iou=config.nms_iou)
    by_kind = {kind: [f for f in pool if f.true_shape == kind]
               for kind in config.support_kinds}
    scenes = sample_dataset(_test_scene_config(config, test_seed))
    test_feats = extract_all(network, scenes,
                             association_iou=config.association_iou,
                             score_threshold=config.score_threshold,
                             nms_iou=config.nms_iou)

    cells = {}
    for s in support_grid:
        support = [f for kind in config.support_kinds
                   for f in by_kind[kind][:s]]
        for k in k_grid:
            try:
                classifiers, selection = fit_all_layers(
                    support, test_feats, k=k,
                    pca_fit_scope=config.pca_fit_scope)
            except (InsufficientRankError, ConfigurationError):
                continue  # cell infeasible at this rank; leave absent
            correct, associated = _score(classifiers, selection, test_feats)
            if associated:
                cells[(s, k)] = correct / associated
    return SweepResult(support_grid=support_grid, k_grid=k_grid, cells=cells,
                       config_echo=config_echo(config))


def sweep_records(result: SweepResult) -> str:
    rec = {
        "support_grid": ",".join(str(s) for s in result.support_grid),
        "k_grid": ",".join(str(k) for k in result.k_grid),
    }
    for (s, k), acc in result.cells.items():
        rec[f"cell.s{s}.k{k}"] = repr(acc)
    for key, val in result.config_echo.items():
        rec[f"config.{key}"] = val
    return "".join(f"{k} {rec[k]}\n" for k in sorted(rec))


def sweep_table(result: SweepResult) -> str:
    header = "support\\k " + " ".join(f"{k:>7}" for k in result.k_grid)
    lines = [header]
    for s in result.support_grid:
        row = [f"{s:>9} "]
        for k in result.k_grid:
            acc = result.cells.get((s, k))
            row.append("      -" if acc is None else f" {acc:.4f}")
        lines.append("".join(row))
    return "\n".join(lines) + "\n"
