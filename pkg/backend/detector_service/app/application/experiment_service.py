"""
Application Layer: Experiment Plans and Runner

Built-in plans compare network configurations at desk scale:

    table1     FT k-sweep x both heads
    table2     FFE cut points x both heads, plus the no-custom-part variant
    table3     source-pretrained vs random init (and random init trained longer)
    table4     plain vs class-weighted loss on data with a 50:1 minority tool
    l2         L2 regularization sweep on the reference FT configuration
    lowres     reference FT configuration at half resolution
    multitool  training restricted to frames showing two or more tools

Every run is repeated with seeds experiment.seed + r. Each result row carries
the full resolved run configuration and its seeds, so any row can be rerun.
Generated datasets and the source backbone live under directories named by
a key of the configuration that produced them; a changed configuration never
picks up an older artifact.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd

from app.application.dtos import (
    AppConfig,
    DatasetConfig,
    ExperimentPlan,
    ExperimentRun,
    GeneratorConfig,
    ModelSpec,
    TrainConfig,
    load_config,
)
from app.application.model_zoo import build, pretrain_source, resolve_spec
from app.application.synth_service import TARGET_TOOLS, SynthService
from app.application.training_service import TrainingService
from app.domain.entities import Family, HeadType
from app.domain.exceptions import ConfigError
from app.domain.interfaces import ICheckpointRepository, IImageStore, IManifestRepository
from app.infrastructure.storage.checkpoint_repository import NpzCheckpointRepository
from app.infrastructure.storage.image_store import PillowImageStore
from app.infrastructure.storage.manifest_repository import FileManifestRepository
from app.utils.seeding import content_key

logger = logging.getLogger(__name__)

# train.pretrained_checkpoint value meaning "the backbone pretrained on the source task by this runner"
SOURCE_CHECKPOINT = "source"

FT_CUTS = (0, 7, 10, 14)
REFERENCE_FT_K = 10
HEADS = (HeadType.AVG_FC, HeadType.CONV_MAX)
HEAD_LABELS = {HeadType.AVG_FC: "avg-fc", HeadType.CONV_MAX: "conv-max"}

FT_ITERATIONS = 2000
FFE_ITERATIONS = 800
WEIGHTED_ITERATIONS = 833
RANDOM_LONG_ITERATIONS = 3333

MINORITY_RATIO = 50.0
MINORITY_EPISODE_LENGTH = 3.0
# Enough frames that a 50:1 minority tool still shows up in several episodes per video
MINORITY_MIN_FRAMES = 500


# ============ Built-in plans ============

def _run(base: AppConfig, name: str, train: TrainConfig, dataset=None, row: str = "", column: str = "",
         **model) -> ExperimentRun:
    return ExperimentRun(
        name=name,
        row=row,
        column=column,
        model=base.model.model_copy(update=model),
        train=train,
        dataset=dataset or base.dataset,
        split=base.split,
        repeats=base.experiment.repeats,
    )


def _pretrained_ft(base: AppConfig, **overrides) -> TrainConfig:
    return TrainConfig.fine_tuning(**{
        "iterations": FT_ITERATIONS, "init": "pretrained", "pretrained_checkpoint": SOURCE_CHECKPOINT,
        "val_every": base.train.val_every, "log_every": base.train.log_every, **overrides,
    })


def _reference(base: AppConfig, name: str, train: TrainConfig, dataset=None,
               head: HeadType = HeadType.AVG_FC, row: str = "", column: str = "") -> ExperimentRun:
    return _run(base, name, train, dataset, row=row, column=column, family=Family.FT, k=REFERENCE_FT_K, head=head)


def table1(base: AppConfig) -> ExperimentPlan:
    runs = [
        _run(base, f"FT{k} {HEAD_LABELS[head]}", _pretrained_ft(base), row=f"FT{k}", column=HEAD_LABELS[head],
             family=Family.FT, k=k, head=head)
        for k in FT_CUTS for head in HEADS
    ]
    return ExperimentPlan(name="table1", runs=runs)


def _custom_part_extent(spec: ModelSpec, extent: int) -> int:
    """Spatial extent left after the whole backbone and every custom-part pooling."""
    for stride in spec.backbone_strides:
        extent = (extent - 1) // stride + 1
    for _ in range(spec.custom_repetitions):
        extent //= spec.custom_pool
    return extent


def _ffe_dataset(base: AppConfig) -> DatasetConfig:
    """The base dataset, at doubled geometry until the custom part still has a pixel left behind the last cut."""
    params = base.dataset.augmentation
    while min(_custom_part_extent(base.model, params.crop_height),
              _custom_part_extent(base.model, params.crop_width)) < 1:
        params = params.scaled_to(2.0)
    return base.dataset.model_copy(update={"augmentation": params})


def table2(base: AppConfig) -> ExperimentPlan:
    train = TrainConfig.feature_extractor(
        iterations=FFE_ITERATIONS, init="pretrained", pretrained_checkpoint=SOURCE_CHECKPOINT,
        val_every=base.train.val_every, log_every=base.train.log_every,
    )
    cuts = base.model.ffe_cut_points
    dataset = _ffe_dataset(base)
    runs = [
        _run(base, f"FFE{k} {HEAD_LABELS[head]}", train, dataset, row=f"FFE{k}", column=HEAD_LABELS[head],
             family=Family.FFE, k=k, head=head, include_custom_part=True)
        for k in cuts for head in HEADS
    ]
    runs += [
        _run(base, f"FFE{cuts[-1]}NC {HEAD_LABELS[head]}", train, dataset, row=f"FFE{cuts[-1]}NC",
             column=HEAD_LABELS[head], family=Family.FFE, k=cuts[-1], head=head, include_custom_part=False)
        for head in HEADS
    ]
    return ExperimentPlan(name="table2", runs=runs)


def table3(base: AppConfig) -> ExperimentPlan:
    """The fully trainable FT0 network, source-pretrained or from random weights."""
    random_init = {"init": "random", "pretrained_checkpoint": None}
    runs = [
        ("pretrained", _pretrained_ft(base)),
        ("random", _pretrained_ft(base, **random_init)),
        ("random long", _pretrained_ft(base, iterations=RANDOM_LONG_ITERATIONS, **random_init)),
    ]
    return ExperimentPlan(name="table3", runs=[
        _run(base, name, train, family=Family.FT, k=0, head=HeadType.AVG_FC) for name, train in runs
    ])


def imbalanced_generator(generator: GeneratorConfig, ratio: float = MINORITY_RATIO) -> GeneratorConfig:
    """The last class made `ratio` times rarer than the most common one, shown in half of the videos."""
    generator = generator.model_copy(update={
        "frames_per_video": max(generator.frames_per_video, MINORITY_MIN_FRAMES),
    })
    prevalence = generator.resolved_prevalence()
    coverage = generator.resolved_coverage()
    episode_means = generator.resolved_episode_means()
    prevalence[-1] = max(prevalence) / ratio
    coverage[-1] = max(1, generator.num_videos // 2)
    episode_means[-1] = MINORITY_EPISODE_LENGTH
    return GeneratorConfig.model_validate({
        **generator.model_dump(), "prevalence": prevalence, "coverage": coverage, "episode_mean_length": episode_means,
    })


def minority_tool(generator: GeneratorConfig) -> str:
    return TARGET_TOOLS[generator.num_classes - 1].name


def table4(base: AppConfig) -> ExperimentPlan:
    generator = imbalanced_generator(base.dataset.generator)
    dataset = base.dataset.model_copy(update={"generator": generator})
    return ExperimentPlan(name="table4", focus_tool=minority_tool(generator), runs=[
        _reference(base, f"FT{REFERENCE_FT_K}", _pretrained_ft(base, iterations=WEIGHTED_ITERATIONS), dataset=dataset),
        _reference(base, f"FT{REFERENCE_FT_K}*", _pretrained_ft(base, iterations=WEIGHTED_ITERATIONS, weighted=True),
                   dataset=dataset),
    ])


def l2_sweep(base: AppConfig) -> ExperimentPlan:
    return ExperimentPlan(name="l2", runs=[
        _reference(base, f"l2={l2:g}", _pretrained_ft(base, l2=l2)) for l2 in (0.0, 1e-4, 1e-5)
    ])


def lowres(base: AppConfig) -> ExperimentPlan:
    half = base.dataset.model_copy(update={"augmentation": base.dataset.augmentation.scaled_to(0.5)})
    return ExperimentPlan(name="lowres", runs=[
        _reference(base, "full resolution", _pretrained_ft(base)),
        _reference(base, "half resolution", _pretrained_ft(base), dataset=half),
    ])


def multitool(base: AppConfig) -> ExperimentPlan:
    reduced = base.dataset.model_copy(update={"min_tools_per_frame": 2})
    return ExperimentPlan(name="multitool", runs=[
        _reference(base, f"{label} {HEAD_LABELS[head]}", _pretrained_ft(base), dataset=dataset, head=head,
                   row=label, column=HEAD_LABELS[head])
        for label, dataset in (("all frames", base.dataset), (">=2 tools", reduced)) for head in HEADS
    ])


BUILTIN_PLANS: dict[str, Callable[[AppConfig], ExperimentPlan]] = {
    "table1": table1,
    "table2": table2,
    "table3": table3,
    "table4": table4,
    "l2": l2_sweep,
    "lowres": lowres,
    "multitool": multitool,
}


def load_plan(name_or_path: str, base: AppConfig) -> ExperimentPlan:
    """A built-in plan by name, or an ExperimentPlan JSON file."""
    if name_or_path in BUILTIN_PLANS:
        return BUILTIN_PLANS[name_or_path](base)
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(
            f"unknown plan {name_or_path!r}; built-in plans: {sorted(BUILTIN_PLANS)}", key_path="experiment.plan"
        )
    return load_config(path, ExperimentPlan)


def scale_iterations(plan: ExperimentPlan, factor: float) -> ExperimentPlan:
    if factor == 1.0:
        return plan
    runs = [
        run.model_copy(update={"train": run.train.model_copy(update={
            "iterations": max(1, round(run.train.iterations * factor)),
            "val_every": max(1, round(run.train.val_every * factor)),
        })})
        for run in plan.runs
    ]
    return plan.model_copy(update={"runs": runs})


# ============ Execution ============

def run_config(run: ExperimentRun, base: AppConfig, manifest_path: str, seed: int) -> AppConfig:
    """Resolved AppConfig for one repeat of a run."""
    return AppConfig(
        dataset=run.dataset.model_copy(update={"manifest": manifest_path}),
        split=run.split,
        model=run.model,
        train=run.train.model_copy(update={"seed": seed}),
        eval=base.eval,
        experiment=base.experiment,
    )


def execute_job(config: AppConfig, source_checkpoint: Optional[str] = None) -> dict:
    """Train and validate one configuration; top-level so worker processes can run it."""
    manifests = FileManifestRepository()
    trainer = TrainingService(PillowImageStore())
    manifest = manifests.load(Path(config.dataset.manifest))
    data = trainer.prepare(manifest, config)
    spec = resolve_spec(config.model, len(data.tool_names), config.dataset.augmentation)

    pretrained = None
    if config.train.init == "pretrained":
        path = config.train.pretrained_checkpoint
        if path == SOURCE_CHECKPOINT:
            path = source_checkpoint
        pretrained = NpzCheckpointRepository().load(Path(path))

    network = build(spec, seed=config.train.seed, pretrained=pretrained)
    result = trainer.train(network, data, config.model_copy(update={"model": spec}))
    report = result.val_report
    return {
        "macro": None if report is None else report.macro,
        "per_tool": {} if report is None else {c.tool: c.auc for c in report.per_class},
    }


@dataclass
class RunSummary:
    """Aggregated result of one plan entry."""
    name: str
    seeds: list[int]
    aucs: list[float]
    per_tool: dict[str, list[Optional[float]]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    row: str = ""
    column: str = ""

    @property
    def mean(self) -> float:
        return float(np.mean(self.aucs))

    @property
    def std(self) -> float:
        return float(np.std(self.aucs, ddof=1)) if len(self.aucs) > 1 else 0.0

    def tool_mean(self, tool: str) -> Optional[float]:
        values = [v for v in self.per_tool.get(tool, []) if v is not None]
        return float(np.mean(values)) if values else None


def dataset_key(generator: GeneratorConfig) -> str:
    return content_key("dataset", generator.model_dump_json())


def source_key(base: AppConfig) -> str:
    """Names the source backbone by everything that shapes it."""
    return content_key(
        "source",
        base.model.model_dump_json(),
        base.dataset.source_manifest or _source_generator(base).model_dump_json(),
        base.dataset.augmentation.model_dump_json(),
        base.dataset.model_dump_json(include={"frame_stride", "undersample_ratio", "undersample_after_stride",
                                              "pca_max_pixels", "seed"}),
        base.split.model_dump_json(),
        _source_training(base).model_dump_json(),
    )


def _source_generator(base: AppConfig) -> GeneratorConfig:
    return base.dataset.generator.model_copy(update={"seed": base.dataset.generator.seed + 1})


def _source_training(base: AppConfig) -> TrainConfig:
    return TrainConfig.fine_tuning(
        seed=base.experiment.seed, val_every=base.train.val_every, log_every=base.train.log_every,
        iterations=max(1, round(FT_ITERATIONS * base.experiment.iteration_scale)),
    )


class ExperimentService:
    """Runs experiment plans, pretraining the source backbone once when a plan needs it."""

    def __init__(self, image_store: IImageStore, manifest_repository: IManifestRepository,
                 checkpoint_repository: ICheckpointRepository, workers: int = 1):
        self.image_store = image_store
        self.manifest_repository = manifest_repository
        self.checkpoint_repository = checkpoint_repository
        self.workers = workers
        self.synth = SynthService(image_store, manifest_repository)

    def target_manifest(self, dataset: DatasetConfig, out_dir: Path) -> Path:
        """The configured manifest, or a generated dataset shared by every run with the same generator."""
        if dataset.manifest:
            return Path(dataset.manifest)
        data_dir = out_dir / "data" / dataset_key(dataset.generator)
        manifest_path = data_dir / "manifest.json"
        if not manifest_path.exists():
            self.synth.generate(dataset.generator, data_dir)
        return manifest_path

    def source_checkpoint(self, base: AppConfig, out_dir: Path) -> Path:
        """Backbone pretrained on the source task, trained once per configuration and reused."""
        source_dir = out_dir / "source" / source_key(base)
        path = source_dir / "backbone.npz"
        if path.exists():
            logger.info("Reusing source backbone", extra={"path": str(path)})
            return path
        if base.dataset.source_manifest:
            source = self.manifest_repository.load(Path(base.dataset.source_manifest))
        else:
            source = self.synth.generate_source_task(_source_generator(base), source_dir / "data")
        trainer = TrainingService(self.image_store)
        config = base.model_copy(update={"train": _source_training(base)})
        backbone = pretrain_source(base.model, source, config, trainer, log_path=source_dir / "training_log.jsonl")
        self.checkpoint_repository.save(path, backbone)
        return path

    def run(self, plan: ExperimentPlan, base: AppConfig, out_dir: Path) -> list[RunSummary]:
        out_dir = Path(out_dir)
        plan = scale_iterations(plan, base.experiment.iteration_scale)
        manifests = {run.name: str(self.target_manifest(run.dataset, out_dir)) for run in plan.runs}
        needs_source = any(r.train.init == "pretrained" and r.train.pretrained_checkpoint == SOURCE_CHECKPOINT
                           for r in plan.runs)
        source = str(self.source_checkpoint(base, out_dir)) if needs_source else None

        jobs = [
            (run, base.experiment.seed + r, run_config(run, base, manifests[run.name], base.experiment.seed + r))
            for run in plan.runs for r in range(run.repeats)
        ]
        logger.info("Experiment plan started", extra={"plan": plan.name, "runs": len(plan.runs), "jobs": len(jobs)})
        if self.workers > 1:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                outcomes = list(pool.map(execute_job, [job[2] for job in jobs], [source] * len(jobs)))
        else:
            outcomes = [execute_job(job[2], source) for job in jobs]

        summaries: dict[str, RunSummary] = {}
        for (run, seed, _), outcome in zip(jobs, outcomes):
            summary = summaries.setdefault(run.name, RunSummary(
                name=run.name, seeds=[], aucs=[], row=run.row, column=run.column,
                config=run_config(run, base, manifests[run.name], base.experiment.seed).model_dump(mode="json"),
            ))
            summary.seeds.append(seed)
            if outcome["macro"] is not None:
                summary.aucs.append(outcome["macro"])
            for tool, value in outcome["per_tool"].items():
                summary.per_tool.setdefault(tool, []).append(value)
            logger.info("Experiment run finished", extra={"run": run.name, "seed": seed, "macro_auc": outcome["macro"]})

        results = list(summaries.values())
        self.write_results(out_dir, plan, results)
        return results

    def write_results(self, out_dir: Path, plan: ExperimentPlan, results: list[RunSummary]) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = []
        for s in results:
            row = {
                "plan": plan.name,
                "run": s.name,
                "mean_auc": s.mean if s.aucs else None,
                "std_auc": s.std if s.aucs else None,
                "aucs": json.dumps(s.aucs),
                "seeds": json.dumps(s.seeds),
                "per_tool": json.dumps({tool: s.tool_mean(tool) for tool in s.per_tool}, sort_keys=True),
                "config": json.dumps(s.config, sort_keys=True),
            }
            if plan.focus_tool:
                row["focus_tool"] = plan.focus_tool
                row["focus_auc"] = s.tool_mean(plan.focus_tool)
            rows.append(row)
        pd.DataFrame(rows).to_csv(out_dir / "results.csv", index=False, lineterminator="\n")
        text = render_results(plan.name, results, plan.focus_tool)
        (out_dir / "results.txt").write_text(text + "\n", encoding="utf-8")


def _cell(summary: RunSummary) -> str:
    return f"{summary.mean:.4f} +- {summary.std:.4f}" if summary.aucs else "n/a"


def render_results(plan_name: str, results: list[RunSummary], focus_tool: Optional[str] = None) -> str:
    """
    Results as text. Runs placed in grid cells render as configurations x columns
    (e.g. FT cut point x head); other plans list one run per line with the
    number of evaluated repeats and, when given, the focus tool's mean AUC.
    """
    if results and all(s.column for s in results):
        cells = pd.DataFrame([{"row": s.row or s.name, "column": s.column, "cell": _cell(s)} for s in results])
        grid = cells.pivot(index="row", columns="column", values="cell")
        grid = grid.reindex(index=list(dict.fromkeys(cells["row"])), columns=list(dict.fromkeys(cells["column"])))
        table = grid.fillna("").rename_axis(index=None, columns="Configuration")
        return f"Plan {plan_name}\n{table.to_string()}"

    table = pd.DataFrame({
        "Configuration": [s.name for s in results],
        "AUC (mean +- std)": [_cell(s) for s in results],
        "n": [len(s.aucs) for s in results],
    })
    if focus_tool:
        values = [s.tool_mean(focus_tool) for s in results]
        table[f"{focus_tool} AUC"] = ["n/a" if v is None else f"{v:.4f}" for v in values]
    return f"Plan {plan_name}\n{table.to_string(index=False)}"
