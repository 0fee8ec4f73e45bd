"""
Command-line entry point (`tooldetect`).

Exit codes: 0 success, 1 other toolkit error, 2 config error,
3 data or evaluation error, 4 non-finite values.
"""

import functools
import json
import logging
from pathlib import Path
from typing import Optional

import click

from app.application.dtos import AppConfig, load_config
from app.application.evaluation_service import EvaluationService, render_table
from app.application.experiment_service import ExperimentService, load_plan
from app.application.model_zoo import build, pretrain_source, resolve_spec
from app.application.pipeline_service import plan_split
from app.application.synth_service import SynthService
from app.application.training_service import TrainingService, checkpoint_arrays, checkpoint_metadata, restore
from app.core.config import settings
from app.domain.exceptions import (
    ConfigError,
    DataError,
    EvaluationError,
    InvalidArgumentError,
    NumericError,
    ToolDetectError,
)
from app.infrastructure.logging import setup_logging
from app.infrastructure.storage.checkpoint_repository import NpzCheckpointRepository
from app.infrastructure.storage.image_store import PillowImageStore
from app.infrastructure.storage.manifest_repository import FileManifestRepository
from app.infrastructure.storage.prediction_repository import CsvPredictionRepository

logger = logging.getLogger(__name__)

EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def exit_code(error: ToolDetectError) -> int:
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, (DataError, EvaluationError)):
        return EXIT_DATA
    if isinstance(error, NumericError):
        return EXIT_NUMERIC
    return EXIT_ERROR


def common_options(command):
    """--config, --seed, --out and --quiet, resolved into (config, out_dir)."""
    @click.option("--config", "config_path", type=click.Path(path_type=Path), default=None,
                  help="JSON run configuration (defaults for every missing key).")
    @click.option("--seed", type=int, default=None, help="Override every seed in the configuration.")
    @click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None,
                  help="Output directory (default: TOOLDETECT_OUTPUT_DIR).")
    @click.option("--quiet", is_flag=True, help="Only log warnings and errors.")
    @functools.wraps(command)
    def wrapper(config_path: Optional[Path], seed: Optional[int], out_dir: Optional[Path], quiet: bool, **kwargs):
        setup_logging("WARNING" if quiet else settings.log_level)
        try:
            config = load_config(config_path)
            if seed is not None:
                config = config.with_seed(seed)
            command(config=config, out_dir=Path(out_dir or settings.output_dir), **kwargs)
        except ToolDetectError as exc:
            logger.error(str(exc), extra={"error": type(exc).__name__})
            raise SystemExit(exit_code(exc)) from exc
    return wrapper


def _manifest_path(option: Optional[Path], configured: Optional[str], key: str) -> Path:
    path = option or (Path(configured) if configured else None)
    if path is None:
        raise ConfigError("no manifest given (use --manifest)", key_path=key)
    return path


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@click.group()
def cli():
    """Multi-label surgical tool detection: data, training, evaluation and experiments."""


@cli.command()
@click.option("--source", is_flag=True, help="Generate the pretraining source task instead of the target task.")
@common_options
def generate(config: AppConfig, out_dir: Path, source: bool):
    """Generate a synthetic dataset."""
    synth = SynthService(PillowImageStore(), FileManifestRepository())
    if source:
        manifest = synth.generate_source_task(config.dataset.generator, out_dir)
    else:
        manifest = synth.generate(config.dataset.generator, out_dir)
    click.echo(f"{out_dir / 'manifest.json'}: {len(manifest.videos)} videos, tools {manifest.tool_names}")


@cli.command()
@click.option("--manifest", type=click.Path(path_type=Path), default=None)
@common_options
def split(config: AppConfig, out_dir: Path, manifest: Optional[Path]):
    """Plan the video-level training/validation split."""
    manifests = FileManifestRepository()
    dataset = manifests.load(_manifest_path(manifest, config.dataset.manifest, "dataset.manifest"))
    try:
        plan = plan_split(dataset, config.split.n_val_videos, config.split.seed,
                          config.split.exhaustive_limit, config.split.restarts)
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), key_path="split.n_val_videos") from exc
    manifests.save_split(out_dir / "split.json", plan)
    click.echo(json.dumps(plan.to_dict(), indent=2))


@cli.command()
@click.option("--manifest", type=click.Path(path_type=Path), default=None, help="Source-task manifest.")
@common_options
def pretrain(config: AppConfig, out_dir: Path, manifest: Optional[Path]):
    """Pretrain a backbone on the source task."""
    source = FileManifestRepository().load(
        _manifest_path(manifest, config.dataset.source_manifest, "dataset.source_manifest")
    )
    trainer = TrainingService(PillowImageStore())
    backbone = pretrain_source(config.model, source, config, trainer, log_path=out_dir / settings.training_log_name)
    path = NpzCheckpointRepository().save(out_dir / "backbone.npz", backbone)
    click.echo(str(path))


@cli.command()
@click.option("--manifest", type=click.Path(path_type=Path), default=None)
@common_options
def train(config: AppConfig, out_dir: Path, manifest: Optional[Path]):
    """Train one network; writes checkpoint, sidecar metadata, training log and split."""
    manifests = FileManifestRepository()
    checkpoints = NpzCheckpointRepository()
    dataset = manifests.load(_manifest_path(manifest, config.dataset.manifest, "dataset.manifest"))

    split_plan = None
    if config.split.mode == "file":
        if not config.split.plan_file:
            raise ConfigError("required when split.mode is 'file'", key_path="split.plan_file")
        split_plan = manifests.load_split(Path(config.split.plan_file))

    trainer = TrainingService(PillowImageStore())
    data = trainer.prepare(dataset, config, split_plan)
    spec = resolve_spec(config.model, len(data.tool_names), config.dataset.augmentation)
    config = config.model_copy(update={"model": spec})

    pretrained = None
    if config.train.init == "pretrained":
        pretrained = checkpoints.load(Path(config.train.pretrained_checkpoint))
    network = build(spec, seed=config.train.seed, pretrained=pretrained)

    result = trainer.train(network, data, config, log_path=out_dir / settings.training_log_name)
    checkpoints.save(out_dir / settings.checkpoint_name, checkpoint_arrays(network, data))
    _write_json(out_dir / Path(settings.checkpoint_name).with_suffix(".json").name,
                checkpoint_metadata(config, spec, data))
    manifests.save_split(out_dir / "split.json", data.split)
    _write_json(out_dir / "config.json", config.model_dump(mode="json"))

    if result.val_report is not None:
        click.echo(render_table(result.val_report))
    click.echo(f"checkpoint: {out_dir / settings.checkpoint_name}")


@cli.command()
@click.option("--checkpoint", type=click.Path(path_type=Path), required=True)
@click.option("--manifest", type=click.Path(path_type=Path), required=True)
@click.option("--video", "videos", multiple=True, help="Restrict to these video ids (repeatable).")
@common_options
def predict(config: AppConfig, out_dir: Path, checkpoint: Path, manifest: Path, videos: tuple[str, ...]):
    """Score every frame of a manifest with a trained checkpoint."""
    metadata_path = checkpoint.with_suffix(".json")
    if not metadata_path.exists():
        raise DataError(f"checkpoint metadata not found: {metadata_path}")
    try:
        metadata = json.loads(metadata_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{metadata_path}: invalid JSON") from exc
    network, mean_image, params, tool_names = restore(NpzCheckpointRepository().load(checkpoint), metadata)

    dataset = FileManifestRepository().load(manifest)
    missing = [t for t in tool_names if t not in dataset.tool_names]
    if missing:
        raise DataError(f"manifest lacks tools the checkpoint predicts: {missing}")
    frames = dataset.frames(list(videos) if videos else None)
    if not frames:
        raise DataError("no frames to predict")

    scores = TrainingService(PillowImageStore()).predict(network, frames, mean_image, params,
                                                         batch_size=config.eval.batch_size)
    path = out_dir / "predictions.csv"
    CsvPredictionRepository().write_predictions(path, tool_names, [f.key for f in frames], scores)
    click.echo(str(path))


@cli.command(name="eval")
@click.option("--predictions", type=click.Path(path_type=Path), required=True)
@click.option("--manifest", type=click.Path(path_type=Path), required=True)
@common_options
def evaluate(config: AppConfig, out_dir: Path, predictions: Path, manifest: Path):
    """Per-tool and macro-average AUC of a prediction file."""
    service = EvaluationService(FileManifestRepository(), CsvPredictionRepository())
    report = service.evaluate_predictions(predictions, manifest)
    service.write_report(out_dir / "report.csv", report)
    click.echo(render_table(report))


@cli.command()
@click.option("--plan", "plan_name", default=None, help="Built-in plan name or plan JSON file.")
@common_options
def experiments(config: AppConfig, out_dir: Path, plan_name: Optional[str]):
    """Run an experiment plan and write results.csv / results.txt."""
    plan = load_plan(plan_name or config.experiment.plan, config)
    service = ExperimentService(PillowImageStore(), FileManifestRepository(), NpzCheckpointRepository(),
                                workers=config.experiment.workers)
    service.run(plan, config, out_dir)
    click.echo((out_dir / "results.txt").read_text(encoding="utf-8"))


if __name__ == "__main__":
    cli()
