"""Five-stage pipeline driver: env check, dataset, pretrain, finetune, collect.

One command runs the stages in order; each can be disabled in the config, and
a disabled stage is fine as long as its outputs (if required downstream)
already exist, which is checked before anything runs. Completed stages leave
a sentinel recording the inputs they ran with, so re-running a finished
pipeline performs no work and reports every stage as skipped; changing the
relevant config sections invalidates the sentinel.

Directory layout under the workspace root::

    data/sharded/               shard files + MANIFEST.tsv
    data/processed/             pre-masked instance files + META.yaml
    saved_models/pretrain/<dataset_id>/
    log/pretrain/<dataset_id>/
    log/finetune/<dataset_id>/<task>/<run>/
    output/finetune/<dataset_id>/<task>/<run>/
    output_test_translated/finetune/<dataset_id>/*.zip
    log/pipeline/               canonical config echo + machine-readable report
"""

from __future__ import annotations

import hashlib
import json
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping

from concurrent.futures import ThreadPoolExecutor

from . import glue
from .config import PipelineConfig, serialize_config, validate
from .ingest import enumerate_corpus_files, sources_from_config
from .instances import MaskingPolicy, generate_instances, load_meta
from .schedule import ScheduleSpec, warmup_steps
from .search import SearchSpace, finetune_search, schedule_waves, select_best
from .sharding import ShardPlan, dataset_id as derive_dataset_id, shard_corpus
from .tokenization import load_vocab, resolve_vocab
from .trainer import (
    EarlyStopPolicy,
    RunOutcome,
    SimulationTrainer,
    TrainerAdapter,
    TrainerJob,
    build_pretrain_job,
    parse_result_file,
)
from .collect import collect_best_val, summarize_val, translate_test_result

STAGES = ("env_check", "dataset", "pretrain", "finetune", "collect")

COMPLETED = "completed"
SKIPPED_DISABLED = "skipped_disabled"
SKIPPED_DONE = "skipped_done"
FAILED = "failed"


class PipelineError(Exception):
    """A stage failed; the message names the stage."""


class StagePreconditionError(PipelineError):
    """An enabled stage needs outputs of a disabled stage that do not exist."""

    def __init__(self, producer: str, consumer: str, detail: str):
        self.producer = producer
        self.consumer = consumer
        super().__init__(
            f"stage '{consumer}' is enabled but requires outputs of disabled "
            f"stage '{producer}': {detail}"
        )


@dataclass(frozen=True)
class Workspace:
    """All pipeline paths, derived from one root directory."""

    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    @property
    def sharded_dir(self) -> Path:
        return self.root / "data" / "sharded"

    @property
    def spill_dir(self) -> Path:
        return self.root / "data" / "spill"

    @property
    def processed_dir(self) -> Path:
        return self.root / "data" / "processed"

    @property
    def remote_cache_dir(self) -> Path:
        return self.root / "data" / "remote_cache"

    @property
    def log_root(self) -> Path:
        return self.root / "log"

    @property
    def output_root(self) -> Path:
        return self.root / "output"

    @property
    def saved_models_root(self) -> Path:
        return self.root / "saved_models"

    @property
    def translated_root(self) -> Path:
        return self.root / "output_test_translated"

    @property
    def sentinel_dir(self) -> Path:
        return self.root / ".stages"

    def pretrain_model_dir(self, dataset_id: str) -> Path:
        return self.saved_models_root / "pretrain" / dataset_id

    def pretrain_log_dir(self, dataset_id: str) -> Path:
        return self.log_root / "pretrain" / dataset_id

    def finetune_log_dir(self, dataset_id: str, task: str, run: str) -> Path:
        return self.log_root / "finetune" / dataset_id / task / run

    def finetune_output_dir(self, dataset_id: str, task: str, run: str) -> Path:
        return self.output_root / "finetune" / dataset_id / task / run

    def translated_dir(self, dataset_id: str) -> Path:
        return self.translated_root / "finetune" / dataset_id

    def pipeline_log_dir(self) -> Path:
        return self.log_root / "pipeline"


@dataclass
class PipelineOptions:
    """Pipeline knobs that live outside the YAML schema (CLI/API level).

    Defaults mirror the standard preprocessing and pretraining commands; the
    held-out fraction defaults to 0.5% of the data.
    """

    seed: int = 42
    n_workers: int = 1
    num_train_shards: int = 256
    num_test_shards: int = 128
    frac_test: float = 0.005
    dup_factor: int = 10
    masked_lm_prob: float = 0.15
    max_seq_length: int = 128
    max_predictions_per_seq: int = 20
    do_lower_case: bool = True
    schedule_kind: str = "esd"
    eta0: float = 2e-3
    warmup_proportion: float = 0.06
    early_stop: EarlyStopPolicy = field(default_factory=EarlyStopPolicy)
    tasks: tuple[str, ...] = glue.TASK_NAMES
    search_space: SearchSpace = field(default_factory=SearchSpace)
    stilt_sources: Mapping[str, str] | None = None
    finetune_parallelism: int = 1
    remote_base_url: str | None = None
    min_free_bytes: int = 256 * 2**20
    force: bool = False  # ignore stage sentinels and re-run

    def shard_plan(self, config: PipelineConfig) -> ShardPlan:
        return ShardPlan(
            num_train_shards=self.num_train_shards,
            num_test_shards=self.num_test_shards,
            frac_test=self.frac_test,
            max_memory_bytes=int(config.system.max_memory_in_gb * 2**30),
            seed=self.seed,
        )

    def masking_policy(self) -> MaskingPolicy:
        return MaskingPolicy(
            masked_lm_prob=self.masked_lm_prob,
            max_predictions_per_seq=self.max_predictions_per_seq,
            max_seq_length=self.max_seq_length,
            dup_factor=self.dup_factor,
            seed=self.seed,
            do_lower_case=self.do_lower_case,
        )

    def schedule_spec(self, overall_steps: int) -> ScheduleSpec:
        horizon = overall_steps - warmup_steps(overall_steps, self.warmup_proportion)
        return ScheduleSpec(
            kind=self.schedule_kind,
            eta0=self.eta0,
            total_steps=max(1, horizon),
            warmup_proportion=self.warmup_proportion,
        )


@dataclass
class StageReport:
    name: str
    status: str
    duration_seconds: float = 0.0
    artifacts: dict[str, Any] = field(default_factory=dict)
    error: str | None = None


@dataclass
class PipelineReport:
    stages: list[StageReport]
    dataset_id: str | None
    report_path: Path | None = None

    def stage(self, name: str) -> StageReport:
        for report in self.stages:
            if report.name == name:
                return report
        raise KeyError(name)

    def to_json(self) -> dict[str, Any]:
        return {
            "dataset_id": self.dataset_id,
            "stages": [
                {
                    "name": s.name,
                    "status": s.status,
                    "duration_seconds": s.duration_seconds,
                    "artifacts": {k: str(v) for k, v in s.artifacts.items()},
                    "error": s.error,
                }
                for s in self.stages
            ],
        }


@dataclass(frozen=True)
class StagePlan:
    """Resolved stage list (fixed order) with enable flags and roots."""

    stages: tuple[tuple[str, bool], ...]
    dataset_id: str | None
    log_root: Path
    output_root: Path


def build_stage_plan(config: PipelineConfig, workspace: Workspace) -> StagePlan:
    enabled = {
        "env_check": True,
        "dataset": config.dataset.enabled,
        "pretrain": config.pretrain.enabled,
        "finetune": config.finetune.enabled,
        "collect": config.result_collection.enabled,
    }
    return StagePlan(
        stages=tuple((name, enabled[name]) for name in STAGES),
        dataset_id=resolve_dataset_id(config, workspace),
        log_root=workspace.log_root,
        output_root=workspace.output_root,
    )


def resolve_dataset_id(config: PipelineConfig, workspace: Workspace) -> str | None:
    """Dataset id from the config override or a previously processed dataset."""
    if config.dataset.id:
        return config.dataset.id
    try:
        meta = load_meta(workspace.processed_dir)
    except Exception:
        return None
    return meta.get("dataset_id")


def check_preconditions(config: PipelineConfig, workspace: Workspace) -> None:
    """Verify that every enabled stage can get its inputs before running anything."""
    processed_meta = workspace.processed_dir / "META.yaml"
    if config.pretrain.enabled and not config.dataset.enabled and not processed_meta.is_file():
        raise StagePreconditionError(
            "dataset", "pretrain", f"no processed dataset at {workspace.processed_dir}"
        )
    did = resolve_dataset_id(config, workspace)
    if config.finetune.enabled and not config.pretrain.enabled:
        if did is None:
            raise StagePreconditionError(
                "pretrain", "finetune", "no dataset id is resolvable (no processed data)"
            )
        if not (workspace.pretrain_model_dir(did) / "RESULT.tsv").is_file():
            raise StagePreconditionError(
                "pretrain",
                "finetune",
                f"no pretrained checkpoint under {workspace.pretrain_model_dir(did)}",
            )
    if config.result_collection.enabled and not config.finetune.enabled:
        if did is None or not (workspace.log_root / "finetune" / did).is_dir():
            raise StagePreconditionError(
                "finetune", "collect", "no finetune logs to collect from"
            )


def _stage_digest(stage: str, config: PipelineConfig, dataset_id: str | None,
                  options: PipelineOptions) -> str:
    """Digest of the config/options a stage's outputs depend on.

    A stage sentinel is only honored while this digest is unchanged, so
    editing the relevant config sections (or CLI knobs) re-runs the stage.
    """
    relevant: dict[str, Any] = {"stage": stage}
    if stage == "dataset":
        relevant["dataset"] = asdict(config.dataset)
        relevant["tokenizer"] = asdict(config.tokenizer)
        relevant["max_memory_in_gb"] = config.system.max_memory_in_gb
        relevant["options"] = [
            options.seed, options.num_train_shards, options.num_test_shards,
            options.frac_test, options.dup_factor, options.masked_lm_prob,
            options.max_seq_length, options.max_predictions_per_seq,
            options.do_lower_case,
        ]
    elif stage == "pretrain":
        relevant["pretrain"] = asdict(config.pretrain)
        relevant["tokenizer"] = asdict(config.tokenizer)
        relevant["dataset_id"] = dataset_id
        relevant["options"] = [
            options.schedule_kind, options.eta0, options.warmup_proportion,
            asdict(options.early_stop),
        ]
    elif stage == "finetune":
        relevant["dataset_id"] = dataset_id
        relevant["options"] = [
            sorted(options.tasks), asdict(options.search_space),
            dict(options.stilt_sources) if options.stilt_sources is not None else None,
        ]
    elif stage == "collect":
        relevant["dataset_id"] = dataset_id
        relevant["options"] = [sorted(options.tasks)]
    blob = json.dumps(relevant, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


class _Sentinels:
    def __init__(self, workspace: Workspace):
        self.dir = workspace.sentinel_dir

    def path(self, stage: str) -> Path:
        return self.dir / f"{stage}.json"

    def is_done(self, stage: str, digest: str) -> bool:
        p = self.path(stage)
        if not p.is_file():
            return False
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            return False
        return data.get("digest") == digest

    def mark_done(self, stage: str, digest: str, dataset_id: str | None) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path(stage).write_text(
            json.dumps(
                {
                    "stage": stage,
                    "digest": digest,
                    "dataset_id": dataset_id,
                    "completed_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                },
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )


def run_pipeline(
    config: PipelineConfig,
    workspace: Workspace | str | Path,
    trainer: TrainerAdapter | None = None,
    options: PipelineOptions | None = None,
) -> PipelineReport:
    """Run every enabled stage in order and write a machine-readable report.

    Raises PipelineError naming the failing stage; the report (including the
    failure) is still written to ``log/pipeline/report.json``.
    """
    if not isinstance(workspace, Workspace):
        workspace = Workspace(Path(workspace))
    options = options or PipelineOptions()
    trainer = trainer or SimulationTrainer()

    violations = validate(config)
    if violations:
        details = "; ".join(f"{v.key_path}: {v.message}" for v in violations)
        raise PipelineError(f"configuration is invalid: {details}")
    check_preconditions(config, workspace)

    workspace.root.mkdir(parents=True, exist_ok=True)
    pipeline_log = workspace.pipeline_log_dir()
    pipeline_log.mkdir(parents=True, exist_ok=True)
    # Provenance: the exact config this run saw, in canonical form.
    (pipeline_log / "config.yaml").write_text(serialize_config(config), encoding="utf-8")

    sentinels = _Sentinels(workspace)
    state = _RunState(config, workspace, options, trainer)
    report = PipelineReport(stages=[], dataset_id=None)

    stage_runners: dict[str, Callable[[_RunState], dict[str, Any]]] = {
        "env_check": _stage_env_check,
        "dataset": _stage_dataset,
        "pretrain": _stage_pretrain,
        "finetune": _stage_finetune,
        "collect": _stage_collect,
    }
    enabled_flags = dict(build_stage_plan(config, workspace).stages)

    failure: PipelineError | None = None
    for stage in STAGES:
        if failure is not None:
            break
        if not enabled_flags[stage]:
            report.stages.append(StageReport(stage, SKIPPED_DISABLED))
            continue
        digest = _stage_digest(stage, config, state.dataset_id, options)
        if not options.force and sentinels.is_done(stage, digest):
            report.stages.append(StageReport(stage, SKIPPED_DONE))
            continue
        started = time.perf_counter()
        try:
            artifacts = stage_runners[stage](state)
        except Exception as exc:
            report.stages.append(
                StageReport(
                    stage,
                    FAILED,
                    duration_seconds=time.perf_counter() - started,
                    error=str(exc),
                )
            )
            failure = PipelineError(f"stage '{stage}' failed: {exc}")
            failure.__cause__ = exc
            break
        # dataset_id may only become known once the dataset stage has run.
        digest = _stage_digest(stage, config, state.dataset_id, options)
        sentinels.mark_done(stage, digest, state.dataset_id)
        report.stages.append(
            StageReport(
                stage,
                COMPLETED,
                duration_seconds=time.perf_counter() - started,
                artifacts=artifacts,
            )
        )

    report.dataset_id = state.dataset_id
    report_path = pipeline_log / "report.json"
    report_path.write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    report.report_path = report_path
    if failure is not None:
        raise failure
    return report


class _RunState:
    """Mutable cross-stage context of one pipeline invocation."""

    def __init__(self, config: PipelineConfig, workspace: Workspace,
                 options: PipelineOptions, trainer: TrainerAdapter):
        self.config = config
        self.workspace = workspace
        self.options = options
        self.trainer = trainer
        self._dataset_id: str | None = None

    @property
    def dataset_id(self) -> str | None:
        if self._dataset_id is None:
            self._dataset_id = resolve_dataset_id(self.config, self.workspace)
        return self._dataset_id

    def require_dataset_id(self) -> str:
        did = self.dataset_id
        if did is None:
            raise PipelineError("no dataset id: run the dataset stage or set DATASET.ID")
        return did


def _stage_env_check(state: _RunState) -> dict[str, Any]:
    ws = state.workspace
    ws.root.mkdir(parents=True, exist_ok=True)
    probe = ws.root / ".write_probe"
    try:
        probe.write_text("ok", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        raise PipelineError(f"workspace {ws.root} is not writable: {exc}") from exc
    usage = shutil.disk_usage(ws.root)
    if usage.free < state.options.min_free_bytes:
        raise PipelineError(
            f"insufficient disk space under {ws.root}: {usage.free} bytes free, "
            f"{state.options.min_free_bytes} required"
        )
    trainer_cmd = getattr(state.trainer, "command", None)
    if trainer_cmd:
        binary = trainer_cmd[0]
        if shutil.which(binary) is None and not Path(binary).exists():
            raise PipelineError(f"external trainer binary not found: {binary}")
    return {"free_bytes": usage.free, "workspace": ws.root}


def _stage_dataset(state: _RunState) -> dict[str, Any]:
    config, ws, options = state.config, state.workspace, state.options
    sources = sources_from_config(
        config.dataset.customized_datasets, config.dataset.huggingface_datasets
    )
    files = enumerate_corpus_files(
        sources, cache_dir=ws.remote_cache_dir, base_url=options.remote_base_url
    )
    if not files:
        raise PipelineError("configured corpora contain no files")
    plan = options.shard_plan(config)
    sharding = shard_corpus(files, plan, ws.spill_dir, ws.sharded_dir, options.n_workers)
    did = derive_dataset_id(sharding.shards, config.dataset.id or None)

    vocab = load_vocab(resolve_vocab(config.tokenizer.name_or_path))
    generation = generate_instances(
        sharding.shards,
        options.masking_policy(),
        vocab,
        ws.processed_dir,
        dataset_id=did,
        n_workers=options.n_workers,
    )
    state._dataset_id = did
    return {
        "dataset_id": did,
        "documents": sharding.num_documents,
        "instances": generation.num_instances,
        "peak_accounted_bytes": sharding.peak_accounted_bytes,
        "manifest": sharding.manifest_path,
        "processed_dir": ws.processed_dir,
        # Provenance: sources are concatenated in config order.
        "source_order": " | ".join(s.label for s in sources),
    }


def _stage_pretrain(state: _RunState) -> dict[str, Any]:
    config, ws, options = state.config, state.workspace, state.options
    if not (ws.processed_dir / "META.yaml").is_file():
        raise PipelineError(f"no processed dataset at {ws.processed_dir}")
    did = state.require_dataset_id()
    spec = options.schedule_spec(config.pretrain.num_steps)
    job = build_pretrain_job(
        config,
        spec,
        did,
        dataset_path=ws.processed_dir,
        output_dir=ws.pretrain_model_dir(did),
        log_dir=ws.pretrain_log_dir(did),
        early_stop=options.early_stop,
    )
    outcome = state.trainer.run(job)
    return {
        "dataset_id": did,
        "checkpoint": outcome.checkpoint_path,
        "eval_loss": outcome.eval_loss,
        "log": outcome.log_path,
    }


def _resolve_job_checkpoint(job: TrainerJob, checkpoint: str) -> TrainerJob:
    argv = list(job.argv)
    for k, token in enumerate(argv):
        if token == "--model_name_or_path" and k + 1 < len(argv):
            argv[k + 1] = checkpoint
    hyperparams = dict(job.hyperparams)
    hyperparams["checkpoint"] = checkpoint
    return replace(job, argv=tuple(argv), hyperparams=hyperparams)


def _stage_finetune(state: _RunState) -> dict[str, Any]:
    config, ws, options = state.config, state.workspace, state.options
    did = state.require_dataset_id()
    _, pretrain_checkpoint = parse_result_file(ws.pretrain_model_dir(did))
    if not pretrain_checkpoint.exists():
        raise PipelineError(f"pretrained checkpoint missing: {pretrain_checkpoint}")

    jobs = finetune_search(
        str(pretrain_checkpoint),
        options.tasks,
        space=options.search_space,
        stilt_sources=options.stilt_sources,
    )
    placed: list[TrainerJob] = []
    for job in jobs:
        run = job.job_id.rsplit("/", 1)[1]
        placed.append(
            replace(
                job,
                output_dir=ws.finetune_output_dir(did, job.task, run),
                log_dir=ws.finetune_log_dir(did, job.task, run),
            )
        )

    best: dict[str, tuple[TrainerJob, RunOutcome]] = {}

    def run_job(job: TrainerJob) -> tuple[TrainerJob, RunOutcome]:
        if job.stilt_parent is not None:
            parent_job, parent_outcome = best[job.stilt_parent]
            job = _resolve_job_checkpoint(job, str(parent_outcome.checkpoint_path))
        return job, state.trainer.run(job)

    outcomes: list[tuple[TrainerJob, RunOutcome]] = []
    for wave in schedule_waves(placed):
        if options.finetune_parallelism > 1:
            with ThreadPoolExecutor(max_workers=options.finetune_parallelism) as pool:
                wave_outcomes = list(pool.map(run_job, wave))
        else:
            wave_outcomes = [run_job(job) for job in wave]
        outcomes.extend(wave_outcomes)
        by_task: dict[str, list[tuple[TrainerJob, RunOutcome]]] = {}
        for job, outcome in wave_outcomes:
            by_task.setdefault(job.task, []).append((job, outcome))
        for task, pairs in by_task.items():
            best[task] = select_best(pairs)

    return {
        "dataset_id": did,
        "jobs": len(outcomes),
        **{
            f"best_{task}": f"{pair[0].job_id} metric={pair[1].val_metric}"
            for task, pair in sorted(best.items())
        },
    }


def _stage_collect(state: _RunState) -> dict[str, Any]:
    ws = state.workspace
    did = state.require_dataset_id()
    summary = summarize_val(ws.log_root, did, output_root=ws.output_root)
    best = collect_best_val(summary.results)
    zip_path = translate_test_result(best, ws.translated_dir(did))
    return {
        "dataset_id": did,
        "runs": len(summary.results),
        "skipped_runs": len(summary.skipped),
        "tasks": len(best),
        "submission_zip": zip_path,
    }
