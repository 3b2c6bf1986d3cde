"""GLUE benchmark task metadata: names, label vocabularies, metrics, file names.

The label orderings below define this toolkit's internal label ids (id =
position in ``labels``), matching the conventional dataset orderings; the
submission translator maps internal ids back to these strings. STS-B is a
regression task: predictions pass through as numeric strings.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class GlueTask:
    name: str
    submission_file: str  # member name inside the GLUE submission zip
    metric: str  # primary validation metric
    labels: tuple[str, ...] | None  # None => regression (numeric passthrough)


TASKS: dict[str, GlueTask] = {
    t.name: t
    for t in (
        GlueTask("CoLA", "CoLA.tsv", "matthews_corr", ("0", "1")),
        GlueTask("SST-2", "SST-2.tsv", "accuracy", ("0", "1")),
        GlueTask("MRPC", "MRPC.tsv", "f1", ("0", "1")),
        GlueTask("STS-B", "STS-B.tsv", "spearman_corr", None),
        GlueTask("QQP", "QQP.tsv", "f1", ("0", "1")),
        GlueTask("MNLI", "MNLI-m.tsv", "accuracy", ("entailment", "neutral", "contradiction")),
        GlueTask("QNLI", "QNLI.tsv", "accuracy", ("entailment", "not_entailment")),
        GlueTask("RTE", "RTE.tsv", "accuracy", ("entailment", "not_entailment")),
        GlueTask("WNLI", "WNLI.tsv", "accuracy", ("0", "1")),
    )
}

TASK_NAMES: tuple[str, ...] = tuple(TASKS)


def get_task(name: str) -> GlueTask:
    if name not in TASKS:
        raise KeyError(f"unknown GLUE task: {name!r} (known: {', '.join(TASK_NAMES)})")
    return TASKS[name]


def label_string(task: GlueTask, label_id: int) -> str:
    """Map an internal label id to its submission string (classification tasks)."""
    if task.labels is None:
        raise ValueError(f"{task.name} is a regression task; predictions pass through")
    if not 0 <= label_id < len(task.labels):
        raise ValueError(f"unknown label id {label_id} for task {task.name}")
    return task.labels[label_id]
