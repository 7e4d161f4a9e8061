"""Guidance loop: feedback retrieval, stability-gated context updates, memory.

Annotator feedback on weak samples is proposed as a permanent addition to
the prompt context. Before committing, every previously seen sample is
re-predicted under the proposed context; if any sample that was correct
under the current context would become incorrect, the update is reverted.
Accepted entries join a memory retrievable by embedding similarity, so
guidance written for one scene transfers to lookalike scenes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

from .core import ComplianceLabel, Prediction, Sample
from .model import ComplianceModel, ContextEntry, ContextView, Embedding, batch_query, cosine
from .prompts import PromptTemplate

MIN_FEEDBACK_CHARS = 12
DEFAULT_TAU = 0.85
DEFAULT_MAX_CONTEXT_ENTRIES = 20


class FeedbackStatus(Enum):
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"
    SKIPPED = "Skipped"


@dataclass(frozen=True)
class FeedbackEntry:
    entry_id: str
    sample_id: str
    embedding: Embedding
    text: str
    accepted_round: int
    status: FeedbackStatus

    def to_dict(self) -> dict:
        return {
            "entry_id": self.entry_id,
            "sample_id": self.sample_id,
            "text": self.text,
            "status": self.status.value,
            "accepted_round": self.accepted_round,
            "vector": list(self.embedding.vector),
        }


class FeedbackMemory:
    """Append-only record of all feedback; only accepted entries retrieve."""

    def __init__(self):
        self.entries: list[FeedbackEntry] = []

    def add(self, entry: FeedbackEntry) -> None:
        self.entries.append(entry)

    def accepted(self) -> list[FeedbackEntry]:
        return [e for e in self.entries if e.status is FeedbackStatus.ACCEPTED]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as handle:
            for entry in self.entries:
                handle.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")


def retrieve(
    memory: FeedbackMemory, query_embedding: Embedding, tau: float = DEFAULT_TAU
) -> Optional[FeedbackEntry]:
    """Most similar accepted entry at or above tau; recency breaks ties."""
    best: Optional[tuple[float, int, int, FeedbackEntry]] = None
    for index, entry in enumerate(memory.entries):
        if entry.status is not FeedbackStatus.ACCEPTED:
            continue
        similarity = cosine(entry.embedding, query_embedding)
        if similarity < tau:
            continue
        key = (similarity, entry.accepted_round, index)
        if best is None or key > best[:3]:
            best = (*key, entry)
    return best[3] if best else None


@dataclass(frozen=True)
class Context:
    """The committed guidance context: base template plus accepted entries."""

    base_prompt_id: str = "E1"
    entries: tuple[FeedbackEntry, ...] = ()
    version: int = 0
    evicted: int = 0

    def view(self) -> ContextView:
        return ContextView(
            base_id=self.base_prompt_id,
            entries=tuple(
                ContextEntry(text=e.text, embedding=e.embedding) for e in self.entries
            ),
        )

    @property
    def hash(self) -> str:
        return self.view().digest()

    def with_entry(self, entry: FeedbackEntry, max_entries: int = DEFAULT_MAX_CONTEXT_ENTRIES) -> "Context":
        entries = self.entries + (entry,)
        evicted = self.evicted
        while len(entries) > max_entries:
            entries = entries[1:]  # oldest-first eviction
            evicted += 1
        return Context(
            base_prompt_id=self.base_prompt_id,
            entries=entries,
            version=self.version + 1,
            evicted=evicted,
        )

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"context_v{self.version}.txt"
        lines = [f"Guidance: {e.text}" for e in self.entries]
        lines.append(f"[base: {self.base_prompt_id}]")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


@dataclass
class SeenRecord:
    sample: Sample
    label: Optional[ComplianceLabel]
    last_prediction: Prediction

    def correct(self) -> Optional[bool]:
        if self.label is None:
            return None
        if not self.last_prediction.parse_ok:
            return False
        return self.last_prediction.label is self.label


class SeenSet:
    """Append-only tracking of samples already judged under some context."""

    def __init__(self):
        self.records: list[SeenRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def add(self, sample: Sample, label: Optional[ComplianceLabel], prediction: Prediction) -> None:
        self.records.append(SeenRecord(sample=sample, label=label, last_prediction=prediction))

    def refresh(self, predictions: dict[str, Prediction]) -> None:
        """Adopt re-predictions made under a just-committed context."""
        for record in self.records:
            new = predictions.get(record.sample.sample_id)
            if new is not None:
                record.last_prediction = new


@dataclass(frozen=True)
class StabilityReport:
    stable: bool
    flipped: tuple[str, ...]
    predictions: dict  # sample_id -> Prediction under the proposed context


def check_stability(
    model: ComplianceModel,
    seen: SeenSet,
    proposed: Context,
    template: PromptTemplate,
    criterion: str = "flip",
    parallelism: int = 8,
) -> StabilityReport:
    """Re-predict all seen samples under the proposed context.

    "flip" rejects the proposal when any sample correct under the current
    context becomes incorrect; "aggregate" only requires overall accuracy on
    labelled seen samples not to drop. A total transport failure is treated
    as unstable, which is the conservative side.
    """
    if not seen.records:
        return StabilityReport(stable=True, flipped=(), predictions={})
    samples = [record.sample for record in seen.records]
    view = proposed.view()
    predictions = batch_query(model, samples, template, view, parallelism)
    if all(not p.parse_ok for p in predictions):
        return StabilityReport(
            stable=False,
            flipped=tuple(record.sample.sample_id for record in seen.records),
            predictions={s.sample_id: p for s, p in zip(samples, predictions)},
        )
    by_id = {s.sample_id: p for s, p in zip(samples, predictions)}

    flipped = []
    before_correct = 0
    after_correct = 0
    for record in seen.records:
        was = record.correct()
        if was is None:
            continue
        new = by_id[record.sample.sample_id]
        now = new.parse_ok and new.label is record.label
        before_correct += int(was)
        after_correct += int(now)
        if was and not now:
            flipped.append(record.sample.sample_id)
    if criterion == "aggregate":
        stable = after_correct >= before_correct
    else:
        stable = not flipped
    return StabilityReport(stable=stable, flipped=tuple(flipped), predictions=by_id)


class StepOutcome(Enum):
    STRONG = "strong"  # not weak: no human interaction
    ACCEPTED = "accepted"
    REJECTED_UNSTABLE = "rejected_unstable"
    REJECTED_FLOOR = "rejected_floor"
    SKIPPED = "skipped"


@dataclass
class StepResult:
    outcome: StepOutcome
    context: Context
    prediction: Prediction
    revised: Optional[Prediction] = None
    flipped: tuple[str, ...] = ()
    entry: Optional[FeedbackEntry] = None


@dataclass(frozen=True)
class FeedbackConfig:
    tau: float = DEFAULT_TAU
    theta: Optional[float] = 0.9  # fixed weakness bar for the guidance loop
    max_context_entries: int = DEFAULT_MAX_CONTEXT_ENTRIES
    min_chars: int = MIN_FEEDBACK_CHARS
    stability_criterion: str = "flip"
    parallelism: int = 8
    batch_size: int = 32


# Returns feedback text for a weak sample, or None to skip.
FeedbackProvider = Callable[[Sample, Prediction], Optional[str]]


def feedback_valid(text: Optional[str], min_chars: int = MIN_FEEDBACK_CHARS) -> bool:
    return text is not None and len(text.strip()) >= min_chars


def generate_initial_explanations(
    samples: Sequence[Sample],
    model: ComplianceModel,
    template: PromptTemplate,
    parallelism: int = 8,
) -> list[dict]:
    """One stored explanation record per sample; failures stay in-band."""
    predictions = batch_query(model, samples, template, None, parallelism)
    records = []
    for sample, pred in zip(samples, predictions):
        records.append(
            {
                "sample_id": sample.sample_id,
                "parse_ok": pred.parse_ok,
                "label": pred.label.value if pred.label else None,
                "explanation": pred.explanation,
            }
        )
    return records


def _is_weak(pred: Prediction, theta: Optional[float]) -> bool:
    if not pred.parse_ok or pred.label is None:
        return True
    if pred.confidence is None:
        return True
    return theta is not None and pred.confidence < theta


def feedback_step(
    sample: Sample,
    model: ComplianceModel,
    memory: FeedbackMemory,
    context: Context,
    seen: SeenSet,
    provider: FeedbackProvider,
    template: PromptTemplate,
    config: FeedbackConfig = FeedbackConfig(),
    round_index: int = 0,
) -> StepResult:
    """One pass of the per-sample guidance protocol.

    Retrieved prior feedback rides along for this query only; feedback the
    human supplies is proposed as a permanent entry and committed only when
    the stability check passes. The sample always joins the seen set.
    """
    query_embedding = model.embed(sample.image_ref)
    prior = retrieve(memory, query_embedding, config.tau)
    transient = context.view()
    if prior is not None:
        transient = transient.extended(ContextEntry(text=prior.text, embedding=prior.embedding))
    prediction = model.query(sample, template, transient)

    truth = sample.ground_truth
    result = StepResult(outcome=StepOutcome.STRONG, context=context, prediction=prediction)

    if not _is_weak(prediction, config.theta):
        seen.add(sample, truth, prediction)
        return result

    text = provider(sample, prediction)
    if text is None:
        seen.add(sample, truth, prediction)
        result.outcome = StepOutcome.SKIPPED
        return result
    if not feedback_valid(text, config.min_chars):
        seen.add(sample, truth, prediction)
        result.outcome = StepOutcome.REJECTED_FLOOR
        return result

    entry = FeedbackEntry(
        entry_id=f"fb-{len(memory.entries):05d}",
        sample_id=sample.sample_id,
        embedding=query_embedding,
        text=text.strip(),
        accepted_round=round_index,
        status=FeedbackStatus.ACCEPTED,
    )
    revised_view = context.view().extended(ContextEntry(text=entry.text, embedding=entry.embedding))
    revised = model.query(sample, template, revised_view)
    result.revised = revised

    proposed = context.with_entry(entry, config.max_context_entries)
    report = check_stability(
        model, seen, proposed, template,
        criterion=config.stability_criterion, parallelism=config.parallelism,
    )
    if report.stable:
        memory.add(entry)
        seen.refresh(report.predictions)
        seen.add(sample, truth, revised)
        result.outcome = StepOutcome.ACCEPTED
        result.context = proposed
        result.entry = entry
    else:
        rejected = replace(entry, status=FeedbackStatus.REJECTED)
        memory.add(rejected)
        seen.add(sample, truth, prediction)
        result.outcome = StepOutcome.REJECTED_UNSTABLE
        result.flipped = report.flipped
        result.entry = rejected
    return result


def run_feedback_pass(
    samples: Sequence[Sample],
    model: ComplianceModel,
    memory: FeedbackMemory,
    context: Context,
    seen: SeenSet,
    provider: FeedbackProvider,
    template: PromptTemplate,
    config: FeedbackConfig = FeedbackConfig(),
    round_index: int = 0,
) -> tuple[Context, list[StepResult]]:
    """Sequential guidance pass over a sample batch (order is the protocol)."""
    results = []
    for sample in samples:
        result = feedback_step(
            sample, model, memory, context, seen, provider, template, config, round_index
        )
        context = result.context
        results.append(result)
    return context, results
