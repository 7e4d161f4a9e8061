"""A live run: pools, model, guidance state, journaling, reports.

RunSession is the single writer for one run's state. The CLI drives it
directly with batch annotators; the service wraps the same object with a
task queue. All round and guidance state is persisted under
runs/<run_id>/ so a crashed process can be resumed without losing any
completed human work.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Optional

from .config import ConfigError, RunConfig
from .core import LabeledSample, Sample
from .dataset import ImageStore, Manifest
from .feedback import (
    Context,
    FeedbackMemory,
    FeedbackProvider,
    SeenSet,
    StepResult,
    feedback_step,
    generate_initial_explanations,
)
from .journal import Journal
from .loop import BatchAnnotator, RoundState, ground_truth_annotator, run_round
from .metrics import EvalReport, ReportRow, SavingsReport, evaluate, savings
from .model import ComplianceModel, RemoteModel, SimulatedModel
from .prompts import TemplateRegistry
from .rules import RuleRegistry, load_registry
from .trainer import (
    HttpTrainer,
    SimulatedTrainer,
    SubprocessTrainer,
    TrainConfig,
    export_train_manifest,
)


class RunSession:
    def __init__(
        self,
        run_id: str,
        config: RunConfig,
        workspace: str | Path,
        registry: Optional[RuleRegistry] = None,
        templates: Optional[TemplateRegistry] = None,
        clock: Optional[Callable[[], str]] = None,
    ):
        self.run_id = run_id
        self.config = config
        self.workspace = Path(workspace)
        self.registry = registry or load_registry()
        self.templates = templates or TemplateRegistry()
        self.store = ImageStore(self.workspace)
        self.run_dir = self.workspace / "runs" / run_id
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.journal = Journal(self.run_dir / "journal.jsonl", clock=clock)

        manifest_path = self.workspace / config.manifest
        if not manifest_path.exists():
            raise ConfigError(f"manifest not found: {manifest_path}")
        self.manifest = Manifest.load(manifest_path)
        samples = self.manifest.samples
        if config.domain is not None:
            samples = [s for s in samples if s.domain == config.domain]
            if not samples:
                raise ConfigError(f"no samples for domain {config.domain!r}")
        self.train_samples = [s for s in samples if s.split == "train"]
        self.val_samples = [s for s in samples if s.split == "val"]
        self.test_samples = [s for s in samples if s.split == "test"]

        self.model: ComplianceModel = self._build_model()
        self._trainer = self._build_trainer()
        self.train_config = TrainConfig()
        self.loop_config = config.loop_config()
        self.feedback_config = config.feedback_config()

        self.state = RoundState(
            pool_unprobed=list(self.train_samples),
            budget_remaining=config.budget,
        )
        self.memory = FeedbackMemory()
        self.context = Context(base_prompt_id=config.context_base)
        self.seen = SeenSet()
        self.last_eval: Optional[EvalReport] = None
        self.last_version: Optional[str] = None
        self._round_active = False

        self.journal.append({"event": "run_created", "run_id": run_id, "config": config.to_dict()})

    # -- construction -----------------------------------------------------

    def _build_model(self) -> ComplianceModel:
        if self.config.simulator is not None:
            return SimulatedModel(
                self.config.simulator,
                store=self.store,
                templates={t.template_id: t for t in self.templates},
            )
        return RemoteModel(
            self.config.endpoint,
            store=self.store,
            registry=self.registry,
            templates={t.template_id: t for t in self.templates},
        )

    def _build_trainer(self):
        spec = self.config.trainer
        if spec.kind == "none":
            return None
        if spec.kind == "simulated":
            base = self.config.simulator.accuracy if self.config.simulator else 0.5
            return SimulatedTrainer(base_accuracy=base, a_max=spec.a_max, k=spec.k)
        if spec.kind == "subprocess":
            if not spec.command:
                raise ConfigError("subprocess trainer needs a command")
            return SubprocessTrainer(spec.command)
        if spec.kind == "http":
            if not spec.url:
                raise ConfigError("http trainer needs a url")
            return HttpTrainer(spec.url)
        raise ConfigError(f"unknown trainer kind {spec.kind!r}")

    def _trainer_hook(self, pool: list[LabeledSample], round_index: int) -> ComplianceModel:
        if self._trainer is None:
            return self.model
        manifest_path = self.run_dir / f"train_manifest_round{round_index}.jsonl"
        export_train_manifest(
            pool,
            [s.sample_id for s in self.val_samples],
            self.train_config,
            manifest_path,
            prompt_ref=self.config.train_prompt,
        )
        version, model = self._trainer.train(manifest_path, self.model, parent=self.last_version)
        self.last_version = version.version_id
        self.journal.append(
            {"event": "trained", "version": version.version_id, "round": round_index}
        )
        return model

    # -- rounds -----------------------------------------------------------

    def default_annotator(self) -> Optional[BatchAnnotator]:
        if self.config.human == "auto":
            return ground_truth_annotator
        if self.config.human == "none":
            return None
        raise ConfigError("queue mode needs an external annotator")

    def run_label_round(self, annotator: Optional[BatchAnnotator]) -> RoundState:
        if self._round_active:
            raise RuntimeError("a round is already active")
        self._round_active = True
        try:
            round_index = self.state.round
            self.journal.append({"event": "round_started", "round": round_index})
            probe_templates = (
                self.templates.get(self.config.probe_a),
                self.templates.get(self.config.probe_b),
            )
            self.state, self.model = run_round(
                self.state,
                self.model,
                annotator,
                self._trainer_hook,
                probe_templates,
                self.loop_config,
                context=self.context.view() if self.context.entries else None,
            )
            record = self.state.history[-1] if self.state.history else None
            if record is not None and record.round == round_index:
                record.model_version = self.last_version
                if self.val_samples and all(
                    s.ground_truth is not None for s in self.val_samples
                ):
                    report = self.evaluate_split("val")
                    record.macro_f1 = report.macro_f1
                    record.accuracy = report.accuracy
                    self.last_eval = report
                self.journal.append({"event": "round_completed", "record": record.to_dict()})
            self.persist()
            return self.state
        finally:
            self._round_active = False

    def run_feedback_round(
        self,
        provider: FeedbackProvider,
        limit: Optional[int] = None,
        samples: Optional[list[Sample]] = None,
        on_result: Optional[Callable[[Sample, StepResult], None]] = None,
    ) -> list[StepResult]:
        if self._round_active:
            raise RuntimeError("a round is already active")
        self._round_active = True
        try:
            self._ensure_initial_explanations()
            if samples is None:
                samples = self.train_samples[: limit or self.feedback_config.batch_size]
            self.journal.append({"event": "feedback_round_started", "n": len(samples)})
            template = self.templates.get(self.config.context_base)
            results: list[StepResult] = []
            for sample in samples:
                result = feedback_step(
                    sample,
                    self.model,
                    self.memory,
                    self.context,
                    self.seen,
                    provider,
                    template,
                    self.feedback_config,
                    round_index=self.state.round,
                )
                before = self.context.version
                self.context = result.context
                if result.entry is not None:
                    self.journal.append(
                        {
                            "event": "feedback_recorded",
                            "entry": result.entry.to_dict(),
                            "outcome": result.outcome.value,
                        }
                    )
                if self.context.version != before:
                    self.context.save(self.run_dir)
                    self.journal.append(
                        {"event": "context_committed", "version": self.context.version}
                    )
                if on_result is not None:
                    on_result(sample, result)
                results.append(result)
            self.memory.save(self.run_dir / "feedback.jsonl")
            return results
        finally:
            self._round_active = False

    def _ensure_initial_explanations(self) -> None:
        """Generate and persist one explanation per train sample, once."""
        path = self.run_dir / "explanations.jsonl"
        if path.exists():
            return
        template = self.templates.get(self.config.context_base)
        records = generate_initial_explanations(
            self.train_samples, self.model, template, self.config.parallelism
        )
        with path.open("w", encoding="utf-8") as handle:
            for record in records:
                handle.write(json.dumps(record, sort_keys=True) + "\n")
        self.journal.append({"event": "explanations_generated", "n": len(records)})

    # -- evaluation and reporting ------------------------------------------

    def evaluate_split(self, split: str, strict: bool = False) -> EvalReport:
        samples = {"train": self.train_samples, "val": self.val_samples, "test": self.test_samples}[split]
        template = self.templates.get(self.config.eval_template)
        context = self.context.view() if self.context.entries else None
        from .model import batch_query

        predictions = batch_query(
            self.model, samples, template, context, self.config.parallelism
        )
        return evaluate(list(zip(samples, predictions)), strict=strict)

    def savings(self) -> SavingsReport:
        return savings(self.state.n_human_cum, self.state.n_pseudo_cum)

    def report_rows(self, method: str = "Active Learning") -> list[ReportRow]:
        rows = []
        for record in self.state.history:
            if record.training_samples == 0:
                continue
            saving = savings(record.accum_manual, record.accum_pseudo)
            rows.append(
                ReportRow(
                    method=method if record.round == 0 else "",
                    al_round=record.round,
                    num_manual=record.num_manual,
                    accum_manual=record.accum_manual,
                    num_pseudo=record.accum_pseudo,
                    training_samples=record.training_samples,
                    annotation_saved_percent=saving.saved_percent,
                    macro_f1=record.macro_f1,
                    accuracy=record.accuracy,
                )
            )
        return rows

    def embeddings_export(self) -> list[tuple[str, str, Optional[str], tuple[float, ...]]]:
        rows = []
        for item in self.state.pool_labeled:
            embedding = self.model.embed(item.sample.image_ref)
            rows.append(
                (item.sample.sample_id, item.sample.split, item.label.value, embedding.vector)
            )
        return rows

    # -- persistence --------------------------------------------------------

    def persist(self) -> None:
        completed = self.state.round - 1
        self.state.save(self.run_dir / f"round_{completed}.json")
        with (self.run_dir / "embeddings.jsonl").open("w", encoding="utf-8") as handle:
            for item in self.state.pool_labeled:
                embedding = self.model.embed(item.sample.image_ref)
                handle.write(
                    json.dumps(
                        {"sample_id": item.sample.sample_id, "vector": list(embedding.vector)}
                    )
                    + "\n"
                )

    def summary(self) -> dict:
        return {
            "run_id": self.run_id,
            "round": self.state.round,
            "budget_remaining": self.state.budget_remaining,
            "n_human": self.state.n_human_cum,
            "n_pseudo": self.state.n_pseudo_cum,
            "pool_remaining": len(self.state.pool_unprobed),
            "context_version": self.context.version,
            "active": self._round_active,
        }


def human_labels_from_journal(run_dir: str | Path) -> dict[str, str]:
    """Recover sample_id -> label for every Done label task in the journal.

    Used on restart so completed human work is never requested twice.
    """
    journal_path = Path(run_dir) / "journal.jsonl"
    labels: dict[str, str] = {}
    if not journal_path.exists():
        return labels
    for line in journal_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        if record.get("event") == "task_done" and record.get("mode") == "Label":
            labels[record["sample_id"]] = record["label"]
    return labels
