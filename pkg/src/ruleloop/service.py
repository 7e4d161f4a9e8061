"""HTTP service: run lifecycle, annotation task queue, metrics, images.

One process, one workspace. Each run's mutations funnel through its session
under a per-run lock; queue mutations hit the journal before the request is
acknowledged, so a restart never forgets completed human work. Label rounds
in queue mode execute on a worker thread that parks while tasks are pending.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from fastapi import Body, FastAPI, HTTPException, Query, Response
from fastapi.responses import HTMLResponse, JSONResponse
from fastapi.staticfiles import StaticFiles

from .config import ConfigError, RunConfig
from .core import ComplianceLabel, Prediction, Sample, UnrecognisedLabel, parse_label
from .feedback import StepOutcome, StepResult, feedback_valid
from .loop import AnnotationTimeout, ProbeResult, RoundState
from .prompts import TemplateRegistry
from .rules import load_registry, render_ruleset
from .session import RunSession, human_labels_from_journal


@dataclass
class AnnotationTask:
    task_id: str
    run_id: str
    sample_id: str
    image_ref: str
    domain: str
    rule_category_id: str
    rule_rendering: str
    assumptions: list[str]
    mode: str  # Label | Feedback
    prediction: dict
    state: str = "Pending"
    submitted_label: Optional[ComplianceLabel] = None
    submitted_text: Optional[str] = None
    result: Optional[dict] = None
    submit_event: threading.Event = field(default_factory=threading.Event)
    result_event: threading.Event = field(default_factory=threading.Event)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "run_id": self.run_id,
            "sample_id": self.sample_id,
            "image_url": f"/api/images/{self.image_ref}",
            "domain": self.domain,
            "rule_category_id": self.rule_category_id,
            "rule_rendering": self.rule_rendering,
            "assumptions": self.assumptions,
            "mode": self.mode,
            "state": self.state,
            "prediction": self.prediction,
        }


class RunHandle:
    """A session plus its queue, worker thread and lock."""

    def __init__(self, session: RunSession):
        self.session = session
        self.lock = threading.Lock()
        self.tasks: dict[str, AnnotationTask] = {}
        self.phase: Optional[str] = None
        self.worker: Optional[threading.Thread] = None
        self.error: Optional[str] = None
        self.recovered_labels: dict[str, str] = human_labels_from_journal(session.run_dir)
        self._task_seq = 0

    def new_task(self, sample: Sample, mode: str, prediction: Optional[Prediction]) -> AnnotationTask:
        category = self.session.registry.get(sample.rule_category_id)
        self._task_seq += 1
        task = AnnotationTask(
            task_id=f"{self.session.run_id}-t{self._task_seq:05d}",
            run_id=self.session.run_id,
            sample_id=sample.sample_id,
            image_ref=sample.image_ref,
            domain=sample.domain,
            rule_category_id=sample.rule_category_id,
            rule_rendering=render_ruleset(category),
            assumptions=list(category.assumptions),
            mode=mode,
            prediction=(
                {
                    "label": prediction.label.value if prediction.label else None,
                    "confidence": prediction.confidence,
                    "explanation": prediction.explanation,
                }
                if prediction is not None
                else {}
            ),
        )
        with self.lock:
            self.tasks[task.task_id] = task
        self.session.journal.append(
            {
                "event": "task_created",
                "task_id": task.task_id,
                "sample_id": sample.sample_id,
                "mode": mode,
            }
        )
        return task

    def wait_for(self, task: AnnotationTask) -> None:
        timeout = self.session.config.annotation_timeout_s
        if not task.submit_event.wait(timeout=timeout):
            raise AnnotationTimeout(f"task {task.task_id} not resolved in {timeout}s")

    def queue_annotator(self, batch: list[ProbeResult]) -> dict:
        """Create one Label task per weak sample, then wait for all of them."""
        answers: dict[str, Optional[ComplianceLabel]] = {}
        pending: list[tuple[ProbeResult, AnnotationTask]] = []
        for probe_result in batch:
            recovered = self.recovered_labels.get(probe_result.sample_id)
            if recovered is not None:
                answers[probe_result.sample_id] = parse_label(recovered)
                continue
            shown = probe_result.pred_b if probe_result.pred_b.parse_ok else probe_result.pred_a
            task = self.new_task(probe_result.sample, "Label", shown)
            pending.append((probe_result, task))
        for probe_result, task in pending:
            self.wait_for(task)
            answers[probe_result.sample_id] = task.submitted_label
        return answers

    def queue_provider(self, sample: Sample, prediction: Prediction) -> Optional[str]:
        task = self.new_task(sample, "Feedback", prediction)
        self._current_feedback_task = task
        self.wait_for(task)
        return task.submitted_text

    def feedback_result(self, sample: Sample, result: StepResult) -> None:
        task = getattr(self, "_current_feedback_task", None)
        if task is None or task.sample_id != sample.sample_id:
            return
        if result.outcome in (StepOutcome.STRONG,):
            return
        task.result = {
            "accepted": result.outcome is StepOutcome.ACCEPTED,
            "outcome": result.outcome.value,
            "flipped_samples": list(result.flipped),
            "revised": result.revised.to_dict() if result.revised else None,
            "context_version": result.context.version,
        }
        task.result_event.set()
        self._current_feedback_task = None


class RunManager:
    def __init__(self, workspace: str | Path, clock=None):
        self.workspace = Path(workspace)
        self.registry = load_registry()
        self.templates = TemplateRegistry()
        self.clock = clock
        self.handles: dict[str, RunHandle] = {}
        self._lock = threading.Lock()
        self._run_seq = 0

    def create_run(self, config: RunConfig, run_id: Optional[str] = None) -> RunHandle:
        with self._lock:
            self._run_seq += 1
            run_id = run_id or f"run-{self._run_seq:04d}"
            if run_id in self.handles:
                raise ConfigError(f"run {run_id} already exists")
        session = RunSession(
            run_id, config, self.workspace,
            registry=self.registry, templates=self.templates, clock=self.clock,
        )
        handle = RunHandle(session)
        with self._lock:
            self.handles[run_id] = handle
        return handle

    def restore_run(self, run_id: str) -> RunHandle:
        """Rebuild a run from its journal and latest round snapshot."""
        run_dir = self.workspace / "runs" / run_id
        journal_path = run_dir / "journal.jsonl"
        if not journal_path.exists():
            raise KeyError(f"no journal for run {run_id}")
        config_record = None
        last_accuracy = None
        for line in journal_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            if record.get("event") == "run_created":
                config_record = record["config"]
            elif record.get("event") == "trained" and "accuracy" in record:
                last_accuracy = record["accuracy"]
        if config_record is None:
            raise KeyError(f"run {run_id} journal has no run_created record")
        config = RunConfig.from_dict(config_record)
        session = RunSession(
            run_id, config, self.workspace,
            registry=self.registry, templates=self.templates, clock=self.clock,
        )
        rounds = sorted(run_dir.glob("round_*.json"))
        if rounds:
            session.state = RoundState.load(rounds[-1])
        if last_accuracy is not None and config.simulator is not None:
            from dataclasses import replace

            session.model = session.model.with_config(
                replace(session.model.config, accuracy=last_accuracy)
            )
        handle = RunHandle(session)
        with self._lock:
            self.handles[run_id] = handle
        return handle

    def get(self, run_id: str) -> RunHandle:
        try:
            return self.handles[run_id]
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}") from None

    def find_task(self, task_id: str) -> tuple[RunHandle, AnnotationTask]:
        for handle in self.handles.values():
            task = handle.tasks.get(task_id)
            if task is not None:
                return handle, task
        raise HTTPException(status_code=404, detail=f"unknown task {task_id}")


def _fallback_console() -> str:
    return (
        "<!doctype html><html><head><title>ruleloop</title></head><body>"
        "<h1>ruleloop service</h1>"
        "<p>The annotation console assets are not installed. "
        "Build the frontend and pass its dist directory to <code>serve --console</code>, "
        "or use the API under <code>/api</code>.</p>"
        "</body></html>"
    )


def create_app(
    workspace: str | Path,
    console_dir: Optional[str | Path] = None,
    clock=None,
) -> FastAPI:
    manager = RunManager(workspace, clock=clock)
    app = FastAPI(title="ruleloop", version="0.1.0")
    app.state.manager = manager

    @app.get("/api/runs")
    def list_runs() -> list[dict]:
        return [
            {**handle.session.summary(), "phase": handle.phase, "error": handle.error}
            for handle in manager.handles.values()
        ]

    @app.post("/api/runs", status_code=201)
    def create_run(body: dict = Body(...)) -> dict:
        run_id = body.pop("run_id", None)
        try:
            config = RunConfig.from_dict(body)
            handle = manager.create_run(config, run_id)
        except ConfigError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return {"run_id": handle.session.run_id}

    @app.post("/api/runs/{run_id}/rounds", status_code=202)
    def start_round(run_id: str, body: Optional[dict] = Body(default=None)) -> dict:
        handle = manager.get(run_id)
        phase = (body or {}).get("phase", "label")
        if phase not in ("label", "feedback"):
            raise HTTPException(status_code=422, detail=f"unknown phase {phase!r}")
        with handle.lock:
            if handle.phase is not None:
                raise HTTPException(status_code=409, detail=f"{handle.phase} round active")
            handle.phase = phase
            handle.error = None
        session = handle.session

        def _label_worker():
            try:
                annotator = (
                    handle.queue_annotator
                    if session.config.human == "queue"
                    else session.default_annotator()
                )
                session.run_label_round(annotator)
            except Exception as exc:  # noqa: BLE001 - surfaced via run summary
                handle.error = str(exc)
                session.journal.append({"event": "round_aborted", "error": str(exc)})
            finally:
                handle.phase = None

        def _feedback_worker():
            try:
                if session.config.human == "queue":
                    session.run_feedback_round(
                        handle.queue_provider, on_result=handle.feedback_result
                    )
                else:
                    session.run_feedback_round(lambda sample, pred: None)
            except Exception as exc:  # noqa: BLE001
                handle.error = str(exc)
                session.journal.append({"event": "feedback_round_aborted", "error": str(exc)})
            finally:
                handle.phase = None

        worker_fn = _label_worker if phase == "label" else _feedback_worker
        if session.config.human == "queue":
            handle.worker = threading.Thread(target=worker_fn, daemon=True)
            handle.worker.start()
        else:
            worker_fn()
            if handle.error:
                raise HTTPException(status_code=500, detail=handle.error)
        return {"run_id": run_id, "phase": phase, "round": session.state.round}

    @app.get("/api/runs/{run_id}/queue")
    def get_queue(run_id: str, mode: Optional[str] = Query(default=None)) -> list[dict]:
        handle = manager.get(run_id)
        if mode is not None and mode not in ("Label", "Feedback"):
            raise HTTPException(status_code=422, detail=f"unknown mode {mode!r}")
        with handle.lock:
            return [
                task.to_dict()
                for task in handle.tasks.values()
                if task.state == "Pending" and (mode is None or task.mode == mode)
            ]

    @app.post("/api/tasks/{task_id}/claim")
    def claim_task(task_id: str) -> dict:
        handle, task = manager.find_task(task_id)
        with handle.lock:
            if task.state != "Pending":
                raise HTTPException(status_code=409, detail=f"task is {task.state}")
            task.state = "Claimed"
        handle.session.journal.append(
            {"event": "task_claimed", "task_id": task_id, "mode": task.mode}
        )
        return task.to_dict()

    @app.post("/api/tasks/{task_id}/label")
    def label_task(task_id: str, body: dict = Body(...)) -> dict:
        handle, task = manager.find_task(task_id)
        if task.mode != "Label":
            raise HTTPException(status_code=422, detail="not a Label task")
        try:
            label = parse_label(str(body.get("label", "")))
        except UnrecognisedLabel as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        with handle.lock:
            if task.state not in ("Pending", "Claimed"):
                raise HTTPException(status_code=409, detail=f"task is {task.state}")
            task.state = "Done"
            task.submitted_label = label
        handle.session.journal.append(
            {
                "event": "task_done",
                "task_id": task_id,
                "mode": "Label",
                "sample_id": task.sample_id,
                "label": label.value,
            }
        )
        handle.recovered_labels[task.sample_id] = label.value
        task.submit_event.set()
        return {"task_id": task_id, "state": task.state, "label": label.value}

    @app.post("/api/tasks/{task_id}/feedback")
    def feedback_task(task_id: str, body: dict = Body(...)) -> dict:
        handle, task = manager.find_task(task_id)
        if task.mode != "Feedback":
            raise HTTPException(status_code=422, detail="not a Feedback task")
        text = str(body.get("text", ""))
        if not feedback_valid(text, handle.session.feedback_config.min_chars):
            raise HTTPException(
                status_code=422,
                detail=(
                    f"feedback too short (min {handle.session.feedback_config.min_chars}"
                    " characters); please try again"
                ),
            )
        with handle.lock:
            if task.state not in ("Pending", "Claimed"):
                raise HTTPException(status_code=409, detail=f"task is {task.state}")
            task.state = "Done"
            task.submitted_text = text
        handle.session.journal.append(
            {
                "event": "task_done",
                "task_id": task_id,
                "mode": "Feedback",
                "sample_id": task.sample_id,
                "text": text,
            }
        )
        task.submit_event.set()
        if not task.result_event.wait(timeout=120.0):
            raise HTTPException(status_code=504, detail="stability check did not finish")
        return {"task_id": task_id, "state": task.state, **(task.result or {})}

    @app.post("/api/tasks/{task_id}/skip")
    def skip_task(task_id: str) -> dict:
        handle, task = manager.find_task(task_id)
        with handle.lock:
            if task.state not in ("Pending", "Claimed"):
                raise HTTPException(status_code=409, detail=f"task is {task.state}")
            task.state = "Skipped"
        handle.session.journal.append(
            {"event": "task_skipped", "task_id": task_id, "mode": task.mode}
        )
        task.submit_event.set()
        return {"task_id": task_id, "state": task.state}

    @app.get("/api/runs/{run_id}/metrics")
    def run_metrics(run_id: str) -> dict:
        handle = manager.get(run_id)
        session = handle.session
        state = session.state
        saving = None
        if state.n_human_cum + state.n_pseudo_cum > 0:
            saving = session.savings().to_dict()
        return {
            "summary": session.summary(),
            "savings": saving,
            "eval": session.last_eval.to_dict() if session.last_eval else None,
        }

    @app.get("/api/images/{image_ref}")
    def get_image(image_ref: str) -> Response:
        path = manager.workspace / "images" / image_ref[:2] / f"{image_ref}.png"
        if not path.exists():
            raise HTTPException(status_code=404, detail="image not found")
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.get("/api/schema")
    def api_schema() -> JSONResponse:
        schema_path = resources.files("ruleloop").joinpath("data/api_schema.json")
        return JSONResponse(json.loads(schema_path.read_text(encoding="utf-8")))

    console = Path(console_dir) if console_dir else None
    if console is not None and console.is_dir():
        app.mount("/", StaticFiles(directory=console, html=True), name="console")
    else:

        @app.get("/", response_class=HTMLResponse)
        def index() -> str:
            return _fallback_console()

    return app
