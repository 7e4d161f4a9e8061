"""Fine-tuning boundary: manifest export plus external or simulated training.

Training never runs in-process. The external path hands a weighted manifest
to a subprocess or HTTP hook and waits for a version receipt; the simulated
path returns a new model whose accuracy follows a saturating curve in the
manifest's total label weight. The curve is a test fixture standing in for
"more supervision helps", nothing more.
"""

from __future__ import annotations

import json
import math
import shlex
import subprocess
from dataclasses import dataclass, replace
from hashlib import sha256
from pathlib import Path
from typing import Optional, Sequence

from .core import LabeledSample
from .model import SimulatedModel


class EmptyPool(ValueError):
    """No labelled samples to export."""


class TrainerUnavailable(RuntimeError):
    """External trainer hook could not be reached or started."""


class TrainerFailed(RuntimeError):
    """External trainer ran but reported failure."""

    def __init__(self, receipt: str):
        super().__init__(f"trainer failed: {receipt}")
        self.receipt = receipt


@dataclass(frozen=True)
class TrainConfig:
    lora_rank: int = 8
    lora_alpha: int = 8
    lora_dropout: float = 0.1
    learning_rate: float = 1e-5
    batch_size: int = 1
    grad_accum: int = 8
    max_epochs: int = 10
    early_stop_metric: str = "validation edit distance"
    patience: int = 3
    warmup_steps: int = 50
    grad_clip: float = 1.0

    def __post_init__(self):
        numeric = (
            self.lora_rank, self.lora_alpha, self.lora_dropout, self.learning_rate,
            self.batch_size, self.grad_accum, self.max_epochs, self.patience,
            self.warmup_steps, self.grad_clip,
        )
        if any(v <= 0 for v in numeric):
            raise ValueError("train hyperparameters must be positive")

    def to_dict(self) -> dict:
        return {
            "lora_rank": self.lora_rank,
            "lora_alpha": self.lora_alpha,
            "lora_dropout": self.lora_dropout,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "grad_accum": self.grad_accum,
            "max_epochs": self.max_epochs,
            "early_stop_metric": self.early_stop_metric,
            "patience": self.patience,
            "warmup_steps": self.warmup_steps,
            "grad_clip": self.grad_clip,
        }


@dataclass(frozen=True)
class ModelVersion:
    version_id: str
    parent_version: Optional[str]
    train_manifest_ref: str
    metrics_at_train: Optional[dict] = None


def export_train_manifest(
    pool_labeled: Sequence[LabeledSample],
    val_sample_ids: Sequence[str],
    config: TrainConfig,
    path: str | Path,
    prompt_ref: str = "C4",
) -> Path:
    """Write the weighted training manifest as JSONL, header record first.

    Rows are ordered by sample_id so identical pools produce identical bytes.
    """
    if not pool_labeled:
        raise EmptyPool("cannot export an empty training pool")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "type": "train_config",
        "train_config": config.to_dict(),
        "val_samples": sorted(val_sample_ids),
        "prompt_ref": prompt_ref,
    }
    rows = sorted(pool_labeled, key=lambda item: item.sample.sample_id)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(json.dumps(header, sort_keys=True) + "\n")
        for item in rows:
            record = {
                "sample_id": item.sample.sample_id,
                "image_ref": item.sample.image_ref,
                "rule_category_id": item.sample.rule_category_id,
                "rendered_prompt_ref": prompt_ref,
                "label": item.label.value,
                "weight": item.weight,
                "source": item.source.value,
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def manifest_weight(path: str | Path) -> float:
    """Total label weight of an exported manifest."""
    total = 0.0
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        if record.get("type") == "train_config":
            continue
        total += float(record["weight"])
    return total


def _manifest_hash(path: str | Path) -> str:
    return sha256(Path(path).read_bytes()).hexdigest()


def saturating_accuracy(a0: float, a_max: float, k: float, total_weight: float) -> float:
    """Monotone bounded improvement curve: a_max - (a_max - a0) * exp(-k*W)."""
    return a_max - (a_max - a0) * math.exp(-k * total_weight)


class SimulatedTrainer:
    """Returns a retuned simulator whose accuracy saturates in total weight.

    The curve anchors at the base accuracy the trainer was built with, so the
    result is a pure function of the manifest (idempotent per manifest hash).
    """

    def __init__(self, base_accuracy: float, a_max: float = 0.95, k: float = 1e-3):
        self.base_accuracy = base_accuracy
        self.a_max = a_max
        self.k = k
        self._cache: dict[str, tuple[ModelVersion, float]] = {}

    def train(
        self, manifest_path: str | Path, model: SimulatedModel, parent: Optional[str] = None
    ) -> tuple[ModelVersion, SimulatedModel]:
        digest = _manifest_hash(manifest_path)
        if digest in self._cache:
            version, accuracy = self._cache[digest]
        else:
            weight = manifest_weight(manifest_path)
            accuracy = saturating_accuracy(self.base_accuracy, self.a_max, self.k, weight)
            version = ModelVersion(
                version_id=f"sim-{digest[:12]}",
                parent_version=parent,
                train_manifest_ref=str(manifest_path),
                metrics_at_train={"total_weight": weight, "accuracy": accuracy},
            )
            self._cache[digest] = (version, accuracy)
        return version, model.with_config(replace(model.config, accuracy=accuracy))


class SubprocessTrainer:
    """Runs a command template with {manifest} substituted.

    The command must exit 0 and print a JSON receipt containing version_id.
    """

    def __init__(self, command_template: str):
        self.command_template = command_template
        self._cache: dict[str, ModelVersion] = {}

    def train(self, manifest_path, model, parent=None):
        digest = _manifest_hash(manifest_path)
        if digest in self._cache:
            return self._cache[digest], model
        command = [
            part.replace("{manifest}", str(manifest_path))
            for part in shlex.split(self.command_template)
        ]
        try:
            proc = subprocess.run(command, capture_output=True, text=True, check=False)
        except OSError as exc:
            raise TrainerUnavailable(f"cannot launch trainer: {exc}") from exc
        if proc.returncode != 0:
            raise TrainerFailed(proc.stderr.strip() or proc.stdout.strip())
        try:
            receipt = json.loads(proc.stdout.strip().splitlines()[-1])
            version_id = receipt["version_id"]
        except (json.JSONDecodeError, KeyError, IndexError) as exc:
            raise TrainerFailed(f"unparseable receipt: {proc.stdout!r}") from exc
        version = ModelVersion(
            version_id=version_id,
            parent_version=parent,
            train_manifest_ref=str(manifest_path),
        )
        self._cache[digest] = version
        return version, model


class HttpTrainer:
    """POSTs the manifest to <url>/train and polls <url>/jobs/<id>."""

    def __init__(self, base_url: str, poll_interval_s: float = 1.0, timeout_s: float = 3600.0):
        self.base_url = base_url.rstrip("/")
        self.poll_interval_s = poll_interval_s
        self.timeout_s = timeout_s
        self._cache: dict[str, ModelVersion] = {}

    def train(self, manifest_path, model, parent=None):
        import time

        import httpx

        digest = _manifest_hash(manifest_path)
        if digest in self._cache:
            return self._cache[digest], model
        try:
            with httpx.Client(timeout=30.0) as client:
                response = client.post(
                    f"{self.base_url}/train",
                    content=Path(manifest_path).read_bytes(),
                    headers={"content-type": "application/jsonl"},
                )
                response.raise_for_status()
                job_id = response.json()["job_id"]
                deadline = time.monotonic() + self.timeout_s
                while time.monotonic() < deadline:
                    status = client.get(f"{self.base_url}/jobs/{job_id}").json()
                    if status.get("state") == "done":
                        version = ModelVersion(
                            version_id=status["version_id"],
                            parent_version=parent,
                            train_manifest_ref=str(manifest_path),
                        )
                        self._cache[digest] = version
                        return version, model
                    if status.get("state") == "failed":
                        raise TrainerFailed(json.dumps(status))
                    time.sleep(self.poll_interval_s)
        except httpx.HTTPError as exc:
            raise TrainerUnavailable(f"trainer endpoint unreachable: {exc}") from exc
        raise TrainerFailed("training timed out")
