"""Run configuration: one record holding every knob a run needs.

Loaded from a JSON file (CLI) or a request body (API). Validation is strict
so a bad config fails at submission time, not three rounds in.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .feedback import DEFAULT_MAX_CONTEXT_ENTRIES, DEFAULT_TAU, FeedbackConfig
from .loop import LoopConfig
from .model import ModelEndpoint, SimulatedModelConfig
from .prompts import TEMPLATE_IDS


class ConfigError(ValueError):
    """Run configuration is invalid."""


@dataclass(frozen=True)
class TrainerSpec:
    kind: str = "simulated"  # simulated | subprocess | http | none
    a_max: float = 0.95
    k: float = 1e-3
    command: Optional[str] = None
    url: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "a_max": self.a_max,
            "k": self.k,
            "command": self.command,
            "url": self.url,
        }


@dataclass(frozen=True)
class RunConfig:
    manifest: str = "manifest.jsonl"
    domain: Optional[str] = None
    seed: int = 0
    probe_a: str = "C1"
    probe_b: str = "C4"
    context_base: str = "E1"
    eval_template: str = "C4"
    train_prompt: str = "C4"
    theta: Optional[float] = None
    alpha_match: float = 1.0
    alpha_mismatch: float = 0.5
    tau: float = DEFAULT_TAU
    budget: int = 1500
    increments: tuple[int, ...] = (1500, 500, 1000, 1000)
    distance_metric: str = "euclidean"
    human: str = "queue"  # queue | auto | none
    parallelism: int = 8
    annotation_timeout_s: Optional[float] = None
    feedback_theta: Optional[float] = 0.9
    feedback_batch: int = 32
    max_context_entries: int = DEFAULT_MAX_CONTEXT_ENTRIES
    stability_criterion: str = "flip"
    simulator: Optional[SimulatedModelConfig] = field(default_factory=SimulatedModelConfig)
    endpoint: Optional[ModelEndpoint] = None
    trainer: TrainerSpec = field(default_factory=TrainerSpec)

    def __post_init__(self):
        for name in ("probe_a", "probe_b", "context_base", "eval_template", "train_prompt"):
            value = getattr(self, name)
            if value not in TEMPLATE_IDS:
                raise ConfigError(f"{name}: unknown template {value!r}")
        if any(i <= 0 for i in self.increments):
            raise ConfigError("round increments must be positive")
        if self.budget < 0:
            raise ConfigError("budget must be non-negative")
        if self.human not in ("queue", "auto", "none"):
            raise ConfigError(f"unknown human mode {self.human!r}")
        if self.distance_metric not in ("euclidean", "cosine"):
            raise ConfigError(f"unknown distance metric {self.distance_metric!r}")
        if self.stability_criterion not in ("flip", "aggregate"):
            raise ConfigError(f"unknown stability criterion {self.stability_criterion!r}")
        if not (0.0 <= self.tau <= 1.0):
            raise ConfigError("tau must lie in [0,1]")
        if self.simulator is None and self.endpoint is None:
            raise ConfigError("either a simulator config or a remote endpoint is required")

    def loop_config(self) -> LoopConfig:
        return LoopConfig(
            probe_a=self.probe_a,
            probe_b=self.probe_b,
            theta=self.theta,
            alpha_match=self.alpha_match,
            alpha_mismatch=self.alpha_mismatch,
            distance_metric=self.distance_metric,
            increments=tuple(self.increments),
            parallelism=self.parallelism,
        )

    def feedback_config(self) -> FeedbackConfig:
        return FeedbackConfig(
            tau=self.tau,
            theta=self.feedback_theta,
            max_context_entries=self.max_context_entries,
            stability_criterion=self.stability_criterion,
            parallelism=self.parallelism,
            batch_size=self.feedback_batch,
        )

    def to_dict(self) -> dict:
        return {
            "manifest": self.manifest,
            "domain": self.domain,
            "seed": self.seed,
            "probe_a": self.probe_a,
            "probe_b": self.probe_b,
            "context_base": self.context_base,
            "eval_template": self.eval_template,
            "train_prompt": self.train_prompt,
            "theta": self.theta,
            "alpha_match": self.alpha_match,
            "alpha_mismatch": self.alpha_mismatch,
            "tau": self.tau,
            "budget": self.budget,
            "increments": list(self.increments),
            "distance_metric": self.distance_metric,
            "human": self.human,
            "parallelism": self.parallelism,
            "annotation_timeout_s": self.annotation_timeout_s,
            "feedback_theta": self.feedback_theta,
            "feedback_batch": self.feedback_batch,
            "max_context_entries": self.max_context_entries,
            "stability_criterion": self.stability_criterion,
            "model": (
                {"type": "simulated", **self.simulator.to_dict()}
                if self.simulator is not None
                else {
                    "type": "remote",
                    "base_url": self.endpoint.base_url,
                    "model_name": self.endpoint.model_name,
                    "timeout_ms": self.endpoint.timeout_ms,
                    "max_retries": self.endpoint.max_retries,
                    "parallelism": self.endpoint.parallelism,
                }
            ),
            "trainer": self.trainer.to_dict(),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
        known = dict(raw)
        model_spec = known.pop("model", {"type": "simulated"})
        simulator = None
        endpoint = None
        if not isinstance(model_spec, dict):
            raise ConfigError("model spec must be an object")
        model_type = model_spec.get("type", "simulated")
        if model_type == "simulated":
            try:
                simulator = SimulatedModelConfig.from_dict(
                    {k: v for k, v in model_spec.items() if k != "type"}
                )
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad simulator config: {exc}") from exc
        elif model_type == "remote":
            # Credentials come from the environment, never the config file.
            token_env = model_spec.get("auth_token_env", "RULELOOP_MODEL_TOKEN")
            try:
                endpoint = ModelEndpoint(
                    base_url=model_spec["base_url"],
                    model_name=model_spec["model_name"],
                    auth_token=os.environ.get(token_env),
                    timeout_ms=int(model_spec.get("timeout_ms", 60_000)),
                    max_retries=int(model_spec.get("max_retries", 2)),
                    parallelism=int(model_spec.get("parallelism", 4)),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"bad endpoint config: {exc}") from exc
        else:
            raise ConfigError(f"unknown model type {model_type!r}")

        trainer_spec = known.pop("trainer", {})
        if not isinstance(trainer_spec, dict):
            raise ConfigError("trainer spec must be an object")
        trainer = TrainerSpec(
            kind=trainer_spec.get("kind", trainer_spec.get("type", "simulated")),
            a_max=float(trainer_spec.get("a_max", 0.95)),
            k=float(trainer_spec.get("k", 1e-3)),
            command=trainer_spec.get("command"),
            url=trainer_spec.get("url"),
        )
        if trainer.kind not in ("simulated", "subprocess", "http", "none"):
            raise ConfigError(f"unknown trainer kind {trainer.kind!r}")

        if "increments" in known:
            known["increments"] = tuple(int(i) for i in known["increments"])
        fields = {f for f in cls.__dataclass_fields__ if f not in ("simulator", "endpoint", "trainer")}
        unknown = set(known) - fields
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(simulator=simulator, endpoint=endpoint, trainer=trainer, **known)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)
