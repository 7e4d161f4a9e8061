"""Active-learning rounds: dual-prompt probing, weak/strong partitioning,
centroid-anchored confidence calibration, and budgeted iteration.

Each round probes a slice of the unlabelled pool with two prompt variants.
Samples that disagree across probes, fail to parse, or sit below the batch's
confidence ceiling are weak and go to humans (while budget lasts); the rest
are pseudo-labelled with a weight calibrated against the nearest
human-anchored centroid for their rule category.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    LABEL_ORDER,
    ComplianceLabel,
    LabeledSample,
    LabelSource,
    Prediction,
    Sample,
)
from .model import (
    ComplianceModel,
    ContextView,
    Embedding,
    TransportError,
    batch_query,
    cosine,
    euclidean,
)
from .prompts import PromptTemplate


class MissingConfidence(ValueError):
    """Calibration requires a base confidence; the prediction has none."""


class AnnotationTimeout(RuntimeError):
    """The human annotation source stalled beyond the configured patience."""


class Strength(Enum):
    WEAK = "Weak"
    STRONG = "Strong"


@dataclass(frozen=True)
class ProbeResult:
    sample: Sample
    pred_a: Prediction
    pred_b: Prediction
    category: Strength

    @property
    def sample_id(self) -> str:
        return self.sample.sample_id

    def min_confidence(self) -> Optional[float]:
        values = [
            p.confidence for p in (self.pred_a, self.pred_b) if p.confidence is not None
        ]
        return min(values) if values else None


@dataclass(frozen=True)
class Centroid:
    rule_category_id: str
    label: ComplianceLabel
    mean: Embedding
    count: int

    def to_dict(self) -> dict:
        return {
            "rule_category_id": self.rule_category_id,
            "label": self.label.value,
            "mean": list(self.mean.vector),
            "count": self.count,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "Centroid":
        from .core import parse_label

        return cls(
            rule_category_id=record["rule_category_id"],
            label=parse_label(record["label"]),
            mean=Embedding.of(record["mean"]),
            count=int(record["count"]),
        )


@dataclass
class RoundRecord:
    """One Table-style report row worth of per-round accounting."""

    round: int
    probed: int
    weak: int
    strong: int
    num_manual: int
    accum_manual: int
    num_pseudo: int
    accum_pseudo: int
    training_samples: int
    model_version: Optional[str] = None
    macro_f1: Optional[float] = None
    accuracy: Optional[float] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, record: dict) -> "RoundRecord":
        return cls(**{k: record[k] for k in record if k in cls.__dataclass_fields__})


@dataclass
class RoundState:
    round: int = 0
    pool_labeled: list[LabeledSample] = field(default_factory=list)
    pool_unprobed: list[Sample] = field(default_factory=list)
    budget_remaining: int = 0
    centroids: list[Centroid] = field(default_factory=list)
    n_human_cum: int = 0
    n_pseudo_cum: int = 0
    n_dropped: int = 0
    history: list[RoundRecord] = field(default_factory=list)

    def check(self) -> None:
        if self.n_human_cum + self.n_pseudo_cum != len(self.pool_labeled):
            raise AssertionError("pool accounting out of sync")
        if self.budget_remaining < 0:
            raise AssertionError("budget went negative")

    def to_dict(self, include_embeddings: bool = True) -> dict:
        return {
            "round": self.round,
            "pool_labeled": [item.to_dict() for item in self.pool_labeled],
            "pool_unprobed": [s.to_dict() for s in self.pool_unprobed],
            "budget_remaining": self.budget_remaining,
            "centroids": [c.to_dict() for c in self.centroids] if include_embeddings else [],
            "n_human_cum": self.n_human_cum,
            "n_pseudo_cum": self.n_pseudo_cum,
            "n_dropped": self.n_dropped,
            "history": [record.to_dict() for record in self.history],
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, record: dict) -> "RoundState":
        return cls(
            round=int(record["round"]),
            pool_labeled=[LabeledSample.from_dict(r) for r in record["pool_labeled"]],
            pool_unprobed=[Sample.from_dict(r) for r in record["pool_unprobed"]],
            budget_remaining=int(record["budget_remaining"]),
            centroids=[Centroid.from_dict(r) for r in record.get("centroids", [])],
            n_human_cum=int(record["n_human_cum"]),
            n_pseudo_cum=int(record["n_pseudo_cum"]),
            n_dropped=int(record.get("n_dropped", 0)),
            history=[RoundRecord.from_dict(r) for r in record.get("history", [])],
        )

    @classmethod
    def load(cls, path: str | Path) -> "RoundState":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class LoopConfig:
    probe_a: str = "C1"
    probe_b: str = "C4"
    theta: Optional[float] = None  # None = per-batch distributional maximum
    alpha_match: float = 1.0
    alpha_mismatch: float = 0.5
    distance_metric: str = "euclidean"  # or "cosine"
    increments: tuple[int, ...] = (1500, 500, 1000, 1000)
    parallelism: int = 8

    def increment_for(self, round_index: int) -> int:
        if round_index < len(self.increments):
            return self.increments[round_index]
        return self.increments[-1] if self.increments else 0


# An annotator resolves a batch of weak samples to human labels keyed by
# sample_id; a missing or None value means the human skipped that sample.
# It may raise AnnotationTimeout.
BatchAnnotator = Callable[[list[ProbeResult]], dict[str, Optional[ComplianceLabel]]]

# A trainer hook consumes the full labelled pool and returns the next model.
TrainerHook = Callable[[list[LabeledSample], int], ComplianceModel]


def compute_threshold(confidences: Sequence[float]) -> Optional[float]:
    """Distributional maximum of a probe batch; None when no confidences."""
    values = [c for c in confidences if c is not None]
    return max(values) if values else None


def categorise(
    pairs: Sequence[tuple[Sample, Prediction, Prediction]],
    theta_override: Optional[float] = None,
) -> list[ProbeResult]:
    """Apply the weak/strong rule to a probed batch.

    Weak when probes disagree, either probe failed to parse, any available
    confidence sits strictly below its template's threshold, or the richer
    probe carries no confidence at all (calibration would be impossible).
    """
    if theta_override is not None:
        theta_a: Optional[float] = theta_override
        theta_b: Optional[float] = theta_override
    else:
        theta_a = compute_threshold([a.confidence for _, a, _ in pairs])
        theta_b = compute_threshold([b.confidence for _, _, b in pairs])
    no_confidence_anywhere = theta_a is None and theta_b is None

    results = []
    for sample, pred_a, pred_b in pairs:
        weak = False
        if not pred_a.parse_ok or not pred_b.parse_ok:
            weak = True
        elif pred_a.label is not pred_b.label:
            weak = True
        elif no_confidence_anywhere:
            weak = True
        elif pred_b.confidence is None:
            weak = True
        else:
            for pred, theta in ((pred_a, theta_a), (pred_b, theta_b)):
                if pred.confidence is not None and theta is not None and pred.confidence < theta:
                    weak = True
                    break
        results.append(
            ProbeResult(
                sample=sample,
                pred_a=pred_a,
                pred_b=pred_b,
                category=Strength.WEAK if weak else Strength.STRONG,
            )
        )
    return results


def probe(
    samples: Sequence[Sample],
    model: ComplianceModel,
    templates: tuple[PromptTemplate, PromptTemplate],
    context: Optional[ContextView] = None,
    theta_override: Optional[float] = None,
    parallelism: int = 8,
) -> list[ProbeResult]:
    """Query both probe templates for every sample and categorise the batch."""
    template_a, template_b = templates
    preds_a = batch_query(model, samples, template_a, context, parallelism)
    preds_b = batch_query(model, samples, template_b, context, parallelism)
    if samples and all(not p.parse_ok for p in preds_a) and all(not p.parse_ok for p in preds_b):
        raise TransportError("total probe failure: no prediction parsed")
    return categorise(list(zip(samples, preds_a, preds_b)), theta_override)


def update_centroids(
    human_labels: Sequence[LabeledSample],
    embed: Callable[[str], Embedding],
) -> list[Centroid]:
    """Arithmetic-mean embedding per (rule category, label) over human labels."""
    if any(item.source is not LabelSource.HUMAN for item in human_labels):
        raise ValueError("centroids are anchored on human labels only")
    groups: dict[tuple[str, ComplianceLabel], list[np.ndarray]] = {}
    for item in human_labels:
        key = (item.sample.rule_category_id, item.label)
        groups.setdefault(key, []).append(embed(item.sample.image_ref).array)
    centroids = []
    for key in sorted(groups, key=lambda k: (k[0], LABEL_ORDER.index(k[1]))):
        members = groups[key]
        mean = np.mean(np.stack(members), axis=0)
        centroids.append(
            Centroid(
                rule_category_id=key[0],
                label=key[1],
                mean=Embedding.of(mean),
                count=len(members),
            )
        )
    return centroids


def calibrate(
    pred: Prediction,
    sample: Sample,
    sample_embedding: Embedding,
    centroids: Sequence[Centroid],
    alpha_match: float = 1.0,
    alpha_mismatch: float = 0.5,
    metric: str = "euclidean",
) -> tuple[float, bool]:
    """Weight a pseudo-label against the nearest same-category centroid.

    Returns (weight, calibrated). When the sample's category has no centroid
    yet, the base confidence passes through uncalibrated. Distance ties break
    on label declaration order.
    """
    if pred.confidence is None:
        raise MissingConfidence(f"no confidence on prediction for {sample.sample_id}")
    candidates = [c for c in centroids if c.rule_category_id == sample.rule_category_id]
    if not candidates:
        return pred.confidence, False
    if metric == "cosine":
        distance = lambda c: 1.0 - cosine(sample_embedding, c.mean)  # noqa: E731
    else:
        distance = lambda c: euclidean(sample_embedding, c.mean)  # noqa: E731
    nearest = min(candidates, key=lambda c: (distance(c), LABEL_ORDER.index(c.label)))
    alpha = alpha_match if nearest.label is pred.label else alpha_mismatch
    return min(1.0, max(0.0, pred.confidence * alpha)), True


def _pseudo_from(
    probe_result: ProbeResult,
    weight: float,
    round_index: int,
    flags: tuple[str, ...],
) -> Optional[LabeledSample]:
    """Pseudo-label from the richer probe, falling back to the baseline one."""
    for pred in (probe_result.pred_b, probe_result.pred_a):
        if pred.parse_ok and pred.label is not None:
            return LabeledSample(
                sample=probe_result.sample,
                label=pred.label,
                weight=weight,
                source=LabelSource.PSEUDO,
                round=round_index,
                flags=flags,
            )
    return None


def run_round(
    state: RoundState,
    model: ComplianceModel,
    annotator: Optional[BatchAnnotator],
    trainer: Optional[TrainerHook],
    templates: tuple[PromptTemplate, PromptTemplate],
    config: LoopConfig = LoopConfig(),
    context: Optional[ContextView] = None,
) -> tuple[RoundState, ComplianceModel]:
    """Execute one full round and return the successor state and model.

    Weak samples consume budget in ascending-confidence order; overflow weak
    samples are pseudo-labelled at the mismatch discount and flagged. Strong
    samples are pseudo-labelled from the richer probe with centroid-calibrated
    weights. Centroids are recomputed from all human labels (including this
    round's) before calibration so the anchors exist from round zero.
    """
    round_index = state.round
    increment = config.increment_for(round_index)
    draw = state.pool_unprobed[:increment]
    rest = state.pool_unprobed[increment:]
    if not draw:
        new_state = RoundState(
            round=round_index + 1,
            pool_labeled=list(state.pool_labeled),
            pool_unprobed=rest,
            budget_remaining=state.budget_remaining,
            centroids=list(state.centroids),
            n_human_cum=state.n_human_cum,
            n_pseudo_cum=state.n_pseudo_cum,
            n_dropped=state.n_dropped,
            history=list(state.history),
        )
        return new_state, model

    probes = probe(
        draw, model, templates, context, theta_override=config.theta,
        parallelism=config.parallelism,
    )
    weak = [p for p in probes if p.category is Strength.WEAK]
    strong = [p for p in probes if p.category is Strength.STRONG]

    # Neediest first: missing confidence ranks ahead of any numeric one.
    weak.sort(key=lambda p: (p.min_confidence() if p.min_confidence() is not None else -1.0,
                             p.sample_id))
    to_annotate = weak[: state.budget_remaining] if annotator is not None else []
    overflow = weak[len(to_annotate):]

    humans: list[LabeledSample] = []
    answers = annotator(to_annotate) if to_annotate else {}
    for probe_result in to_annotate:
        label = answers.get(probe_result.sample_id)
        if label is None:
            overflow.append(probe_result)
            continue
        humans.append(
            LabeledSample(
                sample=probe_result.sample,
                label=label,
                weight=1.0,
                source=LabelSource.HUMAN,
                round=round_index,
            )
        )

    all_humans = [
        item for item in state.pool_labeled if item.source is LabelSource.HUMAN
    ] + humans
    centroids = update_centroids(all_humans, model.embed)

    pseudo: list[LabeledSample] = []
    dropped = 0
    for probe_result in strong:
        weight, calibrated = calibrate(
            probe_result.pred_b,
            probe_result.sample,
            model.embed(probe_result.sample.image_ref),
            centroids,
            alpha_match=config.alpha_match,
            alpha_mismatch=config.alpha_mismatch,
            metric=config.distance_metric,
        )
        flags = () if calibrated else ("uncalibrated",)
        item = _pseudo_from(probe_result, weight, round_index, flags)
        if item is None:
            dropped += 1
        else:
            pseudo.append(item)
    for probe_result in overflow:
        base = probe_result.pred_b.confidence
        flags = ("budget-overflow",)
        if base is None:
            base = 0.5
            flags = ("budget-overflow", "no-confidence")
        weight = min(1.0, max(0.0, base * config.alpha_mismatch))
        item = _pseudo_from(probe_result, weight, round_index, flags)
        if item is None:
            dropped += 1
        else:
            pseudo.append(item)

    pool_labeled = list(state.pool_labeled) + humans + pseudo
    new_state = RoundState(
        round=round_index + 1,
        pool_labeled=pool_labeled,
        pool_unprobed=rest,
        budget_remaining=state.budget_remaining - len(humans),
        centroids=centroids,
        n_human_cum=state.n_human_cum + len(humans),
        n_pseudo_cum=state.n_pseudo_cum + len(pseudo),
        n_dropped=state.n_dropped + dropped,
        history=list(state.history),
    )
    new_state.check()

    next_model: ComplianceModel = model
    if trainer is not None:
        next_model = trainer(pool_labeled, round_index)

    new_state.history.append(
        RoundRecord(
            round=round_index,
            probed=len(draw),
            weak=len(weak),
            strong=len(strong),
            num_manual=len(humans),
            accum_manual=new_state.n_human_cum,
            num_pseudo=len(pseudo),
            accum_pseudo=new_state.n_pseudo_cum,
            training_samples=len(pool_labeled),
        )
    )
    return new_state, next_model


def ground_truth_annotator(batch: list[ProbeResult]) -> dict[str, Optional[ComplianceLabel]]:
    """Batch-mode annotator: answer every sample from embedded ground truth."""
    return {p.sample_id: p.sample.ground_truth for p in batch}
