"""Shared vocabulary of the pipeline: labels, samples, predictions, provenance."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional


class UnrecognisedLabel(ValueError):
    """Raised when a string cannot be mapped onto the ternary label set."""


class ComplianceLabel(Enum):
    COMPLIED = "Complied"
    VIOLATED = "Violated"
    NOT_APPLICABLE = "Not Applicable"

    def __str__(self) -> str:
        return self.value


# Canonical order used for deterministic tie-breaking (declaration order).
LABEL_ORDER: tuple[ComplianceLabel, ...] = (
    ComplianceLabel.COMPLIED,
    ComplianceLabel.VIOLATED,
    ComplianceLabel.NOT_APPLICABLE,
)

_CANONICAL = {label.value.casefold(): label for label in ComplianceLabel}

DOMAINS = ("traffic", "construction", "warehouse")
SPLITS = ("train", "val", "test")


def parse_label(text: str) -> ComplianceLabel:
    """Map text onto one of the three canonical labels.

    Matching is case-insensitive after trimming surrounding whitespace. No
    synonym mapping: "Compliant" or "N/A" are rejected so that prompt-format
    regressions surface as parse failures instead of being silently absorbed.
    """
    key = text.strip().casefold()
    label = _CANONICAL.get(key)
    if label is None:
        raise UnrecognisedLabel(f"not a compliance label: {text!r}")
    return label


class LabelSource(Enum):
    HUMAN = "Human"
    PSEUDO = "Pseudo"


@dataclass(frozen=True)
class Sample:
    """One image-rule pair, the unit everything downstream operates on."""

    sample_id: str
    image_ref: str
    rule_category_id: str
    domain: str
    split: str = "train"
    ground_truth: Optional[ComplianceLabel] = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain: {self.domain!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split: {self.split!r}")

    def to_dict(self) -> dict:
        record = {
            "sample_id": self.sample_id,
            "image_ref": self.image_ref,
            "rule_category_id": self.rule_category_id,
            "domain": self.domain,
            "split": self.split,
        }
        if self.ground_truth is not None:
            record["ground_truth"] = self.ground_truth.value
        return record

    @classmethod
    def from_dict(cls, record: dict) -> "Sample":
        truth = record.get("ground_truth")
        return cls(
            sample_id=record["sample_id"],
            image_ref=record["image_ref"],
            rule_category_id=record["rule_category_id"],
            domain=record["domain"],
            split=record.get("split", "train"),
            ground_truth=parse_label(truth) if truth is not None else None,
        )


@dataclass(frozen=True)
class Prediction:
    """Structured model output for one query.

    ``parse_ok`` is the coverage signal: a false value means the raw response
    could not be turned into a label, and the sample counts as uncovered
    rather than wrong.
    """

    raw_response: str
    label: Optional[ComplianceLabel] = None
    confidence: Optional[float] = None
    explanation: Optional[str] = None
    parse_ok: bool = False
    latency_ms: float = 0.0

    def __post_init__(self):
        if self.parse_ok and self.label is None:
            raise ValueError("parse_ok prediction must carry a label")
        if self.confidence is not None and not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence out of range: {self.confidence}")
        if self.latency_ms < 0:
            raise ValueError("latency must be non-negative")

    def to_dict(self) -> dict:
        return {
            "label": self.label.value if self.label is not None else None,
            "confidence": self.confidence,
            "explanation": self.explanation,
            "raw_response": self.raw_response,
            "parse_ok": self.parse_ok,
            "latency_ms": self.latency_ms,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "Prediction":
        label = record.get("label")
        return cls(
            raw_response=record.get("raw_response", ""),
            label=parse_label(label) if label is not None else None,
            confidence=record.get("confidence"),
            explanation=record.get("explanation"),
            parse_ok=bool(record.get("parse_ok", False)),
            latency_ms=float(record.get("latency_ms", 0.0)),
        )


@dataclass(frozen=True)
class LabeledSample:
    """A sample together with its label, confidence weight and provenance.

    Human labels always carry weight 1.0; calibrated pseudo-labels carry
    whatever the calibration step produced.
    """

    sample: Sample
    label: ComplianceLabel
    weight: float
    source: LabelSource
    round: int = 0
    flags: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.source is LabelSource.HUMAN and self.weight != 1.0:
            raise ValueError("human labels must have weight 1.0")
        if not (0.0 <= self.weight <= 1.0):
            raise ValueError(f"weight out of range: {self.weight}")
        if self.round < 0:
            raise ValueError("round must be non-negative")

    def to_dict(self) -> dict:
        return {
            "sample": self.sample.to_dict(),
            "label": self.label.value,
            "weight": self.weight,
            "source": self.source.value,
            "round": self.round,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, record: dict) -> "LabeledSample":
        return cls(
            sample=Sample.from_dict(record["sample"]),
            label=parse_label(record["label"]),
            weight=float(record["weight"]),
            source=LabelSource(record["source"]),
            round=int(record.get("round", 0)),
            flags=tuple(record.get("flags", ())),
        )
