"""Prompt template registry, rendering, and response parsing.

Ten templates ship as text files next to a checksum manifest. The T-variants
ask for a bare label; the C- and E-variants ask for a JSON object, with the
later ones adding confidence and explanation fields. Parsing is total: any
byte string yields a Prediction, with parse_ok=false carrying the failure
in-band so coverage accounting stays honest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from .core import ComplianceLabel, Prediction, UnrecognisedLabel, parse_label
from .rules import RuleCategory, render_ruleset

TEMPLATE_IDS = ("T1", "T2", "T3", "T4", "C1", "C2", "C3", "C4", "E1", "E2")
_JSON_IDS = frozenset({"C1", "C2", "C3", "C4", "E1", "E2"})
_CONFIDENCE_IDS = frozenset({"C3", "C4", "E1", "E2"})
_EXPLANATION_IDS = frozenset({"E1", "E2"})


class TemplateIntegrityError(RuntimeError):
    """A template file does not match its committed checksum."""


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    expects_json: bool
    expects_confidence: bool
    expects_explanation: bool


@dataclass(frozen=True)
class RenderedPrompt:
    template_id: str
    ruleset_text: str
    context_entries: tuple[str, ...]
    final_text: str

    def sha256(self) -> str:
        return hashlib.sha256(self.final_text.encode("utf-8")).hexdigest()


def _data_dir() -> Path:
    return Path(str(resources.files("ruleloop").joinpath("data/prompts")))


def load_templates(directory: str | Path | None = None, verify: bool = True) -> dict[str, PromptTemplate]:
    """Load all templates, verifying each file against checksums.txt."""
    directory = Path(directory) if directory is not None else _data_dir()
    expected: dict[str, str] = {}
    for line in (directory / "checksums.txt").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        digest, name = line.split()
        expected[name] = digest
    templates: dict[str, PromptTemplate] = {}
    for template_id in TEMPLATE_IDS:
        raw = (directory / f"{template_id}.txt").read_bytes()
        if verify:
            digest = hashlib.sha256(raw).hexdigest()
            if digest != expected.get(f"{template_id}.txt"):
                raise TemplateIntegrityError(
                    f"template {template_id} checksum mismatch: {digest}"
                )
        templates[template_id] = PromptTemplate(
            template_id=template_id,
            body=raw.decode("utf-8"),
            expects_json=template_id in _JSON_IDS,
            expects_confidence=template_id in _CONFIDENCE_IDS,
            expects_explanation=template_id in _EXPLANATION_IDS,
        )
    return templates


class TemplateRegistry:
    """Immutable view over the verified template set."""

    def __init__(self, directory: str | Path | None = None):
        self._templates = load_templates(directory)

    def get(self, template_id: str) -> PromptTemplate:
        try:
            return self._templates[template_id]
        except KeyError:
            raise KeyError(f"unknown prompt template: {template_id}") from None

    def __iter__(self):
        return iter(self._templates.values())

    def __contains__(self, template_id: str) -> bool:
        return template_id in self._templates


def render(
    template: PromptTemplate,
    category: RuleCategory,
    context_entries: Sequence[str] = (),
) -> RenderedPrompt:
    """Assemble the final prompt text.

    Order: guidance preamble (one "Guidance: " line per context entry), the
    rule set block, then the template instruction so it stays final.
    """
    ruleset_text = render_ruleset(category)
    parts = [f"Guidance: {entry}" for entry in context_entries]
    parts.append("Rule set:\n" + ruleset_text)
    parts.append(template.body)
    return RenderedPrompt(
        template_id=template.template_id,
        ruleset_text=ruleset_text,
        context_entries=tuple(context_entries),
        final_text="\n".join(parts),
    )


def _balanced_json_objects(raw: str):
    """Yield every balanced {...} candidate in order of first appearance."""
    depth = 0
    start = -1
    in_string = False
    escaped = False
    for i, ch in enumerate(raw):
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                yield raw[start : i + 1]


def _clamp(value: float) -> float:
    return min(1.0, max(0.0, value))


_LABEL_SCAN = sorted(
    ((label.value.casefold(), label) for label in ComplianceLabel),
    key=lambda pair: -len(pair[0]),
)


def _scan_for_label(raw: str) -> Optional[ComplianceLabel]:
    """Earliest canonical label substring; ties broken by longest match."""
    low = raw.casefold()
    best: tuple[int, int, Optional[ComplianceLabel]] = (len(low) + 1, 0, None)
    for needle, label in _LABEL_SCAN:
        pos = low.find(needle)
        if pos >= 0 and (pos, -len(needle)) < (best[0], best[1]):
            best = (pos, -len(needle), label)
    return best[2]


def parse_response(raw: str, template: PromptTemplate, latency_ms: float = 0.0) -> Prediction:
    """Turn a raw model reply into a Prediction. Never raises.

    JSON-expecting templates get first-balanced-object extraction (models tend
    to wrap the object in prose); T-variants get a canonical-label substring
    scan. Confidence is clamped into [0,1] to preserve ordering information.
    """
    if not template.expects_json:
        label = _scan_for_label(raw)
        if label is None:
            return Prediction(raw_response=raw, parse_ok=False, latency_ms=latency_ms)
        return Prediction(raw_response=raw, label=label, parse_ok=True, latency_ms=latency_ms)

    for candidate in _balanced_json_objects(raw):
        try:
            payload = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if not isinstance(payload, dict):
            continue
        classification = payload.get("classification")
        if not isinstance(classification, str):
            return Prediction(raw_response=raw, parse_ok=False, latency_ms=latency_ms)
        try:
            label = parse_label(classification)
        except UnrecognisedLabel:
            return Prediction(raw_response=raw, parse_ok=False, latency_ms=latency_ms)
        confidence = None
        if template.expects_confidence:
            value = payload.get("confidence")
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                confidence = _clamp(float(value))
        explanation = None
        if template.expects_explanation:
            value = payload.get("explanation")
            if value is not None:
                explanation = str(value)
        return Prediction(
            raw_response=raw,
            label=label,
            confidence=confidence,
            explanation=explanation,
            parse_ok=True,
            latency_ms=latency_ms,
        )
    return Prediction(raw_response=raw, parse_ok=False, latency_ms=latency_ms)


def format_reply(
    template: PromptTemplate,
    label: ComplianceLabel,
    confidence: Optional[float] = None,
    explanation: Optional[str] = None,
) -> str:
    """Produce a well-formed reply in the template's expected output format.

    Used by the simulated model and by round-trip tests.
    """
    if not template.expects_json:
        return label.value
    payload: dict = {"classification": label.value}
    if template.expects_explanation and explanation is not None:
        payload["explanation"] = explanation
    if template.expects_confidence and confidence is not None:
        payload["confidence"] = round(confidence, 4)
    return json.dumps(payload)
