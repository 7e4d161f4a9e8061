"""Bundled regulatory rule corpus: loading, validation and prompt rendering.

The corpus is a JSON data file of rule categories grouped by domain. Each
category carries its ordered subrules (text plus legislative citation) and the
free-text annotator assumptions surfaced in the console. Rule texts must be
free of conditional modifiers ("except"/"unless"); the curation step that
produced the corpus removed those clauses so every rule states a direct,
visually checkable condition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable

from .core import DOMAINS

CATEGORIES_PER_DOMAIN = 5
CONDITIONAL_MODIFIERS = ("except", "unless")


class SchemaError(ValueError):
    """Rules file is malformed or violates structural invariants."""


class CurationViolation(ValueError):
    """A rule text contains a conditional modifier the curation forbids."""


class UnknownDomain(KeyError):
    """No rule categories exist for the requested domain."""


@dataclass(frozen=True)
class Rule:
    rule_id: str
    text: str
    citation: str


@dataclass(frozen=True)
class RuleCategory:
    category_id: str
    domain: str
    name: str
    rules: tuple[Rule, ...]
    assumptions: tuple[str, ...]


class RuleRegistry:
    """Read-only lookup over all rule categories, keyed by id and by domain."""

    def __init__(self, categories: Iterable[RuleCategory]):
        self._categories: dict[str, RuleCategory] = {}
        self._by_domain: dict[str, list[RuleCategory]] = {d: [] for d in DOMAINS}
        for category in categories:
            if category.category_id in self._categories:
                raise SchemaError(f"duplicate category_id: {category.category_id}")
            self._categories[category.category_id] = category
            self._by_domain[category.domain].append(category)

    def __len__(self) -> int:
        return len(self._categories)

    def __iter__(self):
        return iter(self._categories.values())

    def __contains__(self, category_id: str) -> bool:
        return category_id in self._categories

    @property
    def rule_count(self) -> int:
        return sum(len(c.rules) for c in self._categories.values())

    def get(self, category_id: str) -> RuleCategory:
        try:
            return self._categories[category_id]
        except KeyError:
            raise UnknownDomain(f"unknown rule category: {category_id}") from None

    def for_domain(self, domain: str) -> list[RuleCategory]:
        categories = self._by_domain.get(domain)
        if not categories:
            raise UnknownDomain(f"no rule categories for domain: {domain}")
        return list(categories)


def bundled_rules_path() -> Path:
    """Path of the rule corpus shipped inside the package."""
    return Path(str(resources.files("ruleloop").joinpath("data/rules.json")))


def _parse_category(raw: dict) -> RuleCategory:
    try:
        category_id = raw["category_id"]
        domain = raw["domain"]
        name = raw["name"]
        raw_rules = raw["rules"]
        assumptions = raw.get("assumptions", [])
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed category record: {exc}") from exc
    if domain not in DOMAINS:
        raise SchemaError(f"category {category_id}: unknown domain {domain!r}")
    if not raw_rules:
        raise SchemaError(f"category {category_id}: no rules")
    rules = []
    for raw_rule in raw_rules:
        try:
            rule = Rule(raw_rule["rule_id"], raw_rule["text"], raw_rule["citation"])
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed rule in {category_id}: {exc}") from exc
        if not rule.text.strip():
            raise SchemaError(f"rule {rule.rule_id}: empty text")
        low = rule.text.casefold()
        for token in CONDITIONAL_MODIFIERS:
            if token in low:
                raise CurationViolation(
                    f"rule {rule.rule_id} contains conditional modifier {token!r}"
                )
        rules.append(rule)
    return RuleCategory(
        category_id=category_id,
        domain=domain,
        name=name,
        rules=tuple(rules),
        assumptions=tuple(assumptions),
    )


def load_registry(path: str | Path | None = None) -> RuleRegistry:
    """Load and validate a rules file; default is the bundled corpus.

    Raises SchemaError for structural problems and CurationViolation when any
    rule text contains a conditional modifier.
    """
    path = Path(path) if path is not None else bundled_rules_path()
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"rules file is not valid JSON: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise SchemaError("rules file must be a non-empty JSON array of categories")
    registry = RuleRegistry(_parse_category(entry) for entry in raw)
    for domain in DOMAINS:
        count = len(registry._by_domain[domain])
        if count != CATEGORIES_PER_DOMAIN:
            raise SchemaError(
                f"domain {domain}: expected {CATEGORIES_PER_DOMAIN} categories, got {count}"
            )
    return registry


def render_ruleset(category: RuleCategory) -> str:
    """Render a category as a deterministic text block for prompt insertion.

    Layout is the category name, then one "- <text> [<citation>]" bullet per
    rule in corpus order. Pure function: identical bytes for identical input.
    """
    lines = [category.name]
    lines.extend(f"- {rule.text} [{rule.citation}]" for rule in category.rules)
    return "\n".join(lines)
