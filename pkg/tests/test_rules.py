import json

import pytest

from ruleloop.rules import (
    CurationViolation,
    SchemaError,
    UnknownDomain,
    load_registry,
    render_ruleset,
)

# Registry shape: per-domain subrule counts by category name.
EXPECTED_COUNTS = {
    "traffic": {
        "Driving Distraction": 4,
        "Traffic Rules": 10,
        "Pedestrian Crossing": 3,
        "Road Condition": 3,
        "Vehicle Load": 2,
    },
    "construction": {
        "Crane Use": 3,
        "Fire Risk": 2,
        "Ladder Use": 5,
        "Protective Equipment": 3,
        "Scaffold Risk": 4,
    },
    "warehouse": {
        "Ergonomic Lifting": 2,
        "Forklift Use": 3,
        "Ladder Use": 4,
        "Protective Equipment": 3,
        "Surface Condition": 3,
    },
}


class TestLoadRegistry:
    def test_bundled_totals(self, registry):
        assert len(registry) == 15
        assert registry.rule_count == 54

    def test_five_categories_per_domain(self, registry):
        for domain in ("traffic", "construction", "warehouse"):
            assert len(registry.for_domain(domain)) == 5

    def test_per_category_counts(self, registry):
        for domain, expected in EXPECTED_COUNTS.items():
            actual = {c.name: len(c.rules) for c in registry.for_domain(domain)}
            assert actual == expected

    def test_domain_totals(self, registry):
        totals = {
            domain: sum(len(c.rules) for c in registry.for_domain(domain))
            for domain in ("traffic", "construction", "warehouse")
        }
        assert totals == {"traffic": 22, "construction": 17, "warehouse": 15}

    def test_no_conditional_modifiers(self, registry):
        for category in registry:
            for rule in category.rules:
                low = rule.text.casefold()
                assert "unless" not in low
                assert "except" not in low

    def test_empty_file_is_schema_error(self, tmp_path):
        path = tmp_path / "rules.json"
        path.write_text("")
        with pytest.raises(SchemaError):
            load_registry(path)

    def test_conditional_modifier_raises(self, tmp_path):
        categories = json.loads(
            __import__("ruleloop.rules", fromlist=["bundled_rules_path"])
            .bundled_rules_path()
            .read_text()
        )
        categories[0]["rules"][0]["text"] = (
            "Ladders shall be used only on stable and level surfaces "
            "unless secured to prevent accidental displacement."
        )
        path = tmp_path / "rules.json"
        path.write_text(json.dumps(categories))
        with pytest.raises(CurationViolation):
            load_registry(path)

    def test_missing_category_is_schema_error(self, tmp_path):
        categories = json.loads(
            __import__("ruleloop.rules", fromlist=["bundled_rules_path"])
            .bundled_rules_path()
            .read_text()
        )
        path = tmp_path / "rules.json"
        path.write_text(json.dumps(categories[:14]))
        with pytest.raises(SchemaError):
            load_registry(path)

    def test_unknown_category_lookup(self, registry):
        with pytest.raises(UnknownDomain):
            registry.get("traffic-nonexistent")


class TestRenderRuleset:
    def test_bullet_count_matches_rules(self, registry):
        category = registry.get("warehouse-surface-condition")
        rendered = render_ruleset(category)
        lines = rendered.splitlines()
        assert lines[0] == "Surface Condition"
        bullets = [line for line in lines if line.startswith("- ")]
        assert len(bullets) == 3

    def test_citation_in_bullets(self, registry):
        category = registry.get("traffic-traffic-rules")
        rendered = render_ruleset(category)
        assert "[ROAD SAFETY ROAD RULES 2017 - REG 81 (2)]" in rendered

    def test_deterministic(self, registry):
        category = registry.get("construction-crane-use")
        assert render_ruleset(category) == render_ruleset(category)

    def test_pure_across_all_categories(self, registry):
        for category in registry:
            first = render_ruleset(category)
            assert first == render_ruleset(category)
            assert len([l for l in first.splitlines() if l.startswith("- ")]) == len(
                category.rules
            )
