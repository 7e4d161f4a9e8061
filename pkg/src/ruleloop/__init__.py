"""Rule-grounded visual compliance assessment with an active-learning,
human-in-the-loop pipeline."""

from .core import (
    ComplianceLabel,
    LabeledSample,
    LabelSource,
    Prediction,
    Sample,
    UnrecognisedLabel,
    parse_label,
)
from .rules import RuleRegistry, load_registry, render_ruleset

__version__ = "0.1.0"

__all__ = [
    "ComplianceLabel",
    "LabeledSample",
    "LabelSource",
    "Prediction",
    "Sample",
    "UnrecognisedLabel",
    "parse_label",
    "RuleRegistry",
    "load_registry",
    "render_ruleset",
    "__version__",
]
