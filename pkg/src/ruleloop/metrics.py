"""Evaluation metrics and round/run report emission.

Accuracy and macro-F1 are computed over covered samples (those with a
parseable prediction); coverage is its own metric, so an unparseable reply
is never double-counted as a wrong answer. A strict mode that counts
uncovered samples as wrong is available for comparison. Savings arithmetic
is exact-rational and rendered to two decimals.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .core import LABEL_ORDER, Prediction, Sample  # noqa: E402
from .trainer import EmptyPool  # noqa: E402

NO_PREDICTION = "no-prediction"


class EmptyEvalSet(ValueError):
    """Nothing to evaluate."""


@dataclass
class EvalReport:
    macro_f1: float
    accuracy: float
    coverage: float
    mean_latency_ms: float
    p50_latency_ms: float
    p95_latency_ms: float
    per_class: dict
    confusion: dict  # truth label -> {predicted label or no-prediction: count}
    breakdowns: dict  # (domain, category) key string -> {accuracy, macro_f1, coverage, n}
    n_samples: int
    n_covered: int
    strict: bool = False

    def to_dict(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "coverage": self.coverage,
            "mean_latency_ms": self.mean_latency_ms,
            "p50_latency_ms": self.p50_latency_ms,
            "p95_latency_ms": self.p95_latency_ms,
            "per_class": self.per_class,
            "confusion": self.confusion,
            "breakdowns": self.breakdowns,
            "n_samples": self.n_samples,
            "n_covered": self.n_covered,
            "strict": self.strict,
        }


@dataclass(frozen=True)
class SavingsReport:
    n_human: int
    n_pseudo: int

    @property
    def n_total(self) -> int:
        return self.n_human + self.n_pseudo

    @property
    def saved_fraction(self) -> float:
        return self.n_pseudo / self.n_total

    @property
    def saved_percent(self) -> str:
        return percent_2dp(self.n_pseudo, self.n_total)

    def to_dict(self) -> dict:
        return {
            "n_human": self.n_human,
            "n_pseudo": self.n_pseudo,
            "n_total": self.n_total,
            "saved_fraction": self.saved_fraction,
            "saved_percent": self.saved_percent,
        }


def percent_2dp(numerator: int, denominator: int) -> str:
    """Exact rational percentage rounded half-up to two decimals."""
    scaled = Fraction(numerator * 10000, denominator)
    whole = scaled.numerator // scaled.denominator
    if scaled - whole >= Fraction(1, 2):
        whole += 1
    return f"{whole // 100}.{whole % 100:02d}"


def savings(n_human: int, n_pseudo: int) -> SavingsReport:
    if n_human + n_pseudo == 0:
        raise EmptyPool("no training samples: savings undefined")
    if n_pseudo == 0:
        return SavingsReport(n_human=n_human, n_pseudo=0)
    return SavingsReport(n_human=n_human, n_pseudo=n_pseudo)


def savings_for_state(state) -> SavingsReport:
    return savings(state.n_human_cum, state.n_pseudo_cum)


def _percentile(sorted_values: list[float], q: float) -> float:
    if not sorted_values:
        return 0.0
    index = min(len(sorted_values) - 1, max(0, round(q * (len(sorted_values) - 1))))
    return sorted_values[index]


def evaluate(
    pairs: Sequence[tuple[Sample, Prediction]],
    strict: bool = False,
) -> EvalReport:
    """Score predictions against ground truth.

    Requires ground truth on every sample. Per-class F1 and the macro
    average run over classes present in the truth set, so small slices do
    not pick up undefined-F1 zeros from absent classes.
    """
    if not pairs:
        raise EmptyEvalSet("no prediction pairs to evaluate")
    for sample, _ in pairs:
        if sample.ground_truth is None:
            raise ValueError(f"sample {sample.sample_id} has no ground truth")

    confusion: dict[str, dict[str, int]] = {
        label.value: {**{l.value: 0 for l in LABEL_ORDER}, NO_PREDICTION: 0}
        for label in LABEL_ORDER
    }
    covered = 0
    correct = 0
    latencies = []
    for sample, pred in pairs:
        truth = sample.ground_truth.value
        latencies.append(pred.latency_ms)
        if pred.parse_ok and pred.label is not None:
            covered += 1
            confusion[truth][pred.label.value] += 1
            if pred.label is sample.ground_truth:
                correct += 1
        else:
            confusion[truth][NO_PREDICTION] += 1

    n = len(pairs)
    coverage = covered / n
    denominator = n if strict else covered
    accuracy = correct / denominator if denominator else 0.0

    truth_classes = [
        label for label in LABEL_ORDER if sum(confusion[label.value].values()) > 0
    ]
    per_class = {}
    f1_values = []
    for label in truth_classes:
        name = label.value
        row = confusion[name]
        tp = row[name]
        fn = sum(row.values()) - tp
        if not strict:
            fn -= row[NO_PREDICTION]  # uncovered samples are not misses
        fp = sum(confusion[other.value][name] for other in LABEL_ORDER if other is not label)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        support = sum(confusion[name].values())
        per_class[name] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "support": support,
        }
        f1_values.append(f1)
    macro_f1 = sum(f1_values) / len(f1_values) if f1_values else 0.0

    by_slice: dict[str, list[tuple[Sample, Prediction]]] = {}
    for sample, pred in pairs:
        by_slice.setdefault(f"{sample.domain}/{sample.rule_category_id}", []).append(
            (sample, pred)
        )
    breakdowns = {}
    for key, slice_pairs in sorted(by_slice.items()):
        slice_covered = [(s, p) for s, p in slice_pairs if p.parse_ok]
        slice_correct = sum(1 for s, p in slice_covered if p.label is s.ground_truth)
        breakdowns[key] = {
            "n": len(slice_pairs),
            "coverage": len(slice_covered) / len(slice_pairs),
            "accuracy": slice_correct / len(slice_covered) if slice_covered else 0.0,
        }

    latencies.sort()
    return EvalReport(
        macro_f1=macro_f1,
        accuracy=accuracy,
        coverage=coverage,
        mean_latency_ms=sum(latencies) / n,
        p50_latency_ms=_percentile(latencies, 0.50),
        p95_latency_ms=_percentile(latencies, 0.95),
        per_class=per_class,
        confusion=confusion,
        breakdowns=breakdowns,
        n_samples=n,
        n_covered=covered,
        strict=strict,
    )


REPORT_COLUMNS = [
    "Method",
    "AL Rounds",
    "Num. Manual Labels",
    "Accum. Manual Labels",
    "No. Pseudo Labels",
    "Training Samples",
    "Annotation Saved (%)",
    "Macro F1",
    "Accuracy",
]


@dataclass
class ReportRow:
    method: str
    al_round: Optional[int]
    num_manual: int
    accum_manual: int
    num_pseudo: int
    training_samples: int
    annotation_saved_percent: str
    macro_f1: Optional[float] = None
    accuracy: Optional[float] = None

    def as_csv(self) -> list[str]:
        return [
            self.method,
            "-" if self.al_round is None else str(self.al_round),
            str(self.num_manual),
            str(self.accum_manual),
            str(self.num_pseudo),
            str(self.training_samples),
            self.annotation_saved_percent,
            "" if self.macro_f1 is None else f"{self.macro_f1:.4f}",
            "" if self.accuracy is None else f"{self.accuracy:.4f}",
        ]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "al_round": self.al_round,
            "num_manual": self.num_manual,
            "accum_manual": self.accum_manual,
            "num_pseudo": self.num_pseudo,
            "training_samples": self.training_samples,
            "annotation_saved_percent": self.annotation_saved_percent,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
        }


def _plot_rounds(rows: list[ReportRow], out_dir: Path) -> list[Path]:
    plotted = [r for r in rows if r.al_round is not None]
    if not plotted:
        return []
    written = []
    rounds = [r.al_round for r in plotted]
    saved = [float(r.annotation_saved_percent) for r in plotted]

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rounds, saved, marker="o", color="#2a6f97")
    ax.set_xlabel("Round")
    ax.set_ylabel("Annotation saved (%)")
    ax.set_title("Annotation effort saved per round")
    ax.grid(True, alpha=0.3)
    path = out_dir / "annotation_saved.png"
    fig.savefig(path, dpi=120, metadata={"Software": "ruleloop"})
    plt.close(fig)
    written.append(path)

    scored = [r for r in plotted if r.macro_f1 is not None and r.accuracy is not None]
    if scored:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([r.al_round for r in scored], [r.macro_f1 for r in scored],
                marker="o", label="Macro F1", color="#bc4749")
        ax.plot([r.al_round for r in scored], [r.accuracy for r in scored],
                marker="s", label="Accuracy", color="#386641")
        ax.set_xlabel("Round")
        ax.set_ylabel("Score")
        ax.set_ylim(0, 1)
        ax.set_title("Validation performance per round")
        ax.legend()
        ax.grid(True, alpha=0.3)
        path = out_dir / "performance.png"
        fig.savefig(path, dpi=120, metadata={"Software": "ruleloop"})
        plt.close(fig)
        written.append(path)
    return written


def plot_confusion(report: EvalReport, out_dir: Path) -> Path:
    labels = [l.value for l in LABEL_ORDER]
    columns = labels + [NO_PREDICTION]
    matrix = [[report.confusion[t][c] for c in columns] for t in labels]
    fig, ax = plt.subplots(figsize=(6, 4.5))
    im = ax.imshow(matrix, cmap="Blues")
    ax.set_xticks(range(len(columns)), columns, rotation=20, ha="right")
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("Ground truth")
    for i in range(len(labels)):
        for j in range(len(columns)):
            ax.text(j, i, str(matrix[i][j]), ha="center", va="center", fontsize=9)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    path = out_dir / "confusion.png"
    fig.savefig(path, dpi=120, metadata={"Software": "ruleloop"})
    plt.close(fig)
    return path


def emit_report(
    rows: Sequence[ReportRow],
    out_dir: str | Path,
    embeddings: Optional[Sequence[tuple[str, str, Optional[str], Sequence[float]]]] = None,
    final_eval: Optional[EvalReport] = None,
    figures: bool = True,
) -> list[Path]:
    """Write rounds.csv / rounds.json (Table-style columns), the embeddings
    export for external projection plots, and the report figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = out_dir / "rounds.csv"
    with csv_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv())
    written.append(csv_path)

    json_path = out_dir / "rounds.json"
    json_path.write_text(
        json.dumps([row.to_dict() for row in rows], indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    written.append(json_path)

    if embeddings is not None:
        emb_path = out_dir / "embeddings.csv"
        with emb_path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            dim = len(embeddings[0][3]) if embeddings else 0
            writer.writerow(["sample_id", "split", "label"] + [f"d{i}" for i in range(dim)])
            for sample_id, split, label, vector in embeddings:
                writer.writerow(
                    [sample_id, split, label or ""] + [f"{v:.8f}" for v in vector]
                )
        written.append(emb_path)

    if final_eval is not None:
        eval_path = out_dir / "eval.json"
        eval_path.write_text(
            json.dumps(final_eval.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        written.append(eval_path)

    if figures:
        written.extend(_plot_rounds(list(rows), out_dir))
        if final_eval is not None:
            written.append(plot_confusion(final_eval, out_dir))
    return written
