import math
from random import Random

import numpy as np
import pytest

from ruleloop.core import (
    LABEL_ORDER,
    ComplianceLabel,
    LabeledSample,
    LabelSource,
    Prediction,
    Sample,
)
from ruleloop.loop import (
    Centroid,
    LoopConfig,
    MissingConfidence,
    RoundState,
    Strength,
    calibrate,
    categorise,
    compute_threshold,
    ground_truth_annotator,
    run_round,
    update_centroids,
)
from ruleloop.model import Embedding, SimulatedModel, SimulatedModelConfig


def sample(i, category="warehouse-ladder-use", truth=ComplianceLabel.COMPLIED):
    return Sample(
        sample_id=f"s{i:04d}",
        image_ref=f"ref{i:04d}",
        rule_category_id=category,
        domain="warehouse",
        ground_truth=truth,
    )


def pred(label, confidence=None, ok=True):
    return Prediction(
        raw_response="",
        label=label if ok else None,
        confidence=confidence,
        parse_ok=ok,
    )


class TestComputeThreshold:
    def test_max(self):
        assert compute_threshold([0.9, 0.9, 0.8]) == 0.9

    def test_singleton(self):
        assert compute_threshold([0.5]) == 0.5

    def test_empty_undefined(self):
        assert compute_threshold([]) is None
        assert compute_threshold([None, None]) is None


class TestCategorise:
    def test_disagreement_is_weak(self):
        results = categorise(
            [(sample(0), pred(ComplianceLabel.COMPLIED, 0.9), pred(ComplianceLabel.VIOLATED, 0.9))]
        )
        assert results[0].category is Strength.WEAK

    def test_parse_failure_is_weak(self):
        results = categorise(
            [(sample(0), pred(None, ok=False), pred(ComplianceLabel.COMPLIED, 0.9))]
        )
        assert results[0].category is Strength.WEAK

    def test_agreement_at_theta_is_strong(self):
        results = categorise(
            [(sample(0), pred(ComplianceLabel.COMPLIED, 0.8), pred(ComplianceLabel.COMPLIED, 0.8))],
            theta_override=0.8,
        )
        assert results[0].category is Strength.STRONG

    def test_batch_max_rule(self):
        # confidences {0.9 x8, 0.7 x2}, all agreeing -> theta 0.9; the two 0.7
        # samples weak, eight strong (hand-evaluated categorisation rule)
        pairs = []
        for i in range(10):
            confidence = 0.7 if i < 2 else 0.9
            pairs.append(
                (
                    sample(i),
                    pred(ComplianceLabel.COMPLIED),
                    pred(ComplianceLabel.COMPLIED, confidence),
                )
            )
        results = categorise(pairs)
        weak = [r for r in results if r.category is Strength.WEAK]
        assert len(weak) == 2
        assert {r.sample_id for r in weak} == {"s0000", "s0001"}

    def test_no_confidence_anywhere_all_weak(self):
        pairs = [
            (sample(i), pred(ComplianceLabel.COMPLIED), pred(ComplianceLabel.COMPLIED))
            for i in range(4)
        ]
        assert all(r.category is Strength.WEAK for r in categorise(pairs))

    def test_partition_total_and_exclusive(self):
        rng = Random(17)
        pairs = []
        for i in range(300):
            ok_a, ok_b = rng.random() > 0.1, rng.random() > 0.1
            label_a = rng.choice(LABEL_ORDER)
            label_b = rng.choice(LABEL_ORDER)
            conf_b = rng.choice([None, round(rng.uniform(0.3, 1.0), 2)])
            pairs.append(
                (sample(i), pred(label_a, ok=ok_a), pred(label_b, conf_b, ok=ok_b))
            )
        results = categorise(pairs)
        assert len(results) == 300
        assert all(r.category in (Strength.WEAK, Strength.STRONG) for r in results)
        for item, result in zip(pairs, results):
            _, a, b = item
            if result.category is Strength.STRONG:
                assert a.parse_ok and b.parse_ok and a.label is b.label


class TestUpdateCentroids:
    def embed_table(self, vectors):
        table = {f"ref{i:04d}": Embedding.of(v) for i, v in enumerate(vectors)}
        return lambda ref: table[ref]

    def human(self, i, label, category="warehouse-ladder-use"):
        return LabeledSample(
            sample=sample(i, category=category),
            label=label,
            weight=1.0,
            source=LabelSource.HUMAN,
        )

    def test_mean_of_two(self):
        embed = self.embed_table([[1.0, 0.0], [0.0, 1.0]])
        centroids = update_centroids(
            [self.human(0, ComplianceLabel.COMPLIED), self.human(1, ComplianceLabel.COMPLIED)],
            embed,
        )
        assert len(centroids) == 1
        assert centroids[0].mean.vector == (0.5, 0.5)
        assert centroids[0].count == 2

    def test_empty(self):
        assert update_centroids([], lambda ref: Embedding.of([1.0])) == []

    def test_pseudo_rejected(self):
        item = LabeledSample(
            sample=sample(0), label=ComplianceLabel.COMPLIED,
            weight=0.5, source=LabelSource.PSEUDO,
        )
        with pytest.raises(ValueError):
            update_centroids([item], lambda ref: Embedding.of([1.0]))

    def test_against_brute_force_grouping(self):
        rng = Random(5)
        categories = ["warehouse-ladder-use", "warehouse-forklift-use"]
        labels = list(LABEL_ORDER)
        items = []
        vectors = []
        for i in range(30):
            vectors.append([rng.uniform(-1, 1) for _ in range(4)])
            items.append(
                self.human(i, rng.choice(labels), category=rng.choice(categories))
            )
        embed = self.embed_table(vectors)
        centroids = update_centroids(items, embed)
        # oracle: brute-force mean per (category, label) group
        groups = {}
        for item, vector in zip(items, vectors):
            groups.setdefault((item.sample.rule_category_id, item.label), []).append(vector)
        assert len(centroids) == len(groups)
        for centroid in centroids:
            members = groups[(centroid.rule_category_id, centroid.label)]
            expected = np.mean(np.array(members), axis=0)
            assert np.allclose(centroid.mean.array, expected)
            assert centroid.count == len(members)


def brute_force_calibrate(pred_, sample_, embedding, centroids, a_match, a_mismatch, metric):
    """Oracle: exhaustive nearest-centroid scan + multiply + clamp."""
    candidates = [c for c in centroids if c.rule_category_id == sample_.rule_category_id]
    if not candidates:
        return pred_.confidence, False
    best = None
    for centroid in candidates:
        if metric == "cosine":
            d = 1.0 - float(
                np.dot(embedding.array, centroid.mean.array)
                / (embedding.norm * centroid.mean.norm)
            )
        else:
            d = float(np.linalg.norm(embedding.array - centroid.mean.array))
        key = (d, LABEL_ORDER.index(centroid.label))
        if best is None or key < best[0]:
            best = (key, centroid)
    alpha = a_match if best[1].label is pred_.label else a_mismatch
    return min(1.0, max(0.0, pred_.confidence * alpha)), True


class TestCalibrate:
    def make_centroid(self, category, label, vector):
        return Centroid(
            rule_category_id=category, label=label, mean=Embedding.of(vector), count=1
        )

    def test_match_preserves(self):
        centroids = [
            self.make_centroid("warehouse-ladder-use", ComplianceLabel.COMPLIED, [1.0, 0.0])
        ]
        weight, calibrated = calibrate(
            pred(ComplianceLabel.COMPLIED, 0.8), sample(0), Embedding.of([1.0, 0.1]),
            centroids, alpha_match=1.0, alpha_mismatch=0.5,
        )
        assert calibrated and weight == 0.8

    def test_mismatch_downscales(self):
        centroids = [
            self.make_centroid("warehouse-ladder-use", ComplianceLabel.VIOLATED, [1.0, 0.0])
        ]
        weight, calibrated = calibrate(
            pred(ComplianceLabel.COMPLIED, 0.8), sample(0), Embedding.of([1.0, 0.1]),
            centroids, alpha_match=1.0, alpha_mismatch=0.5,
        )
        assert calibrated and weight == pytest.approx(0.4)

    def test_no_centroids_uncalibrated(self):
        weight, calibrated = calibrate(
            pred(ComplianceLabel.COMPLIED, 0.8), sample(0), Embedding.of([1.0]), []
        )
        assert not calibrated and weight == 0.8

    def test_missing_confidence(self):
        with pytest.raises(MissingConfidence):
            calibrate(pred(ComplianceLabel.COMPLIED, None), sample(0), Embedding.of([1.0]), [])

    def test_other_category_centroids_ignored(self):
        centroids = [
            self.make_centroid("warehouse-forklift-use", ComplianceLabel.VIOLATED, [1.0, 0.0])
        ]
        weight, calibrated = calibrate(
            pred(ComplianceLabel.COMPLIED, 0.6), sample(0), Embedding.of([1.0, 0.0]), centroids
        )
        assert not calibrated and weight == 0.6

    def test_ordering_property(self):
        # for fixed base confidence, match weight >= mismatch weight
        match_c = [self.make_centroid("warehouse-ladder-use", ComplianceLabel.COMPLIED, [1.0])]
        mismatch_c = [self.make_centroid("warehouse-ladder-use", ComplianceLabel.VIOLATED, [1.0])]
        for base in (0.1, 0.5, 0.9):
            w_match, _ = calibrate(
                pred(ComplianceLabel.COMPLIED, base), sample(0), Embedding.of([1.0]), match_c,
                alpha_match=1.0, alpha_mismatch=0.5,
            )
            w_mis, _ = calibrate(
                pred(ComplianceLabel.COMPLIED, base), sample(0), Embedding.of([1.0]), mismatch_c,
                alpha_match=1.0, alpha_mismatch=0.5,
            )
            assert w_match >= w_mis

    def test_oracle_equivalence_randomised(self):
        rng = Random(99)
        categories = ["warehouse-ladder-use", "warehouse-forklift-use",
                      "warehouse-surface-condition"]
        for trial in range(200):
            dim = rng.choice([2, 4, 8])
            centroids = [
                Centroid(
                    rule_category_id=rng.choice(categories),
                    label=rng.choice(LABEL_ORDER),
                    mean=Embedding.of([rng.uniform(-1, 1) for _ in range(dim)]),
                    count=rng.randint(1, 5),
                )
                for _ in range(rng.randint(0, 6))
            ]
            target = sample(trial, category=rng.choice(categories))
            embedding = Embedding.of([rng.uniform(-1, 1) for _ in range(dim)])
            base = round(rng.uniform(0.0, 1.0), 3)
            prediction = pred(rng.choice(LABEL_ORDER), base)
            a_match = rng.choice([1.0, 1.2, 0.9])
            a_mismatch = rng.choice([0.5, 0.3, 0.8])
            metric = rng.choice(["euclidean", "cosine"])
            got = calibrate(
                prediction, target, embedding, centroids,
                alpha_match=a_match, alpha_mismatch=a_mismatch, metric=metric,
            )
            want = brute_force_calibrate(
                prediction, target, embedding, centroids, a_match, a_mismatch, metric
            )
            assert got == want, f"trial {trial}"


class TestRunRound:
    def setup_state(self, registry, workspace, n_images=20, budget=100, seed=6):
        from ruleloop.dataset import ImageStore
        from ruleloop.synthetic import synthetic_manifest

        store = ImageStore(workspace)
        manifest = synthetic_manifest(registry, {"warehouse": n_images}, seed=seed, store=store)
        model = SimulatedModel(
            SimulatedModelConfig(seed=seed, accuracy=0.7), store=store
        )
        state = RoundState(
            pool_unprobed=list(manifest.samples), budget_remaining=budget
        )
        return state, model

    def probe_templates(self, templates):
        return (templates.get("C1"), templates.get("C4"))

    def test_partition_and_accounting(self, registry, templates, workspace):
        state, model = self.setup_state(registry, workspace)
        config = LoopConfig(increments=(50,), theta=0.7)
        new_state, _ = run_round(
            state, model, ground_truth_annotator, None, self.probe_templates(templates), config
        )
        assert new_state.round == 1
        record = new_state.history[-1]
        assert record.weak + record.strong == record.probed == 50
        assert new_state.n_human_cum + new_state.n_pseudo_cum + new_state.n_dropped == 50
        for item in new_state.pool_labeled:
            if item.source is LabelSource.HUMAN:
                assert item.weight == 1.0

    def test_budget_zero_all_pseudo(self, registry, templates, workspace):
        state, model = self.setup_state(registry, workspace, budget=0)
        config = LoopConfig(increments=(40,), theta=0.7)
        new_state, _ = run_round(
            state, model, ground_truth_annotator, None, self.probe_templates(templates), config
        )
        assert new_state.n_human_cum == 0
        assert new_state.n_pseudo_cum + new_state.n_dropped == 40

    def test_budget_cap_respected(self, registry, templates, workspace):
        state, model = self.setup_state(registry, workspace, budget=5)
        config = LoopConfig(increments=(60,), theta=0.99)  # almost everything weak
        new_state, _ = run_round(
            state, model, ground_truth_annotator, None, self.probe_templates(templates), config
        )
        assert new_state.n_human_cum <= 5
        assert new_state.budget_remaining == 5 - new_state.n_human_cum
        overflow = [
            item for item in new_state.pool_labeled if "budget-overflow" in item.flags
        ]
        assert overflow, "expected overflow pseudo-labels beyond the budget"
        assert all(item.source is LabelSource.PSEUDO for item in overflow)

    def test_empty_pool_counter_only(self, registry, templates, workspace):
        state, model = self.setup_state(registry, workspace)
        state.pool_unprobed = []
        new_state, _ = run_round(
            state, model, ground_truth_annotator, None, self.probe_templates(templates),
            LoopConfig(increments=(10,)),
        )
        assert new_state.round == state.round + 1
        assert new_state.pool_labeled == state.pool_labeled

    def test_monotone_counts_across_rounds(self, registry, templates, workspace):
        state, model = self.setup_state(registry, workspace, n_images=30, budget=60)
        config = LoopConfig(increments=(40, 40, 40), theta=0.7)
        previous_h, previous_p = 0, 0
        for _ in range(3):
            state, model = run_round(
                state, model, ground_truth_annotator, None,
                self.probe_templates(templates), config,
            )
            assert state.n_human_cum >= previous_h
            assert state.n_pseudo_cum >= previous_p
            previous_h, previous_p = state.n_human_cum, state.n_pseudo_cum
        assert state.n_human_cum <= 60

    def test_deterministic_replay(self, registry, templates, workspace):
        config = LoopConfig(increments=(30, 30), theta=0.7)
        trajectories = []
        for _ in range(2):
            state, model = self.setup_state(registry, workspace, n_images=20, seed=4)
            for _ in range(2):
                state, model = run_round(
                    state, model, ground_truth_annotator, None,
                    self.probe_templates(templates), config,
                )
            trajectories.append(state.to_dict())
        assert trajectories[0] == trajectories[1]

    def test_state_round_trip(self, registry, templates, workspace, tmp_path):
        state, model = self.setup_state(registry, workspace)
        config = LoopConfig(increments=(20,), theta=0.7)
        state, _ = run_round(
            state, model, ground_truth_annotator, None, self.probe_templates(templates), config
        )
        path = tmp_path / "round.json"
        state.save(path)
        loaded = RoundState.load(path)
        assert loaded.to_dict() == state.to_dict()


class TestSimulatedTrainerCurve:
    def test_formula_value(self):
        from ruleloop.trainer import saturating_accuracy

        # oracle: direct evaluation of the curve
        expected = 0.95 - 0.35 * math.exp(-1.5)
        assert saturating_accuracy(0.6, 0.95, 1e-3, 1500) == pytest.approx(expected)
        assert saturating_accuracy(0.6, 0.95, 1e-3, 1500) == pytest.approx(0.8719, abs=5e-4)
