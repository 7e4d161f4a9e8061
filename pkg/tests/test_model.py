import time

import numpy as np
import pytest

from ruleloop.core import ComplianceLabel, Sample
from ruleloop.dataset import ImageStore
from ruleloop.model import (
    ContextEntry,
    ContextView,
    Embedding,
    SimulatedModel,
    SimulatedModelConfig,
    batch_query,
    cosine,
    simulated_embedding,
)
from ruleloop.synthetic import generate_scenes, materialize, near_duplicate, render_scene


def make_samples(n, truth=ComplianceLabel.COMPLIED, category="warehouse-ladder-use"):
    return [
        Sample(
            sample_id=f"s{i:04d}",
            image_ref=f"ref{i:04d}",
            rule_category_id=category,
            domain="warehouse",
            ground_truth=truth,
        )
        for i in range(n)
    ]


class TestEmbeddingType:
    def test_norm_cached(self):
        emb = Embedding.of([3.0, 4.0])
        assert emb.norm == 5.0

    def test_norm_mismatch_rejected(self):
        with pytest.raises(ValueError):
            Embedding(vector=(3.0, 4.0), norm=1.0)


class TestSimulatedEmbedding:
    def test_deterministic(self, registry):
        spec = generate_scenes(registry, "traffic", 1, seed=3)[0]
        payload = render_scene(spec)
        a = simulated_embedding(payload, seed=1)
        b = simulated_embedding(payload, seed=1)
        assert a == b

    def test_unit_norm(self, registry):
        spec = generate_scenes(registry, "construction", 1, seed=4)[0]
        emb = simulated_embedding(render_scene(spec), seed=9)
        assert abs(emb.norm - 1.0) <= 1e-9

    def test_near_duplicates_converge(self, registry):
        spec = generate_scenes(registry, "warehouse", 1, seed=5)[0]
        base = render_scene(spec)
        for j in range(3):
            dup = near_duplicate(base, f"variant-{j}")
            assert dup != base
            assert cosine(
                simulated_embedding(base, seed=2), simulated_embedding(dup, seed=2)
            ) >= 0.95

    def test_distinct_scenes_nearly_orthogonal(self, registry):
        # Monte-Carlo over generator pairs
        specs = generate_scenes(registry, "traffic", 46, seed=6)
        embeddings = [simulated_embedding(render_scene(s), seed=2) for s in specs]
        pairs = [
            cosine(embeddings[i], embeddings[j])
            for i in range(len(specs))
            for j in range(i + 1, len(specs))
        ]
        assert len(pairs) >= 1000
        below = sum(1 for value in pairs if value < 0.5)
        assert below / len(pairs) >= 0.99


class TestSimulatedModel:
    def test_perfect_accuracy(self, templates):
        model = SimulatedModel(SimulatedModelConfig(seed=1, accuracy=1.0))
        for sample in make_samples(50):
            pred = model.query(sample, templates.get("C4"))
            assert pred.parse_ok and pred.label is sample.ground_truth

    def test_zero_accuracy_never_truth(self, templates):
        model = SimulatedModel(SimulatedModelConfig(seed=1, accuracy=0.0))
        for sample in make_samples(50):
            pred = model.query(sample, templates.get("C1"))
            assert pred.label is not sample.ground_truth
            assert pred.label in (ComplianceLabel.VIOLATED, ComplianceLabel.NOT_APPLICABLE)

    def test_monte_carlo_accuracy(self, templates):
        # oracle: direct count over 10,000 deterministic queries
        model = SimulatedModel(SimulatedModelConfig(seed=7, accuracy=0.7))
        samples = make_samples(10_000)
        template = templates.get("C4")
        correct = sum(
            1 for s in samples if model.query(s, template).label is s.ground_truth
        )
        assert abs(correct / len(samples) - 0.7) <= 0.02

    def test_replay_byte_identical(self, templates):
        config = SimulatedModelConfig(seed=12, accuracy=0.6, json_malform_rate=0.1)
        a = SimulatedModel(config)
        b = SimulatedModel(config)
        template = templates.get("E1")
        for sample in make_samples(200):
            assert a.query(sample, template) == b.query(sample, template)

    def test_malform_rate(self, templates):
        model = SimulatedModel(SimulatedModelConfig(seed=3, accuracy=0.9, json_malform_rate=0.25))
        preds = [model.query(s, templates.get("C1")) for s in make_samples(2000)]
        failed = sum(1 for p in preds if not p.parse_ok)
        assert abs(failed / len(preds) - 0.25) <= 0.03

    def test_confidence_separation(self, templates):
        model = SimulatedModel(SimulatedModelConfig(seed=5, accuracy=0.5))
        template = templates.get("C4")
        correct_confs, wrong_confs = [], []
        for sample in make_samples(2000):
            pred = model.query(sample, template)
            (correct_confs if pred.label is sample.ground_truth else wrong_confs).append(
                pred.confidence
            )
        assert np.mean(correct_confs) > np.mean(wrong_confs)

    def test_context_changes_do_not_flip_labels(self, templates):
        """Unrelated context churn must not re-randomise correctness."""
        model = SimulatedModel(SimulatedModelConfig(seed=8, accuracy=0.6))
        template = templates.get("E1")
        noise = ContextView(entries=(ContextEntry(text="irrelevant chatter"),))
        for sample in make_samples(100):
            bare = model.query(sample, template)
            noisy = model.query(sample, template, noise)
            assert bare.label is noisy.label


class TestFeedbackHook:
    @pytest.fixture()
    def family(self, registry, tmp_path):
        store = ImageStore(tmp_path)
        specs = generate_scenes(registry, "warehouse", 1, seed=21)
        records, truths = materialize(specs, store, duplicates_per_scene=4)
        samples = [
            Sample(
                sample_id=f"fam{i}",
                image_ref=record.image_ref,
                rule_category_id="warehouse-ladder-use",
                domain="warehouse",
                ground_truth=ComplianceLabel.VIOLATED,
            )
            for i, record in enumerate(records)
        ]
        return store, samples

    def test_boost_raises_accuracy_on_similar_samples(self, templates, family):
        store, samples = family
        config = SimulatedModelConfig(seed=2, accuracy=0.3, feedback_sensitivity=0.6)
        model = SimulatedModel(config, store=store)
        template = templates.get("C4")
        guide = ContextEntry(
            text="for warehouse-ladder-use watch hand placement on the rails",
            embedding=model.embed(samples[0].image_ref),
        )
        boosted = ContextView(entries=(guide,))
        plain_correct = sum(
            1 for s in samples if model.query(s, template).label is s.ground_truth
        )
        boosted_correct = sum(
            1 for s in samples if model.query(s, template, boosted).label is s.ground_truth
        )
        assert boosted_correct >= plain_correct

    def test_boost_requires_category_mention(self, templates, family):
        store, samples = family
        config = SimulatedModelConfig(seed=2, accuracy=0.0, feedback_sensitivity=1.0)
        model = SimulatedModel(config, store=store)
        template = templates.get("C4")
        wrong_category = ContextView(
            entries=(
                ContextEntry(
                    text="for warehouse-forklift-use keep distance",
                    embedding=model.embed(samples[0].image_ref),
                ),
            )
        )
        for sample in samples:
            assert model.query(sample, template, wrong_category).label is not sample.ground_truth

    def test_boost_capped_at_one(self, templates, family):
        store, samples = family
        config = SimulatedModelConfig(seed=2, accuracy=0.4, feedback_sensitivity=5.0)
        model = SimulatedModel(config, store=store)
        template = templates.get("C4")
        guide = ContextView(
            entries=(
                ContextEntry(
                    text="for warehouse-ladder-use check the feet",
                    embedding=model.embed(samples[0].image_ref),
                ),
            )
        )
        # boost = min(sensitivity, 1-acc) -> effective accuracy exactly 1.0
        for sample in samples:
            assert model.query(sample, template, guide).label is sample.ground_truth

    def test_directive_steers_label(self, templates, family):
        store, samples = family
        model = SimulatedModel(
            SimulatedModelConfig(seed=2, accuracy=0.5, feedback_sensitivity=0.2), store=store
        )
        template = templates.get("C4")
        directive = ContextView(
            entries=(
                ContextEntry(
                    text="for warehouse-ladder-use always answer Complied here",
                    embedding=model.embed(samples[0].image_ref),
                ),
            )
        )
        for sample in samples:
            assert model.query(sample, template, directive).label is ComplianceLabel.COMPLIED


class TestBatchQuery:
    def test_order_preserved(self, templates):
        model = SimulatedModel(SimulatedModelConfig(seed=1, accuracy=1.0))
        samples = make_samples(5)
        preds = batch_query(model, samples, templates.get("C1"), parallelism=2)
        assert len(preds) == 5
        solo = [model.query(s, templates.get("C1")) for s in samples]
        assert preds == solo

    def test_failure_isolation(self, templates):
        model = SimulatedModel(SimulatedModelConfig(seed=1, accuracy=1.0))
        samples = make_samples(4)

        class Flaky:
            def query(self, sample, template, context=None):
                if sample.sample_id == "s0001":
                    raise RuntimeError("boom")
                return model.query(sample, template, context)

            def embed(self, ref):
                return model.embed(ref)

        preds = batch_query(Flaky(), samples, templates.get("C1"), parallelism=3)
        assert [p.parse_ok for p in preds] == [True, False, True, True]

    def test_500_simulated_under_5s(self, templates):
        model = SimulatedModel(SimulatedModelConfig(seed=1, accuracy=0.8))
        samples = make_samples(500)
        started = time.perf_counter()
        preds = batch_query(model, samples, templates.get("C4"), parallelism=8)
        assert time.perf_counter() - started < 5.0
        assert len(preds) == 500
