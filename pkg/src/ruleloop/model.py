"""The pluggable vision-language model boundary.

Two implementations sit behind one protocol: a remote client speaking an
OpenAI-style chat/embeddings wire format, and a deterministic simulator used
for desk-scale verification. The simulator is a pure function of
(config, sample_id, template_id, context digest):

- whether a prediction is *correct* depends only on (seed, sample_id,
  template_id) plus any qualifying guidance, never on unrelated context
  churn, so the feedback stability gate has stable ground to stand on;
- guidance qualifies for a sample when its text mentions the sample's rule
  category and its embedding lies within the similarity threshold of the
  sample's embedding. Guidance that names a canonical label acts as a
  directive and steers the predicted label outright; other qualifying
  guidance raises the correctness probability by
  min(feedback_sensitivity, 1 - accuracy).
"""

from __future__ import annotations

import base64
import io
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from hashlib import sha256
from time import perf_counter
from typing import Optional, Protocol, Sequence

import numpy as np
from PIL import Image

from .core import LABEL_ORDER, ComplianceLabel, Prediction, Sample
from .dataset import ImageStore
from .prompts import (
    PromptTemplate,
    RenderedPrompt,
    format_reply,
    parse_response,
    render,
    _scan_for_label,
)
from .rules import RuleRegistry

logger = logging.getLogger(__name__)

EMBED_DIM = 64
_GRID = 8
_QUANT = 16


class TransportError(RuntimeError):
    """Remote endpoint unreachable or persistently failing."""


@dataclass(frozen=True)
class Embedding:
    vector: tuple[float, ...]
    norm: float

    def __post_init__(self):
        actual = float(np.linalg.norm(self.vector))
        if abs(actual - self.norm) > 1e-9:
            raise ValueError(f"cached norm {self.norm} != actual {actual}")

    @classmethod
    def of(cls, values: Sequence[float]) -> "Embedding":
        vec = tuple(float(v) for v in values)
        return cls(vector=vec, norm=float(np.linalg.norm(vec)))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.vector)


def cosine(a: Embedding, b: Embedding) -> float:
    if a.norm == 0.0 or b.norm == 0.0:
        return 0.0
    return float(np.dot(a.array, b.array) / (a.norm * b.norm))


def euclidean(a: Embedding, b: Embedding) -> float:
    return float(np.linalg.norm(a.array - b.array))


@dataclass(frozen=True)
class ContextEntry:
    text: str
    embedding: Optional[Embedding] = None


@dataclass(frozen=True)
class ContextView:
    """What a model sees of the accumulated guidance for one query."""

    base_id: str = "E1"
    entries: tuple[ContextEntry, ...] = ()

    def texts(self) -> tuple[str, ...]:
        return tuple(entry.text for entry in self.entries)

    def digest(self) -> str:
        payload = self.base_id + "\x1f" + "\x1e".join(entry.text for entry in self.entries)
        return sha256(payload.encode("utf-8")).hexdigest()

    def extended(self, entry: ContextEntry) -> "ContextView":
        return ContextView(base_id=self.base_id, entries=self.entries + (entry,))


class ComplianceModel(Protocol):
    def query(
        self,
        sample: Sample,
        template: PromptTemplate,
        context: Optional[ContextView] = None,
    ) -> Prediction: ...

    def embed(self, image_ref: str) -> Embedding: ...


@dataclass(frozen=True)
class ModelEndpoint:
    base_url: str
    model_name: str
    auth_token: Optional[str] = None
    timeout_ms: int = 60_000
    max_retries: int = 2
    parallelism: int = 4
    chat_path: str = "/v1/chat/completions"
    embeddings_path: str = "/v1/embeddings"

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")


@dataclass(frozen=True)
class SimulatedModelConfig:
    seed: int = 0
    accuracy: float = 0.6
    confidence_correct_mean: float = 0.9
    confidence_correct_std: float = 0.05
    confidence_wrong_mean: float = 0.65
    confidence_wrong_std: float = 0.1
    json_malform_rate: float = 0.0
    feedback_sensitivity: float = 0.0
    similarity_threshold: float = 0.85
    confidence_quantum: float = 0.05

    def __post_init__(self):
        for name in ("accuracy", "json_malform_rate"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} out of [0,1]: {value}")
        if self.feedback_sensitivity < 0:
            raise ValueError("feedback_sensitivity must be >= 0")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "accuracy": self.accuracy,
            "confidence_correct_mean": self.confidence_correct_mean,
            "confidence_correct_std": self.confidence_correct_std,
            "confidence_wrong_mean": self.confidence_wrong_mean,
            "confidence_wrong_std": self.confidence_wrong_std,
            "json_malform_rate": self.json_malform_rate,
            "feedback_sensitivity": self.feedback_sensitivity,
            "similarity_threshold": self.similarity_threshold,
            "confidence_quantum": self.confidence_quantum,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "SimulatedModelConfig":
        return cls(**{k: record[k] for k in record if k in cls.__dataclass_fields__})


def _unit_float(*parts: object) -> float:
    """Deterministic uniform in [0,1) from hashed parts."""
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    digest = sha256(payload).digest()
    return int.from_bytes(digest[:8], "big") / float(1 << 64)


def _rng(*parts: object) -> np.random.Generator:
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return np.random.default_rng(int.from_bytes(sha256(payload).digest(), "big"))


def simulated_embedding(image_bytes: bytes, seed: int, dim: int = EMBED_DIM) -> Embedding:
    """Unit vector keyed by the image's quantised coarse luminance grid.

    The 8x8 block averages are quantised, hashed with the seed, and expanded
    into a seeded Gaussian direction. Images whose per-block luminance sums
    agree (the generator's near-duplicates) embed identically; unrelated
    images get independent directions, near-orthogonal at this dimension.
    """
    image = Image.open(io.BytesIO(image_bytes)).convert("L")
    if image.size != (_GRID, _GRID):
        image = image.resize((_GRID, _GRID), Image.BOX)
    grid = bytes(v // _QUANT for v in image.tobytes())
    rng = _rng("emb", seed, grid.hex())
    vec = rng.standard_normal(dim)
    vec /= np.linalg.norm(vec)
    return Embedding.of(vec)


class SimulatedModel:
    """Deterministic stand-in model with a regression-visible feedback hook."""

    def __init__(
        self,
        config: SimulatedModelConfig,
        store: Optional[ImageStore] = None,
        templates: Optional[dict[str, PromptTemplate]] = None,
    ):
        self.config = config
        self.store = store
        self._templates = templates
        self._embed_cache: dict[str, Embedding] = {}
        self._lock = threading.Lock()

    def with_config(self, config: SimulatedModelConfig) -> "SimulatedModel":
        clone = SimulatedModel(config, store=self.store, templates=self._templates)
        clone._embed_cache = self._embed_cache
        return clone

    def embed(self, image_ref: str) -> Embedding:
        with self._lock:
            cached = self._embed_cache.get(image_ref)
        if cached is not None:
            return cached
        if self.store is not None and image_ref in self.store:
            embedding = simulated_embedding(self.store.get(image_ref), self.config.seed)
        else:
            # Metadata-only corpora have no bytes; key on the ref itself.
            rng = _rng("emb-ref", self.config.seed, image_ref)
            vec = rng.standard_normal(EMBED_DIM)
            vec /= np.linalg.norm(vec)
            embedding = Embedding.of(vec)
        with self._lock:
            self._embed_cache[image_ref] = embedding
        return embedding

    def _latent_truth(self, sample: Sample) -> ComplianceLabel:
        if sample.ground_truth is not None:
            return sample.ground_truth
        pick = int(_unit_float("latent", self.config.seed, sample.sample_id) * 3)
        return LABEL_ORDER[min(pick, 2)]

    def _qualifying_guidance(
        self, sample: Sample, context: Optional[ContextView]
    ) -> tuple[bool, Optional[ComplianceLabel]]:
        """(probability boost applies, directive label if any)."""
        if context is None or not context.entries:
            return False, None
        sample_emb = self.embed(sample.image_ref)
        boost = False
        directive: Optional[ComplianceLabel] = None
        for entry in context.entries:
            if sample.rule_category_id not in entry.text:
                continue
            if entry.embedding is None:
                continue
            if cosine(entry.embedding, sample_emb) < self.config.similarity_threshold:
                continue
            label = _scan_for_label(entry.text)
            if label is not None:
                directive = label  # latest qualifying directive wins
            else:
                boost = True
        return boost, directive

    def _confidence(self, correct: bool, key: tuple) -> float:
        cfg = self.config
        mean = cfg.confidence_correct_mean if correct else cfg.confidence_wrong_mean
        std = cfg.confidence_correct_std if correct else cfg.confidence_wrong_std
        rng = _rng("conf", *key)
        value = None
        for _ in range(64):
            draw = rng.normal(mean, std)
            if 0.0 <= draw <= 1.0:
                value = draw
                break
        if value is None:
            value = min(1.0, max(0.0, mean))
        quantum = cfg.confidence_quantum
        if quantum > 0:
            value = round(value / quantum) * quantum
        return min(1.0, max(0.0, value))

    def query(
        self,
        sample: Sample,
        template: PromptTemplate,
        context: Optional[ContextView] = None,
    ) -> Prediction:
        cfg = self.config
        digest = context.digest() if context is not None else ""
        key = (cfg.seed, sample.sample_id, template.template_id, digest)

        malformed = _unit_float("malform", *key) < cfg.json_malform_rate
        if malformed:
            raw = "The scene could not be assessed against the provided standards."
            return parse_response(raw, template)

        truth = self._latent_truth(sample)
        boost, directive = self._qualifying_guidance(sample, context)
        if directive is not None:
            label = directive
        else:
            effective = cfg.accuracy
            if boost:
                effective = cfg.accuracy + min(cfg.feedback_sensitivity, 1.0 - cfg.accuracy)
            # Correctness keyed without the context digest: unrelated context
            # changes never flip a settled prediction.
            u = _unit_float("truth", cfg.seed, sample.sample_id, template.template_id)
            if u < effective:
                label = truth
            else:
                others = [l for l in LABEL_ORDER if l is not truth]
                pick = _unit_float("wrong", cfg.seed, sample.sample_id, template.template_id)
                label = others[0] if pick < 0.5 else others[1]

        confidence = self._confidence(label is truth, key) if template.expects_confidence else None
        explanation = None
        if template.expects_explanation:
            explanation = (
                f"Automated rationale for {sample.rule_category_id} "
                f"on scene {sample.image_ref[:8]}."
            )
        raw = format_reply(template, label, confidence=confidence, explanation=explanation)
        return parse_response(raw, template)


class RemoteModel:
    """HTTP client for an OpenAI-style multimodal endpoint."""

    def __init__(
        self,
        endpoint: ModelEndpoint,
        store: ImageStore,
        registry: RuleRegistry,
        templates: dict[str, PromptTemplate],
        transport=None,
    ):
        import httpx

        self.endpoint = endpoint
        self.store = store
        self.registry = registry
        self.templates = templates
        self._client = httpx.Client(
            base_url=endpoint.base_url,
            timeout=endpoint.timeout_ms / 1000.0,
            headers=(
                {"Authorization": f"Bearer {endpoint.auth_token}"}
                if endpoint.auth_token
                else {}
            ),
            transport=transport,
        )

    def _post(self, path: str, payload: dict) -> dict:
        import httpx

        last_error: Exception | None = None
        for attempt in range(self.endpoint.max_retries + 1):
            try:
                response = self._client.post(path, json=payload)
                if response.status_code >= 500:
                    last_error = TransportError(f"HTTP {response.status_code}")
                    continue
                response.raise_for_status()
                return response.json()
            except httpx.TimeoutException as exc:
                last_error = exc
            except httpx.HTTPError as exc:
                last_error = exc
                break
        raise TransportError(f"{path} failed after retries: {last_error}")

    def render_for(
        self,
        sample: Sample,
        template: PromptTemplate,
        context: Optional[ContextView] = None,
    ) -> RenderedPrompt:
        category = self.registry.get(sample.rule_category_id)
        texts = context.texts() if context is not None else ()
        return render(template, category, texts)

    def query(
        self,
        sample: Sample,
        template: PromptTemplate,
        context: Optional[ContextView] = None,
    ) -> Prediction:
        prompt = self.render_for(sample, template, context)
        image_b64 = base64.b64encode(self.store.get(sample.image_ref)).decode("ascii")
        payload = {
            "model": self.endpoint.model_name,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt.final_text},
                        {
                            "type": "image_url",
                            "image_url": {"url": f"data:image/png;base64,{image_b64}"},
                        },
                    ],
                }
            ],
            "temperature": 0,
        }
        started = perf_counter()
        try:
            reply = self._post(self.endpoint.chat_path, payload)
            raw = reply["choices"][0]["message"]["content"]
        except (TransportError, KeyError, IndexError, TypeError) as exc:
            logger.warning("query transport failure for %s: %s", sample.sample_id, exc)
            return Prediction(
                raw_response=f"<transport error: {exc}>",
                parse_ok=False,
                latency_ms=(perf_counter() - started) * 1000.0,
            )
        return parse_response(raw, template, latency_ms=(perf_counter() - started) * 1000.0)

    def embed(self, image_ref: str) -> Embedding:
        image_b64 = base64.b64encode(self.store.get(image_ref)).decode("ascii")
        payload = {"model": self.endpoint.model_name, "input": image_b64}
        reply = self._post(self.endpoint.embeddings_path, payload)
        try:
            vector = reply["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed embeddings reply: {exc}") from exc
        return Embedding.of(vector)


def batch_query(
    model: ComplianceModel,
    samples: Sequence[Sample],
    template: PromptTemplate,
    context: Optional[ContextView] = None,
    parallelism: int = 4,
) -> list[Prediction]:
    """Query every sample, preserving input order; failures stay per-item."""

    def one(sample: Sample) -> Prediction:
        try:
            return model.query(sample, template, context)
        except Exception as exc:  # noqa: BLE001 - isolation is the contract
            logger.warning("query failed for %s: %s", sample.sample_id, exc)
            return Prediction(raw_response=f"<error: {exc}>", parse_ok=False)

    if parallelism <= 1 or len(samples) <= 1:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, samples))
