"""Synthetic desk-scale image generator.

Real corpora are stock photos that cannot be redistributed, so tests and demo
runs use generated geometric scenes with embedded per-category ground truth.
Two properties are engineered in:

- near-duplicates of a scene preserve every 42x42 cell's luminance sum
  exactly (balanced +-1 pixel-pair transfers), so the simulated embedding of
  a duplicate is identical to its parent's;
- distinct scenes draw layouts and palettes independently, so their coarse
  luminance grids differ and their simulated embeddings are near-orthogonal.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from hashlib import sha256
from random import Random
from typing import Optional

from PIL import Image, ImageDraw

from .core import ComplianceLabel
from .dataset import ImageRecord, ImageStore, Manifest, build_manifest, dhash
from .rules import RuleRegistry

SIDE = 336
CELL = 42  # SIDE / 8; the simulated embedding averages over these blocks

# Label draw weights conditioned on the scene-level keyword flag; the
# aggregate roughly matches a corpus where Not Applicable dominates.
LABEL_WEIGHTS = {
    0: ((ComplianceLabel.COMPLIED, 0.35), (ComplianceLabel.VIOLATED, 0.05), (ComplianceLabel.NOT_APPLICABLE, 0.60)),
    1: ((ComplianceLabel.COMPLIED, 0.15), (ComplianceLabel.VIOLATED, 0.45), (ComplianceLabel.NOT_APPLICABLE, 0.40)),
}


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    domain: str
    seed: int
    index: int
    keyword_label: int
    labels: dict  # category_id -> ComplianceLabel

    def canonical(self) -> str:
        return json.dumps(
            {
                "scene_id": self.scene_id,
                "domain": self.domain,
                "seed": self.seed,
                "index": self.index,
                "keyword_label": self.keyword_label,
                "labels": {k: v.value for k, v in sorted(self.labels.items())},
            },
            sort_keys=True,
        )


def _draw_label(rng: Random, keyword_label: int) -> ComplianceLabel:
    roll = rng.random()
    acc = 0.0
    for label, weight in LABEL_WEIGHTS[keyword_label]:
        acc += weight
        if roll < acc:
            return label
    return ComplianceLabel.NOT_APPLICABLE


def generate_scenes(
    registry: RuleRegistry,
    domain: str,
    count: int,
    seed: int,
) -> list[SceneSpec]:
    """Deterministic scene specs with per-category ground truth."""
    categories = [c.category_id for c in registry.for_domain(domain)]
    specs = []
    for index in range(count):
        rng = Random(f"{seed}:{domain}:{index}:labels")
        keyword = rng.randrange(2)
        labels = {cid: _draw_label(rng, keyword) for cid in categories}
        specs.append(
            SceneSpec(
                scene_id=f"{domain}-{seed}-{index:05d}",
                domain=domain,
                seed=seed,
                index=index,
                keyword_label=keyword,
                labels=labels,
            )
        )
    return specs


def _palette_color(rng: Random) -> tuple[int, int, int]:
    # Mid-range channels leave headroom for the duplicate pixel transfers.
    return (rng.randint(40, 215), rng.randint(40, 215), rng.randint(40, 215))


def render_scene(spec: SceneSpec) -> bytes:
    """Render the scene to 336x336 PNG bytes. Pure function of the spec."""
    rng = Random(f"{spec.seed}:{spec.domain}:{spec.index}:scene")
    image = Image.new("RGB", (SIDE, SIDE), _palette_color(rng))
    draw = ImageDraw.Draw(image)
    # Two large panels so the coarse luminance grid varies scene to scene.
    for _ in range(2):
        x0, y0 = rng.randint(0, SIDE // 2), rng.randint(0, SIDE // 2)
        draw.rectangle([x0, y0, x0 + rng.randint(80, 200), y0 + rng.randint(80, 200)], fill=_palette_color(rng))
    for _ in range(rng.randint(3, 6)):
        shape = rng.choice(("rect", "ellipse", "line"))
        x0, y0 = rng.randint(0, SIDE - 60), rng.randint(0, SIDE - 60)
        x1, y1 = x0 + rng.randint(20, 120), y0 + rng.randint(20, 120)
        color = _palette_color(rng)
        if shape == "rect":
            draw.rectangle([x0, y0, min(x1, SIDE - 1), min(y1, SIDE - 1)], fill=color)
        elif shape == "ellipse":
            draw.ellipse([x0, y0, min(x1, SIDE - 1), min(y1, SIDE - 1)], fill=color)
        else:
            draw.line([x0, y0, min(x1, SIDE - 1), min(y1, SIDE - 1)], fill=color, width=rng.randint(3, 9))
    out = io.BytesIO()
    image.save(out, format="PNG")
    return out.getvalue()


def near_duplicate(png_bytes: bytes, variant_seed: str, transfers_per_cell: int = 4) -> bytes:
    """Perturb pixels without moving any 42x42 cell's luminance sum.

    Each transfer adds (1,1,1) to one pixel and subtracts (1,1,1) from
    another pixel of the same cell; the grayscale conversion is linear with
    unit coefficient sum, so per-cell luminance totals are exactly preserved
    while the bytes change.
    """
    rng = Random(variant_seed)
    image = Image.open(io.BytesIO(png_bytes)).convert("RGB")
    px = image.load()
    changed = 0
    for cy in range(SIDE // CELL):
        for cx in range(SIDE // CELL):
            for _ in range(transfers_per_cell):
                x1 = cx * CELL + rng.randrange(CELL)
                y1 = cy * CELL + rng.randrange(CELL)
                x2 = cx * CELL + rng.randrange(CELL)
                y2 = cy * CELL + rng.randrange(CELL)
                if (x1, y1) == (x2, y2):
                    continue
                r1, g1, b1 = px[x1, y1]
                r2, g2, b2 = px[x2, y2]
                if max(r1, g1, b1) > 250 or min(r2, g2, b2) < 5:
                    continue
                px[x1, y1] = (r1 + 1, g1 + 1, b1 + 1)
                px[x2, y2] = (r2 - 1, g2 - 1, b2 - 1)
                changed += 1
    out = io.BytesIO()
    image.save(out, format="PNG")
    return out.getvalue()


def virtual_record(spec: SceneSpec) -> ImageRecord:
    """Metadata-only ImageRecord for shape tests that never touch pixels."""
    digest = sha256(("scene:" + spec.canonical()).encode("utf-8")).digest()
    return ImageRecord(
        image_ref=digest.hex(),
        source_path=f"synthetic://{spec.scene_id}",
        phash=int.from_bytes(digest[:8], "big"),
        width=SIDE,
        height=SIDE,
        domain=spec.domain,
        keyword_label=spec.keyword_label,
    )


def materialize(
    specs: list[SceneSpec],
    store: ImageStore,
    duplicates_per_scene: int = 0,
) -> tuple[list[ImageRecord], dict[str, dict[str, ComplianceLabel]]]:
    """Render scenes (plus optional near-duplicates) into the store.

    Duplicates inherit the parent scene's labels and keyword flag; they are
    the "same scene" for embedding and feedback purposes.
    """
    records: list[ImageRecord] = []
    truths: dict[str, dict[str, ComplianceLabel]] = {}
    for spec in specs:
        base = render_scene(spec)
        variants = [base]
        for j in range(duplicates_per_scene):
            variants.append(near_duplicate(base, f"{spec.scene_id}:dup:{j}"))
        for k, payload in enumerate(variants):
            ref = store.put(payload)
            image = Image.open(io.BytesIO(payload))
            records.append(
                ImageRecord(
                    image_ref=ref,
                    source_path=f"synthetic://{spec.scene_id}" + (f"#dup{k}" if k else ""),
                    phash=dhash(image),
                    width=image.width,
                    height=image.height,
                    domain=spec.domain,
                    keyword_label=spec.keyword_label,
                )
            )
            truths[ref] = dict(spec.labels)
    return records, truths


def synthetic_manifest(
    registry: RuleRegistry,
    counts: dict[str, int],
    seed: int,
    store: Optional[ImageStore] = None,
    duplicates_per_scene: int = 0,
) -> Manifest:
    """Build a manifest for a synthetic corpus.

    With a store, scenes are rendered and content-addressed; without one,
    metadata-only records are used (cheap, for shape/split testing).
    """
    records: list[ImageRecord] = []
    truths: dict[str, dict[str, ComplianceLabel]] = {}
    for domain in sorted(counts):
        specs = generate_scenes(registry, domain, counts[domain], seed)
        if store is not None:
            rendered, scene_truths = materialize(specs, store, duplicates_per_scene)
            records.extend(rendered)
            truths.update(scene_truths)
        else:
            for spec in specs:
                record = virtual_record(spec)
                records.append(record)
                truths[record.image_ref] = dict(spec.labels)
    manifest = build_manifest(records, registry, truths=truths)
    manifest.provenance.append(f"synthetic_seed={seed}")
    return manifest
