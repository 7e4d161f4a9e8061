"""Image ingestion, preprocessing, manifests and stratified splits.

Every retained image is resized so its shorter side is 336 px (bilinear),
center-cropped to 336x336, stored content-addressed, and paired with all five
rule categories of its domain. Near-duplicates are dropped with a 64-bit
difference hash. Splits assign whole images, never individual samples, so an
image's five samples always live in the same split.
"""

from __future__ import annotations

import io
import json
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from hashlib import sha256
from pathlib import Path
from random import Random
from typing import Iterable, Optional

from PIL import Image, UnidentifiedImageError

from .core import ComplianceLabel, Sample, parse_label
from .rules import RuleRegistry, UnknownDomain  # noqa: F401 - build_manifest raises it

TARGET_SIDE = 336
DEFAULT_DUP_DISTANCE = 4
RESIZE_FILTER = "bilinear"


class DecodeError(ValueError):
    """Input bytes could not be decoded as a raster image."""


class InsufficientImages(ValueError):
    """A domain has fewer images than the requested val+test allocation."""


@dataclass(frozen=True)
class ImageRecord:
    image_ref: str
    source_path: str
    phash: int
    width: int
    height: int
    domain: str
    keyword_label: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "image_ref": self.image_ref,
            "source_path": self.source_path,
            "phash": f"{self.phash:016x}",
            "width": self.width,
            "height": self.height,
            "domain": self.domain,
            "keyword_label": self.keyword_label,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "ImageRecord":
        return cls(
            image_ref=record["image_ref"],
            source_path=record.get("source_path", ""),
            phash=int(record["phash"], 16),
            width=int(record["width"]),
            height=int(record["height"]),
            domain=record["domain"],
            keyword_label=record.get("keyword_label"),
        )


def dhash(image: Image.Image) -> int:
    """64-bit difference hash: 9x8 grayscale, bit per horizontal gradient."""
    small = image.convert("L").resize((9, 8), Image.BILINEAR)
    px = small.load()
    bits = 0
    for y in range(8):
        for x in range(8):
            bits = (bits << 1) | (1 if px[x + 1, y] > px[x, y] else 0)
    return bits


def hamming(a: int, b: int) -> int:
    return (a ^ b).bit_count()


def dedup(images: list[ImageRecord], d_dup: int = DEFAULT_DUP_DISTANCE) -> list[ImageRecord]:
    """Keep the first of every near-duplicate group, in input order.

    A later image is dropped when its hash lands within Hamming distance
    d_dup (inclusive) of any already-kept image. Idempotent by construction.
    """
    kept: list[ImageRecord] = []
    for record in images:
        if all(hamming(record.phash, k.phash) > d_dup for k in kept):
            kept.append(record)
    return kept


def preprocess(image_bytes: bytes) -> bytes:
    """Resize shorter side to 336 (aspect preserved), center-crop, emit PNG."""
    try:
        image = Image.open(io.BytesIO(image_bytes))
        image.load()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from exc
    image = image.convert("RGB")
    w, h = image.size
    if w <= h:
        new_w = TARGET_SIDE
        new_h = max(TARGET_SIDE, round(h * TARGET_SIDE / w))
    else:
        new_h = TARGET_SIDE
        new_w = max(TARGET_SIDE, round(w * TARGET_SIDE / h))
    image = image.resize((new_w, new_h), Image.BILINEAR)
    left = (new_w - TARGET_SIDE) // 2
    top = (new_h - TARGET_SIDE) // 2
    image = image.crop((left, top, left + TARGET_SIDE, top + TARGET_SIDE))
    out = io.BytesIO()
    image.save(out, format="PNG")
    return out.getvalue()


def content_ref(image_bytes: bytes) -> str:
    return sha256(image_bytes).hexdigest()


class ImageStore:
    """Content-addressed PNG store under images/<first-2-hex>/<hash>.png."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path_for(self, image_ref: str) -> Path:
        return self.root / "images" / image_ref[:2] / f"{image_ref}.png"

    def put(self, image_bytes: bytes) -> str:
        ref = content_ref(image_bytes)
        path = self.path_for(ref)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(image_bytes)
        return ref

    def get(self, image_ref: str) -> bytes:
        path = self.path_for(image_ref)
        if not path.exists():
            raise FileNotFoundError(f"image not in store: {image_ref}")
        return path.read_bytes()

    def __contains__(self, image_ref: str) -> bool:
        return self.path_for(image_ref).exists()


@dataclass
class Manifest:
    """All samples of a corpus plus the image index used for stratification."""

    samples: list[Sample] = field(default_factory=list)
    images: list[ImageRecord] = field(default_factory=list)
    provenance: list[str] = field(default_factory=list)

    def counts(self) -> dict[tuple[str, str], int]:
        return dict(Counter((s.domain, s.split) for s in self.samples))

    def by_split(self, split: str) -> list[Sample]:
        return [s for s in self.samples if s.split == split]

    def save(self, manifest_path: str | Path, images_path: str | Path | None = None) -> None:
        manifest_path = Path(manifest_path)
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        with manifest_path.open("w", encoding="utf-8") as handle:
            for sample in self.samples:
                handle.write(json.dumps(sample.to_dict(), sort_keys=True) + "\n")
        if images_path is None:
            images_path = manifest_path.with_name("images.jsonl")
        with Path(images_path).open("w", encoding="utf-8") as handle:
            for note in self.provenance:
                handle.write(json.dumps({"provenance": note}) + "\n")
            for record in self.images:
                handle.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, manifest_path: str | Path, images_path: str | Path | None = None) -> "Manifest":
        manifest_path = Path(manifest_path)
        samples = [
            Sample.from_dict(json.loads(line))
            for line in manifest_path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        images: list[ImageRecord] = []
        provenance: list[str] = []
        if images_path is None:
            images_path = manifest_path.with_name("images.jsonl")
        images_path = Path(images_path)
        if images_path.exists():
            for line in images_path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                record = json.loads(line)
                if "provenance" in record:
                    provenance.append(record["provenance"])
                else:
                    images.append(ImageRecord.from_dict(record))
        return cls(samples=samples, images=images, provenance=provenance)


def sample_id_for(image_ref: str, category_id: str) -> str:
    return f"{image_ref[:16]}:{category_id}"


def build_manifest(
    images: Iterable[ImageRecord],
    registry: RuleRegistry,
    truths: Optional[dict[str, dict[str, ComplianceLabel]]] = None,
) -> Manifest:
    """Pair every image with all five rule categories of its domain.

    ``truths`` optionally supplies per-(image, category) ground truth, keyed
    by image_ref then category_id; bundled/simulated corpora provide it,
    production ingestion does not.
    """
    images = list(images)
    samples: list[Sample] = []
    for record in images:
        categories = registry.for_domain(record.domain)
        image_truths = (truths or {}).get(record.image_ref, {})
        for category in categories:
            truth = image_truths.get(category.category_id)
            samples.append(
                Sample(
                    sample_id=sample_id_for(record.image_ref, category.category_id),
                    image_ref=record.image_ref,
                    rule_category_id=category.category_id,
                    domain=record.domain,
                    split="train",
                    ground_truth=truth,
                )
            )
    return Manifest(
        samples=samples,
        images=images,
        provenance=[f"resize_filter={RESIZE_FILTER}", f"target_side={TARGET_SIDE}"],
    )


def _apportion(total: int, sizes: dict, caps: dict) -> dict:
    """Largest-remainder apportionment of ``total`` across strata.

    Quotas stay within +-1 of each stratum's exact proportional share and
    never exceed the stratum's cap.
    """
    population = sum(sizes.values())
    if population == 0 or total == 0:
        return {key: 0 for key in sizes}
    shares = {key: total * n / population for key, n in sizes.items()}
    quotas = {key: min(int(shares[key]), caps[key]) for key in sizes}
    remaining = total - sum(quotas.values())
    order = sorted(sizes, key=lambda key: (-(shares[key] - int(shares[key])), str(key)))
    while remaining > 0:
        progressed = False
        for key in order:
            if remaining == 0:
                break
            if quotas[key] < caps[key]:
                quotas[key] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise InsufficientImages("strata exhausted during apportionment")
    return quotas


def split(
    manifest: Manifest,
    seed: int,
    val_images: int,
    test_images: int,
) -> Manifest:
    """Assign splits per image, stratified by (domain, keyword_label).

    Per domain: exactly ``val_images`` images go to val and ``test_images``
    to test, the remainder to train. Deterministic for a given seed and
    image set.
    """
    by_domain: dict[str, list[ImageRecord]] = defaultdict(list)
    for record in manifest.images:
        by_domain[record.domain].append(record)

    assignment: dict[str, str] = {}
    for domain in sorted(by_domain):
        records = sorted(by_domain[domain], key=lambda r: r.image_ref)
        if len(records) < val_images + test_images:
            raise InsufficientImages(
                f"domain {domain}: {len(records)} images < {val_images + test_images}"
            )
        rng = Random(f"{seed}:{domain}")
        strata: dict[Optional[int], list[ImageRecord]] = defaultdict(list)
        for record in records:
            strata[record.keyword_label].append(record)
        for group in strata.values():
            rng.shuffle(group)
        sizes = {key: len(group) for key, group in strata.items()}
        val_quota = _apportion(val_images, sizes, caps=sizes)
        test_caps = {key: sizes[key] - val_quota[key] for key in sizes}
        test_quota = _apportion(test_images, sizes, caps=test_caps)
        for key, group in strata.items():
            cursor = 0
            for _ in range(val_quota[key]):
                assignment[group[cursor].image_ref] = "val"
                cursor += 1
            for _ in range(test_quota[key]):
                assignment[group[cursor].image_ref] = "test"
                cursor += 1
            for record in group[cursor:]:
                assignment[record.image_ref] = "train"

    new_samples = [
        replace(s, split=assignment.get(s.image_ref, s.split)) for s in manifest.samples
    ]
    return Manifest(
        samples=new_samples,
        images=list(manifest.images),
        provenance=list(manifest.provenance) + [f"split_seed={seed}"],
    )


def ingest_directory(
    source: str | Path,
    store: ImageStore,
    registry: RuleRegistry,
    domain_of: Optional[dict[str, str]] = None,
    d_dup: int = DEFAULT_DUP_DISTANCE,
    workers: int = 4,
) -> Manifest:
    """Preprocess, dedup and manifest a directory tree of raw images.

    Layout convention: <source>/<domain>/[<keyword_label>/]*.png|jpg. A
    ``labels.json`` file next to the images may carry per-category ground
    truth keyed by original filename.
    """
    source = Path(source)
    jobs: list[tuple[Path, str, Optional[int]]] = []
    for path in sorted(source.rglob("*")):
        if not path.is_file() or path.suffix.lower() not in {".png", ".jpg", ".jpeg"}:
            continue
        rel = path.relative_to(source)
        domain = (domain_of or {}).get(str(rel)) or rel.parts[0]
        keyword: Optional[int] = None
        if len(rel.parts) >= 3 and rel.parts[1] in {"0", "1"}:
            keyword = int(rel.parts[1])
        jobs.append((path, domain, keyword))

    truths_by_name: dict[str, dict[str, str]] = {}
    labels_file = source / "labels.json"
    if labels_file.exists():
        truths_by_name = json.loads(labels_file.read_text(encoding="utf-8"))

    def _process(job):
        path, domain, keyword = job
        processed = preprocess(path.read_bytes())
        ref = store.put(processed)
        image = Image.open(io.BytesIO(processed))
        return ImageRecord(
            image_ref=ref,
            source_path=str(path),
            phash=dhash(image),
            width=image.width,
            height=image.height,
            domain=domain,
            keyword_label=keyword,
        ), path.name

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_process, jobs))

    records = [record for record, _ in results]
    names = {record.image_ref: name for record, name in results}
    records = dedup(records, d_dup=d_dup)
    truths: dict[str, dict[str, ComplianceLabel]] = {}
    for record in records:
        name = names[record.image_ref]
        if name in truths_by_name:
            truths[record.image_ref] = {
                cat: parse_label(lbl) for cat, lbl in truths_by_name[name].items()
            }
    return build_manifest(records, registry, truths=truths or None)
