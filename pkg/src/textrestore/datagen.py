"""Synthetic glyph-scene corpus with polygon/transcript annotations and a
three-level parametric degradation chain (blur -> downsample -> noise ->
JPEG -> upsample).

Scenes are 1-3 vocabulary words rendered with the bitmap face on a smooth
random background; every placement is reproducible from its seed alone.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .config import DatagenConfig
from .fonts import word_mask, word_size
from .geometry import box_to_polygon
from .imutil import jpeg_roundtrip, load_image, save_image
from .instances import AnnotationRecord, TextInstance, save_annotations

DEFAULT_VOCAB = (
    "STOP", "EXIT", "OPEN", "SALE", "CAFE", "BOOK", "TAXI", "PARK", "MILK",
    "NEWS", "FISH", "GOLD", "EAST", "WEST", "CLUB", "HALL", "SHOP", "BAKE",
    "ZOO", "BAR", "GYM", "INN", "JET", "KEY", "LAB", "MAP", "OAK", "PUB",
    "VAN", "WAX", "QUIZ", "104", "210", "211", "42", "1912", "77", "365",
    "808", "90",
)


@dataclass(frozen=True)
class DegradationSpec:
    level: int
    blur_sigma: float
    downsample_factor: int
    noise_sigma: float
    jpeg_quality: int

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "blur_sigma": self.blur_sigma,
            "downsample_factor": self.downsample_factor,
            "noise_sigma": self.noise_sigma,
            "jpeg_quality": self.jpeg_quality,
        }


LEVEL_PRESETS = {
    1: DegradationSpec(level=1, blur_sigma=1.0, downsample_factor=2, noise_sigma=0.01, jpeg_quality=80),
    2: DegradationSpec(level=2, blur_sigma=2.0, downsample_factor=3, noise_sigma=0.03, jpeg_quality=60),
    3: DegradationSpec(level=3, blur_sigma=3.0, downsample_factor=4, noise_sigma=0.06, jpeg_quality=40),
}


@dataclass
class CorpusRecord:
    record_id: str
    seed: int
    hq_image: np.ndarray
    lq_images: dict[int, np.ndarray]
    instances: list[TextInstance] = field(default_factory=list)

    @property
    def caption(self) -> str:
        return " ".join(inst.text for inst in self.instances)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth light background: pastel base plus a faint linear gradient."""
    base = rng.uniform(0.65, 0.95, size=3)
    direction = rng.uniform(-1.0, 1.0, size=2)
    ramp = np.linspace(0.0, 1.0, size)
    grad = np.outer(ramp, direction[0]) + np.outer(direction[1] * ramp, np.ones(size)).T
    grad = (grad - grad.min()) / max(grad.max() - grad.min(), 1e-9) - 0.5
    img = base[None, None, :] + 0.12 * grad[:, :, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_scene(seed: int, vocab: tuple[str, ...] | None = None,
                 config: DatagenConfig | None = None) -> CorpusRecord | None:
    """Render one HQ scene with annotations. Returns None if no word could be
    placed within the retry budget (unplaceable-record skip policy)."""
    cfg = config or DatagenConfig()
    words = tuple(vocab) if vocab else (tuple(cfg.vocab) or DEFAULT_VOCAB)
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    img = _background(rng, size)

    n_words = int(rng.integers(cfg.min_words, cfg.max_words + 1))
    placed_boxes: list[tuple[int, int, int, int]] = []
    instances: list[TextInstance] = []
    for _ in range(n_words):
        for _attempt in range(cfg.placement_retries):
            word = str(words[rng.integers(0, len(words))])
            scales = [s for s in range(cfg.min_scale, cfg.max_scale + 1)
                      if word_size(word, s)[0] <= size - 2 and word_size(word, s)[1] <= size - 2]
            if not scales:
                continue
            scale = int(scales[rng.integers(0, len(scales))])
            w, h = word_size(word, scale)
            x0 = int(rng.integers(1, size - w))
            y0 = int(rng.integers(1, size - h))
            margin = 2
            box = (x0 - margin, y0 - margin, x0 + w + margin, y0 + h + margin)
            if any(not (box[2] <= b[0] or b[2] <= box[0] or box[3] <= b[1] or b[3] <= box[1])
                   for b in placed_boxes):
                continue
            # dark ink with guaranteed contrast against the light background
            color = rng.uniform(0.0, 0.25, size=3).astype(np.float32)
            mask = word_mask(word, scale)
            region = img[y0:y0 + h, x0:x0 + w]
            region[mask] = color
            placed_boxes.append(box)
            poly_px = box_to_polygon([x0, y0, x0 + w, y0 + h])
            instances.append(TextInstance(polygon=poly_px / size, text=word))
            break
    if not instances:
        return None
    # caption in reading order (top-to-bottom, then left-to-right)
    instances.sort(key=lambda i: (i.hull_box[1], i.hull_box[0]))
    return CorpusRecord(
        record_id=f"scene_{seed:06d}", seed=seed, hq_image=img,
        lq_images={}, instances=instances,
    )


def degrade(hq: np.ndarray, spec: DegradationSpec, seed: int) -> np.ndarray:
    """blur -> downsample -> additive noise -> JPEG -> upsample, same size out."""
    img = np.asarray(hq, dtype=np.float32)
    h, w = img.shape[:2]
    if spec.blur_sigma > 0:
        img = cv2.GaussianBlur(img, ksize=(0, 0), sigmaX=float(spec.blur_sigma))
    f = int(spec.downsample_factor)
    if f > 1:
        img = cv2.resize(img, (max(w // f, 1), max(h // f, 1)), interpolation=cv2.INTER_AREA)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0)
    if spec.jpeg_quality < 100:
        img = jpeg_roundtrip(img, spec.jpeg_quality)
    if f > 1:
        img = cv2.resize(img, (w, h), interpolation=cv2.INTER_CUBIC)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_corpus(n: int, levels: list[int], out_dir: str | Path,
                 config: DatagenConfig | None = None, seed: int | None = None,
                 jobs: int = 1) -> Path:
    """Write n HQ scenes plus one LQ file per requested level, an annotation
    file, and a manifest with per-record seeds and degradation specs.

    Builds into a staging directory and renames on success so a failed run
    leaves no partial corpus behind. Returns the manifest path.
    """
    cfg = config or DatagenConfig()
    base_seed = cfg.seed if seed is None else seed
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise FileExistsError(f"output directory {out_dir} is not empty")
    staging = out_dir.parent / (out_dir.name + ".staging")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    try:
        _build_into(staging, n, levels, cfg, base_seed, jobs)
    except Exception:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if out_dir.exists():
        out_dir.rmdir()
    staging.rename(out_dir)
    return out_dir / "manifest.json"


def _build_into(root: Path, n: int, levels: list[int], cfg: DatagenConfig,
                base_seed: int, jobs: int = 1) -> dict:
    from .parallel import parallel_map

    scenes: list[CorpusRecord] = []
    skipped = 0
    next_seed = base_seed
    while len(scenes) < n:
        rec = render_scene(next_seed, config=cfg)
        next_seed += 1
        if rec is None:
            skipped += 1
            if skipped > 10 * max(n, 1):
                raise RuntimeError("too many unplaceable scenes; vocab/scale config infeasible")
            continue
        scenes.append(rec)

    def write_record(rec: CorpusRecord) -> dict:
        hq_rel = f"hq/{rec.record_id}.png"
        save_image(root / hq_rel, rec.hq_image)
        lq_rels = {}
        for level in levels:
            spec = LEVEL_PRESETS[level]
            lq = degrade(rec.hq_image, spec, seed=rec.seed + 1000003 * level)
            lq_rel = f"lq_lv{level}/{rec.record_id}.png"
            save_image(root / lq_rel, lq)
            lq_rels[str(level)] = lq_rel
        return {
            "id": rec.record_id,
            "seed": rec.seed,
            "hq": hq_rel,
            "lq": lq_rels,
            "caption": rec.caption,
        }

    records = parallel_map(write_record, scenes, jobs)
    annotations = [AnnotationRecord(image=r["hq"], instances=s.instances)
                   for r, s in zip(records, scenes)]
    save_annotations(annotations, root / "annotations.json")
    manifest = {
        "format": "textrestore-corpus",
        "version": 1,
        "seed": base_seed,
        "count": n,
        "levels": sorted(levels),
        "skipped": skipped,
        "degradation": {str(k): LEVEL_PRESETS[k].to_dict() for k in levels},
        "config": {
            "image_size": cfg.image_size,
            "min_words": cfg.min_words, "max_words": cfg.max_words,
            "min_scale": cfg.min_scale, "max_scale": cfg.max_scale,
        },
        "records": records,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    hashes = {}
    for rec in records:
        hashes[rec["hq"]] = _sha256_file(root / rec["hq"])
        for rel in rec["lq"].values():
            hashes[rel] = _sha256_file(root / rel)
    (root / "hashes.json").write_text(json.dumps(hashes, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(manifest_path: str | Path) -> dict:
    manifest = json.loads(Path(manifest_path).read_text())
    if manifest.get("format") != "textrestore-corpus":
        raise ValueError(f"{manifest_path} is not a corpus manifest")
    return manifest


def verify_corpus(manifest_path: str | Path) -> list[str]:
    """Return a list of problems (missing or hash-mismatched files)."""
    root = Path(manifest_path).parent
    load_manifest(manifest_path)
    hashes = json.loads((root / "hashes.json").read_text())
    problems = []
    for rel, digest in hashes.items():
        p = root / rel
        if not p.exists():
            problems.append(f"missing file {rel}")
        elif _sha256_file(p) != digest:
            problems.append(f"hash mismatch for {rel}")
    return problems


def corpus_images(manifest_path: str | Path, kind: str = "hq", level: int | None = None):
    """Yield (record, image array) pairs for the requested variant."""
    manifest = load_manifest(manifest_path)
    root = Path(manifest_path).parent
    for rec in manifest["records"]:
        rel = rec["hq"] if kind == "hq" else rec["lq"][str(level)]
        yield rec, load_image(root / rel)
