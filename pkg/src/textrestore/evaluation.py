"""Metric suite: detection P/R/F1 at IoU 0.5, end-to-end None/Full
recognition F1, guidance-classification tallies, and reference PSNR/SSIM.

Matching is greedy by descending confidence (ties break to the lower
prediction index) with one-to-one ground-truth consumption; a detection
counts at IoU > 0.5 between the axis-aligned hulls of the polygons. The
corpus report micro-averages counts over all instances.

Also provides a font-template oracle recognizer that reads rendered
transcripts back from synthetic scenes at their annotated locations,
independent of any trained model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from skimage.metrics import structural_similarity

from .config import VlmConfig
from .fonts import CELL_WIDTH, FONT_CHARS, GLYPH_HEIGHT, GLYPH_WIDTH, glyph_mask
from .geometry import box_iou
from .instances import AnnotationRecord, TextInstance
from .textmatch import nearest_lexicon_entry
from .vlm import classify_extraction

PSNR_CAP_DB = 100.0


class MissingOutputsError(RuntimeError):
    """Evaluation input lacks outputs for some annotated images."""

    def __init__(self, missing: list[str]):
        super().__init__(f"missing outputs for {len(missing)} image(s): {sorted(missing)}")
        self.missing = sorted(missing)


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def greedy_match(preds: list[TextInstance], gts: list[TextInstance],
                 iou_threshold: float = 0.5) -> list[tuple[int, int]]:
    """One-to-one matching: predictions in descending-confidence order claim
    their best remaining GT when hull IoU exceeds the threshold."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    taken: set[int] = set()
    pairs = []
    for p in order:
        best_g, best_iou = -1, iou_threshold
        for g in range(len(gts)):
            if g in taken:
                continue
            iou = box_iou(preds[p].hull_box, gts[g].hull_box)
            if iou > best_iou:
                best_g, best_iou = g, iou
        if best_g >= 0:
            taken.add(best_g)
            pairs.append((p, best_g))
    assert len({p for p, _ in pairs}) == len(pairs)
    assert len({g for _, g in pairs}) == len(pairs)
    return pairs


def detection_counts(preds, gts) -> tuple[int, int, int]:
    tp = len(greedy_match(preds, gts))
    return tp, len(preds) - tp, len(gts) - tp


def detection_metrics(preds, gts) -> tuple[float, float, float]:
    """(precision, recall, F1) in percent. Empty inputs yield zeros."""
    tp, fp, fn = detection_counts(preds, gts)
    p = 100.0 * tp / (tp + fp) if tp + fp > 0 else 0.0
    r = 100.0 * tp / (tp + fn) if tp + fn > 0 else 0.0
    return p, r, f1_score(p, r)


def _transcripts_equal(pred: str, gt: str) -> bool:
    return pred.strip().lower() == gt.strip().lower()


def e2e_counts(preds, gts, lexicon: list[str] | None = None) -> tuple[int, int, int]:
    """End-to-end counts: a TP needs the detection match plus transcript
    equality (exact under None; after nearest-lexicon substitution under
    Full)."""
    pairs = greedy_match(preds, gts)
    tp = 0
    for p, g in pairs:
        text = preds[p].text
        if lexicon is not None:
            if not lexicon:
                raise ValueError("Full-lexicon scoring requires a non-empty lexicon")
            text = nearest_lexicon_entry(text, lexicon)
        if _transcripts_equal(text, gts[g].text):
            tp += 1
    return tp, len(preds) - tp, len(gts) - tp


def e2e_metrics(preds, gts, lexicon: list[str] | None = None) -> tuple[float, float, float]:
    tp, fp, fn = e2e_counts(preds, gts, lexicon)
    p = 100.0 * tp / (tp + fp) if tp + fp > 0 else 0.0
    r = 100.0 * tp / (tp + fn) if tp + fn > 0 else 0.0
    return p, r, f1_score(p, r)


def psnr(restored: np.ndarray, reference: np.ndarray, cap: float = PSNR_CAP_DB) -> float:
    a = np.asarray(restored, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return cap
    return min(10.0 * math.log10(1.0 / mse), cap)


def ssim(restored: np.ndarray, reference: np.ndarray) -> float:
    a = np.asarray(restored, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(structural_similarity(a, b, channel_axis=2, data_range=1.0))


def psnr_ssim(restored: np.ndarray, reference: np.ndarray) -> tuple[float, float]:
    return psnr(restored, reference), ssim(restored, reference)


# ---------------------------------------------------------------------------
# font-template oracle recognizer


def _read_cell(gray: np.ndarray, x0: int, y0: int, scale: int) -> str:
    h, w = GLYPH_HEIGHT * scale, GLYPH_WIDTH * scale
    best_char, best_score = "?", -np.inf
    for ch in FONT_CHARS:
        tpl = glyph_mask(ch, scale).astype(np.float64)
        tz = tpl - tpl.mean()
        norm = np.linalg.norm(tz)
        if norm == 0:
            continue
        tz /= norm
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ys, xs = y0 + dy, x0 + dx
                if ys < 0 or xs < 0 or ys + h > gray.shape[0] or xs + w > gray.shape[1]:
                    continue
                patch = gray[ys:ys + h, xs:xs + w]
                pz = patch - patch.mean()
                pn = np.linalg.norm(pz)
                if pn == 0:
                    continue
                # ink is dark: a good match anti-correlates with the mask
                score = -float((pz / pn * tz).sum())
                if score > best_score:
                    best_score, best_char = score, ch
    return best_char


def oracle_read_instance(image: np.ndarray, inst: TextInstance) -> str:
    """Read one annotated word back from pixels by template-matching the
    bitmap face over the instance's glyph grid (with a +-1 px alignment
    search). Uses only the polygon geometry, never the transcript."""
    size_h, size_w = image.shape[:2]
    box = inst.hull_box * np.array([size_w, size_h, size_w, size_h])
    x0, y0 = int(round(box[0])), int(round(box[1]))
    w, h = box[2] - box[0], box[3] - box[1]
    scale = max(int(round(h / GLYPH_HEIGHT)), 1)
    n_chars = max(int(round((w / scale + 1) / CELL_WIDTH)), 1)
    gray = np.asarray(image, dtype=np.float64).mean(axis=2)
    chars = []
    for i in range(n_chars):
        cx = x0 + i * CELL_WIDTH * scale
        chars.append(_read_cell(gray, cx, y0, scale))
    return "".join(chars)


def oracle_recognition_accuracy(
    images: dict[str, np.ndarray], annotations: list[AnnotationRecord]
) -> float:
    """Fraction of annotated instances whose oracle reading matches the
    transcript exactly, over the whole corpus."""
    total, correct = 0, 0
    for rec in annotations:
        img = images[rec.image]
        for inst in rec.instances:
            total += 1
            if oracle_read_instance(img, inst) == inst.text:
                correct += 1
    return correct / total if total else 0.0


def oracle_predictions(image: np.ndarray, gts: list[TextInstance]) -> list[TextInstance]:
    """Oracle scorer output: GT locations with oracle-read transcripts."""
    return [
        TextInstance(polygon=g.polygon.copy(), text=oracle_read_instance(image, g),
                     confidence=1.0)
        for g in gts
    ]


# ---------------------------------------------------------------------------
# corpus-level report


@dataclass
class EvalReport:
    det_precision: float
    det_recall: float
    det_f1: float
    e2e_none_f1: float
    e2e_full_f1: float
    classification: dict[str, int]
    psnr: float | None = None
    ssim: float | None = None
    oracle_accuracy: float | None = None
    per_image: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "det_precision": self.det_precision, "det_recall": self.det_recall,
            "det_f1": self.det_f1, "e2e_none_f1": self.e2e_none_f1,
            "e2e_full_f1": self.e2e_full_f1, "classification": dict(self.classification),
            "psnr": self.psnr, "ssim": self.ssim, "oracle_accuracy": self.oracle_accuracy,
            # reserved fields for learned IQA metrics (not implemented)
            "lpips": None, "dists": None, "niqe": None,
            "maniqa": None, "musiq": None, "clipiqa": None,
            "per_image": list(self.per_image),
        }


def build_lexicon(annotations: list[AnnotationRecord]) -> list[str]:
    words = {inst.text for rec in annotations for inst in rec.instances}
    return sorted(words)


def evaluate_corpus(
    outputs: dict[str, list[TextInstance]],
    annotations: list[AnnotationRecord],
    lexicon: list[str] | None = None,
    images: dict[str, tuple[np.ndarray, np.ndarray]] | None = None,
    vlm_cfg: VlmConfig | None = None,
) -> EvalReport:
    """Aggregate all metrics micro-averaged over instances.

    `outputs` maps image id -> predicted instances; every annotated image
    must be present (fails closed listing the missing ids). `images` maps
    id -> (restored, reference) pairs for PSNR/SSIM.
    """
    missing = [rec.image for rec in annotations if rec.image not in outputs]
    if missing:
        raise MissingOutputsError(missing)
    lex = lexicon if lexicon is not None else build_lexicon(annotations)
    det = np.zeros(3, dtype=np.int64)
    none_c = np.zeros(3, dtype=np.int64)
    full_c = np.zeros(3, dtype=np.int64)
    classification = {"correct": 0, "partial": 0, "incorrect": 0}
    psnrs, ssims = [], []
    per_image = []
    for rec in annotations:
        preds = outputs[rec.image]
        gts = rec.instances
        d = detection_counts(preds, gts)
        n = e2e_counts(preds, gts, None)
        f = e2e_counts(preds, gts, lex)
        det += d
        none_c += n
        full_c += f
        gt_caption = " ".join(i.text for i in gts)
        pred_caption = " ".join(
            i.text for i in sorted(preds, key=lambda x: -x.confidence) if i.text
        )
        label = classify_extraction(gt_caption, pred_caption, vlm_cfg) if gt_caption else "incorrect"
        classification[label] += 1
        row = {"image": rec.image, "det_tp": int(d[0]), "det_fp": int(d[1]),
               "det_fn": int(d[2]), "none_tp": int(n[0]), "full_tp": int(f[0]),
               "classification": label}
        if images is not None and rec.image in images:
            restored, reference = images[rec.image]
            row["psnr"], row["ssim"] = psnr_ssim(restored, reference)
            psnrs.append(row["psnr"])
            ssims.append(row["ssim"])
        per_image.append(row)

    def prf(c):
        tp, fp, fn = (int(x) for x in c)
        p = 100.0 * tp / (tp + fp) if tp + fp > 0 else 0.0
        r = 100.0 * tp / (tp + fn) if tp + fn > 0 else 0.0
        return p, r, f1_score(p, r)

    dp, dr, df = prf(det)
    _, _, nf = prf(none_c)
    _, _, ff = prf(full_c)
    return EvalReport(
        det_precision=dp, det_recall=dr, det_f1=df,
        e2e_none_f1=nf, e2e_full_f1=ff, classification=classification,
        psnr=float(np.mean(psnrs)) if psnrs else None,
        ssim=float(np.mean(ssims)) if ssims else None,
        per_image=per_image,
    )
