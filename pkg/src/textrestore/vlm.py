"""Vision-language guidance: initial text extraction from the LQ image and
OCR-hinted self-correction at scheduled denoising steps.

Two backends speak one contract: a deterministic scripted backend driven by
fixture files (used for tests and offline runs) and a remote HTTP client for
real models. A failed correction never aborts a restoration run; the current
guidance is kept and a degraded-mode event is logged.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol

import cv2
import numpy as np

from .config import VlmConfig
from .imutil import to_uint8
from .textmatch import normalize_words, words_match

log = logging.getLogger(__name__)

SOURCES = ("vlm-initial", "tsm", "vlm-corrected")


class VlmTransportError(RuntimeError):
    """Backend unreachable or misbehaving; carries retry metadata."""

    def __init__(self, message: str, attempts: int, cause: Exception | None = None):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts
        self.cause = cause


@dataclass(frozen=True)
class GuidanceRecord:
    text: str
    source: str
    timestep_applied: int
    turn: int = 0
    flagged_empty: bool = False

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown guidance source {self.source!r}")

    def to_dict(self) -> dict:
        return {
            "text": self.text, "source": self.source,
            "timestep_applied": self.timestep_applied, "turn": self.turn,
            "flagged_empty": self.flagged_empty,
        }


class VlmBackend(Protocol):
    def query(self, image: np.ndarray, instruction: str, *,
              image_id: Optional[str] = None,
              prior_text: Optional[str] = None,
              tsm_ocr: Optional[str] = None) -> str: ...


class ScriptedVlmBackend:
    """Fixture-driven backend: {image_id -> initial text} plus correction
    lookups keyed on (current guidance text, TSM OCR string).

    A correction the fixture does not script falls back to the current
    guidance text, which keeps scripted runs total.
    """

    def __init__(self, fixture: list[dict]):
        self.initial: dict[str, str] = {}
        self.corrections: dict[tuple[str, str], str] = {}
        for entry in fixture:
            self.initial[str(entry["image_id"])] = str(entry.get("initial_text", ""))
            for corr in entry.get("corrections", []):
                key = (str(corr["prior"]), str(corr["tsm_ocr"]))
                self.corrections[key] = str(corr["result"])
        self._only_id = next(iter(self.initial)) if len(self.initial) == 1 else None

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedVlmBackend":
        return cls(json.loads(Path(path).read_text()))

    def query(self, image, instruction, *, image_id=None, prior_text=None, tsm_ocr=None) -> str:
        if prior_text is None:
            key = image_id if image_id is not None else self._only_id
            if key not in self.initial:
                raise KeyError(f"scripted backend has no entry for image {key!r}")
            return self.initial[key]
        return self.corrections.get((prior_text, tsm_ocr), prior_text)


class RemoteVlmBackend:
    """Minimal HTTP client: POST {image (base64 PNG), instruction, hint} to
    the endpoint, expect {"text": ...}. One retry, then a typed transport
    error."""

    def __init__(self, endpoint: str, timeout_s: float = 10.0):
        if not endpoint:
            raise ValueError("remote backend requires an endpoint URL")
        self.endpoint = endpoint
        self.timeout_s = timeout_s

    def query(self, image, instruction, *, image_id=None, prior_text=None, tsm_ocr=None) -> str:
        import requests

        ok, buf = cv2.imencode(".png", cv2.cvtColor(to_uint8(image), cv2.COLOR_RGB2BGR))
        if not ok:
            raise VlmTransportError("could not encode query image", attempts=0)
        payload = {
            "image": base64.b64encode(buf.tobytes()).decode("ascii"),
            "instruction": instruction,
        }
        if tsm_ocr is not None:
            payload["hint"] = tsm_ocr
        last: Exception | None = None
        for attempt in range(2):
            try:
                resp = requests.post(self.endpoint, json=payload, timeout=self.timeout_s)
                resp.raise_for_status()
                return str(resp.json()["text"])
            except Exception as e:  # noqa: BLE001 - transport boundary
                last = e
        raise VlmTransportError(f"VLM endpoint {self.endpoint} failed", attempts=2, cause=last)


class VlmAdapter:
    """Protocol wrapper enforcing the guidance state machine and templates."""

    def __init__(self, backend: VlmBackend, cfg: VlmConfig | None = None):
        self.backend = backend
        self.cfg = cfg or VlmConfig()
        self.degraded_events: list[dict] = []

    def extract_initial(self, image, *, image_id: Optional[str] = None,
                        instruction: Optional[str] = None) -> GuidanceRecord:
        text = self.backend.query(
            image, instruction or self.cfg.instruction, image_id=image_id,
        )
        flagged = text.strip() == ""
        if flagged:
            log.warning("VLM returned empty initial extraction for %s", image_id)
        return GuidanceRecord(text=text, source="vlm-initial", timestep_applied=0,
                              turn=0, flagged_empty=flagged)

    def self_correct(self, image, current: GuidanceRecord, tsm_ocr: str, j: int,
                     *, image_id: Optional[str] = None) -> GuidanceRecord:
        instruction = self.cfg.correction_template.format(
            instruction=self.cfg.instruction, prior_ocr=tsm_ocr,
        )
        try:
            text = self.backend.query(
                image, instruction, image_id=image_id,
                prior_text=current.text, tsm_ocr=tsm_ocr,
            )
        except Exception as e:  # degraded mode: restoration must not abort
            self.degraded_events.append({"step": j, "error": repr(e)})
            log.warning("VLM correction at step %d failed, keeping guidance: %r", j, e)
            return current
        return GuidanceRecord(text=text, source="vlm-corrected",
                              timestep_applied=j, turn=current.turn + 1)


def classify_extraction(gt: str, ocr: str, cfg: VlmConfig | None = None) -> str:
    """Grade an OCR output against ground truth as correct / partial /
    incorrect.

    Word order, case, punctuation, and spacing are ignored; only the set of
    unique ground-truth words matters; per-word typos within the configured
    edit-distance cutoff still match. Empty OCR is incorrect.
    """
    cfg = cfg or VlmConfig()
    gt_words = set(normalize_words(gt))
    if not gt_words:
        raise ValueError("ground truth must contain at least one word")
    ocr_words = set(normalize_words(ocr))
    matched = sum(
        1 for g in gt_words
        if any(words_match(g, o, typo_distance=cfg.typo_distance,
                           typo_distance_long=cfg.typo_distance_long,
                           long_word_len=cfg.long_word_len) for o in ocr_words)
    )
    if matched == len(gt_words):
        return "correct"
    if matched >= 1:
        return "partial"
    return "incorrect"
