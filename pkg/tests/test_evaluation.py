"""Metric suite: detection/e2e scoring conventions, PSNR/SSIM, the
published-F1 arithmetic, and the hand-computed golden corpus report."""

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textrestore.evaluation import (EvalReport, MissingOutputsError, build_lexicon,
                                    detection_metrics, e2e_metrics, evaluate_corpus,
                                    f1_score, greedy_match, psnr, psnr_ssim, ssim)
from textrestore.instances import AnnotationRecord, TextInstance, load_annotations

FIXTURES = Path(__file__).parent / "fixtures"


def inst(box, text, conf=1.0) -> TextInstance:
    x0, y0, x1, y1 = box
    return TextInstance(polygon=np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]),
                        text=text, confidence=conf)


# Detection F1 values published for the guided-restoration system, recomputed
# from their own printed precision/recall pairs (harmonic mean identity).
PUBLISHED_PRF = [
    (85.89, 55.49, 67.42),
    (87.47, 51.59, 64.90),
    (83.73, 50.86, 63.28),
    (87.53, 48.69, 62.57),
    (83.14, 38.21, 52.36),
    (86.43, 36.94, 51.76),
    (85.06, 60.42, 70.65),
    (86.94, 62.74, 72.88),
]


class TestF1Arithmetic:
    @pytest.mark.parametrize("p,r,f1", PUBLISHED_PRF)
    def test_published_pairs(self, p, r, f1):
        assert f1_score(p, r) == pytest.approx(f1, abs=0.02)

    def test_zero_convention(self):
        assert f1_score(0.0, 0.0) == 0.0


class TestDetection:
    def test_identity_is_perfect(self):
        gts = [inst([0.1, 0.1, 0.3, 0.2], "STOP"), inst([0.5, 0.5, 0.8, 0.6], "CAFE")]
        assert detection_metrics(gts, gts) == (100.0, 100.0, 100.0)

    def test_empty_preds_defined_zeros(self):
        gts = [inst([0.1, 0.1, 0.3, 0.2], "STOP")]
        assert detection_metrics([], gts) == (0.0, 0.0, 0.0)

    def test_empty_both(self):
        assert detection_metrics([], []) == (0.0, 0.0, 0.0)

    def test_iou_gate_at_half(self):
        gt = [inst([0.0, 0.0, 0.4, 0.4], "A")]
        barely_in = [inst([0.0, 0.0, 0.4, 0.3], "A")]  # IoU 0.75
        out = [inst([0.0, 0.0, 0.4, 0.13], "A")]  # IoU ~0.325
        assert detection_metrics(barely_in, gt)[2] == 100.0
        assert detection_metrics(out, gt)[2] == 0.0

    def test_greedy_injective_one_gt_two_preds(self):
        gt = [inst([0.1, 0.1, 0.5, 0.5], "A")]
        preds = [inst([0.1, 0.1, 0.5, 0.5], "A", conf=0.9),
                 inst([0.1, 0.1, 0.5, 0.5], "A", conf=0.8)]
        pairs = greedy_match(preds, gt)
        assert pairs == [(0, 0)]
        p, r, _ = detection_metrics(preds, gt)
        assert (p, r) == (50.0, 100.0)

    def test_tie_breaks_to_lower_index(self):
        gt = [inst([0.1, 0.1, 0.5, 0.5], "A")]
        preds = [inst([0.1, 0.1, 0.5, 0.5], "A", conf=0.7),
                 inst([0.1, 0.1, 0.5, 0.5], "A", conf=0.7)]
        assert greedy_match(preds, gt) == [(0, 0)]

    def test_order_invariance_at_distinct_confidences(self):
        gts = [inst([0.1, 0.1, 0.3, 0.3], "A"), inst([0.6, 0.6, 0.9, 0.9], "B")]
        preds = [inst([0.1, 0.1, 0.3, 0.3], "A", conf=0.9),
                 inst([0.6, 0.6, 0.9, 0.9], "B", conf=0.7)]
        a = detection_metrics(preds, gts)
        b = detection_metrics(list(reversed(preds)), gts)
        assert a == b


class TestEndToEnd:
    def test_lexicon_repair_counts_under_full(self):
        gts = [inst([0.1, 0.1, 0.5, 0.3], "HOLLYWOOD")]
        preds = [inst([0.1, 0.1, 0.5, 0.3], "H0LLYWOOD")]
        lex = ["HOLLYWOOD", "ESCAPE"]
        assert e2e_metrics(preds, gts, None)[2] == 0.0
        assert e2e_metrics(preds, gts, lex)[2] == 100.0

    def test_identity_both_modes(self):
        gts = [inst([0.1, 0.1, 0.5, 0.3], "STOP")]
        assert e2e_metrics(gts, gts, None)[2] == 100.0
        assert e2e_metrics(gts, gts, ["STOP"])[2] == 100.0

    def test_case_insensitive_compare(self):
        gts = [inst([0.1, 0.1, 0.5, 0.3], "Stop")]
        preds = [inst([0.1, 0.1, 0.5, 0.3], "STOP")]
        assert e2e_metrics(preds, gts, None)[2] == 100.0

    def test_empty_lexicon_rejected(self):
        gts = [inst([0.1, 0.1, 0.5, 0.3], "STOP")]
        with pytest.raises(ValueError, match="lexicon"):
            e2e_metrics(gts, gts, [])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.sampled_from(["STOP", "CAFE", "ST0P", "CAFF", "XYZ"]),
                    min_size=1, max_size=4))
    def test_full_never_below_none(self, texts):
        gts = [inst([0.05 + 0.2 * i, 0.1, 0.2 + 0.2 * i, 0.3], w)
               for i, w in enumerate(["STOP", "CAFE", "STOP", "CAFE"][: len(texts)])]
        preds = [inst([0.05 + 0.2 * i, 0.1, 0.2 + 0.2 * i, 0.3], t, conf=0.9)
                 for i, t in enumerate(texts[: len(gts)])]
        lex = build_lexicon([AnnotationRecord(image="x", instances=gts)])
        assert e2e_metrics(preds, gts, lex)[2] >= e2e_metrics(preds, gts, None)[2]


class TestPsnrSsim:
    def test_identical_hits_cap_and_unit_ssim(self):
        img = np.random.default_rng(0).random((32, 32, 3))
        p, s = psnr_ssim(img, img)
        assert p == 100.0 and s == pytest.approx(1.0)

    def test_uniform_offset_closed_form(self):
        # MSE of a constant 0.1 offset (pre-clamp domain) is 0.01 -> 20 dB
        img = np.random.default_rng(1).random((32, 32, 3)) * 0.5
        assert psnr(img + 0.1, img) == pytest.approx(20.0, abs=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_ssim_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a))
        assert -1.0 <= ssim(a, b) <= 1.0


def golden_inputs():
    lex_source = {
        "img1": [inst([0.1, 0.1, 0.3, 0.2], "STOP")],
        "img2": [inst([0.5, 0.5, 0.8, 0.6], "CAFE")],
        "img3": [inst([0.2, 0.6, 0.35, 0.7], "42")],
        "img4": [inst([0.1, 0.1, 0.4, 0.25], "MILK")],
        "img5": [inst([0.6, 0.2, 0.9, 0.35], "EXIT"), inst([0.1, 0.5, 0.4, 0.65], "STOP")],
    }
    annotations = [AnnotationRecord(image=k, instances=v) for k, v in lex_source.items()]
    outputs = {
        "img1": [inst([0.1, 0.1, 0.3, 0.2], "STOP", conf=0.9)],
        "img2": [inst([0.5, 0.5, 0.8, 0.6], "CAFF", conf=0.9)],
        "img3": [inst([0.2, 0.6, 0.35, 0.7], "42", conf=0.8),
                 inst([0.7, 0.8, 0.85, 0.95], "99", conf=0.7)],
        "img4": [],
        "img5": [inst([0.6, 0.2, 0.9, 0.35], "EXIT", conf=1.0)],
    }
    return outputs, annotations


class TestEvaluateCorpus:
    def test_matches_hand_computed_golden_report(self):
        outputs, annotations = golden_inputs()
        report = evaluate_corpus(outputs, annotations)
        golden = json.loads((FIXTURES / "golden_report.json").read_text())
        assert report.to_dict() == golden

    def test_missing_outputs_fail_closed_listing_ids(self):
        outputs, annotations = golden_inputs()
        del outputs["img3"]
        del outputs["img5"]
        with pytest.raises(MissingOutputsError) as err:
            evaluate_corpus(outputs, annotations)
        assert err.value.missing == ["img3", "img5"]

    def test_duplicate_image_ids_rejected(self, tmp_path):
        rec = {"image": "a.png", "instances": [{"polygon": [[0, 0], [1, 0], [1, 1]],
                                                "text": "X"}]}
        path = tmp_path / "annotations.json"
        path.write_text(json.dumps([rec, rec]))
        with pytest.raises(Exception, match="duplicate"):
            load_annotations(path)

    def test_psnr_ssim_aggregation(self):
        outputs, annotations = golden_inputs()
        rng = np.random.default_rng(3)
        ref = rng.random((16, 16, 3))
        images = {rec.image: (ref, ref) for rec in annotations}
        report = evaluate_corpus(outputs, annotations, images=images)
        assert report.psnr == 100.0 and report.ssim == pytest.approx(1.0)

    def test_report_schema_reserves_iqa_fields(self):
        outputs, annotations = golden_inputs()
        d = evaluate_corpus(outputs, annotations).to_dict()
        for key in ("lpips", "dists", "niqe", "maniqa", "musiq", "clipiqa"):
            assert key in d and d[key] is None
