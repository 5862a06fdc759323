"""Guidance adapter: scripted/remote backends, correction protocol, and the
extraction classification rubric."""

import http.server
import json
import threading
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textrestore.config import VlmConfig
from textrestore.textmatch import edit_distance, nearest_lexicon_entry, normalize_words
from textrestore.vlm import (GuidanceRecord, RemoteVlmBackend, ScriptedVlmBackend,
                             VlmAdapter, VlmTransportError, classify_extraction)

FIXTURES = Path(__file__).parent / "fixtures"

APPENDIX_FIXTURE = [{
    "image_id": "img7",
    "initial_text": "104",
    "corrections": [
        {"prior": "104", "tsm_ocr": "210", "result": "210"},
        {"prior": "210", "tsm_ocr": "210", "result": "211"},
    ],
}]


def _image():
    return np.zeros((8, 8, 3), dtype=np.float32)


class TestEditDistance:
    def test_classic_cases(self):
        assert edit_distance("rain", "shine") == 3
        assert edit_distance("", "abc") == 3
        assert edit_distance("kitten", "sitting") == 3
        assert edit_distance("same", "same") == 0

    def test_symmetry(self):
        assert edit_distance("abcd", "badc") == edit_distance("badc", "abcd")


class TestNormalize:
    def test_punctuation_and_case(self):
        assert normalize_words("Stop! At, THE sign.") == ["stop", "at", "the", "sign"]

    def test_nearest_lexicon_entry(self):
        assert nearest_lexicon_entry("H0LLYWOOD", ["HOLLYWOOD", "ESCAPE"]) == "HOLLYWOOD"
        with pytest.raises(ValueError):
            nearest_lexicon_entry("x", [])

    def test_nearest_lexicon_tie_breaks_lexicographically(self):
        assert nearest_lexicon_entry("AB", ["AC", "AD"]) == "AC"


class TestScriptedBackend:
    def test_initial_lookup(self):
        backend = ScriptedVlmBackend(APPENDIX_FIXTURE)
        adapter = VlmAdapter(backend)
        rec = adapter.extract_initial(_image(), image_id="img7")
        assert rec.text == "104"
        assert rec.source == "vlm-initial"
        assert not rec.flagged_empty

    def test_single_entry_default_id(self):
        backend = ScriptedVlmBackend(APPENDIX_FIXTURE)
        adapter = VlmAdapter(backend)
        assert adapter.extract_initial(_image()).text == "104"

    def test_unknown_image_raises(self):
        backend = ScriptedVlmBackend(APPENDIX_FIXTURE)
        with pytest.raises(KeyError):
            VlmAdapter(backend).extract_initial(_image(), image_id="nope")

    def test_determinism(self):
        adapter = VlmAdapter(ScriptedVlmBackend(APPENDIX_FIXTURE))
        a = adapter.extract_initial(_image(), image_id="img7")
        b = adapter.extract_initial(_image(), image_id="img7")
        assert a == b

    def test_empty_initial_flagged(self):
        adapter = VlmAdapter(ScriptedVlmBackend([{"image_id": "e", "initial_text": ""}]))
        rec = adapter.extract_initial(_image(), image_id="e")
        assert rec.text == "" and rec.flagged_empty

    def test_correction_sequence(self):
        adapter = VlmAdapter(ScriptedVlmBackend(APPENDIX_FIXTURE))
        g0 = adapter.extract_initial(_image(), image_id="img7")
        g1 = adapter.self_correct(_image(), g0, "210", j=10, image_id="img7")
        assert (g1.text, g1.source, g1.timestep_applied, g1.turn) == ("210", "vlm-corrected", 10, 1)
        g2 = adapter.self_correct(_image(), g1, "210", j=20, image_id="img7")
        assert (g2.text, g2.timestep_applied, g2.turn) == ("211", 20, 2)

    def test_unscripted_correction_keeps_text_but_restamps(self):
        adapter = VlmAdapter(ScriptedVlmBackend(APPENDIX_FIXTURE))
        g0 = adapter.extract_initial(_image(), image_id="img7")
        g = adapter.self_correct(_image(), g0, "999", j=10, image_id="img7")
        assert g.text == g0.text
        assert g.source == "vlm-corrected" and g.turn == g0.turn + 1

    def test_backend_failure_keeps_guidance_and_logs(self):
        class Boom:
            def query(self, *a, **k):
                raise VlmTransportError("down", attempts=2)

        adapter = VlmAdapter(Boom())
        current = GuidanceRecord(text="104", source="vlm-initial", timestep_applied=0)
        out = adapter.self_correct(_image(), current, "210", j=10)
        assert out is current
        assert adapter.degraded_events and adapter.degraded_events[0]["step"] == 10

    def test_initial_failure_is_typed_not_silent(self):
        class Boom:
            def query(self, *a, **k):
                raise VlmTransportError("down", attempts=2)

        with pytest.raises(VlmTransportError):
            VlmAdapter(Boom()).extract_initial(_image())

    def test_guidance_source_validation(self):
        with pytest.raises(ValueError):
            GuidanceRecord(text="x", source="oracle", timestep_applied=0)


class _Handler(http.server.BaseHTTPRequestHandler):
    fail_times = 0
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append(body)
        if type(self).fail_times > 0:
            type(self).fail_times -= 1
            self.send_response(500)
            self.end_headers()
            return
        out = json.dumps({"text": body.get("hint", "remote-text")}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *a):
        pass


@pytest.fixture()
def http_backend():
    server = http.server.HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _Handler.fail_times = 0
    _Handler.seen = []
    yield f"http://127.0.0.1:{server.server_port}/"
    server.shutdown()


class TestRemoteBackend:
    def test_round_trip_and_hint(self, http_backend):
        adapter = VlmAdapter(RemoteVlmBackend(http_backend, timeout_s=5))
        rec = adapter.extract_initial(_image(), image_id="x")
        assert rec.text == "remote-text"
        g = adapter.self_correct(_image(), rec, "210", j=10)
        assert g.text == "210"  # echo server returns the hint
        assert "hint" in _Handler.seen[-1]
        assert "image" in _Handler.seen[-1] and "instruction" in _Handler.seen[-1]

    def test_one_retry_then_success(self, http_backend):
        _Handler.fail_times = 1
        adapter = VlmAdapter(RemoteVlmBackend(http_backend, timeout_s=5))
        assert adapter.extract_initial(_image()).text == "remote-text"

    def test_two_failures_degrade_correction(self, http_backend):
        _Handler.fail_times = 2
        adapter = VlmAdapter(RemoteVlmBackend(http_backend, timeout_s=5))
        current = GuidanceRecord(text="104", source="vlm-initial", timestep_applied=0)
        out = adapter.self_correct(_image(), current, "210", j=10)
        assert out is current and adapter.degraded_events

    def test_correction_template_carries_prior_ocr(self, http_backend):
        cfg = VlmConfig()
        adapter = VlmAdapter(RemoteVlmBackend(http_backend, timeout_s=5), cfg)
        current = GuidanceRecord(text="104", source="vlm-initial", timestep_applied=0)
        adapter.self_correct(_image(), current, "210", j=10)
        assert "210" in _Handler.seen[-1]["instruction"]
        assert cfg.instruction in _Handler.seen[-1]["instruction"]


class TestClassifyExtraction:
    def test_committed_hand_labeled_pairs(self):
        pairs = json.loads((FIXTURES / "classification_pairs.json").read_text())
        assert len(pairs) == 12
        for case in pairs:
            got = classify_extraction(case["gt"], case["ocr"])
            assert got == case["label"], f"{case['covers']}: {case} -> {got}"

    def test_identity_is_correct(self):
        for text in ("A", "snack bar", "104", "The Invisible Man"):
            assert classify_extraction(text, text) == "correct"

    def test_empty_gt_rejected(self):
        with pytest.raises(ValueError):
            classify_extraction("", "whatever")

    @settings(max_examples=50, deadline=None)
    @given(
        perm=st.permutations(["UNION", "CAFE", "42"]),
        deco=st.sampled_from(["", ",", "!", "  "]),
        upper=st.booleans(),
    )
    def test_invariance_to_order_case_punct_space(self, perm, deco, upper):
        gt = "UNION CAFE 42"
        ocr = (deco + " ").join(perm) + deco
        ocr = ocr.upper() if upper else ocr.lower()
        assert classify_extraction(gt, ocr) == "correct"
