"""Latent codec contracts: token arithmetic, round-trip shapes, and the
deterministic text tokenizer."""

import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from textrestore.codec import ImageCodec, ShapeError, TextGuidanceEncoder
from textrestore.config import CodecConfig, DEFAULT_CHARSET


def make_codec(image_size=64, latent_dim=64, channels=16) -> ImageCodec:
    return ImageCodec(CodecConfig(image_size=image_size, latent_dim=latent_dim,
                                  channels=channels))


class TestTokenArithmetic:
    def test_toy_64px_gives_16_tokens(self):
        cfg = CodecConfig(image_size=64, downsample_factor=8, patch_size=2)
        assert cfg.num_tokens == 16

    def test_paper_scale_512px_gives_1024_tokens(self):
        cfg = CodecConfig(image_size=512, latent_dim=1536, text_max_tokens=154)
        assert cfg.num_tokens == 1024

    def test_encode_produces_token_contract(self):
        codec = make_codec()
        img = np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)
        z = codec.encode_image(img)
        assert z.shape == (16, 64)
        assert torch.isfinite(z).all()

    def test_indivisible_size_rejected_naming_axis(self):
        codec = make_codec()
        with pytest.raises(ShapeError, match="height"):
            codec.encode_image(np.zeros((60, 64, 3), dtype=np.float32))
        with pytest.raises(ShapeError, match="width"):
            codec.encode_image(np.zeros((64, 60, 3), dtype=np.float32))
        with pytest.raises(ShapeError, match="channel"):
            codec.encode_image(np.zeros((64, 64, 4), dtype=np.float32))


class TestDecode:
    def test_round_trip_shapes_and_range(self):
        codec = make_codec()
        img = np.zeros((64, 64, 3), dtype=np.float32)
        with torch.no_grad():
            out = codec.decode_latent(codec.encode_image(img))
        assert out.shape == (64, 64, 3)
        assert torch.isfinite(out).all()
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_16_tokens_decode_to_64px(self):
        codec = make_codec()
        with torch.no_grad():
            out = codec.decode_latent(torch.randn(16, 64))
        assert out.shape == (64, 64, 3)

    def test_wrong_token_count_rejected(self):
        codec = make_codec()
        with pytest.raises(ShapeError, match="token count"):
            codec.decode_latent(torch.randn(9, 64))

    def test_nan_latent_rejected_not_propagated(self):
        codec = make_codec()
        z = torch.randn(16, 64)
        z[3, 7] = float("nan")
        with pytest.raises(ShapeError, match="non-finite"):
            codec.decode_latent(z)

    @settings(max_examples=8, deadline=None)
    @given(size_mult=st.integers(min_value=1, max_value=4), dim=st.sampled_from([16, 32, 64]))
    def test_shape_inverse_over_valid_configs(self, size_mult, dim):
        size = 16 * size_mult
        codec = make_codec(image_size=size, latent_dim=dim, channels=8)
        img = np.random.default_rng(1).random((size, size, 3)).astype(np.float32)
        with torch.no_grad():
            z = codec.encode_image(img)
            assert z.shape == (codec.cfg.num_tokens, dim)
            out = codec.decode_latent(z)
        assert tuple(out.shape) == img.shape

    def test_batched_round_trip(self):
        codec = make_codec()
        imgs = np.random.default_rng(2).random((3, 64, 64, 3)).astype(np.float32)
        with torch.no_grad():
            z = codec.encode_image(imgs)
            assert z.shape == (3, 16, 64)
            out = codec.decode_latent(z)
        assert tuple(out.shape) == imgs.shape

    def test_encode_deterministic(self):
        codec = make_codec()
        img = np.random.default_rng(3).random((64, 64, 3)).astype(np.float32)
        with torch.no_grad():
            a = codec.encode_image(img)
            b = codec.encode_image(img)
        assert torch.equal(a, b)


class TestTextEncoder:
    def test_empty_caption_is_null_guidance(self):
        enc = TextGuidanceEncoder(CodecConfig())
        tl = enc.encode_text("")
        assert tl.values.shape == (32, 64)
        assert not tl.mask.any()
        assert torch.count_nonzero(tl.values) == 0
        assert not tl.truncated

    def test_hollywood_has_nine_nonpad_rows(self):
        enc = TextGuidanceEncoder(CodecConfig())
        tl = enc.encode_text("HOLLYWOOD")
        assert int(tl.mask.sum()) == 9
        assert torch.count_nonzero(tl.values[9:]) == 0

    def test_bitwise_determinism(self):
        enc = TextGuidanceEncoder(CodecConfig())
        a = enc.encode_text("SNACK BAR 42")
        b = enc.encode_text("SNACK BAR 42")
        assert torch.equal(a.values, b.values) and torch.equal(a.mask, b.mask)

    def test_truncation_flagged(self):
        enc = TextGuidanceEncoder(CodecConfig(text_max_tokens=4))
        tl = enc.encode_text("LONGCAPTION")
        assert tl.truncated and int(tl.mask.sum()) == 4

    def test_injective_on_charset_singletons_and_pairs(self):
        enc = TextGuidanceEncoder(CodecConfig())
        charset = DEFAULT_CHARSET + " "
        seen = {}
        for s in itertools.chain(charset, ("".join(p) for p in itertools.permutations("AB7", 2))):
            key = enc.encode_text(s).values.numpy().tobytes()
            assert key not in seen, f"collision between {s!r} and {seen.get(key)!r}"
            seen[key] = s

    def test_case_insensitive_same_embedding(self):
        enc = TextGuidanceEncoder(CodecConfig())
        assert torch.equal(enc.encode_text("stop").values, enc.encode_text("STOP").values)

    def test_out_of_charset_maps_to_space(self):
        enc = TextGuidanceEncoder(CodecConfig())
        assert torch.equal(enc.encode_text("2.0").values, enc.encode_text("2 0").values)
