"""Latent codec: a small convolutional autoencoder with x8 spatial
downsampling followed by patch-2 token embedding and fixed sinusoidal
positional encoding, plus the per-character text guidance encoder.

Token count follows L = (H / (downsample_factor * patch_size))^2, so the
toy 64px config yields 16 tokens and the 512px paper-scale config yields
1024. The codec is fit once on clean images ("stage 0") and then frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import DEFAULT_CHARSET, CodecConfig


class ShapeError(ValueError):
    """Tensor shape violates a codec contract."""


def sinusoidal_grid_encoding(grid: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sin/cos positional table of shape (grid*grid, dim)."""
    if dim % 4 != 0:
        raise ShapeError(f"positional encoding dim {dim} must be divisible by 4")
    quarter = dim // 4
    freq = torch.exp(-math.log(10000.0) * torch.arange(quarter) / max(quarter - 1, 1))
    ys, xs = torch.meshgrid(torch.arange(grid), torch.arange(grid), indexing="ij")
    out = torch.cat([
        torch.sin(xs.flatten()[:, None] * freq),
        torch.cos(xs.flatten()[:, None] * freq),
        torch.sin(ys.flatten()[:, None] * freq),
        torch.cos(ys.flatten()[:, None] * freq),
    ], dim=1)
    return out.float()


def _as_image_tensor(img) -> tuple[torch.Tensor, bool]:
    if isinstance(img, np.ndarray):
        img = torch.from_numpy(np.ascontiguousarray(img))
    img = img.float()
    if img.ndim == 3:
        return img[None], True
    if img.ndim == 4:
        return img, False
    raise ShapeError(f"image must be (H, W, 3) or (B, H, W, 3), got {tuple(img.shape)}")


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            _gn(ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1),
            _gn(ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1),
        )

    def forward(self, x):
        return x + self.body(x)


class ImageCodec(nn.Module):
    """Strided-conv encoder/decoder pair operating on token sequences.

    Most capacity sits at the cheap 8x8 stage right around the token
    bottleneck, which is where glyph structure has to be squeezed through.
    """

    def __init__(self, cfg: CodecConfig | None = None):
        super().__init__()
        self.cfg = cfg or CodecConfig()
        c = self.cfg.channels
        d = self.cfg.latent_dim
        p = self.cfg.patch_size
        if self.cfg.downsample_factor != 8:
            raise ShapeError("codec implements a fixed x8 strided-conv trunk")
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1), _ResBlock(c),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), _ResBlock(2 * c),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            _ResBlock(4 * c), _ResBlock(4 * c),
        )
        self.patch_embed = nn.Conv2d(4 * c, d, kernel_size=p, stride=p)
        self.unpatch = nn.Linear(d, 4 * c * p * p)
        # sub-pixel upsampling reconstructs thin strokes much better than
        # nearest-neighbour + conv at this scale
        self.decoder = nn.Sequential(
            _ResBlock(4 * c), _ResBlock(4 * c),
            nn.Conv2d(4 * c, 2 * c * 4, 3, padding=1), nn.PixelShuffle(2),
            _ResBlock(2 * c),
            nn.Conv2d(2 * c, c * 4, 3, padding=1), nn.PixelShuffle(2),
            _ResBlock(c),
            nn.Conv2d(c, 3 * 4, 3, padding=1), nn.PixelShuffle(2),
        )
        self.register_buffer(
            "pos_table", sinusoidal_grid_encoding(self.cfg.grid_size, d), persistent=False
        )

    def _check_image(self, img: torch.Tensor) -> None:
        _, h, w, ch = img.shape
        step = self.cfg.downsample_factor * self.cfg.patch_size
        if ch != 3:
            raise ShapeError(f"channel axis must be 3, got {ch}")
        if h != self.cfg.image_size:
            raise ShapeError(f"height {h} does not match configured image_size {self.cfg.image_size}")
        if w != self.cfg.image_size:
            raise ShapeError(f"width {w} does not match configured image_size {self.cfg.image_size}")
        if h % step or w % step:
            raise ShapeError(f"height/width must be divisible by {step}")

    def encode_image(self, img) -> torch.Tensor:
        """Image (H, W, 3) in [0, 1] -> latent tokens (L, D); batched input
        (B, H, W, 3) -> (B, L, D)."""
        x, squeeze = _as_image_tensor(img)
        self._check_image(x)
        if not torch.isfinite(x).all():
            raise ShapeError("image contains non-finite values")
        h = self.encoder(x.permute(0, 3, 1, 2) * 2.0 - 1.0)
        tok = self.patch_embed(h)  # (B, D, g, g)
        tok = tok.flatten(2).transpose(1, 2)  # (B, L, D)
        tok = tok + self.pos_table[None].to(tok.dtype)
        return tok[0] if squeeze else tok

    def decode_latent(self, z) -> torch.Tensor:
        """Latent tokens (L, D) -> image (H, W, 3) clamped to [0, 1]."""
        z = torch.as_tensor(z).float()
        squeeze = z.ndim == 2
        if squeeze:
            z = z[None]
        if z.ndim != 3:
            raise ShapeError(f"latent must be (L, D) or (B, L, D), got {tuple(z.shape)}")
        L, D = z.shape[1], z.shape[2]
        g, p, c = self.cfg.grid_size, self.cfg.patch_size, self.cfg.channels
        if L != self.cfg.num_tokens:
            raise ShapeError(
                f"token count {L} inconsistent with configured {g}x{g} grid "
                f"({self.cfg.num_tokens} tokens)"
            )
        if D != self.cfg.latent_dim:
            raise ShapeError(f"latent dim {D} does not match configured {self.cfg.latent_dim}")
        if not torch.isfinite(z).all():
            raise ShapeError("latent contains non-finite values")
        img = self._decode_raw(z).clamp(0.0, 1.0)
        return img[0] if squeeze else img

    def _decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        # the positional table is a fixed additive offset; remove it exactly
        # so the shared unpatch projection sees pure content
        z = z - self.pos_table[None].to(z.dtype)
        g, p, c = self.cfg.grid_size, self.cfg.patch_size, 4 * self.cfg.channels
        h = self.unpatch(z)  # (B, L, 4c*p*p)
        h = h.view(-1, g, g, c, p, p).permute(0, 3, 1, 4, 2, 5)
        h = h.reshape(-1, c, g * p, g * p)
        return (self.decoder(h).permute(0, 2, 3, 1) + 1.0) / 2.0

    def forward(self, img) -> torch.Tensor:
        """Unclamped reconstruction, used by the stage-0 fit so gradients
        flow outside [0, 1]."""
        x, squeeze = _as_image_tensor(img)
        self._check_image(x)
        out = self._decode_raw(self.encode_image(x))
        return out[0] if squeeze else out


@dataclass
class TextLatent:
    """Encoded textual guidance: fixed M rows, pad rows zeroed."""

    values: torch.Tensor  # (M, D)
    mask: torch.Tensor  # (M,) bool, True on non-pad rows
    truncated: bool = False

    @property
    def num_tokens(self) -> int:
        return self.values.shape[0]


class TextGuidanceEncoder:
    """Deterministic per-character guidance encoder.

    Character and position tables are drawn once from a fixed-seed generator
    and never trained, mirroring a frozen text encoder. Characters outside
    the charset are mapped to space after uppercasing, so arbitrary OCR
    strings can always be encoded; injectivity is only promised over the
    charset itself.
    """

    def __init__(self, cfg: CodecConfig | None = None, charset: str = DEFAULT_CHARSET):
        self.cfg = cfg or CodecConfig()
        self.charset = charset + " "
        gen = torch.Generator().manual_seed(0x7E57 + self.cfg.seed)
        d = self.cfg.latent_dim
        self.char_table = torch.randn(len(self.charset), d, generator=gen) / math.sqrt(d)
        self.pos_table = torch.randn(self.cfg.text_max_tokens, d, generator=gen) / math.sqrt(d)

    def encode_text(self, caption: str) -> TextLatent:
        """Caption -> (M, D) latent. Empty captions produce the all-pad
        null-guidance latent; over-length captions truncate with a flag."""
        m = self.cfg.text_max_tokens
        d = self.cfg.latent_dim
        chars = [c if c in self.charset else " " for c in caption.upper()]
        truncated = len(chars) > m
        chars = chars[:m]
        values = torch.zeros(m, d)
        mask = torch.zeros(m, dtype=torch.bool)
        for i, ch in enumerate(chars):
            values[i] = self.char_table[self.charset.index(ch)] + self.pos_table[i]
            mask[i] = True
        return TextLatent(values=values, mask=mask, truncated=truncated)

    def null_latent(self) -> TextLatent:
        return self.encode_text("")
