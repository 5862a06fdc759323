"""Triple-stream transformer denoiser.

Each block runs joint full self-attention over the concatenation of the
noisy, LQ, and text token streams with per-stream projections, adaptive
layer norms driven by a sinusoidal timestep embedding, and per-stream
feed-forwards. The per-block concatenation of the LQ-stream and
noise-stream outputs (2L x D each block) is exposed for the spotting head.

Stage-1 training unfreezes the LQ branch, the attention Q/K/V projections
of the noise and text branches, and the zero-initialized output head;
stage 2 freezes the whole backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import ShapeError, TextLatent, sinusoidal_grid_encoding
from .config import BackboneConfig

STREAMS = ("noise", "lq", "text")


@dataclass
class DenoiserOutput:
    predicted_noise: torch.Tensor  # same shape as the noisy input tokens
    features: list[torch.Tensor]  # num_blocks entries of (..., 2L, D)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device)
                     / max(half - 1, 1))
    args = t[:, None].to(freq) * 1000.0 * freq[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _zero_linear(d_in: int, d_out: int) -> nn.Linear:
    lin = nn.Linear(d_in, d_out)
    nn.init.zeros_(lin.weight)
    nn.init.zeros_(lin.bias)
    return lin


def _modulate(x: torch.Tensor, shift_scale: torch.Tensor) -> torch.Tensor:
    shift, scale = shift_scale.chunk(2, dim=-1)
    return x * (1 + scale[:, None]) + shift[:, None]


class JointBlock(nn.Module):
    def __init__(self, d: int, num_heads: int, mlp_ratio: int):
        super().__init__()
        if d % num_heads:
            raise ShapeError(f"dim {d} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = d // num_heads
        self.norm = nn.LayerNorm(d, elementwise_affine=False)
        self.mod1 = nn.ModuleDict({s: _zero_linear(d, 2 * d) for s in STREAMS})
        self.qkv = nn.ModuleDict({s: nn.Linear(d, 3 * d) for s in STREAMS})
        self.proj = nn.ModuleDict({s: nn.Linear(d, d) for s in STREAMS})
        self.mod2 = nn.ModuleDict({s: _zero_linear(d, 2 * d) for s in STREAMS})
        self.ffn = nn.ModuleDict({
            s: nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(), nn.Linear(mlp_ratio * d, d))
            for s in STREAMS
        })

    def forward(self, xs: dict[str, torch.Tensor], cond: torch.Tensor,
                key_mask: torch.Tensor) -> dict[str, torch.Tensor]:
        sizes = [xs[s].shape[1] for s in STREAMS]
        q, k, v = [], [], []
        for s in STREAMS:
            h = _modulate(self.norm(xs[s]), self.mod1[s](cond))
            qs, ks, vs = self.qkv[s](h).chunk(3, dim=-1)
            q.append(qs)
            k.append(ks)
            v.append(vs)
        B = q[0].shape[0]
        S = sum(sizes)
        shape = (B, S, self.num_heads, self.head_dim)
        q = torch.cat(q, dim=1).view(shape).transpose(1, 2)
        k = torch.cat(k, dim=1).view(shape).transpose(1, 2)
        v = torch.cat(v, dim=1).view(shape).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = (scores.softmax(dim=-1) @ v).transpose(1, 2).reshape(B, S, -1)
        parts = attn.split(sizes, dim=1)
        out = {}
        for s, part in zip(STREAMS, parts):
            x = xs[s] + self.proj[s](part)
            h = _modulate(self.norm(x), self.mod2[s](cond))
            out[s] = x + self.ffn[s](h)
        return out


class TripleStreamDenoiser(nn.Module):
    def __init__(self, cfg: BackboneConfig, latent_dim: int, grid_size: int, num_steps: int):
        super().__init__()
        self.cfg = cfg
        self.latent_dim = latent_dim
        self.grid_size = grid_size
        self.num_steps = num_steps
        self.t_mlp = nn.Sequential(
            nn.Linear(latent_dim, latent_dim), nn.SiLU(), nn.Linear(latent_dim, latent_dim)
        )
        self.blocks = nn.ModuleList([
            JointBlock(latent_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.num_blocks)
        ])
        self.head_norm = nn.LayerNorm(latent_dim, elementwise_affine=False)
        self.head = nn.Linear(latent_dim, latent_dim)
        if cfg.zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)
        self.register_buffer(
            "pos_table", sinusoidal_grid_encoding(grid_size, latent_dim), persistent=False
        )

    def _prep(self, z, name: str, batched: bool) -> torch.Tensor:
        z = torch.as_tensor(z)
        if z.ndim == 2 and not batched:
            z = z[None]
        if z.ndim != 3:
            raise ShapeError(f"{name} must be (L, D) or (B, L, D), got {tuple(z.shape)}")
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"{name} dim {z.shape[-1]} != model dim {self.latent_dim}")
        return z

    def forward(self, z_t, z_lq, z_text, t) -> DenoiserOutput:
        """Denoise one step's worth: returns the predicted noise and all
        per-block concatenated [lq; noise] features.

        `z_text` may be a TextLatent or a raw (M, D)/(B, M, D) tensor (raw
        tensors are treated as fully non-pad). `t` covers [0, num_steps]:
        training samples [0, num_steps) and the sampler additionally queries
        the initial pure-noise state at t = num_steps.
        """
        batched = torch.as_tensor(z_t).ndim == 3
        z_t = self._prep(z_t, "z_t", batched)
        z_lq = self._prep(z_lq, "z_lq", batched)
        if isinstance(z_text, TextLatent):
            text, mask = z_text.values, z_text.mask
        else:
            text, mask = torch.as_tensor(z_text), None
        text = self._prep(text, "z_text", batched)
        B = z_t.shape[0]
        if text.shape[0] == 1 and B > 1:
            text = text.expand(B, -1, -1)
        if mask is None:
            mask = torch.ones(text.shape[:2], dtype=torch.bool)
        elif mask.ndim == 1:
            mask = mask[None].expand(B, -1)
        if z_lq.shape != z_t.shape:
            raise ShapeError(f"z_lq shape {tuple(z_lq.shape)} != z_t shape {tuple(z_t.shape)}")

        t = torch.as_tensor(t, dtype=z_t.dtype)
        if t.ndim == 0:
            t = t.repeat(B)
        if ((t < 0) | (t > self.num_steps)).any():
            raise ShapeError(f"timestep out of range [0, {self.num_steps}]")
        cond = self.t_mlp(timestep_embedding(t / self.num_steps, self.latent_dim))

        L = z_t.shape[1]
        key_mask = torch.cat([
            torch.ones(B, 2 * L, dtype=torch.bool), mask.bool()
        ], dim=1)
        pos = self.pos_table[None].to(z_t.dtype)
        xs = {"noise": z_t + pos, "lq": z_lq + pos, "text": text.to(z_t.dtype)}
        features = []
        for block in self.blocks:
            xs = block(xs, cond, key_mask)
            features.append(torch.cat([xs["lq"], xs["noise"]], dim=1))
        eps = self.head(self.head_norm(xs["noise"]))
        if not batched:
            eps = eps[0]
            features = [f[0] for f in features]
        return DenoiserOutput(predicted_noise=eps, features=features)


def feature_shape(num_tokens: int, latent_dim: int) -> tuple[int, int]:
    """Shape contract of one block-feature entry: (2L, D)."""
    return 2 * num_tokens, latent_dim


def freeze_plan(model: TripleStreamDenoiser, stage: str) -> dict[str, bool]:
    """Per-parameter trainability mask for the two training stages.

    stage1: LQ-branch parameters, Q/K/V projections of the noise and text
    branches, and the output head (zero-initialized, so it must train for
    any gradient to reach the rest). stage2: everything frozen.
    """
    if stage not in ("stage1", "stage2"):
        raise ValueError(f"unknown stage {stage!r} (expected 'stage1' or 'stage2')")
    plan = {}
    for name, _ in model.named_parameters():
        if stage == "stage2":
            plan[name] = False
        else:
            trainable = ".lq." in name or name.startswith("head.")
            if ".qkv." in name and (".noise." in name or ".text." in name):
                trainable = True
            plan[name] = trainable
    return plan


def apply_freeze(model: TripleStreamDenoiser, stage: str) -> list[str]:
    """Set requires_grad per the stage plan; returns trainable names."""
    plan = freeze_plan(model, stage)
    for name, p in model.named_parameters():
        p.requires_grad_(plan[name])
    return [n for n, on in plan.items() if on]
