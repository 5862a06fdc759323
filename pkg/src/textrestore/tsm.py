"""Text spotting over stacked denoiser features.

A learnable convolution fuses the per-block [lq; noise] features into one
spatial map; a transformer encoder scores per-location box proposals, and
two query decoders emit polygons (detection) and character sequences
(recognition). Training uses the set-prediction losses with optimal
bipartite matching; the encoder and decoder sides are matched and scored
separately and combined with the configured lambda weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import ShapeError, sinusoidal_grid_encoding
from .config import TsmConfig
from .geometry import cxcywh_to_xyxy, giou, polygon_hull_box, resample_polygon
from .instances import TextInstance
from .matching import MatchAssignment, hungarian_match, match_cost_matrix


@dataclass
class RawQueries:
    """All query outputs pre-threshold, single image."""

    cls_logits: torch.Tensor  # (Q,)
    polygons: torch.Tensor  # (Q, U, 2) in [0, 1]
    char_logits: torch.Tensor  # (Q, V, C+1), last class is pad
    enc_logits: torch.Tensor  # (L,)
    enc_boxes: torch.Tensor  # (L, 4) cxcywh in [0, 1]


@dataclass
class SpottingPrediction:
    instances: list[TextInstance]
    raw: RawQueries


@dataclass
class SpottingLossReport:
    enc_cls: float
    enc_box: float
    enc_giou: float
    dec_cls: float
    dec_poly: float
    dec_char: float
    total: torch.Tensor
    assignment: MatchAssignment
    enc_assignment: MatchAssignment = field(default=MatchAssignment(pairs=()))

    def to_dict(self) -> dict:
        return {
            "enc_cls": self.enc_cls, "enc_box": self.enc_box, "enc_giou": self.enc_giou,
            "dec_cls": self.dec_cls, "dec_poly": self.dec_poly, "dec_char": self.dec_char,
            "total": float(self.total), "assignment": list(self.assignment.pairs),
        }


class _EncLayer(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.n1 = nn.LayerNorm(d)
        self.n2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x):
        h = self.n1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ffn(self.n2(x))


class _DecLayer(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.n1 = nn.LayerNorm(d)
        self.n2 = nn.LayerNorm(d)
        self.n3 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, q, memory):
        h = self.n1(q)
        q = q + self.self_attn(h, h, h, need_weights=False)[0]
        h = self.n2(q)
        q = q + self.cross_attn(h, memory, memory, need_weights=False)[0]
        return q + self.ffn(self.n3(q))


class TextSpotter(nn.Module):
    def __init__(self, cfg: TsmConfig, num_blocks: int, num_tokens: int, latent_dim: int):
        super().__init__()
        self.cfg = cfg
        self.num_blocks = num_blocks
        self.num_tokens = num_tokens
        self.latent_dim = latent_dim
        grid = int(round(num_tokens ** 0.5))
        if grid * grid != num_tokens:
            raise ShapeError(f"token count {num_tokens} is not a square grid")
        self.grid = grid
        d = cfg.hidden_dim
        self.fuse_conv = nn.Conv2d(num_blocks * 2 * latent_dim, d, kernel_size=3, padding=1)
        nn.init.zeros_(self.fuse_conv.bias)
        self.register_buffer("pos_table", sinusoidal_grid_encoding(grid, d), persistent=False)
        self.encoder = nn.ModuleList([_EncLayer(d, cfg.num_heads) for _ in range(cfg.enc_layers)])
        self.enc_cls_head = nn.Linear(d, 1)
        self.enc_box_head = nn.Linear(d, 4)
        self.queries = nn.Embedding(cfg.num_queries, d)
        self.det_decoder = nn.ModuleList([_DecLayer(d, cfg.num_heads) for _ in range(cfg.dec_layers)])
        self.rec_decoder = nn.ModuleList([_DecLayer(d, cfg.num_heads) for _ in range(cfg.dec_layers)])
        self.cls_head = nn.Linear(d, 1)
        self.poly_head = nn.Linear(d, cfg.num_control_points * 2)
        self.char_head = nn.Linear(d, cfg.max_chars * (len(cfg.charset) + 1))

    def fuse_features(self, feats: list[torch.Tensor]) -> torch.Tensor:
        """Stack per-block (2L, D) features into channels on the sqrt(L) grid
        and apply the learnable fusion convolution. Batched input supported."""
        if len(feats) != self.num_blocks:
            raise ShapeError(f"expected {self.num_blocks} feature entries, got {len(feats)}")
        ref = feats[0].shape
        for i, f in enumerate(feats):
            if f.shape != ref:
                raise ShapeError(f"feature entry {i} shape {tuple(f.shape)} != {tuple(ref)}")
        batched = feats[0].ndim == 3
        stack = torch.stack([f if batched else f[None] for f in feats], dim=1)  # (B, N, 2L, D)
        B, N, twoL, D = stack.shape
        if twoL != 2 * self.num_tokens or D != self.latent_dim:
            raise ShapeError(
                f"feature entries must be ({2 * self.num_tokens}, {self.latent_dim}), "
                f"got ({twoL}, {D})"
            )
        g = self.grid
        # split [lq; noise] halves, each half becomes D channels on the grid
        stack = stack.view(B, N, 2, self.num_tokens, D)
        stack = stack.permute(0, 1, 2, 4, 3).reshape(B, N * 2 * D, g, g)
        fused = self.fuse_conv(stack)
        return fused if batched else fused[0]

    def forward(self, feats: list[torch.Tensor]) -> RawQueries:
        batched = feats[0].ndim == 3
        fused = self.fuse_features(feats)
        if not batched:
            fused = fused[None]
        B = fused.shape[0]
        memory = fused.flatten(2).transpose(1, 2) + self.pos_table[None].to(fused.dtype)
        for layer in self.encoder:
            memory = layer(memory)
        enc_logits = self.enc_cls_head(memory).squeeze(-1)  # (B, L)
        enc_boxes = self.enc_box_head(memory).sigmoid()  # (B, L, 4) cxcywh
        q = self.queries.weight[None].expand(B, -1, -1).to(fused.dtype)
        det = q
        for layer in self.det_decoder:
            det = layer(det, memory)
        rec = q
        for layer in self.rec_decoder:
            rec = layer(rec, memory)
        Q = self.cfg.num_queries
        cls_logits = self.cls_head(det).squeeze(-1)
        polygons = self.poly_head(det).sigmoid().view(B, Q, self.cfg.num_control_points, 2)
        char_logits = self.char_head(rec).view(B, Q, self.cfg.max_chars, len(self.cfg.charset) + 1)
        if not batched:
            return RawQueries(cls_logits[0], polygons[0], char_logits[0],
                              enc_logits[0], enc_boxes[0])
        return RawQueries(cls_logits, polygons, char_logits, enc_logits, enc_boxes)

    def decode_transcript(self, char_logits: torch.Tensor) -> str:
        """Greedy per-position decode; the pad class terminates the string."""
        pad = len(self.cfg.charset)
        chars = []
        for idx in char_logits.argmax(dim=-1).tolist():
            if idx == pad:
                break
            chars.append(self.cfg.charset[idx])
        return "".join(chars)

    @torch.no_grad()
    def spot(self, feats: list[torch.Tensor], conf_threshold: float | None = None) -> SpottingPrediction:
        """Threshold raw queries into TextInstance detections (single image)."""
        raw = self.forward(feats)
        thr = self.cfg.conf_threshold if conf_threshold is None else conf_threshold
        conf = torch.sigmoid(raw.cls_logits)
        instances = []
        for i in range(self.cfg.num_queries):
            c = float(conf[i])
            if c > thr:
                instances.append(TextInstance(
                    polygon=raw.polygons[i].detach().cpu().numpy().astype(np.float64),
                    text=self.decode_transcript(raw.char_logits[i]),
                    confidence=c,
                ))
        instances.sort(key=lambda inst: -inst.confidence)
        return SpottingPrediction(instances=instances, raw=raw)


def ocr_string(pred: SpottingPrediction) -> str:
    """Transcripts joined in descending-confidence order (the string handed
    to the guidance loop)."""
    return " ".join(inst.text for inst in pred.instances if inst.text)


def _char_targets(text: str, cfg: TsmConfig) -> list[int]:
    if len(text) > cfg.max_chars:
        raise ValueError(f"transcript {text!r} longer than max_chars {cfg.max_chars}")
    idx = []
    for ch in text:
        pos = cfg.charset.find(ch.upper())
        if pos < 0:
            raise ValueError(f"character {ch!r} outside charset")
        idx.append(pos)
    return idx


def match_queries(raw: RawQueries, gts: list[TextInstance], cfg: TsmConfig,
                  side: str) -> MatchAssignment:
    """Bipartite assignment of encoder proposals or decoder queries to GT."""
    if not gts:
        return MatchAssignment(pairs=())
    gt_boxes = [g.hull_box for g in gts]
    with torch.no_grad():
        if side == "enc":
            conf = torch.sigmoid(raw.enc_logits).cpu().numpy()
            boxes = [cxcywh_to_xyxy(b) for b in raw.enc_boxes.cpu().numpy()]
        elif side == "dec":
            conf = torch.sigmoid(raw.cls_logits).cpu().numpy()
            boxes = [polygon_hull_box(p) for p in raw.polygons.cpu().numpy()]
        else:
            raise ValueError(f"unknown side {side!r}")
    cost = match_cost_matrix(conf, boxes, gt_boxes, cfg)
    return hungarian_match(cost)


def loss_terms(raw: RawQueries, gts: list[TextInstance], cfg: TsmConfig,
               enc_assign: MatchAssignment, dec_assign: MatchAssignment) -> dict[str, torch.Tensor]:
    """The six loss terms under fixed assignments (all differentiable)."""
    dtype = raw.cls_logits.dtype
    zero = torch.zeros((), dtype=dtype)

    def bce(logits: torch.Tensor, assign: MatchAssignment) -> torch.Tensor:
        target = torch.zeros_like(logits)
        for p, _ in assign.pairs:
            target[p] = 1.0
        return F.binary_cross_entropy_with_logits(logits, target)

    terms = {"enc_cls": bce(raw.enc_logits, enc_assign),
             "dec_cls": bce(raw.cls_logits, dec_assign)}

    enc_box, enc_giou = zero, zero
    if enc_assign.pairs:
        box_l1, giou_pen = [], []
        for p, g in enc_assign.pairs:
            pred = cxcywh_to_xyxy_t(raw.enc_boxes[p])
            gt = torch.as_tensor(gts[g].hull_box, dtype=dtype)
            box_l1.append((pred - gt).abs().mean())
            giou_pen.append(1.0 - giou_t(pred, gt))
        enc_box = torch.stack(box_l1).mean()
        enc_giou = torch.stack(giou_pen).mean()
    terms["enc_box"] = enc_box
    terms["enc_giou"] = enc_giou

    dec_poly, dec_char = zero, zero
    if dec_assign.pairs:
        poly_l1, char_ce = [], []
        pad = len(cfg.charset)
        for p, g in dec_assign.pairs:
            gt_poly = resample_polygon(gts[g].polygon, cfg.num_control_points)
            gt_poly = torch.as_tensor(gt_poly, dtype=dtype)
            poly_l1.append((raw.polygons[p] - gt_poly).abs().mean())
            # supervise the transcript plus its terminating pad slot;
            # positions past the terminator carry no loss
            target = _char_targets(gts[g].text, cfg)
            if len(target) < cfg.max_chars:
                target = target + [pad]
            tgt = torch.as_tensor(target, dtype=torch.long)
            char_ce.append(F.cross_entropy(raw.char_logits[p][: len(target)], tgt))
        dec_poly = torch.stack(poly_l1).mean()
        dec_char = torch.stack(char_ce).mean()
    terms["dec_poly"] = dec_poly
    terms["dec_char"] = dec_char
    return terms


def cxcywh_to_xyxy_t(box: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = box.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def giou_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable generalized IoU on xyxy boxes (torch twin of
    geometry.giou)."""
    inter_w = (torch.min(a[2], b[2]) - torch.max(a[0], b[0])).clamp(min=0)
    inter_h = (torch.min(a[3], b[3]) - torch.max(a[1], b[1])).clamp(min=0)
    inter = inter_w * inter_h
    area_a = (a[2] - a[0]).clamp(min=0) * (a[3] - a[1]).clamp(min=0)
    area_b = (b[2] - b[0]).clamp(min=0) * (b[3] - b[1]).clamp(min=0)
    union = area_a + area_b - inter
    iou = inter / union if float(union) > 0 else inter * 0.0
    enc_w = torch.max(a[2], b[2]) - torch.min(a[0], b[0])
    enc_h = torch.max(a[3], b[3]) - torch.min(a[1], b[1])
    enclose = enc_w * enc_h
    if float(enclose) <= 0:
        return iou
    return iou - (enclose - union) / enclose


def spotting_loss(raw: RawQueries, gts: list[TextInstance], cfg: TsmConfig) -> SpottingLossReport:
    """Full set-prediction loss for one image.

    Matching runs over all raw queries (the confidence threshold applies to
    inference outputs, not to which queries can be supervised). Empty GT
    reduces to pure background classification.
    """
    enc_assign = match_queries(raw, gts, cfg, side="enc")
    dec_assign = match_queries(raw, gts, cfg, side="dec")
    terms = loss_terms(raw, gts, cfg, enc_assign, dec_assign)
    total = (
        cfg.lambda_cls * terms["enc_cls"]
        + cfg.lambda_box * terms["enc_box"]
        + cfg.lambda_giou * terms["enc_giou"]
        + cfg.lambda_cls * terms["dec_cls"]
        + cfg.lambda_poly * terms["dec_poly"]
        + cfg.lambda_char * terms["dec_char"]
    )
    return SpottingLossReport(
        enc_cls=float(terms["enc_cls"]), enc_box=float(terms["enc_box"]),
        enc_giou=float(terms["enc_giou"]), dec_cls=float(terms["dec_cls"]),
        dec_poly=float(terms["dec_poly"]), dec_char=float(terms["dec_char"]),
        total=total, assignment=dec_assign, enc_assignment=enc_assign,
    )
