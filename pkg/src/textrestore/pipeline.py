"""Orchestration: staged training (codec fit, denoiser, spotting head) and
the inference loop that interleaves denoising, per-step OCR, and scheduled
guidance self-correction.

Iteration indices in traces count denoising steps from the start (0 is the
first, highest-noise step), matching the numbering used for the correction
schedule. A correction computed at iteration j takes effect from iteration
j + 1; the step at j itself still runs under the previous guidance.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .backbone import TripleStreamDenoiser, apply_freeze, freeze_plan
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .codec import ImageCodec, TextGuidanceEncoder, TextLatent
from .config import RunConfig, config_hash, config_from_dict, config_to_dict
from .datagen import corpus_images, load_manifest
from .diffusion import (DenoiseState, NoiseSchedule, NumericalError, TimestepSampler,
                        diffusion_loss, full_denoise)
from .instances import load_annotations
from .tsm import TextSpotter, ocr_string, spotting_loss
from .vlm import GuidanceRecord, VlmAdapter

log = logging.getLogger(__name__)


from .parallel import parallel_map  # noqa: F401  (re-export for callers)


def stable_seed(*parts) -> int:
    blob = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") % (2**63)


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class ModelBundle:
    config: RunConfig
    codec: ImageCodec
    text_encoder: TextGuidanceEncoder
    denoiser: TripleStreamDenoiser
    sched: NoiseSchedule
    spotter: Optional[TextSpotter] = None


def build_models(cfg: RunConfig, with_spotter: bool = True, seed: int | None = None) -> ModelBundle:
    torch.manual_seed(cfg.seed if seed is None else seed)
    codec = ImageCodec(cfg.codec)
    text_encoder = TextGuidanceEncoder(cfg.codec, charset=cfg.tsm.charset)
    denoiser = TripleStreamDenoiser(
        cfg.backbone, cfg.codec.latent_dim, cfg.codec.grid_size, cfg.diffusion.num_steps
    )
    spotter = None
    if with_spotter:
        spotter = TextSpotter(cfg.tsm, cfg.backbone.num_blocks, cfg.codec.num_tokens,
                              cfg.codec.latent_dim)
    sched = NoiseSchedule.from_config(cfg.diffusion)
    return ModelBundle(config=cfg, codec=codec, text_encoder=text_encoder,
                       denoiser=denoiser, sched=sched, spotter=spotter)


def load_bundle(codec_path: str | Path, backbone_path: str | Path | None = None,
                tsm_path: str | Path | None = None) -> ModelBundle:
    blob = load_checkpoint(codec_path, expected_kind="codec")
    cfg = config_from_dict(blob["config"])
    bundle = build_models(cfg, with_spotter=tsm_path is not None)
    bundle.codec.load_state_dict(blob["state"])
    ref_hash = config_hash(cfg)
    if backbone_path is not None:
        b = load_checkpoint(backbone_path, expected_kind="backbone")
        if config_hash(config_from_dict(b["config"])) != ref_hash:
            raise CheckpointError("backbone checkpoint config does not match codec checkpoint")
        bundle.denoiser.load_state_dict(b["state"])
    if tsm_path is not None:
        t = load_checkpoint(tsm_path, expected_kind="tsm")
        if config_hash(config_from_dict(t["config"])) != ref_hash:
            raise CheckpointError("tsm checkpoint config does not match codec checkpoint")
        bundle.spotter.load_state_dict(t["state"])
    return bundle


# ---------------------------------------------------------------------------
# training


def _corpus_tensors(bundle: ModelBundle, manifest_path: str | Path):
    """Encode the whole corpus once with the frozen codec: per (record,
    level) training pairs of clean/LQ latents plus caption latents."""
    manifest = load_manifest(manifest_path)
    root = Path(manifest_path).parent
    levels = manifest["levels"]
    z0_list, zlq_list, text_vals, text_masks = [], [], [], []
    gt_lists, ids = [], []
    annos = {r.image: r for r in load_annotations(root / "annotations.json")}
    with torch.no_grad():
        for rec, hq in corpus_images(manifest_path, kind="hq"):
            z0 = bundle.codec.encode_image(hq)
            tl = bundle.text_encoder.encode_text(rec["caption"])
            gts = annos[rec["hq"]].instances
            for level in levels:
                from .imutil import load_image

                lq = load_image(root / rec["lq"][str(level)])
                z0_list.append(z0)
                zlq_list.append(bundle.codec.encode_image(lq))
                text_vals.append(tl.values)
                text_masks.append(tl.mask)
                gt_lists.append(gts)
                ids.append(f"{rec['id']}:lv{level}")
    return {
        "z0": torch.stack(z0_list), "z_lq": torch.stack(zlq_list),
        "text": torch.stack(text_vals), "text_mask": torch.stack(text_masks),
        "gts": gt_lists, "ids": ids,
    }


def train_stage0(corpus_manifest: str | Path, cfg: RunConfig, out_path: str | Path) -> list[dict]:
    """Fit the toy codec on clean scenes.

    Reconstruction MSE with ink pixels weighted up and a finite-difference
    edge term; both push the thin glyph strokes through the token
    bottleneck much faster than plain MSE. A subset of the corpus suffices
    for this distribution (stage0_subset, 0 = all)."""
    torch.manual_seed(stable_seed(cfg.train.seed, "stage0"))
    bundle = build_models(cfg, with_spotter=False)
    codec = bundle.codec
    images = [torch.from_numpy(img) for _, img in corpus_images(corpus_manifest, kind="hq")]
    if cfg.train.stage0_subset:
        images = images[: cfg.train.stage0_subset]
    data = torch.stack(images).float()
    ink = (data.mean(dim=3, keepdim=True) < 0.4).float()
    epochs = cfg.train.stage0_epochs
    opt = torch.optim.AdamW(codec.parameters(), lr=cfg.train.stage0_lr,
                            weight_decay=cfg.train.weight_decay)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=epochs, eta_min=cfg.train.stage0_lr * 0.1)
    rng = np.random.default_rng(stable_seed(cfg.train.seed, "stage0-order"))
    curve = []
    bs = cfg.train.batch_size
    w_ink = cfg.train.stage0_ink_weight
    w_edge = cfg.train.stage0_edge_weight
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        losses = []
        for i in range(0, len(order), bs):
            idx = order[i:i + bs]
            batch = data[idx]
            out = codec(batch)
            w = 1.0 + w_ink * ink[idx]
            loss = (w * (out - batch) ** 2).sum() / w.sum() / 3
            if w_edge:
                gx = out[:, :, 1:] - out[:, :, :-1]
                gy = out[:, 1:] - out[:, :-1]
                tx = batch[:, :, 1:] - batch[:, :, :-1]
                ty = batch[:, 1:] - batch[:, :-1]
                loss = loss + w_edge * (((gx - tx) ** 2).mean() + ((gy - ty) ** 2).mean())
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss))
        lr_sched.step()
        curve.append({"epoch": epoch, "loss": float(np.mean(losses))})
        if not np.isfinite(curve[-1]["loss"]):
            raise NumericalError(f"stage0 loss diverged at epoch {epoch}")
    save_checkpoint(out_path, "codec", config_to_dict(cfg), codec.state_dict())
    return curve


def train_stage1(corpus_manifest: str | Path, cfg: RunConfig, codec_ckpt: str | Path,
                 out_path: str | Path) -> list[dict]:
    """Optimize the denoising objective over the stage-1 unfrozen subset
    (LQ branch, noise/text attention projections, output head)."""
    torch.manual_seed(stable_seed(cfg.train.seed, "stage1"))
    bundle = load_bundle(codec_ckpt)
    data = _corpus_tensors(bundle, corpus_manifest)
    model = bundle.denoiser
    trainable = apply_freeze(model, "stage1")
    if not trainable:
        raise RuntimeError("stage1 freeze plan left no trainable parameters")
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.train.stage1_lr, weight_decay=cfg.train.weight_decay)
    sampler = TimestepSampler(cfg.diffusion.num_steps, cfg.diffusion.train_t_loc,
                              cfg.diffusion.train_t_scale)
    rng = np.random.default_rng(stable_seed(cfg.train.seed, "stage1-order"))
    gen = torch.Generator().manual_seed(stable_seed(cfg.train.seed, "stage1-noise"))
    null = bundle.text_encoder.null_latent()
    n = len(data["z0"])
    bs = cfg.train.batch_size
    curve = []
    for epoch in range(cfg.train.stage1_epochs):
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, bs):
            idx = order[i:i + bs].tolist()
            z0 = data["z0"][idx]
            z_lq = data["z_lq"][idx]
            text = data["text"][idx].clone()
            mask = data["text_mask"][idx].clone()
            # guidance dropout so null-guidance inference stays in-distribution
            drop = rng.random(len(idx)) < cfg.train.text_dropout
            for b, d in enumerate(drop):
                if d:
                    text[b] = null.values
                    mask[b] = null.mask
            t = sampler.sample(rng, len(idx))
            eps = torch.randn(z0.shape, generator=gen)
            loss = diffusion_loss(model, z0, z_lq, TextLatent(text, mask), t, eps, bundle.sched)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss))
        curve.append({"epoch": epoch, "loss": float(np.mean(losses))})
        if not np.isfinite(curve[-1]["loss"]):
            raise NumericalError(f"stage1 loss diverged at epoch {epoch}")
    save_checkpoint(out_path, "backbone", config_to_dict(cfg), model.state_dict())
    return curve


def train_stage2(corpus_manifest: str | Path, cfg: RunConfig, codec_ckpt: str | Path,
                 backbone_ckpt: str | Path, out_path: str | Path) -> list[dict]:
    """Train the spotting head on frozen-denoiser features at sampled
    timesteps."""
    torch.manual_seed(stable_seed(cfg.train.seed, "stage2"))
    bundle = load_bundle(codec_ckpt, backbone_path=backbone_ckpt)
    spotter = TextSpotter(cfg.tsm, cfg.backbone.num_blocks, cfg.codec.num_tokens,
                          cfg.codec.latent_dim)
    data = _corpus_tensors(bundle, corpus_manifest)
    model = bundle.denoiser
    apply_freeze(model, "stage2")
    before = {k: v.clone() for k, v in model.state_dict().items()}
    opt = torch.optim.AdamW(spotter.parameters(), lr=cfg.train.stage2_lr,
                            weight_decay=cfg.train.weight_decay)
    sampler = TimestepSampler(cfg.diffusion.num_steps, cfg.diffusion.train_t_loc,
                              cfg.diffusion.train_t_scale)
    rng = np.random.default_rng(stable_seed(cfg.train.seed, "stage2-order"))
    gen = torch.Generator().manual_seed(stable_seed(cfg.train.seed, "stage2-noise"))
    n = len(data["z0"])
    bs = cfg.train.batch_size
    curve = []
    for epoch in range(cfg.train.stage2_epochs):
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, bs):
            idx = order[i:i + bs].tolist()
            z0 = data["z0"][idx]
            t = int(sampler.sample(rng, 1)[0])
            eps = torch.randn(z0.shape, generator=gen)
            sig = float(bundle.sched.sigma[t])
            z_t = (1 - sig) * z0 + sig * eps
            with torch.no_grad():
                out = model(z_t, data["z_lq"][idx],
                            TextLatent(data["text"][idx], data["text_mask"][idx]), t)
            raws = spotter([f for f in out.features])
            total = 0.0
            for b in range(len(idx)):
                raw_b = _index_raw(raws, b)
                total = total + spotting_loss(raw_b, data["gts"][idx[b]], cfg.tsm).total
            loss = total / len(idx)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss))
        curve.append({"epoch": epoch, "loss": float(np.mean(losses))})
        if not np.isfinite(curve[-1]["loss"]):
            raise NumericalError(f"stage2 loss diverged at epoch {epoch}")
    after = model.state_dict()
    for k, v in before.items():
        if not torch.equal(v, after[k]):
            raise RuntimeError(f"frozen backbone parameter {k} changed during stage 2")
    save_checkpoint(out_path, "tsm", config_to_dict(cfg), spotter.state_dict())
    return curve


def _index_raw(raws, b: int):
    from .tsm import RawQueries

    return RawQueries(
        cls_logits=raws.cls_logits[b], polygons=raws.polygons[b],
        char_logits=raws.char_logits[b], enc_logits=raws.enc_logits[b],
        enc_boxes=raws.enc_boxes[b],
    )


# ---------------------------------------------------------------------------
# inference


@dataclass
class TraceStep:
    index: int
    tsm_ocr: str
    guidance_text: str
    guidance_source: str
    correction: Optional[dict] = None
    z_text_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "index": self.index, "tsm_ocr": self.tsm_ocr,
            "guidance_text": self.guidance_text, "guidance_source": self.guidance_source,
            "correction": self.correction, "z_text_hash": self.z_text_hash,
        }


@dataclass
class RunTrace:
    initial_text: str
    num_steps: int
    correction_steps: list[int]
    steps: list[TraceStep] = field(default_factory=list)
    degraded_events: list[dict] = field(default_factory=list)

    def render_lines(self) -> list[str]:
        """Human-readable per-iteration lines for the trace log."""
        lines = [f"[VLM initial text prompt]: {self.initial_text}"]
        for s in self.steps:
            if s.correction is not None:
                lines.append(f"iter: {s.index:02d}  APPLY VLM CORRECTION: [{s.correction['new_text']}]")
            elif s.guidance_source == "vlm-corrected":
                lines.append(f"iter: {s.index:02d}  vlm corrected prompt: [{s.guidance_text}]")
            else:
                lines.append(f"iter: {s.index:02d}  TSM OCR text prompt: [{s.tsm_ocr}]")
        return lines

    def to_dict(self) -> dict:
        return {
            "initial_text": self.initial_text, "num_steps": self.num_steps,
            "correction_steps": list(self.correction_steps),
            "steps": [s.to_dict() for s in self.steps],
            "degraded_events": list(self.degraded_events),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunTrace":
        return cls(
            initial_text=d["initial_text"], num_steps=d["num_steps"],
            correction_steps=list(d["correction_steps"]),
            steps=[TraceStep(**s) for s in d["steps"]],
            degraded_events=list(d["degraded_events"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunTrace":
        return cls.from_dict(json.loads(Path(path).read_text()))


class ScriptedOcrProvider:
    """Fixed per-iteration OCR strings (test fixtures for the trace
    protocol)."""

    def __init__(self, strings: list[str]):
        self.strings = list(strings)

    def __call__(self, state: DenoiseState, k: int) -> str:
        return self.strings[k]


def _latent_hash(tl: TextLatent) -> str:
    return hashlib.sha256(tl.values.numpy().tobytes()).hexdigest()[:16]


def restore(
    image_lq: np.ndarray,
    bundle: ModelBundle,
    vlm: VlmAdapter,
    *,
    image_id: str = "image",
    seed: int = 0,
    correction_steps: Optional[list[int]] = None,
    ocr_provider: Optional[Callable[[DenoiseState, int], str]] = None,
    tsm_every_step: bool = True,
) -> tuple[np.ndarray, RunTrace]:
    """Full guided restoration of one LQ image.

    Runs initial extraction, the T-step denoise loop with per-step OCR, and
    scheduled self-correction; returns the restored image and the run trace.
    """
    cfg = bundle.config
    T = cfg.diffusion.num_steps
    corr = sorted(cfg.vlm.correction_steps if correction_steps is None else correction_steps)
    for j in corr:
        if not 1 <= j < T:
            raise ValueError(f"correction step {j} outside [1, {T})")
    if ocr_provider is None:
        if bundle.spotter is None:
            raise ValueError("restore needs a spotter checkpoint or an explicit ocr_provider")
        spotter = bundle.spotter

        def ocr_provider(state: DenoiseState, k: int) -> str:
            return ocr_string(spotter.spot(state.features))

    guidance = vlm.extract_initial(image_lq, image_id=image_id)
    trace = RunTrace(initial_text=guidance.text, num_steps=T, correction_steps=list(corr))
    with torch.no_grad():
        z_lq = bundle.codec.encode_image(image_lq)
        ctx = {
            "guidance": guidance,
            "z_text": bundle.text_encoder.encode_text(guidance.text),
            "pending": None,
            "last_ocr": None,
            "event": None,
        }

        def provider(k: int) -> TextLatent:
            if ctx["pending"] is not None:
                ctx["guidance"], ctx["z_text"] = ctx["pending"]
                ctx["pending"] = None
            ctx["event"] = None
            if k in corr:
                prior = ctx["guidance"]
                new_g = vlm.self_correct(image_lq, prior, ctx["last_ocr"] or "", j=k,
                                         image_id=image_id)
                if new_g is not prior:
                    ctx["event"] = {
                        "new_text": new_g.text, "prior": prior.text,
                        "tsm_input": ctx["last_ocr"],
                    }
                    ctx["pending"] = (new_g, bundle.text_encoder.encode_text(new_g.text))
            return ctx["z_text"]

        def observer(k: int, state: DenoiseState) -> None:
            wants_ocr = tsm_every_step or (k + 1) in corr
            ocr = ""
            if wants_ocr:
                try:
                    ocr = ocr_provider(state, k)
                except Exception as e:  # noqa: BLE001 - OCR failure logs empty
                    log.warning("OCR failed at iteration %d: %r", k, e)
                    ocr = ""
            ctx["last_ocr"] = ocr
            trace.steps.append(TraceStep(
                index=k, tsm_ocr=ocr, guidance_text=ctx["guidance"].text,
                guidance_source=ctx["guidance"].source, correction=ctx["event"],
                z_text_hash=_latent_hash(ctx["z_text"]),
            ))

        z0 = full_denoise(z_lq, provider, bundle.denoiser, bundle.sched, T,
                          seed=stable_seed(seed, image_id), observer=observer)
        restored = bundle.codec.decode_latent(z0).numpy()
    trace.degraded_events = list(vlm.degraded_events)
    return restored, trace


def restore_with_fixed_guidance(
    image_lq: np.ndarray,
    text: str,
    bundle: ModelBundle,
    *,
    image_id: str = "image",
    seed: int = 0,
) -> np.ndarray:
    """Restoration under a single constant guidance string (the null / GT
    ablation axis); VLM and spotting head are bypassed entirely."""
    cfg = bundle.config
    with torch.no_grad():
        z_lq = bundle.codec.encode_image(image_lq)
        z_text = bundle.text_encoder.encode_text(text)
        z0 = full_denoise(z_lq, lambda k: z_text, bundle.denoiser, bundle.sched,
                          cfg.diffusion.num_steps, seed=stable_seed(seed, image_id))
        return bundle.codec.decode_latent(z0).numpy()


def spot_image(image: np.ndarray, bundle: ModelBundle):
    """Run the spotting head on a plain image by treating its clean latent
    as the fully denoised state (used when scoring restored outputs)."""
    if bundle.spotter is None:
        raise ValueError("bundle has no spotter")
    with torch.no_grad():
        z = bundle.codec.encode_image(image)
        out = bundle.denoiser(z, z, bundle.text_encoder.null_latent(), 0)
        return bundle.spotter.spot(out.features)
