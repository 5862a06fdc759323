"""Text-aware image restoration: a conditioned diffusion-transformer
restorer with a text-spotting head over its features and a VLM-guided
self-correction loop, plus the matching synthetic-corpus, training, and
evaluation tooling."""

from .config import RunConfig, load_config
from .codec import ImageCodec, TextGuidanceEncoder, TextLatent
from .backbone import DenoiserOutput, TripleStreamDenoiser, freeze_plan
from .diffusion import (DenoiseState, NoiseSchedule, TimestepSampler, diffusion_loss,
                        full_denoise, make_noisy, sample_step)
from .geometry import giou
from .instances import TextInstance
from .matching import MatchAssignment, hungarian_match, match_cost
from .tsm import SpottingLossReport, SpottingPrediction, TextSpotter, spotting_loss
from .vlm import (GuidanceRecord, RemoteVlmBackend, ScriptedVlmBackend, VlmAdapter,
                  classify_extraction)
from .pipeline import (ModelBundle, RunTrace, build_models, load_bundle, restore,
                       restore_with_fixed_guidance, train_stage0, train_stage1,
                       train_stage2)
from .evaluation import (EvalReport, detection_metrics, e2e_metrics, evaluate_corpus,
                         oracle_recognition_accuracy, psnr_ssim)
from .datagen import DegradationSpec, build_corpus, degrade, render_scene

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "load_config",
    "ImageCodec", "TextGuidanceEncoder", "TextLatent",
    "DenoiserOutput", "TripleStreamDenoiser", "freeze_plan",
    "DenoiseState", "NoiseSchedule", "TimestepSampler", "diffusion_loss",
    "full_denoise", "make_noisy", "sample_step",
    "giou", "TextInstance",
    "MatchAssignment", "hungarian_match", "match_cost",
    "SpottingLossReport", "SpottingPrediction", "TextSpotter", "spotting_loss",
    "GuidanceRecord", "RemoteVlmBackend", "ScriptedVlmBackend", "VlmAdapter",
    "classify_extraction",
    "ModelBundle", "RunTrace", "build_models", "load_bundle", "restore",
    "restore_with_fixed_guidance", "train_stage0", "train_stage1", "train_stage2",
    "EvalReport", "detection_metrics", "e2e_metrics", "evaluate_corpus",
    "oracle_recognition_accuracy", "psnr_ssim",
    "DegradationSpec", "build_corpus", "degrade", "render_scene",
]
