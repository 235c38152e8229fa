"""Text-to-manga-page generation toolkit.

Pipeline: annotated pages -> reading order -> captioned dataset -> panel-stack
denoiser training -> story-conditioned sampling -> pixel-min page composition,
with Fréchet/cosine evaluation on pluggable image features.
"""

from .annotations import (
    BBox,
    EnrichedPageXML,
    PageAnnotation,
    PanelAnnotation,
    build_enriched_xml,
    parse_page_annotation,
    serialize_page_annotation,
    validate_page_annotation,
)
from .dataset import CaptionResult, TrainingRecord, build_record, rasterize_bubble_mask
from .diffusion import make_schedule, masked_denoising_loss, q_sample, sample, train_step
from .metrics import clip_i, frechet_distance
from .model import MaskSet, ModelConfig, PanelDenoiser, build_model, masked_attention
from .panel_order import OrderResult, find_cut, order_panels
from .panels import compose_page, split_page
from .scripts import ScriptSet, pad_scripts, split_story

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "PageAnnotation",
    "PanelAnnotation",
    "EnrichedPageXML",
    "parse_page_annotation",
    "serialize_page_annotation",
    "validate_page_annotation",
    "build_enriched_xml",
    "OrderResult",
    "order_panels",
    "find_cut",
    "ScriptSet",
    "split_story",
    "pad_scripts",
    "split_page",
    "compose_page",
    "CaptionResult",
    "TrainingRecord",
    "build_record",
    "rasterize_bubble_mask",
    "ModelConfig",
    "PanelDenoiser",
    "MaskSet",
    "build_model",
    "masked_attention",
    "make_schedule",
    "q_sample",
    "masked_denoising_loss",
    "train_step",
    "sample",
    "frechet_distance",
    "clip_i",
    "__version__",
]
