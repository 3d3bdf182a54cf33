"""Personalise a latent diffusion backbone from single images and generate
sketch-conditioned caricatures via rank-1 cross-attention edits."""

from .backbones import toy_backbone, external_backbone
from .concepts import (
    Concept,
    ConceptKind,
    init_concept,
    load_concept,
    save_concept,
)
from .diffusion import NoiseSchedule, SampleConfig, cfg_predict, masked_loss, q_sample, sample
from .editing import (
    ConceptEdits,
    EditContext,
    EditSlot,
    Pathway,
    apply_edit,
    cosine_similarity,
    mix_concepts,
    update_target_input,
)
from .evaluation import ToyProjectionEmbedder, edge_map, embedding_score, evaluate_suite
from .text import PromptEncoding, encode_prompt, encode_superclass_reference
from .training import MaskSpec, TrainConfig, finetune, generate_random_mask, total_loss

__version__ = "0.1.0"

__all__ = [
    "Concept",
    "ConceptEdits",
    "ConceptKind",
    "EditContext",
    "EditSlot",
    "MaskSpec",
    "NoiseSchedule",
    "Pathway",
    "PromptEncoding",
    "SampleConfig",
    "ToyProjectionEmbedder",
    "TrainConfig",
    "apply_edit",
    "cfg_predict",
    "cosine_similarity",
    "edge_map",
    "embedding_score",
    "encode_prompt",
    "encode_superclass_reference",
    "evaluate_suite",
    "external_backbone",
    "finetune",
    "generate_random_mask",
    "init_concept",
    "load_concept",
    "masked_loss",
    "mix_concepts",
    "q_sample",
    "sample",
    "save_concept",
    "total_loss",
    "toy_backbone",
    "update_target_input",
]
