from .base import AdapterFeatures, BackboneHandle, CrossAttentionLayerInfo, cross_attention
from .external import BackboneUnavailableError, external_backbone
from .toy import ToyBackbone, toy_backbone

__all__ = [
    "AdapterFeatures",
    "BackboneHandle",
    "BackboneUnavailableError",
    "CrossAttentionLayerInfo",
    "ToyBackbone",
    "cross_attention",
    "external_backbone",
    "toy_backbone",
]
