"""Frozen-backbone interface shared by the toy stack and external adapters."""

from __future__ import annotations

import abc
import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from ..editing import ConceptEdits, EditContext, Pathway, mix_concepts


@dataclass
class CrossAttentionLayerInfo:
    """Descriptor for one cross-attention layer's K/V pathway.

    ``d_l`` is the Key/Value output dim that the layer's o* vectors must match.
    Weight tensors are exposed for toy backbones; external adapters may leave
    them as module references.
    """

    index: int
    d_l: int
    w_q: object = None
    w_k: object = None
    w_v: object = None


@dataclass
class AdapterFeatures:
    """Sketch features at four successive scales, coarsest last.

    Spatial dims halve between consecutive maps; each map is added elementwise
    to the UNet decoder features at the matching resolution.
    """

    maps: list[torch.Tensor]

    def __post_init__(self):
        if len(self.maps) != 4:
            raise ValueError(f"expected exactly four feature scales, got {len(self.maps)}")
        for a, b in zip(self.maps, self.maps[1:]):
            if a.shape[-1] != 2 * b.shape[-1] or a.shape[-2] != 2 * b.shape[-2]:
                raise ValueError("adapter feature scales must halve between levels")

    def is_zero(self) -> bool:
        return all(not m.abs().sum().item() for m in self.maps)


class BackboneHandle(abc.ABC):
    """Frozen diffusion stack: tokenizer, text encoder, VAE, UNet, sketch adapter.

    Nothing in this toolkit mutates backbone weights; concepts carry all
    trainable state.
    """

    context_length: int
    embed_dim: int
    latent_channels: int
    image_resolution: int
    latent_resolution: int
    pad_token_id: int
    placeholder_token_ids: list[int]
    cross_attention_layers: list[CrossAttentionLayerInfo]

    @abc.abstractmethod
    def tokenize(self, text: str) -> list[int]:
        """Token ids for ``text``; raises on words outside the vocabulary."""

    @abc.abstractmethod
    def word_embedding(self, token_id: int) -> torch.Tensor:
        """Embedding-matrix row for one token id, shape (embed_dim,)."""

    @abc.abstractmethod
    def encode_text(self, embeddings: torch.Tensor) -> torch.Tensor:
        """Frozen text encoder over an embedding sequence (N, embed_dim)."""

    @abc.abstractmethod
    def vae_encode(self, image: torch.Tensor) -> torch.Tensor:
        """Image (3, H, W) in [-1, 1] to latent (C, H/f, W/f)."""

    @abc.abstractmethod
    def vae_decode(self, latent: torch.Tensor) -> torch.Tensor:
        """Latent back to an image tensor (3, H, W) in [-1, 1]."""

    @abc.abstractmethod
    def unet_predict(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        t_p: torch.Tensor,
        edits: Optional[ConceptEdits] = None,
        adapter_features: Optional[AdapterFeatures] = None,
    ) -> torch.Tensor:
        """Noise prediction with the same shape as ``z_t``."""

    @abc.abstractmethod
    def extract_adapter_features(self, sketch: torch.Tensor) -> AdapterFeatures:
        """Features for a single-channel sketch in [0, 1], strokes = 1."""

    @property
    @abc.abstractmethod
    def signature(self) -> str:
        """Human-readable layer-dimension signature."""

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.signature.encode("utf-8")).hexdigest()

    def weight_hash(self) -> str:
        """Digest of every weight tensor; used to assert the frozen contract."""
        digest = hashlib.sha256()
        for tensor in self.all_weights():
            digest.update(tensor.detach().cpu().numpy().tobytes())
        return digest.hexdigest()

    @abc.abstractmethod
    def all_weights(self) -> Sequence[torch.Tensor]:
        """Every weight tensor of the stack, in a stable order."""


def cross_attention(
    layer: CrossAttentionLayerInfo,
    z_features: torch.Tensor,
    t_p: torch.Tensor,
    edits: Optional[ConceptEdits] = None,
    return_weights: bool = False,
):
    """Single-head cross-attention with rank-1 edits on the K/V rows.

    ``z_features`` is (..., M, c_in) image tokens, ``t_p`` is (N, d_text).
    Q = z W_Q^T, K = t_p W_K^T, V = t_p W_V^T; K and V rows pass through the
    concept edits before ``softmax(Q K^T / sqrt(d)) V``.
    """
    if t_p.shape[-1] != layer.w_k.shape[1]:
        raise ValueError(
            f"text encoding dim {t_p.shape[-1]} does not match W_K input dim {layer.w_k.shape[1]}"
        )
    if z_features.shape[-1] != layer.w_q.shape[1]:
        raise ValueError(
            f"feature dim {z_features.shape[-1]} does not match W_Q input dim {layer.w_q.shape[1]}"
        )
    q = z_features @ layer.w_q.T
    k = t_p @ layer.w_k.T
    v = t_p @ layer.w_v.T
    if edits is not None:
        k = edits.edit(layer.index, Pathway.KEY, k, t_p)
        v = edits.edit(layer.index, Pathway.VALUE, v, t_p)
    logits = q @ k.transpose(-2, -1) / (layer.d_l**0.5)
    attn = torch.softmax(logits, dim=-1)
    out = attn @ v
    if return_weights:
        return out, logits
    return out


def apply_layer_edit(
    layer_index: int, pathway: Pathway, h: torch.Tensor, t_p: torch.Tensor, slots
) -> torch.Tensor:
    """Convenience wrapper building an EditContext for one pathway output."""
    return mix_concepts(EditContext(pathway, layer_index, h, t_p, list(slots)))
