"""Rank-1 editing of cross-attention Key/Value pathway outputs.

The edit adds a learned output vector to the pathway output at the concept
token's index only, gated by the cosine similarity between the text encoding
at that index and an EMA-maintained target input.  All other token positions
pass through bit-identical.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import torch


class Pathway(enum.Enum):
    KEY = "key"
    VALUE = "value"


@dataclass
class EditSlot:
    """One concept's edit at one token index, for a single pathway/layer.

    ``o_star`` must match the pathway output dim of the layer the slot is
    applied to; ``i_star`` lives in text-encoding space.
    """

    c_i: int
    i_star: torch.Tensor
    o_star: torch.Tensor
    scale: float


@dataclass
class EditContext:
    """Pathway output ``h`` plus everything needed to edit it.

    ``h`` has shape (N, d_l) with N the token context length.  ``t_p`` is the
    text encoding (N, d_text); the gate reads ``t_p[c_i]``, not ``h[c_i]``.
    """

    pathway: Pathway
    layer_index: int
    h: torch.Tensor
    t_p: torch.Tensor
    slots: list[EditSlot] = field(default_factory=list)

    def __post_init__(self):
        n = self.h.shape[-2]
        for slot in self.slots:
            if not 0 <= slot.c_i < n:
                raise ValueError(f"concept index {slot.c_i} out of range for context {n}")
            if slot.o_star.shape[-1] != self.h.shape[-1]:
                raise ValueError(
                    f"o* dim {slot.o_star.shape[-1]} does not match pathway dim {self.h.shape[-1]}"
                )


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two vectors, clamped to [-1, 1].

    Raises on zero-norm input rather than silently returning 0.  Bit-identical
    inputs return exactly 1 (the analytic gradient there is exactly zero, so
    the constant branch is gradient-correct).
    """
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b)
    if na.item() == 0.0 or nb.item() == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vector")
    if torch.equal(a, b):
        return (a * b).sum() * 0.0 + 1.0
    return torch.clamp((a * b).sum() / (na * nb), -1.0, 1.0)


def _slot_delta(slot: EditSlot, t_p: torch.Tensor) -> torch.Tensor:
    gate = cosine_similarity(t_p[..., slot.c_i, :], slot.i_star)
    return slot.scale * gate * slot.o_star


def mix_concepts(ctx: EditContext) -> torch.Tensor:
    """Apply every slot's rank-1 edit to ``ctx.h``.

    Each slot contributes ``s_j * cos(t_p[c_i], i*_j) * o*_j`` at its own
    index; indices not named by any slot are returned bit-identical.
    """
    if not ctx.slots:
        return ctx.h
    h = ctx.h.clone()
    for slot in ctx.slots:
        h[..., slot.c_i, :] = h[..., slot.c_i, :] + _slot_delta(slot, ctx.t_p)
    return h


def apply_edit(ctx: EditContext) -> torch.Tensor:
    """Single-concept edit; ``ctx`` must carry exactly one slot."""
    if len(ctx.slots) != 1:
        raise ValueError(f"apply_edit expects exactly one slot, got {len(ctx.slots)}")
    return mix_concepts(ctx)


def update_target_input(i_star, t_p_ci, beta: float = 0.98):
    """EMA step for the target input: ``i* <- beta * i* + (1 - beta) * t_p[c_i]``."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    return beta * i_star + (1.0 - beta) * t_p_ci


class ConceptEdits:
    """Per-layer edit slots for a set of concepts bound to token indices.

    Built once per forward pass from ``(c_i, i*, {o*_K}, {o*_V}, s)`` tuples;
    the backbone asks for the slots of each cross-attention layer as it runs.
    """

    def __init__(self):
        self._key_slots: dict[int, list[EditSlot]] = {}
        self._value_slots: dict[int, list[EditSlot]] = {}
        self.n_layers = 0

    def add_concept(
        self,
        c_i: int,
        i_star: torch.Tensor,
        o_key: Sequence[torch.Tensor],
        o_value: Sequence[torch.Tensor],
        scale: float,
    ) -> None:
        if len(o_key) != len(o_value):
            raise ValueError("o*_K and o*_V must cover the same layers")
        self.n_layers = max(self.n_layers, len(o_key))
        for layer, (ok, ov) in enumerate(zip(o_key, o_value)):
            self._key_slots.setdefault(layer, []).append(EditSlot(c_i, i_star, ok, scale))
            self._value_slots.setdefault(layer, []).append(EditSlot(c_i, i_star, ov, scale))

    def slots(self, layer_index: int, pathway: Pathway) -> list[EditSlot]:
        table = self._key_slots if pathway is Pathway.KEY else self._value_slots
        return table.get(layer_index, [])

    def edit(
        self, layer_index: int, pathway: Pathway, h: torch.Tensor, t_p: torch.Tensor
    ) -> torch.Tensor:
        slots = self.slots(layer_index, pathway)
        if not slots:
            return h
        return mix_concepts(EditContext(pathway, layer_index, h, t_p, slots))
