"""Prompt encodings with concept placeholders.

Templates use ``[id*]`` / ``[style*]`` style placeholders.  Each distinct
placeholder is assigned one reserved vocabulary token, so user text is
tokenised exactly as it would be without concepts; only the embedding row at
the placeholder position is swapped for the concept's v*.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Optional

import torch

PLACEHOLDER_RE = re.compile(r"^\[([a-z0-9_]+)\*\]$")

_TRAINING_TEMPLATES = {
    "identity": ("a photo of a [id*]", "id"),
    "style": ("an illustration in the style of [style*]", "style"),
}

GENERATION_TEMPLATE_ID = "a caricature of [id*]"
GENERATION_TEMPLATE_ID_STYLE = "a caricature of [id*] in the style of [style*]"


class PromptError(ValueError):
    """Raised for unbound placeholders or over-long templates."""


def training_template(kind) -> tuple[str, str]:
    """(template, placeholder name) used to fine-tune a concept of ``kind``."""
    return _TRAINING_TEMPLATES[getattr(kind, "value", kind)]


@dataclass
class ConceptSlot:
    placeholder: str
    concept: object
    c_i: int


@dataclass
class PromptEncoding:
    token_ids: list[int]
    concept_slots: list[ConceptSlot]
    t_p: torch.Tensor
    t_p_sc: Optional[torch.Tensor] = field(default=None, repr=False)


def _embedding_rows(backbone, token_ids, swaps: Mapping[int, torch.Tensor]) -> torch.Tensor:
    rows = []
    for pos, tid in enumerate(token_ids):
        if pos in swaps:
            rows.append(torch.as_tensor(swaps[pos]))
        else:
            rows.append(backbone.word_embedding(tid))
    return torch.stack(rows)


def encode_prompt(
    template: str,
    concepts: Mapping[str, object],
    backbone,
    v_star_overrides: Optional[Mapping[str, torch.Tensor]] = None,
) -> PromptEncoding:
    """Tokenise a template, inject v* at placeholder positions, and encode.

    ``concepts`` maps placeholder names (without brackets) to Concept-like
    objects carrying ``v_star`` and ``superclass_word``.  During training the
    live v* tensor is passed via ``v_star_overrides`` so gradients flow.
    """
    overrides = v_star_overrides or {}
    n = backbone.context_length
    token_ids: list[int] = []
    slots: list[ConceptSlot] = []
    assigned: dict[str, int] = {}

    for unit in template.split():
        match = PLACEHOLDER_RE.match(unit)
        if match:
            name = match.group(1)
            if name not in concepts:
                raise PromptError(f"placeholder [{name}*] has no bound concept")
            if name not in assigned:
                if len(assigned) >= len(backbone.placeholder_token_ids):
                    raise PromptError("too many distinct placeholders for this backbone")
                assigned[name] = backbone.placeholder_token_ids[len(assigned)]
            slots.append(ConceptSlot(name, concepts[name], len(token_ids)))
            token_ids.append(assigned[name])
        else:
            token_ids.extend(backbone.tokenize(unit))

    if len(token_ids) > n:
        raise PromptError(
            f"template needs {len(token_ids)} tokens but the context length is {n}"
        )
    token_ids = token_ids + [backbone.pad_token_id] * (n - len(token_ids))

    swaps = {}
    for slot in slots:
        if slot.placeholder in overrides:
            swaps[slot.c_i] = overrides[slot.placeholder]
        else:
            swaps[slot.c_i] = torch.as_tensor(slot.concept.v_star)
    t_p = backbone.encode_text(_embedding_rows(backbone, token_ids, swaps))
    return PromptEncoding(token_ids=token_ids, concept_slots=slots, t_p=t_p)


def encode_superclass_reference(pe: PromptEncoding, backbone) -> torch.Tensor:
    """Encoding of the same token sequence with superclass embeddings at c_i.

    Constant throughout training (v* does not enter it); cached on ``pe``.
    """
    if not pe.concept_slots:
        raise PromptError("prompt encoding has no concept slots")
    if pe.t_p_sc is not None:
        return pe.t_p_sc
    swaps = {}
    for slot in pe.concept_slots:
        sc_ids = backbone.tokenize(slot.concept.superclass_word)
        swaps[slot.c_i] = backbone.word_embedding(sc_ids[0])
    pe.t_p_sc = backbone.encode_text(_embedding_rows(backbone, pe.token_ids, swaps))
    return pe.t_p_sc
