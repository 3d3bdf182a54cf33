"""Learned concepts: the trainable state of a personalised identity or style.

A concept owns one pseudo word embedding, an EMA prototype of its encoded
token, and one (Key, Value) output vector per cross-attention layer.  The
``.dcc`` container round-trips all of it bit-exactly.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from typing import BinaryIO, Optional

import numpy as np
import torch

from .editing import ConceptEdits

MAGIC = b"DCC1"
FORMAT_VERSION = 1


class ConceptFormatError(ValueError):
    """Raised when a .dcc file is malformed."""


class BackboneMismatchError(ValueError):
    """Raised when a concept was trained on a differently-shaped backbone."""


class ConceptKind(str, enum.Enum):
    IDENTITY = "identity"
    STYLE = "style"


@dataclass
class Concept:
    kind: ConceptKind
    superclass_word: str
    v_star: np.ndarray
    i_star: np.ndarray
    outputs: list[tuple[np.ndarray, np.ndarray]]
    default_scale: float
    backbone_fingerprint: str
    training_meta: Optional[dict] = None

    @property
    def parameter_count(self) -> int:
        return len(self.v_star) + sum(len(ok) + len(ov) for ok, ov in self.outputs)

    @property
    def layer_dims(self) -> list[int]:
        return [len(ok) for ok, _ in self.outputs]


def init_concept(superclass_word: str, kind: ConceptKind, backbone) -> Concept:
    """Fresh concept: v* copies the superclass embedding, all o* start at zero.

    Zero o* makes the first pre-training generation identical to the unedited
    backbone; i* starts as the text encoding of the kind's training template
    at the concept position.
    """
    from .text import encode_prompt, training_template

    kind = ConceptKind(kind)
    token_ids = backbone.tokenize(superclass_word)
    if len(token_ids) != 1:
        raise ValueError(
            f"superclass word {superclass_word!r} tokenises to {len(token_ids)} tokens; "
            "exactly one is required"
        )
    v_star = backbone.word_embedding(token_ids[0]).detach().cpu().numpy().astype(
        np.float32, copy=True
    )
    outputs = [
        (np.zeros(layer.d_l, dtype=np.float32), np.zeros(layer.d_l, dtype=np.float32))
        for layer in backbone.cross_attention_layers
    ]
    concept = Concept(
        kind=kind,
        superclass_word=superclass_word,
        v_star=v_star,
        i_star=np.zeros(1, dtype=np.float32),
        outputs=outputs,
        default_scale=1.2,
        backbone_fingerprint=backbone.fingerprint,
    )
    template, placeholder = training_template(kind)
    pe = encode_prompt(template, {placeholder: concept}, backbone)
    c_i = pe.concept_slots[0].c_i
    concept.i_star = pe.t_p[c_i].detach().cpu().numpy().astype(np.float32, copy=True)
    return concept


def _write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_concept(concept: Concept, path) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": concept.kind.value,
        "superclass": concept.superclass_word,
        "embed_dim": int(len(concept.v_star)),
        "encode_dim": int(len(concept.i_star)),
        "layer_dims": concept.layer_dims,
        "default_scale": float(concept.default_scale),
        "fingerprint": concept.backbone_fingerprint,
        "training": concept.training_meta,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        _write_array(fh, concept.v_star)
        _write_array(fh, concept.i_star)
        for o_k, o_v in concept.outputs:
            _write_array(fh, o_k)
            _write_array(fh, o_v)


def read_concept_header(path) -> dict:
    """Parse only the JSON header of a .dcc file."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ConceptFormatError(f"bad magic {magic!r}; expected {MAGIC!r}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ConceptFormatError(f"unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ConceptFormatError(
            f"unsupported format version {header.get('format_version')}"
        )
    return header


def load_concept(path, backbone) -> Concept:
    """Load a concept and verify it matches the supplied backbone's shape."""
    header = read_concept_header(path)
    if backbone is not None and header["fingerprint"] != backbone.fingerprint:
        raise BackboneMismatchError(
            f"concept was trained on backbone {header['fingerprint']} but the "
            f"supplied backbone is {backbone.fingerprint}"
        )
    with open(path, "rb") as fh:
        fh.seek(4)
        (header_len,) = struct.unpack("<I", fh.read(4))
        fh.seek(8 + header_len)
        payload = fh.read()

    offset = 0

    def take(n: int) -> np.ndarray:
        nonlocal offset
        nbytes = 4 * n
        if offset + nbytes > len(payload):
            raise ConceptFormatError("payload truncated")
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).copy()
        offset += nbytes
        return arr

    v_star = take(header["embed_dim"])
    i_star = take(header["encode_dim"])
    outputs = [(take(d), take(d)) for d in header["layer_dims"]]
    if offset != len(payload):
        raise ConceptFormatError("trailing bytes after declared payloads")
    return Concept(
        kind=ConceptKind(header["kind"]),
        superclass_word=header["superclass"],
        v_star=v_star,
        i_star=i_star,
        outputs=outputs,
        default_scale=header["default_scale"],
        backbone_fingerprint=header["fingerprint"],
        training_meta=header.get("training"),
    )


def build_concept_edits(slots, scale_overrides=None, dtype=torch.float32) -> ConceptEdits:
    """Inference-time edit bundle from a prompt encoding's concept slots.

    ``scale_overrides`` maps placeholder name to a scale; slots without an
    override use their concept's default scale.
    """
    overrides = scale_overrides or {}
    edits = ConceptEdits()
    for slot in slots:
        concept = slot.concept
        scale = overrides.get(slot.placeholder, concept.default_scale)
        edits.add_concept(
            c_i=slot.c_i,
            i_star=torch.as_tensor(concept.i_star, dtype=dtype),
            o_key=[torch.as_tensor(ok, dtype=dtype) for ok, _ in concept.outputs],
            o_value=[torch.as_tensor(ov, dtype=dtype) for _, ov in concept.outputs],
            scale=scale,
        )
    return edits
