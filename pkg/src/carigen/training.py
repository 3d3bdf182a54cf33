"""Single-image fine-tuning: random-mask batches, loss assembly, optimisation.

Only the concept's pseudo embedding and per-layer output vectors receive
gradients; the backbone stays frozen.  The batch repeats the one reference
image with fresh noise, timestep, and occlusion mask per element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .concepts import Concept, ConceptKind, init_concept
from .diffusion import masked_loss, q_sample
from .editing import ConceptEdits, cosine_similarity, update_target_input
from .images import load_image
from .text import encode_prompt, encode_superclass_reference, training_template


class TrainingDivergedError(RuntimeError):
    def __init__(self, step_index: int, components: dict):
        super().__init__(
            f"non-finite loss at step {step_index}: "
            + ", ".join(f"{k}={v}" for k, v in components.items())
        )
        self.step_index = step_index
        self.components = components


@dataclass
class MaskSpec:
    """Pixel-space occlusion plus the latent loss mask derived from it.

    ``occlusion`` (1 = visible) builds the masked input image; ``pixel_mask``
    additionally folds in region weights and is what the loss sees after
    bilinear downscaling to ``latent_mask``.
    """

    occlusion: np.ndarray
    pixel_mask: np.ndarray
    latent_mask: np.ndarray
    region_weights: Optional[np.ndarray] = None


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr_outputs: float = 0.2
    lr_embedding: float = 0.002
    steps: Optional[int] = None  # resolved by kind: 40 identity, 100 style
    lambda1: float = 0.01
    lambda2: float = 0.1
    mask_ratio: tuple[float, float] = (0.25, 0.75)
    patch_size: Optional[int] = None  # defaults to 1/8 of the image side
    ema_beta: float = 0.98
    seed: int = 0
    loss_reduction: str = "area"
    face_weight: float = 0.2

    def __post_init__(self):
        if self.batch_size < 1 or self.lr_outputs <= 0 or self.lr_embedding <= 0:
            raise ValueError("batch size and learning rates must be positive")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")
        lo, hi = self.mask_ratio
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("mask ratio range must satisfy 0 <= lo <= hi <= 1")
        if not 0.0 < self.ema_beta < 1.0:
            raise ValueError("ema_beta must lie in (0, 1)")

    def resolved_steps(self, kind: ConceptKind) -> int:
        if self.steps is not None:
            return self.steps
        return 40 if ConceptKind(kind) is ConceptKind.IDENTITY else 100


def generate_random_mask(
    resolution: int,
    config: TrainConfig,
    kind: ConceptKind,
    latent_resolution: int,
    rng: np.random.Generator,
    region_mask: Optional[np.ndarray] = None,
) -> MaskSpec:
    """Occlude a random fraction of axis-aligned patches, then weight regions.

    Identity training zeroes the loss over the background; style training
    down-weights the face area instead so style is learned from everywhere.
    """
    patch = config.patch_size or resolution // 8
    if resolution % patch != 0:
        raise ValueError(f"resolution {resolution} not divisible by patch size {patch}")
    per_side = resolution // patch
    n_patches = per_side * per_side
    ratio = rng.uniform(config.mask_ratio[0], config.mask_ratio[1])
    n_occluded = int(round(ratio * n_patches))
    occluded = rng.choice(n_patches, size=n_occluded, replace=False)

    occlusion = np.ones((per_side, per_side), dtype=np.float32)
    occlusion.flat[occluded] = 0.0
    occlusion = np.kron(occlusion, np.ones((patch, patch), dtype=np.float32))

    pixel_mask = occlusion.copy()
    if region_mask is not None:
        if region_mask.shape != (resolution, resolution):
            raise ValueError(
                f"region mask shape {region_mask.shape} does not match "
                f"image resolution {resolution}"
            )
        face = (region_mask > 0.5).astype(np.float32)
        if ConceptKind(kind) is ConceptKind.IDENTITY:
            pixel_mask *= face
        else:
            pixel_mask *= np.where(face > 0, config.face_weight, 1.0).astype(np.float32)

    latent = F.interpolate(
        torch.from_numpy(pixel_mask)[None, None],
        size=(latent_resolution, latent_resolution),
        mode="bilinear",
        align_corners=False,
    )[0, 0].numpy()
    return MaskSpec(
        occlusion=occlusion,
        pixel_mask=pixel_mask,
        latent_mask=latent,
        region_weights=region_mask,
    )


@dataclass
class TrainingBatch:
    """One optimiser step's worth of draws over the single reference image."""

    z0_masked: torch.Tensor  # (B, C, h, w) encoded occluded images
    eps: torch.Tensor  # (B, C, h, w)
    t: torch.Tensor  # (B,) int64
    latent_masks: torch.Tensor  # (B, 1, h, w)


def draw_training_batch(
    image: torch.Tensor,
    backbone,
    config: TrainConfig,
    kind: ConceptKind,
    np_rng: np.random.Generator,
    torch_gen: torch.Generator,
    region_mask: Optional[np.ndarray] = None,
) -> TrainingBatch:
    masked_images = []
    latent_masks = []
    for _ in range(config.batch_size):
        spec = generate_random_mask(
            backbone.image_resolution, config, kind, backbone.latent_resolution,
            np_rng, region_mask,
        )
        masked_images.append(image * torch.from_numpy(spec.occlusion))
        latent_masks.append(torch.from_numpy(spec.latent_mask)[None])
    with torch.no_grad():
        z0m = backbone.vae_encode(torch.stack(masked_images))
    t = torch.from_numpy(
        np_rng.integers(0, backbone.noise_schedule.T, size=config.batch_size)
    )
    eps = torch.randn(z0m.shape, generator=torch_gen, dtype=torch.float32).to(z0m.dtype)
    return TrainingBatch(
        z0_masked=z0m, eps=eps, t=t, latent_masks=torch.stack(latent_masks).to(z0m.dtype)
    )


class TrainableConcept:
    """Concept state as live torch parameters plus the EMA target input."""

    def __init__(self, concept: Concept, dtype: torch.dtype = torch.float32):
        self.concept = concept
        self.v_star = torch.nn.Parameter(torch.as_tensor(concept.v_star, dtype=dtype))
        self.o_key = [
            torch.nn.Parameter(torch.as_tensor(ok, dtype=dtype)) for ok, _ in concept.outputs
        ]
        self.o_value = [
            torch.nn.Parameter(torch.as_tensor(ov, dtype=dtype)) for _, ov in concept.outputs
        ]
        self.i_star = torch.as_tensor(concept.i_star, dtype=dtype)
        self.kind = concept.kind
        self.superclass_word = concept.superclass_word
        self.t_p_sc: Optional[torch.Tensor] = None

    @property
    def parameters(self) -> list[torch.nn.Parameter]:
        return [self.v_star, *self.o_key, *self.o_value]

    def edits(self, c_i: int, scale: float = 1.0) -> ConceptEdits:
        edits = ConceptEdits()
        edits.add_concept(c_i, self.i_star, self.o_key, self.o_value, scale)
        return edits

    def to_concept(self, training_meta: Optional[dict] = None) -> Concept:
        return replace(
            self.concept,
            v_star=self.v_star.detach().cpu().numpy().astype(np.float32, copy=True),
            i_star=self.i_star.detach().cpu().numpy().astype(np.float32, copy=True),
            outputs=[
                (
                    ok.detach().cpu().numpy().astype(np.float32, copy=True),
                    ov.detach().cpu().numpy().astype(np.float32, copy=True),
                )
                for ok, ov in zip(self.o_key, self.o_value)
            ],
            training_meta=training_meta if training_meta is not None else self.concept.training_meta,
        )


@dataclass
class LossBreakdown:
    masked: float
    reg_w: float
    reg_t: float
    total: float
    t_p_ci: torch.Tensor = field(repr=False, default=None)

    def as_dict(self) -> dict:
        return {
            "masked": self.masked,
            "reg_w": self.reg_w,
            "reg_t": self.reg_t,
            "total": self.total,
        }


def total_loss(
    batch: TrainingBatch,
    state: TrainableConcept,
    backbone,
    config: TrainConfig,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Masked denoising loss plus the embedding and encoding regularisers."""
    template, placeholder = training_template(state.kind)
    pe = encode_prompt(
        template, {placeholder: state}, backbone,
        v_star_overrides={placeholder: state.v_star},
    )
    c_i = pe.concept_slots[0].c_i

    z_t = q_sample(batch.z0_masked, batch.t, batch.eps, backbone.noise_schedule)
    eps_hat = backbone.unet_predict(z_t, batch.t, pe.t_p, state.edits(c_i))
    l_masked = masked_loss(batch.eps, eps_hat, batch.latent_masks, config.loss_reduction)

    sc_id = backbone.tokenize(state.superclass_word)[0]
    sc_embedding = backbone.word_embedding(sc_id).detach()
    l_reg_w = ((state.v_star - sc_embedding) ** 2).sum()

    if state.t_p_sc is None:
        state.t_p_sc = encode_superclass_reference(pe, backbone).detach()
    l_reg_t = 1.0 - cosine_similarity(pe.t_p[c_i], state.t_p_sc[c_i])

    loss = l_masked + config.lambda1 * l_reg_w + config.lambda2 * l_reg_t
    breakdown = LossBreakdown(
        masked=float(l_masked.detach()),
        reg_w=float(l_reg_w.detach()),
        reg_t=float(l_reg_t.detach()),
        total=float(loss.detach()),
        t_p_ci=pe.t_p[c_i].detach(),
    )
    if not math.isfinite(breakdown.total):
        raise TrainingDivergedError(-1, breakdown.as_dict())
    return loss, breakdown


def finetune(
    image,
    superclass: str,
    kind: ConceptKind,
    backbone,
    config: Optional[TrainConfig] = None,
    region_mask: Optional[np.ndarray] = None,
    progress_cb=None,
) -> Concept:
    """Fine-tune a fresh concept against one reference image.

    Deterministic under a fixed config seed; returns the trained concept with
    its hyperparameters and loss history recorded in the metadata.
    """
    config = config or TrainConfig()
    kind = ConceptKind(kind)
    if not isinstance(image, torch.Tensor):
        image = load_image(image, backbone.image_resolution)
    if image.shape[-2:] != (backbone.image_resolution, backbone.image_resolution):
        raise ValueError(
            f"image resolution {tuple(image.shape[-2:])} does not match backbone "
            f"resolution {backbone.image_resolution}"
        )

    concept = init_concept(superclass, kind, backbone)
    state = TrainableConcept(concept, dtype=image.dtype)
    optimizer = torch.optim.AdamW(
        [
            {"params": [*state.o_key, *state.o_value], "lr": config.lr_outputs},
            {"params": [state.v_star], "lr": config.lr_embedding},
        ]
    )
    np_rng = np.random.default_rng(config.seed)
    torch_gen = torch.Generator().manual_seed(config.seed)
    steps = config.resolved_steps(kind)

    history = []
    for step in range(steps):
        batch = draw_training_batch(
            image, backbone, config, kind, np_rng, torch_gen, region_mask
        )
        try:
            loss, breakdown = total_loss(batch, state, backbone, config)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(step, exc.components) from None
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        with torch.no_grad():
            batch_mean_tp_ci = breakdown.t_p_ci
            state.i_star = update_target_input(
                state.i_star, batch_mean_tp_ci, config.ema_beta
            )
        history.append(breakdown.as_dict())
        if progress_cb is not None:
            progress_cb(step + 1, steps)

    meta = {
        "kind": kind.value,
        "superclass": superclass,
        "steps": steps,
        "batch_size": config.batch_size,
        "lr_outputs": config.lr_outputs,
        "lr_embedding": config.lr_embedding,
        "lambda1": config.lambda1,
        "lambda2": config.lambda2,
        "mask_ratio": list(config.mask_ratio),
        "patch_size": config.patch_size or backbone.image_resolution // 8,
        "ema_beta": config.ema_beta,
        "seed": config.seed,
        "loss_reduction": config.loss_reduction,
        "backbone_signature": backbone.signature,
        "template": training_template(kind)[0],
        "loss_history": history,
    }
    return state.to_concept(meta)
