"""Adapter onto a pretrained latent diffusion stack (Stable Diffusion v1.5).

Requires locally available pretrained weights plus the diffusers/transformers
packages; nothing is downloaded here.  Edit hooks are registered on every
cross-attention layer's K/V linear outputs, mirroring how the toy stack
applies them.
"""

from __future__ import annotations

from typing import Optional

import torch

from ..diffusion import NoiseSchedule
from ..editing import ConceptEdits, Pathway
from .base import AdapterFeatures, BackboneHandle, CrossAttentionLayerInfo


class BackboneUnavailableError(RuntimeError):
    pass


_ACQUISITION_HELP = (
    "external backbone needs pretrained weights on disk:\n"
    "  1. pip install diffusers transformers accelerate\n"
    "  2. download Stable Diffusion v1.5 (runwayml/stable-diffusion-v1-5) and, for\n"
    "     sketch conditioning, the T2I sketch adapter (TencentARC/t2iadapter_sketch_sd15v2)\n"
    "     with huggingface-cli download, then pass their local paths\n"
    "  3. external_backbone(model_path, adapter_path)"
)


def external_backbone(model_path: str, adapter_path: Optional[str] = None, device: str = "cpu"):
    """Wrap a local SD v1.5 checkpoint (and optional sketch adapter)."""
    try:
        import diffusers  # noqa: F401
        from diffusers import StableDiffusionPipeline
    except ImportError as exc:
        raise BackboneUnavailableError(
            f"diffusers is not installed ({exc}).\n{_ACQUISITION_HELP}"
        ) from exc
    try:
        pipe = StableDiffusionPipeline.from_pretrained(
            model_path, local_files_only=True, safety_checker=None
        )
    except Exception as exc:
        raise BackboneUnavailableError(
            f"could not load pretrained weights from {model_path!r} ({exc}).\n"
            f"{_ACQUISITION_HELP}"
        ) from exc
    adapter = None
    if adapter_path is not None:
        try:
            from diffusers import T2IAdapter

            adapter = T2IAdapter.from_pretrained(adapter_path, local_files_only=True)
        except Exception as exc:
            raise BackboneUnavailableError(
                f"could not load sketch adapter from {adapter_path!r} ({exc}).\n"
                f"{_ACQUISITION_HELP}"
            ) from exc
    return ExternalBackbone(pipe, adapter, device)


class ExternalBackbone(BackboneHandle):
    def __init__(self, pipe, adapter, device: str = "cpu"):
        self.pipe = pipe.to(device)
        self.adapter = adapter.to(device) if adapter is not None else None
        self.device = device
        for module in self._modules():
            module.requires_grad_(False)

        self.tokenizer_impl = pipe.tokenizer
        self.context_length = pipe.tokenizer.model_max_length
        self.embed_dim = pipe.text_encoder.get_input_embeddings().weight.shape[1]
        self.latent_channels = pipe.unet.config.in_channels
        self.image_resolution = pipe.unet.config.sample_size * pipe.vae_scale_factor
        self.latent_resolution = pipe.unet.config.sample_size
        self.pad_token_id = pipe.tokenizer.pad_token_id or 0
        # Rarely-used tokens standing in for reserved placeholder slots.
        self.placeholder_token_ids = [
            pipe.tokenizer.convert_tokens_to_ids(tok)
            for tok in ("<|startoftext|>",)
        ]

        self._kv_modules = self._enumerate_cross_attention()
        self.cross_attention_layers = [
            CrossAttentionLayerInfo(
                index=i,
                d_l=to_k.out_features,
                w_q=attn.to_q.weight,
                w_k=to_k.weight,
                w_v=to_v.weight,
            )
            for i, (name, attn, to_k, to_v) in enumerate(self._kv_modules)
        ]
        if not self.cross_attention_layers:
            raise BackboneUnavailableError(
                "no cross-attention layers found while enumerating the UNet; "
                f"modules seen: {[n for n, *_ in self._kv_modules]}"
            )

        sched = pipe.scheduler
        alphas = sched.alphas if hasattr(sched, "alphas") else 1.0 - sched.betas
        self.noise_schedule = NoiseSchedule(alphas, sched.alphas_cumprod)

        self.edit_layer_calls: list[int] = []
        self._active_edits: Optional[ConceptEdits] = None
        self._active_t_p: Optional[torch.Tensor] = None
        self._register_hooks()

    def _modules(self):
        mods = [self.pipe.text_encoder, self.pipe.vae, self.pipe.unet]
        if self.adapter is not None:
            mods.append(self.adapter)
        return mods

    def _enumerate_cross_attention(self):
        found = []
        for name, module in self.pipe.unet.named_modules():
            # attn2 is the text cross-attention inside each transformer block
            if name.endswith("attn2") and hasattr(module, "to_k"):
                found.append((name, module, module.to_k, module.to_v))
        return found

    def _register_hooks(self):
        def make_hook(index: int, pathway: Pathway):
            def hook(_module, _inputs, output):
                if self._active_edits is None:
                    return output
                if pathway is Pathway.KEY:
                    self.edit_layer_calls.append(index)
                return self._active_edits.edit(index, pathway, output, self._active_t_p)

            return hook

        for i, (_name, _attn, to_k, to_v) in enumerate(self._kv_modules):
            to_k.register_forward_hook(make_hook(i, Pathway.KEY))
            to_v.register_forward_hook(make_hook(i, Pathway.VALUE))

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer_impl(text, add_special_tokens=False).input_ids

    def word_embedding(self, token_id: int) -> torch.Tensor:
        return self.pipe.text_encoder.get_input_embeddings().weight[token_id]

    def encode_text(self, embeddings: torch.Tensor) -> torch.Tensor:
        text_model = self.pipe.text_encoder.text_model
        hidden = embeddings[None]
        pos = text_model.embeddings.position_embedding.weight[: hidden.shape[1]]
        hidden = hidden + pos
        mask = _causal_mask(hidden.shape[1], hidden.dtype)
        out = text_model.encoder(hidden, causal_attention_mask=mask).last_hidden_state
        return text_model.final_layer_norm(out)[0]

    def vae_encode(self, image: torch.Tensor) -> torch.Tensor:
        batched = image.ndim == 4
        x = image if batched else image[None]
        z = self.pipe.vae.encode(x).latent_dist.mode() * self.pipe.vae.config.scaling_factor
        return z if batched else z[0]

    def vae_decode(self, latent: torch.Tensor) -> torch.Tensor:
        batched = latent.ndim == 4
        z = latent if batched else latent[None]
        img = self.pipe.vae.decode(z / self.pipe.vae.config.scaling_factor).sample
        return img.clamp(-1, 1) if batched else img.clamp(-1, 1)[0]

    def unet_predict(self, z_t, t, t_p, edits=None, adapter_features=None):
        batched = z_t.ndim == 4
        z = z_t if batched else z_t[None]
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(z.shape[0])
        self._active_edits = edits
        self._active_t_p = t_p
        self.edit_layer_calls = []
        try:
            residuals = None
            if adapter_features is not None:
                residuals = [m.expand(z.shape[0], -1, -1, -1) for m in adapter_features.maps]
            out = self.pipe.unet(
                z,
                t,
                encoder_hidden_states=t_p[None].expand(z.shape[0], -1, -1),
                down_intrablock_additional_residuals=residuals,
            ).sample
        finally:
            self._active_edits = None
            self._active_t_p = None
        return out if batched else out[0]

    def extract_adapter_features(self, sketch: torch.Tensor) -> AdapterFeatures:
        if self.adapter is None:
            raise BackboneUnavailableError(
                f"no sketch adapter was loaded.\n{_ACQUISITION_HELP}"
            )
        if sketch.ndim == 2:
            sketch = sketch[None]
        if sketch.shape[-2:] != (self.image_resolution, self.image_resolution):
            raise ValueError(
                f"sketch resolution {tuple(sketch.shape[-2:])} does not match expected "
                f"({self.image_resolution}, {self.image_resolution})"
            )
        return AdapterFeatures(self.adapter(sketch[None]))

    @property
    def signature(self) -> str:
        dims = ",".join(str(l.d_l) for l in self.cross_attention_layers)
        return (
            f"sd:embed={self.embed_dim};ctx={self.context_length};"
            f"latent={self.latent_channels}x{self.latent_resolution};layers={dims}"
        )

    def all_weights(self):
        weights = []
        for module in self._modules():
            weights.extend(p for _, p in sorted(module.named_parameters()))
        return weights


def _causal_mask(n: int, dtype: torch.dtype) -> torch.Tensor:
    mask = torch.full((n, n), torch.finfo(dtype).min, dtype=dtype)
    mask.triu_(1)
    return mask[None, None]
