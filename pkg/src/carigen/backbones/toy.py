"""Deterministic desk-scale diffusion stack for tests and CPU runs.

Everything is frozen random weights drawn from a seed: a word-level tokenizer
with reserved placeholder tokens, a 2-block transformer text encoder
(context 16, width 64), a 4x VAE, a 2-level UNet with cross-attention on both
encoder and decoder paths, and a bias-free sketch adapter.  The stack is not
meant to generate good images, only to be deterministic, differentiable, and
interface-exact.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from ..diffusion import linear_schedule
from .base import AdapterFeatures, BackboneHandle, CrossAttentionLayerInfo, cross_attention

VOCAB = [
    "<pad>",
    "a", "an", "the", "of", "in", "on", "with", "and",
    "photo", "picture", "portrait", "caricature", "illustration", "drawing",
    "sketch", "painting", "cartoon", "art", "style",
    "man", "woman", "person", "face", "comics", "artist", "colorful",
    "<c0>", "<c1>", "<c2>", "<c3>",
]

PLACEHOLDER_TOKENS = ["<c0>", "<c1>", "<c2>", "<c3>"]


class ToyTokenizer:
    """Whitespace word-level tokenizer over a fixed vocabulary."""

    def __init__(self):
        self.word_to_id = {w: i for i, w in enumerate(VOCAB)}
        self.pad_id = 0
        self.placeholder_ids = [self.word_to_id[w] for w in PLACEHOLDER_TOKENS]

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for word in text.lower().split():
            if word not in self.word_to_id:
                raise ValueError(f"word {word!r} is not in the toy vocabulary")
            ids.append(self.word_to_id[word])
        return ids


def sinusoidal_embedding(positions: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1)
    )
    args = positions.to(dtype)[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _init_frozen(module: nn.Module, gen: torch.Generator) -> None:
    """Deterministic init: fan-in scaled normals for weights, zeros for biases."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = m.weight.shape[1] * (
                m.weight[0, 0].numel() if m.weight.ndim > 2 else 1
            )
            with torch.no_grad():
                m.weight.normal_(0.0, fan_in**-0.5, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.LayerNorm, nn.GroupNorm)):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
        elif isinstance(m, nn.Embedding):
            with torch.no_grad():
                m.weight.normal_(0.0, 1.0, generator=gen)
    for p in module.parameters():
        p.requires_grad_(False)


class _EncoderBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 2 * dim)
        self.fc2 = nn.Linear(2 * dim, dim)
        self.dim = dim

    def forward(self, x):
        h = self.ln1(x)
        attn = torch.softmax(
            self.q(h) @ self.k(h).transpose(-2, -1) / math.sqrt(self.dim), dim=-1
        )
        x = x + attn @ self.v(h)
        h = self.ln2(x)
        return x + self.fc2(torch.nn.functional.silu(self.fc1(h)))


class _ToyTextEncoder(nn.Module):
    def __init__(self, dim: int, context: int):
        super().__init__()
        self.blocks = nn.ModuleList([_EncoderBlock(dim), _EncoderBlock(dim)])
        self.final_ln = nn.LayerNorm(dim)
        self.dim = dim
        self.context = context

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        pos = sinusoidal_embedding(
            torch.arange(embeddings.shape[-2]), self.dim, embeddings.dtype
        )
        x = embeddings + pos
        for block in self.blocks:
            x = block(x)
        return self.final_ln(x)


class _ToyVAE(nn.Module):
    def __init__(self, latent_channels: int):
        super().__init__()
        self.enc1 = nn.Conv2d(3, 8, 3, stride=2, padding=1)
        self.enc2 = nn.Conv2d(8, latent_channels, 3, stride=2, padding=1)
        self.dec1 = nn.ConvTranspose2d(latent_channels, 8, 4, stride=2, padding=1)
        self.dec2 = nn.ConvTranspose2d(8, 3, 4, stride=2, padding=1)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return self.enc2(torch.tanh(self.enc1(image)))

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.dec2(torch.tanh(self.dec1(latent))))


class _ResBlock(nn.Module):
    def __init__(self, channels: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(4, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, channels)
        self.norm2 = nn.GroupNorm(4, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, t_emb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return x + h


class _CrossAttnBlock(nn.Module):
    """Wraps Eq.-2 style attention with a frozen output projection."""

    def __init__(self, channels: int, d_text: int, d_l: int):
        super().__init__()
        self.w_q = nn.Linear(channels, d_l, bias=False)
        self.w_k = nn.Linear(d_text, d_l, bias=False)
        self.w_v = nn.Linear(d_text, d_l, bias=False)
        self.w_out = nn.Linear(d_l, channels, bias=False)
        self.d_l = d_l

    def info(self, index: int) -> CrossAttentionLayerInfo:
        return CrossAttentionLayerInfo(
            index=index,
            d_l=self.d_l,
            w_q=self.w_q.weight,
            w_k=self.w_k.weight,
            w_v=self.w_v.weight,
        )

    def forward(self, x, t_p, edits, index):
        b, c, h, w = x.shape
        tokens = x.reshape(b, c, h * w).transpose(1, 2)
        attended = cross_attention(self.info(index), tokens, t_p, edits)
        out = self.w_out(attended).transpose(1, 2).reshape(b, c, h, w)
        return x + out


# Block positions a cross-attention layer can be assigned to, in UNet order:
# encoder level 1, encoder level 2, decoder level 2, decoder level 1.
_N_POSITIONS = 4

# Std of the frozen random bias on the output conv.  Gives the untrained
# UNet a systematic per-channel error that concept training can cancel.
_OUT_BIAS_STD = 1.25


class _ToyUNet(nn.Module):
    def __init__(self, layer_dims: Sequence[int], d_text: int, latent_channels: int):
        super().__init__()
        ch1, ch2 = 16, 32
        time_dim = 64
        self.time_fc1 = nn.Linear(32, time_dim)
        self.time_fc2 = nn.Linear(time_dim, time_dim)

        self.conv_in = nn.Conv2d(latent_channels, ch1, 3, padding=1)
        self.enc1 = _ResBlock(ch1, time_dim)
        self.down = nn.Conv2d(ch1, ch2, 3, stride=2, padding=1)
        self.enc2 = _ResBlock(ch2, time_dim)
        self.mid = _ResBlock(ch2, time_dim)
        self.dec2 = _ResBlock(ch2, time_dim)
        self.up = nn.ConvTranspose2d(ch2, ch1, 4, stride=2, padding=1)
        self.dec1 = _ResBlock(ch1, time_dim)
        self.conv_out = nn.Conv2d(ch1, latent_channels, 3, padding=1)

        position_channels = [ch1, ch2, ch2, ch1]
        self.attn = nn.ModuleList()
        self.attn_position = []
        n = len(layer_dims)
        for i, d_l in enumerate(layer_dims):
            pos = i * _N_POSITIONS // n
            self.attn.append(_CrossAttnBlock(position_channels[pos], d_text, d_l))
            self.attn_position.append(pos)
        self.channels = (ch1, ch2)

    def _attn_at(self, pos, x, t_p, edits, counter):
        for i, (block, p) in enumerate(zip(self.attn, self.attn_position)):
            if p == pos:
                x = block(x, t_p, edits, i)
                counter.append(i)
        return x

    def forward(self, z_t, t, t_p, edits, adapter_features, counter):
        t_emb = sinusoidal_embedding(t, 32, z_t.dtype)
        t_emb = self.time_fc2(torch.nn.functional.silu(self.time_fc1(t_emb)))

        x = self.conv_in(z_t)
        x = self.enc1(x, t_emb)
        x = self._attn_at(0, x, t_p, edits, counter)
        x = self.down(x)
        x = self.enc2(x, t_emb)
        x = self._attn_at(1, x, t_p, edits, counter)
        x = self.mid(x, t_emb)
        if adapter_features is not None:
            x = x + adapter_features.maps[1]
        x = self.dec2(x, t_emb)
        x = self._attn_at(2, x, t_p, edits, counter)
        x = self.up(x)
        if adapter_features is not None:
            x = x + adapter_features.maps[0]
        x = self.dec1(x, t_emb)
        x = self._attn_at(3, x, t_p, edits, counter)
        return self.conv_out(x)


class _ToySketchAdapter(nn.Module):
    """Stem conv plus four residual blocks, one feature map per scale.

    Every layer is bias-free and its activations fix zero, so an all-zero
    sketch yields exactly zero features and therefore a no-op injection.
    """

    def __init__(self, channels_per_scale: Sequence[int]):
        super().__init__()
        c0 = channels_per_scale[0]
        self.stem1 = nn.Conv2d(1, 8, 3, stride=2, padding=1, bias=False)
        self.stem2 = nn.Conv2d(8, c0, 3, stride=2, padding=1, bias=False)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.heads = nn.ModuleList()
        prev = c0
        for i, c in enumerate(channels_per_scale):
            if i == 0:
                self.downs.append(nn.Identity())
            else:
                self.downs.append(nn.Conv2d(prev, c, 3, stride=2, padding=1, bias=False))
            self.blocks.append(
                nn.Sequential(
                    nn.Conv2d(c, c, 3, padding=1, bias=False),
                    nn.Tanh(),
                    nn.Conv2d(c, c, 3, padding=1, bias=False),
                )
            )
            self.heads.append(nn.Conv2d(c, c, 1, bias=False))
            prev = c

    def forward(self, sketch: torch.Tensor) -> list[torch.Tensor]:
        x = torch.tanh(self.stem2(torch.tanh(self.stem1(sketch))))
        maps = []
        for down, block, head in zip(self.downs, self.blocks, self.heads):
            if not isinstance(down, nn.Identity):
                x = torch.tanh(down(x))
            x = x + block(x)
            maps.append(head(x))
        return maps


class ToyBackbone(BackboneHandle):
    def __init__(
        self,
        layer_dims: Sequence[int] = (64, 64, 64, 64),
        seed: int = 0,
        image_resolution: int = 64,
        dtype: torch.dtype = torch.float32,
    ):
        if len(layer_dims) < 1:
            raise ValueError("need at least one cross-attention layer")
        if image_resolution % 32 != 0:
            raise ValueError("toy image resolution must be a multiple of 32")
        self.layer_dims = tuple(int(d) for d in layer_dims)
        self.seed = seed
        self.dtype = dtype
        self.context_length = 16
        self.embed_dim = 64
        self.latent_channels = 4
        self.image_resolution = image_resolution
        self.latent_resolution = image_resolution // 4

        self.tokenizer = ToyTokenizer()
        self.pad_token_id = self.tokenizer.pad_id
        self.placeholder_token_ids = list(self.tokenizer.placeholder_ids)

        gen = torch.Generator().manual_seed(seed)
        self.embedding = nn.Embedding(len(VOCAB), self.embed_dim)
        self.text_encoder = _ToyTextEncoder(self.embed_dim, self.context_length)
        self.vae = _ToyVAE(self.latent_channels)
        self.unet = _ToyUNet(self.layer_dims, self.embed_dim, self.latent_channels)
        ch1, ch2 = self.unet.channels
        self.adapter = _ToySketchAdapter([ch1, ch2, ch2, ch2])
        for module in (self.embedding, self.text_encoder, self.vae, self.unet, self.adapter):
            _init_frozen(module, gen)
        with torch.no_grad():
            self.unet.conv_out.bias.normal_(0.0, _OUT_BIAS_STD, generator=gen)
        for module in (self.embedding, self.text_encoder, self.vae, self.unet, self.adapter):
            module.to(dtype)

        self.cross_attention_layers = [
            block.info(i) for i, block in enumerate(self.unet.attn)
        ]
        self.noise_schedule = linear_schedule(T=100)
        self.edit_layer_calls: list[int] = []

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer.tokenize(text)

    def word_embedding(self, token_id: int) -> torch.Tensor:
        return self.embedding.weight[token_id]

    def encode_text(self, embeddings: torch.Tensor) -> torch.Tensor:
        return self.text_encoder(embeddings.to(self.dtype))

    def vae_encode(self, image: torch.Tensor) -> torch.Tensor:
        image = image.to(self.dtype)
        batched = image.ndim == 4
        x = image if batched else image[None]
        z = self.vae.encode(x)
        return z if batched else z[0]

    def vae_decode(self, latent: torch.Tensor) -> torch.Tensor:
        latent = latent.to(self.dtype)
        batched = latent.ndim == 4
        z = latent if batched else latent[None]
        img = self.vae.decode(z)
        return img if batched else img[0]

    def unet_predict(self, z_t, t, t_p, edits=None, adapter_features=None):
        batched = z_t.ndim == 4
        z = z_t if batched else z_t[None]
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(z.shape[0])
        counter: list[int] = []
        out = self.unet(z.to(self.dtype), t, t_p, edits, adapter_features, counter)
        self.edit_layer_calls = counter
        return out if batched else out[0]

    def extract_adapter_features(self, sketch: torch.Tensor) -> AdapterFeatures:
        sketch = torch.as_tensor(sketch, dtype=self.dtype)
        if sketch.ndim == 2:
            sketch = sketch[None]
        if sketch.ndim == 3:
            sketch = sketch[None]
        if sketch.shape[-3] != 1:
            raise ValueError("sketch must be single-channel")
        if sketch.shape[-2:] != (self.image_resolution, self.image_resolution):
            raise ValueError(
                f"sketch resolution {tuple(sketch.shape[-2:])} does not match expected "
                f"({self.image_resolution}, {self.image_resolution})"
            )
        if sketch.min() < 0 or sketch.max() > 1:
            raise ValueError("sketch values must lie in [0, 1]")
        return AdapterFeatures(self.adapter(sketch))

    @property
    def signature(self) -> str:
        return (
            f"toy:embed={self.embed_dim};ctx={self.context_length};"
            f"latent={self.latent_channels}x{self.latent_resolution};"
            f"layers={','.join(str(d) for d in self.layer_dims)}"
        )

    def all_weights(self):
        weights = []
        for module in (self.embedding, self.text_encoder, self.vae, self.unet, self.adapter):
            weights.extend(p for _, p in sorted(module.named_parameters()))
        return weights


def toy_backbone(
    layer_dims: Sequence[int] = (64, 64, 64, 64),
    seed: int = 0,
    image_resolution: int = 64,
    dtype: torch.dtype = torch.float32,
) -> ToyBackbone:
    """Build the deterministic toy stack; same seed gives identical weights."""
    return ToyBackbone(layer_dims, seed, image_resolution, dtype)
