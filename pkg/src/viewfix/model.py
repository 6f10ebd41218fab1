"""Coarse-to-fine fixer network.

Two encodings (degraded view, warped reference) exchange global context
through shared attention over their concatenated latent tokens; per-scale
reference features are re-aligned by a predicted modulated deformable 3x3
sampling and merged through a learned confidence gate; the decoder injects
the fused skips while upsampling back to full resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .image import Image, from_tensor, to_tensor
from .warp import bilinear_sample

KERNEL_TAPS = 9  # fixed 3x3 deformable kernel
_TAP_GRID = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass
class FixerConfig:
    scales: int = 3
    channels: tuple = (32, 64, 128)
    latent_channels: int = 128
    max_offset: float = 4.0
    attn_blocks: int = 2
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.scales < 1:
            raise ValueError(f"scales must be >= 1, got {self.scales}")
        if len(self.channels) != self.scales:
            raise ValueError(
                f"channels {self.channels} must list one width per scale ({self.scales})"
            )
        if any(c < 1 for c in self.channels):
            raise ValueError(f"channel widths must be positive, got {self.channels}")
        if self.latent_channels < 1:
            raise ValueError(f"latent_channels must be >= 1, got {self.latent_channels}")
        if not (self.max_offset > 0 and math.isfinite(self.max_offset)):
            raise ValueError(f"max_offset must be positive, got {self.max_offset}")
        if self.attn_blocks < 0:
            raise ValueError(f"attn_blocks must be >= 0, got {self.attn_blocks}")

    @property
    def factor(self) -> int:
        """Total downsampling factor; inputs must be divisible by it."""
        return 2 ** self.scales

    def as_dict(self) -> dict:
        return {
            "scales": self.scales,
            "channels": list(self.channels),
            "latent_channels": self.latent_channels,
            "max_offset": self.max_offset,
            "attn_blocks": self.attn_blocks,
            "seed": self.seed,
        }


@dataclass
class LatentGrid:
    """Bottleneck feature grid (C, h, w)."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"latent grid must be (C, h, w), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("latent grid contains non-finite values")


@dataclass
class MultiScaleFeatures:
    """Per-scale feature grids, finest first, strictly shrinking."""

    scales: list = field(default_factory=list)

    def __post_init__(self):
        if not self.scales:
            raise ValueError("need at least one scale")
        for t in self.scales:
            if t.ndim != 3:
                raise ValueError(f"each scale must be (C, h, w), got {tuple(t.shape)}")
        for a, b in zip(self.scales, self.scales[1:]):
            if not (a.shape[1] > b.shape[1] and a.shape[2] > b.shape[2]):
                raise ValueError("scales must strictly decrease in resolution")

    def __len__(self):
        return len(self.scales)

    def __getitem__(self, i):
        return self.scales[i]


@dataclass
class OffsetField:
    """Per-tap sampling offsets (2K, H, W) as (dy, dx) pairs + modulation mask (K, H, W)."""

    offsets: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if self.offsets.ndim != 3 or self.mask.ndim != 3:
            raise ValueError("offsets and mask must be 3D tensors")
        k2, h, w = self.offsets.shape
        if k2 % 2 != 0 or self.mask.shape != (k2 // 2, h, w):
            raise ValueError(
                f"inconsistent offset/mask shapes {tuple(self.offsets.shape)} vs "
                f"{tuple(self.mask.shape)}"
            )

    @property
    def taps(self) -> int:
        return self.offsets.shape[0] // 2


class AttentionBlock(nn.Module):
    """Single-head attention over token rows: z := z + softmax(QK^T / sqrt(d)) V."""

    def __init__(self, channels: int, key_dim: int):
        super().__init__()
        self.to_q = nn.Linear(channels, key_dim)
        self.to_k = nn.Linear(channels, key_dim)
        self.to_v = nn.Linear(channels, channels)
        self.scale = 1.0 / math.sqrt(key_dim)

    def forward(self, tokens, return_weights: bool = False):
        q = self.to_q(tokens)
        k = self.to_k(tokens)
        v = self.to_v(tokens)
        attn = torch.softmax(q @ k.transpose(0, 1) * self.scale, dim=-1)
        out = tokens + attn @ v
        if return_weights:
            return out, attn
        return out


class FixerModel(nn.Module):
    """The full fixer; all ops below take unbatched (C, H, W) tensors."""

    def __init__(self, config: FixerConfig):
        super().__init__()
        self.config = config
        chans = config.channels
        self.stem = nn.Conv2d(3, chans[0], 3, padding=1)
        self.downs = nn.ModuleList()
        self.refines = nn.ModuleList()
        prev = chans[0]
        for c in chans:
            self.downs.append(nn.Conv2d(prev, c, 3, stride=2, padding=1))
            self.refines.append(nn.Conv2d(c, c, 3, padding=1))
            prev = c
        self.to_latent = nn.Conv2d(chans[-1], config.latent_channels, 3, padding=1)
        self.attn = nn.ModuleList(
            AttentionBlock(config.latent_channels, config.latent_channels)
            for _ in range(config.attn_blocks)
        )

        # reference detail path, one per scale: offsets/mask prediction,
        # deformable kernel (no bias: zero mask must give back f_ref exactly),
        # confidence gate
        self.offset_nets = nn.ModuleList()
        self.align_kernels = nn.ParameterList()
        self.gates = nn.ModuleList()
        for c in chans:
            self.offset_nets.append(
                nn.Sequential(
                    nn.Conv2d(2 * c + 1, c, 3, padding=1),
                    nn.ReLU(),
                    nn.Conv2d(c, 3 * KERNEL_TAPS, 3, padding=1),
                )
            )
            self.align_kernels.append(nn.Parameter(torch.empty(c, c, KERNEL_TAPS)))
            self.gates.append(nn.Conv2d(2 * c + 1, c, 3, padding=1))

        # decoder, coarse to fine: concat fused skip -> 1x1 merge -> conv ->
        # 2x nearest upsample -> transition toward the next finer width
        self.merges = nn.ModuleList()
        self.dec_convs = nn.ModuleList()
        self.transitions = nn.ModuleList()
        for i in range(config.scales):
            inbound = config.latent_channels if i == config.scales - 1 else chans[i]
            self.merges.append(nn.Conv2d(inbound + chans[i], chans[i], 1))
            self.dec_convs.append(nn.Conv2d(chans[i], chans[i], 3, padding=1))
            self.transitions.append(nn.Conv2d(chans[i], chans[max(i - 1, 0)], 3, padding=1))
        self.head = nn.Conv2d(chans[0], 3, 3, padding=1)

        self._reset_parameters()

    def _reset_parameters(self):
        gen = torch.Generator().manual_seed(self.config.seed)

        def fan_in_uniform(w, gain=math.sqrt(2.0)):
            fan_in = w.shape[1] * (w.shape[2] * w.shape[3] if w.ndim == 4 else w.shape[2])
            bound = gain * math.sqrt(3.0 / fan_in)
            w.uniform_(-bound, bound, generator=gen)

        with torch.no_grad():
            for conv in [self.stem, *self.downs, *self.refines, self.to_latent]:
                fan_in_uniform(conv.weight)
                conv.bias.zero_()
            for block in self.attn:
                for lin in (block.to_q, block.to_k, block.to_v):
                    bound = math.sqrt(1.0 / lin.weight.shape[1])
                    lin.weight.uniform_(-bound, bound, generator=gen)
                    lin.bias.zero_()
            for net in self.offset_nets:
                fan_in_uniform(net[0].weight)
                net[0].bias.zero_()
                net[2].weight.zero_()  # start from zero offsets, mask 0.5
                net[2].bias.zero_()
            for kern in self.align_kernels:
                fan_in_uniform(kern)
            for gate in self.gates:
                fan_in_uniform(gate.weight)
                gate.bias.fill_(2.0)  # sigmoid(2) ~ 0.88: trust the degraded branch early
            for conv in [*self.merges, *self.dec_convs, *self.transitions, self.head]:
                fan_in_uniform(conv.weight)
                conv.bias.zero_()

    def parameter_groups(self) -> dict:
        return {
            "encoder": [
                p
                for m in [self.stem, *self.downs, *self.refines, self.to_latent]
                for p in m.parameters()
            ],
            "attention": [p for m in self.attn for p in m.parameters()],
            "offset_predictors": [p for m in self.offset_nets for p in m.parameters()],
            "deformable": list(self.align_kernels),
            "gates": [p for m in self.gates for p in m.parameters()],
            "decoder": [
                p
                for m in [*self.merges, *self.dec_convs, *self.transitions, self.head]
                for p in m.parameters()
            ],
        }

    def freeze_encoder(self):
        for p in self.parameter_groups()["encoder"]:
            p.requires_grad_(False)

    @property
    def dtype(self) -> torch.dtype:
        return self.stem.weight.dtype


def _check_divisible(h: int, w: int, factor: int):
    if h % factor or w % factor:
        raise ValueError(
            f"input {h}x{w} not divisible by {factor}; pad to a multiple of the "
            f"downsampling factor"
        )


def encode_tensor(x: torch.Tensor, model: FixerModel):
    """(3, H, W) -> (latent tensor, list of per-scale taps, finest first)."""
    act = F.relu(model.stem(x[None]))
    taps = []
    for down, refine in zip(model.downs, model.refines):
        act = F.relu(down(act))
        act = F.relu(refine(act))
        taps.append(act[0])
    z = model.to_latent(act)[0]
    return z, taps


def _rgb_tensor(image: Image, dtype: torch.dtype) -> torch.Tensor:
    t = to_tensor(image, dtype)
    if t.shape[0] == 1:
        t = t.expand(3, -1, -1).clone()
    return t


def encode(image: Image, model: FixerModel):
    """Encode an image into (LatentGrid, MultiScaleFeatures)."""
    _check_divisible(image.height, image.width, model.config.factor)
    z, taps = encode_tensor(_rgb_tensor(image, model.dtype), model)
    return LatentGrid(z.detach()), MultiScaleFeatures([t.detach() for t in taps])


def _flatten_tokens(z: torch.Tensor) -> torch.Tensor:
    c, h, w = z.shape
    return z.permute(1, 2, 0).reshape(h * w, c)


def _unflatten_tokens(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return tokens.reshape(h, w, -1).permute(2, 0, 1)


def mix_latent_tokens(z_deg: torch.Tensor, z_ref: torch.Tensor | None, model: FixerModel,
                      return_weights: bool = False):
    """Run the attention stack over concatenated view tokens (tensor level)."""
    c, h, w = z_deg.shape
    tokens = _flatten_tokens(z_deg)
    if z_ref is not None:
        if z_ref.shape != z_deg.shape:
            raise ValueError(
                f"latent shapes differ: {tuple(z_deg.shape)} vs {tuple(z_ref.shape)}"
            )
        tokens = torch.cat([tokens, _flatten_tokens(z_ref)], dim=0)
    weights = []
    for block in model.attn:
        if return_weights:
            tokens, attn = block(tokens, return_weights=True)
            weights.append(attn)
        else:
            tokens = block(tokens)
    out_deg = _unflatten_tokens(tokens[: h * w], h, w)
    out_ref = None if z_ref is None else _unflatten_tokens(tokens[h * w:], h, w)
    if return_weights:
        return out_deg, out_ref, weights
    return out_deg, out_ref


def reference_mixed_attention(z_deg, z_ref, model: FixerModel):
    """Attend jointly over both views' latent tokens; returns the updated pair.

    ``z_ref`` may be None (degenerate single-view case: plain self-attention).
    Accepts LatentGrid or raw (C, h, w) tensors and returns LatentGrids.
    """
    zd = z_deg.data if isinstance(z_deg, LatentGrid) else z_deg
    zr = z_ref.data if isinstance(z_ref, LatentGrid) else z_ref
    out_deg, out_ref = mix_latent_tokens(zd, zr, model)
    return LatentGrid(out_deg), None if out_ref is None else LatentGrid(out_ref)


def predict_offsets(f_deg: torch.Tensor, f_ref: torch.Tensor, model: FixerModel, scale: int,
                    valid: torch.Tensor | None = None) -> OffsetField:
    """Predict deformable sampling offsets and modulation from both feature grids.

    Offsets are bounded by max_offset via tanh; the mask is a sigmoid. At the
    zero-initialized predictor this yields zero offsets and mask 0.5.
    """
    if f_deg.shape != f_ref.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_deg.shape)} vs {tuple(f_ref.shape)}")
    c, h, w = f_deg.shape
    if c != model.config.channels[scale]:
        raise ValueError(f"scale {scale} expects {model.config.channels[scale]} channels, got {c}")
    v = torch.ones(1, h, w, dtype=f_deg.dtype) if valid is None else valid.to(f_deg.dtype)[None]
    raw = model.offset_nets[scale](torch.cat([f_deg, f_ref, v], dim=0)[None])[0]
    offsets = model.config.max_offset * torch.tanh(raw[: 2 * KERNEL_TAPS])
    mask = torch.sigmoid(raw[2 * KERNEL_TAPS:])
    return OffsetField(offsets, mask)


def deformable_sample(f_ref: torch.Tensor, field: OffsetField, kernel: torch.Tensor) -> torch.Tensor:
    """Modulated deformable 3x3 sampling of f_ref, added residually.

    Each output position convolves bilinear samples taken at the 3x3 grid
    displaced per-tap by field.offsets, scaled by field.mask; reads outside
    the grid are zero. ``kernel`` is (C, C, 9); an all-zero mask returns
    f_ref unchanged (the op has no bias).
    """
    c, h, w = f_ref.shape
    if field.offsets.shape[1:] != (h, w):
        raise ValueError(
            f"offset grid {tuple(field.offsets.shape[1:])} does not match features {h}x{w}"
        )
    if field.taps != KERNEL_TAPS:
        raise ValueError(f"expected {KERNEL_TAPS} taps, got {field.taps}")
    if kernel.shape != (c, c, KERNEL_TAPS):
        raise ValueError(f"kernel must be ({c}, {c}, {KERNEL_TAPS}), got {tuple(kernel.shape)}")
    dtype = f_ref.dtype
    off = field.offsets.reshape(KERNEL_TAPS, 2, h, w)
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    sampled = []
    for k, (ky, kx) in enumerate(_TAP_GRID):
        py = ys + ky + off[k, 0]
        px = xs + kx + off[k, 1]
        s, _ = bilinear_sample(f_ref, px, py)
        sampled.append(s * field.mask[k][None])
    stack = torch.stack(sampled, dim=0)  # (K, C, H, W)
    return f_ref + torch.einsum("oik,kihw->ohw", kernel, stack)


def fuse_features(f_deg: torch.Tensor, f_ref: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
    """Confidence blend: gate * f_deg + (1 - gate) * f_ref."""
    return gate * f_deg + (1.0 - gate) * f_ref


def gated_fusion(f_deg: torch.Tensor, f_ref_aligned: torch.Tensor, model: FixerModel, scale: int,
                 valid: torch.Tensor | None = None, return_gate: bool = False):
    """Predict a per-pixel confidence gate and blend the two feature grids."""
    if f_deg.shape != f_ref_aligned.shape:
        raise ValueError(
            f"feature shapes differ: {tuple(f_deg.shape)} vs {tuple(f_ref_aligned.shape)}"
        )
    c, h, w = f_deg.shape
    v = torch.ones(1, h, w, dtype=f_deg.dtype) if valid is None else valid.to(f_deg.dtype)[None]
    gate = torch.sigmoid(model.gates[scale](torch.cat([f_deg, f_ref_aligned, v], dim=0)[None])[0])
    fused = fuse_features(f_deg, f_ref_aligned, gate)
    if return_gate:
        return fused, gate
    return fused


def decode_tensor(z: torch.Tensor, fused, model: FixerModel) -> torch.Tensor:
    act = z[None]
    for i in range(model.config.scales - 1, -1, -1):
        act = model.merges[i](torch.cat([act, fused[i][None]], dim=1))
        act = F.relu(model.dec_convs[i](act))
        act = F.interpolate(act, scale_factor=2, mode="nearest")
        act = F.relu(model.transitions[i](act))
    return torch.sigmoid(model.head(act))[0]


def decode(z, fused, model: FixerModel) -> Image:
    """Decode the latent plus fused per-scale skips back to an image."""
    zt = z.data if isinstance(z, LatentGrid) else z
    skips = list(fused.scales) if isinstance(fused, MultiScaleFeatures) else list(fused)
    if len(skips) != model.config.scales:
        raise ValueError(f"expected {model.config.scales} skip grids, got {len(skips)}")
    h, w = zt.shape[1:]
    for i, skip in enumerate(skips):
        want = (model.config.channels[i], h * 2 ** (model.config.scales - 1 - i),
                w * 2 ** (model.config.scales - 1 - i))
        if tuple(skip.shape) != want:
            raise ValueError(f"skip {i} has shape {tuple(skip.shape)}, expected {want}")
    return from_tensor(decode_tensor(zt, skips, model))


def _scale_valid(warp_valid: torch.Tensor, scale: int) -> torch.Tensor:
    k = 2 ** (scale + 1)
    return F.avg_pool2d(warp_valid[None, None], kernel_size=k)[0, 0]


def fix_tensor(x_deg: torch.Tensor, x_warp: torch.Tensor, warp_valid: torch.Tensor,
               model: FixerModel, use_ldi: bool = True) -> torch.Tensor:
    """Differentiable core of fix(); inputs are (3, H, W) plus an (H, W) mask."""
    x_warp = x_warp * warp_valid[None]  # zero-fill holes before encoding
    z_deg, taps_deg = encode_tensor(x_deg, model)
    z_ref, taps_ref = encode_tensor(x_warp, model)
    z_deg, _ = mix_latent_tokens(z_deg, z_ref, model)
    fused = []
    for i in range(model.config.scales):
        if use_ldi:
            v = _scale_valid(warp_valid, i)
            offs = predict_offsets(taps_deg[i], taps_ref[i], model, i, v)
            aligned = deformable_sample(taps_ref[i], offs, model.align_kernels[i])
            fused.append(gated_fusion(taps_deg[i], aligned, model, i, v))
        else:
            fused.append(taps_deg[i])
    return decode_tensor(z_deg, fused, model)


def fix(i_deg: Image, i_warped: Image, model: FixerModel, use_ldi: bool = True) -> Image:
    """Fix a degraded view using a pre-aligned reference.

    ``use_ldi=False`` skips the per-scale reference detail path (offsets,
    deformable alignment, gating) and injects the degraded taps directly;
    the attention mixing still runs.
    """
    if (i_deg.height, i_deg.width) != (i_warped.height, i_warped.width):
        raise ValueError(
            f"degraded {i_deg.data.shape[:2]} and warped reference "
            f"{i_warped.data.shape[:2]} sizes differ"
        )
    _check_divisible(i_deg.height, i_deg.width, model.config.factor)
    dtype = model.dtype
    x_deg = _rgb_tensor(i_deg, dtype)
    x_warp = _rgb_tensor(i_warped, dtype)
    wv = torch.from_numpy(i_warped.valid_mask()).to(dtype)
    with torch.no_grad():
        out = fix_tensor(x_deg, x_warp, wv, model, use_ldi=use_ldi)
    if i_deg.channels == 1:
        out = out.mean(dim=0, keepdim=True)
    return from_tensor(out)
