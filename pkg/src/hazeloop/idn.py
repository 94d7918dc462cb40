"""Base dehazing network: 3-stage transformer encoder, 2-stage decoder with
two feature fusion modules (FFM).  The FFMs accept an optional modulation
tensor so closed-loop signals can be injected without touching the open-loop
path: with the modulation branch zero-initialized, the closed-loop forward is
bit-identical to the open-loop one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError

PATCH = 2  # token patch size inside every transformer block


def zero_init_(module: nn.Module):
    """Zero all weights and biases so the module outputs exactly 0."""
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class TransformerBlock(nn.Module):
    """Pre-norm self-attention over 2x2-patch tokens + 2-layer MLP."""

    def __init__(self, channels, heads=2, expansion=2):
        super().__init__()
        dim = channels * PATCH * PATCH
        if dim % heads != 0:
            raise InputError(f"token dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * expansion),
            nn.GELU(),
            nn.Linear(dim * expansion, dim),
        )

    def forward(self, x):
        b, c, h, w = x.shape
        p = PATCH
        if h % p or w % p:
            raise InputError(f"spatial size {h}x{w} not divisible by patch {p}")
        hp, wp = h // p, w // p
        tokens = (
            x.reshape(b, c, hp, p, wp, p)
            .permute(0, 2, 4, 1, 3, 5)
            .reshape(b, hp * wp, c * p * p)
        )
        tokens = tokens + self._attend(self.norm1(tokens))
        tokens = tokens + self.mlp(self.norm2(tokens))
        return (
            tokens.reshape(b, hp, wp, c, p, p)
            .permute(0, 3, 1, 4, 2, 5)
            .reshape(b, c, h, w)
        )

    def _attend(self, tokens):
        b, n, d = tokens.shape
        head_dim = d // self.heads
        qkv = self.qkv(tokens).reshape(b, n, 3, self.heads, head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) * head_dim**-0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class FFM(nn.Module):
    """Fuses same-scale encoder/decoder features; optional modulation input.

    concat -> 1x1 conv (+ zero-initialized modulation branch) -> channel
    attention -> 3x3 conv, with a residual from the decoder path.
    """

    def __init__(self, channels, reduction=4):
        super().__init__()
        self.merge = nn.Conv2d(channels * 2, channels, 1)
        self.mod_branch = zero_init_(nn.Conv2d(channels, channels, 1))
        self.gate = nn.Sequential(
            nn.Linear(channels, channels // reduction),
            nn.GELU(),
            nn.Linear(channels // reduction, channels),
            nn.Sigmoid(),
        )
        self.refine = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, enc_feat, dec_feat, modulation=None):
        if enc_feat.shape != dec_feat.shape:
            raise InputError(
                f"FFM inputs disagree: {tuple(enc_feat.shape)} vs {tuple(dec_feat.shape)}"
            )
        y = self.merge(torch.cat([enc_feat, dec_feat], dim=1))
        if modulation is not None:
            if modulation.shape != enc_feat.shape:
                raise InputError(
                    f"modulation shape {tuple(modulation.shape)} != feature shape "
                    f"{tuple(enc_feat.shape)}"
                )
            y = y + self.mod_branch(modulation)
        g = self.gate(y.mean(dim=(2, 3)))
        y = y * g.unsqueeze(-1).unsqueeze(-1)
        return self.refine(y) + dec_feat


@dataclass
class ModulationBundle:
    """Closed-loop inputs to decode().

    tfga_injection feeds the deep FFM's modulation branch; modulate_enc /
    modulate_dec replace the encoder-exit and first-decoder features (the
    decoder one must be a callable since its input is produced mid-decode).
    When everything is None the decode equals the open-loop pass bit-exactly.
    """

    tfga_injection: Optional[torch.Tensor] = None
    modulate_enc: Optional[Callable[[torch.Tensor], torch.Tensor]] = None
    modulate_dec: Optional[Callable[[torch.Tensor], torch.Tensor]] = None


def identity_bundle() -> ModulationBundle:
    return ModulationBundle(None, None, None)


class IDN(nn.Module):
    """Three-scale encoder, two-stage decoder, output clamped to [0,1]."""

    def __init__(self, channels=(16, 32, 64)):
        super().__init__()
        c1, c2, c3 = channels
        self.channels = tuple(channels)
        self.stem = nn.Conv2d(3, c1, 3, padding=1)
        self.enc1 = TransformerBlock(c1)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = TransformerBlock(c2)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.enc3 = TransformerBlock(c3)

        self.prev_proj = nn.Conv2d(c2, c3, 1)
        self.ffm_deep = FFM(c3)
        self.dec1 = TransformerBlock(c3)
        self.up1 = nn.Conv2d(c3, c2, 3, padding=1)
        self.ffm_mid = FFM(c2)
        self.dec2 = TransformerBlock(c2)
        self.up2 = nn.Conv2d(c2, c1, 3, padding=1)
        self.head = nn.Conv2d(c1, 3, 3, padding=1)
        nn.init.constant_(self.head.bias, 0.5)  # start mid-range, off the clamp

    # -- encoder -----------------------------------------------------------

    def encode(self, image: torch.Tensor):
        if image.dim() != 4 or image.shape[1] != 3:
            raise InputError(f"expected (B,3,H,W) image, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        # deepest scale is H/4 and every stage needs 2x2 patching
        if h % 8 or w % 8:
            raise InputError(f"spatial size {h}x{w} must be divisible by 8 (no padding)")
        f1 = self.enc1(self.stem(image))
        f2 = self.enc2(self.down1(f1))
        f3 = self.enc3(self.down2(f2))
        return [f1, f2, f3]

    def deep_context(self, features):
        """(encoder exit, previous-stage features projected to deep scale)."""
        f2, f3 = features[1], features[2]
        prev = self.prev_proj(
            F.interpolate(f2, size=f3.shape[-2:], mode="bilinear", align_corners=False)
        )
        return f3, prev

    # -- decoder -----------------------------------------------------------

    def decode(self, features, bundle: Optional[ModulationBundle] = None) -> torch.Tensor:
        f1, f2, f3 = features
        bundle = bundle or identity_bundle()

        enc_exit = f3
        if bundle.modulate_enc is not None:
            enc_exit = bundle.modulate_enc(enc_exit)
        _, prev = self.deep_context(features)
        fused3 = self.ffm_deep(enc_exit, prev, bundle.tfga_injection)

        d1 = self.up1(
            F.interpolate(self.dec1(fused3), scale_factor=2, mode="nearest")
        )
        if bundle.modulate_dec is not None:
            d1 = bundle.modulate_dec(d1)
        fused2 = self.ffm_mid(f2, d1)

        d2 = self.up2(
            F.interpolate(self.dec2(fused2), scale_factor=2, mode="nearest")
        )
        return self.head(d2 + f1).clamp(0.0, 1.0)

    def forward(self, hazy: torch.Tensor, bundle: Optional[ModulationBundle] = None):
        return self.decode(self.encode(hazy), bundle)
