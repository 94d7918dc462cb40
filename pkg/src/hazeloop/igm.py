"""Instruction-guided modulation: encode a text instruction, project it into
the image channel space, and channel-modulate two decoder-side feature sites.
Weights are parameterized as 2*sigmoid(logits) so zero-initialized heads give
an exact identity (W = 1).
"""

from __future__ import annotations

import zlib

import torch
import torch.nn as nn

from . import fileio
from .errors import InputError
from .idn import zero_init_
from .tfga import CFFB

TEXT_DIM = 64
HIDDEN = 128


class HashingTextEncoder:
    """Dependency-free stand-in for a pretrained language model: case-folded
    token hashing into TEXT_DIM bins, a fixed seeded random projection, and
    L2 normalization.  Deterministic across processes (crc32, not hash())."""

    def __init__(self, dim=TEXT_DIM, seed=1234):
        self.dim = dim
        gen = torch.Generator().manual_seed(seed)
        self.projection = torch.randn(dim, dim, generator=gen)

    def encode(self, text: str) -> torch.Tensor:
        tokens = text.casefold().split()
        if not tokens:
            raise InputError("instruction must be a non-empty string")
        counts = torch.zeros(self.dim)
        for tok in tokens:
            counts[zlib.crc32(tok.encode("utf-8")) % self.dim] += 1.0
        vec = self.projection @ counts
        return vec / vec.norm().clamp_min(1e-12)


class FileTextEncoder:
    """Serves precomputed embeddings (e.g. from an external language model)
    keyed by the exact instruction string."""

    def __init__(self, path):
        self.entries = fileio.load_embeddings(path)

    def encode(self, text: str) -> torch.Tensor:
        if not text.strip():
            raise InputError("instruction must be a non-empty string")
        if text not in self.entries:
            raise LookupError(f"no embedding for instruction {text!r}")
        return self.entries[text]


class TextAdapter(nn.Module):
    """Expand + MLP projecting the instruction vector into channel space."""

    def __init__(self, text_dim, channels, hidden=HIDDEN):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(text_dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, channels),
        )

    def forward(self, f_t):
        return self.net(f_t)


class ImageFeatureRefine(nn.Module):
    """Two branches (MLP -> GAP, MLP -> GMP) summed into a channel vector."""

    def __init__(self, channels, hidden=HIDDEN):
        super().__init__()
        self.mlp_avg = nn.Sequential(
            nn.Conv2d(channels, hidden, 1), nn.GELU(), nn.Conv2d(hidden, channels, 1)
        )
        self.mlp_max = nn.Sequential(
            nn.Conv2d(channels, hidden, 1), nn.GELU(), nn.Conv2d(hidden, channels, 1)
        )

    def forward(self, feat):
        avg = self.mlp_avg(feat).mean(dim=(2, 3))
        mx = self.mlp_max(feat).amax(dim=(2, 3))
        return avg + mx


class WeightGenerationBlock(nn.Module):
    """Per-channel modulation weights in (0,2); zero-init gives W = 1."""

    def __init__(self, channels, hidden=HIDDEN):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(channels * 2, hidden),
            nn.GELU(),
            zero_init_(nn.Linear(hidden, channels)),
        )

    def forward(self, text_feat, image_feat):
        logits = self.net(torch.cat([text_feat, image_feat], dim=-1))
        return 2.0 * torch.sigmoid(logits)


class IGMSite(nn.Module):
    """One modulation site: W ⊙ F through a CFFB plus a residual to F."""

    def __init__(self, channels, text_dim=TEXT_DIM):
        super().__init__()
        self.channels = channels
        self.text_adapter = TextAdapter(text_dim, channels)
        self.refine = ImageFeatureRefine(channels)
        self.wgb = WeightGenerationBlock(channels)
        self.cffb = CFFB(channels, zero_out=True)

    def weights(self, feat, f_t):
        if feat.shape[1] != self.channels:
            raise InputError(
                f"site expects {self.channels} channels, got {feat.shape[1]}"
            )
        adapted = self.text_adapter(f_t)
        refined = self.refine(feat)
        return self.wgb(adapted.expand_as(refined), refined)

    def forward(self, feat, f_t):
        w = self.weights(feat, f_t).unsqueeze(-1).unsqueeze(-1)
        modulated = w * feat
        return self.cffb(modulated) + feat


class IGM(nn.Module):
    """Independent modulation sites for the encoder exit and the first
    decoder features."""

    def __init__(self, enc_channels=64, dec_channels=32, text_dim=TEXT_DIM):
        super().__init__()
        self.site_enc = IGMSite(enc_channels, text_dim)
        self.site_dec = IGMSite(dec_channels, text_dim)

    def modulators(self, f_t):
        """Callables for idn.ModulationBundle (the decoder feature only
        exists mid-decode)."""
        return (
            lambda feat: self.site_enc(feat, f_t),
            lambda feat: self.site_dec(feat, f_t),
        )


def make_text_encoder(kind: str):
    """kind is 'toy' or 'file:<path>'."""
    if kind == "toy":
        return HashingTextEncoder()
    if kind.startswith("file:"):
        return FileTextEncoder(kind[len("file:"):])
    raise InputError(f"unknown text encoder kind {kind!r}")
