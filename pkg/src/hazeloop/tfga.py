"""Task feedback-guided adaptation: fuses features of the dehazed image with
downstream-task feedback through bidirectional cross-attention, channel-wise
fusion blocks, and softmax-normalized regulation weights, then produces the
modulation tensor injected at the deep FFM.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError
from .idn import zero_init_


class CFFB(nn.Module):
    """Channel-wise feature fusion block: GAP -> MLP -> sigmoid gate -> conv.

    No internal residual: with the conv zero-initialized (or on zero input)
    the output is exactly zero, which the modulation sites rely on.
    """

    def __init__(self, channels, reduction=4, zero_out=False):
        super().__init__()
        self.gate = nn.Sequential(
            nn.Linear(channels, max(1, channels // reduction)),
            nn.GELU(),
            nn.Linear(max(1, channels // reduction), channels),
            nn.Sigmoid(),
        )
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv.bias)
        if zero_out:
            nn.init.zeros_(self.conv.weight)

    def forward(self, x):
        g = self.gate(x.mean(dim=(2, 3)))
        return self.conv(x * g.unsqueeze(-1).unsqueeze(-1))


class CrossAttention(nn.Module):
    """Single-head attention over spatial tokens; no positional encoding.

    Output is A @ V directly (no output projection), so a single token
    reduces to its projected value.
    """

    def __init__(self, channels):
        super().__init__()
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)

    def forward(self, query_feat, kv_feat):
        if query_feat.shape != kv_feat.shape:
            raise InputError(
                f"attention inputs disagree: {tuple(query_feat.shape)} vs {tuple(kv_feat.shape)}"
            )
        b, c, h, w = query_feat.shape
        qt = query_feat.flatten(2).transpose(1, 2)
        kt = kv_feat.flatten(2).transpose(1, 2)
        q, k, v = self.q(qt), self.k(kt), self.v(kt)
        attn = torch.softmax(q @ k.transpose(-2, -1) * c**-0.5, dim=-1)
        out = attn @ v
        return out.transpose(1, 2).reshape(b, c, h, w)


class ImageFeatureAdapter(nn.Module):
    """Projects a dehazed image into the deepest feature scale (C, H/4, W/4)."""

    def __init__(self, channels=64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, channels // 4, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(channels // 4, channels // 2, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(channels // 2, channels, 3, stride=1, padding=1),
        )

    def forward(self, image):
        if image.shape[-1] % 4 or image.shape[-2] % 4:
            raise InputError(
                f"image size {tuple(image.shape[-2:])} must be divisible by 4"
            )
        return self.net(image)


class FeedbackAdapter(nn.Module):
    """Projects a task feedback payload (logits, depth, or backbone features)
    to the deepest scale with a per-kind 1x1 conv + bilinear resize."""

    def __init__(self, kind_channels, channels=64):
        super().__init__()
        self.proj = nn.ModuleDict(
            {kind: nn.Conv2d(cin, channels, 1) for kind, cin in kind_channels.items()}
        )

    def forward(self, kind, payload, target_hw):
        if kind not in self.proj:
            raise InputError(f"unknown feedback kind {kind!r}; known: {sorted(self.proj)}")
        y = self.proj[kind](payload)
        if y.shape[-2:] != tuple(target_hw):
            y = F.interpolate(y, size=tuple(target_hw), mode="bilinear", align_corners=False)
        return y


class BidirectionalCrossAttention(nn.Module):
    """Two-direction interaction between image features and feedback features.

    The fused query source is conv(concat) followed by a per-position linear
    map; each of the four outputs has its own attention parameters.
    """

    def __init__(self, channels):
        super().__init__()
        self.fuse_conv = nn.Conv2d(channels * 2, channels, 3, padding=1)
        self.fuse_linear = nn.Conv2d(channels, channels, 1)
        self.att_id_fwd = CrossAttention(channels)    # Q from fused, K/V from F_id
        self.att_id_rev = CrossAttention(channels)    # Q from F_id, K/V from fused
        self.att_down_fwd = CrossAttention(channels)  # Q from fused, K/V from F_down
        self.att_down_rev = CrossAttention(channels)  # Q from F_down, K/V from fused

    def fused(self, f_id, f_down):
        if f_id.shape != f_down.shape:
            raise InputError(
                f"feature shapes disagree: {tuple(f_id.shape)} vs {tuple(f_down.shape)}"
            )
        return self.fuse_linear(self.fuse_conv(torch.cat([f_id, f_down], dim=1)))

    def forward(self, f_id, f_down):
        fused = self.fused(f_id, f_down)
        return (
            self.att_id_fwd(fused, f_id),
            self.att_id_rev(f_id, fused),
            self.att_down_fwd(fused, f_down),
            self.att_down_rev(f_down, fused),
        )


class WeightGenerator(nn.Module):
    """Two per-position MLP heads + softmax across the two branches.

    Heads are zero-initialized so both weights start at exactly 0.5.
    """

    def __init__(self, channels):
        super().__init__()
        self.head_id = nn.Sequential(
            nn.Conv2d(channels, channels, 1),
            nn.GELU(),
            zero_init_(nn.Conv2d(channels, channels, 1)),
        )
        self.head_down = nn.Sequential(
            nn.Conv2d(channels, channels, 1),
            nn.GELU(),
            zero_init_(nn.Conv2d(channels, channels, 1)),
        )

    def forward(self, f_idd):
        logits = torch.stack([self.head_id(f_idd), self.head_down(f_idd)], dim=0)
        weights = torch.softmax(logits, dim=0)
        return weights[0], weights[1]


class TFGA(nn.Module):
    def __init__(self, channels=64, feedback_channels=None):
        super().__init__()
        feedback_channels = feedback_channels or {"seg": 2, "depth": 1, "det": 16}
        self.channels = channels
        self.adapt_image = ImageFeatureAdapter(channels)
        self.adapt_feedback = FeedbackAdapter(feedback_channels, channels)
        self.cross = BidirectionalCrossAttention(channels)
        self.conv_fwd = nn.Conv2d(channels * 2, channels, 3, padding=1)
        self.conv_rev = nn.Conv2d(channels * 2, channels, 3, padding=1)
        self.cffb1 = CFFB(channels)
        self.cffb2 = CFFB(channels)
        self.weight_gen = WeightGenerator(channels)
        self.fuse_out = nn.Conv2d(channels, channels, 3, padding=1)
        # zero-initialized so the closed loop is an exact no-op before training
        self.inject = zero_init_(nn.Conv2d(channels * 3, channels, 3, padding=1))

    def deep_semantics(self, f_id, f_down):
        """Eq-style fusion of image and feedback features at the deep scale."""
        a_id_fwd, a_id_rev, a_down_fwd, a_down_rev = self.cross(f_id, f_down)
        u = self.conv_fwd(torch.cat([a_id_fwd, a_down_rev], dim=1))
        v = self.conv_rev(torch.cat([a_id_rev, a_down_fwd], dim=1))
        f_idd = self.cffb2(self.cffb1(u + v))
        q_id, q_down = self.weight_gen(f_idd)
        return self.fuse_out(f_id * q_id + f_down * q_down + f_idd)

    def inject_to_ffm(self, fused, enc_exit, prev):
        """Modulation tensor for the deep FFM from the fused semantics, the
        encoder exit, and the projected previous-stage features."""
        for name, t in (("enc_exit", enc_exit), ("prev", prev)):
            if t.shape != fused.shape:
                raise InputError(
                    f"{name} shape {tuple(t.shape)} != fused shape {tuple(fused.shape)}"
                )
        return self.inject(torch.cat([fused, enc_exit, prev], dim=1))

    def forward(self, dehazed, feedback_kind, feedback_payload, enc_exit, prev):
        f_id = self.adapt_image(dehazed)
        f_down = self.adapt_feedback(feedback_kind, feedback_payload, f_id.shape[-2:])
        fused = self.deep_semantics(f_id, f_down)
        return self.inject_to_ffm(fused, enc_exit, prev)
