"""Training objectives: the l1 + contrastive-ratio restoration loss, the
hinge-based multi-level ranking loss, and the overall objective combining
restoration, ranking, and task terms.  The perceptual feature extractor is
pluggable; the default is a frozen seeded conv pyramid.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from . import fileio
from .errors import ConfigError, InputError

EPS = 1e-8
# level weights follow the usual contrastive-regularization convention
DEFAULT_LEVEL_WEIGHTS = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)


class ConvPyramidExtractor(nn.Module):
    """Frozen random conv pyramid standing in for a pretrained feature stack.

    Each level halves the spatial size (guarded at size 1); tanh keeps the
    features bounded and smooth.
    """

    CHANNELS = (8, 16, 32, 64, 64)

    def __init__(self, levels=5, seed=7):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        cin = 3
        for cout in self.CHANNELS[:levels]:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.2)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.05)
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        self.level_weights = DEFAULT_LEVEL_WEIGHTS[:levels]
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, image: torch.Tensor):
        x = image if image.dim() == 4 else image.unsqueeze(0)
        out = []
        for conv in self.convs:
            if min(x.shape[-2:]) <= 1:
                x = nn.functional.conv2d(x, conv.weight, conv.bias, stride=1, padding=1)
            else:
                x = conv(x)
            x = torch.tanh(x)
            out.append(x)
        return out


class CheckpointExtractor(ConvPyramidExtractor):
    """Conv pyramid with weights loaded from a checkpoint container
    ('perc.*' tensors), for externally produced perceptual weights."""

    def __init__(self, path):
        tensors = {k: v for k, v in fileio.load_checkpoint(path).items() if k.startswith("perc.")}
        if not tensors:
            raise ConfigError(f"{path}: no 'perc.*' tensors found")
        levels = len({k.split(".")[2] for k in tensors})
        super().__init__(levels=levels)
        state = {k[len("perc."):]: v for k, v in tensors.items()}
        self.load_state_dict(state)
        for p in self.parameters():
            p.requires_grad_(False)


def make_extractor(kind: str):
    """kind is 'toy' or 'file:<path>' (checkpoint with perc.* tensors)."""
    if kind == "toy":
        return ConvPyramidExtractor()
    if kind.startswith("file:"):
        return CheckpointExtractor(kind[len("file:"):])
    raise ConfigError(f"unknown perceptual extractor kind {kind!r}")


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference (mean, not sum: resolution independent)."""
    if a.shape != b.shape:
        raise InputError(f"shapes disagree: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def contrastive_ratio(clear, pred, hazy, extractor, level_weights=None) -> torch.Tensor:
    """Sum over levels of w_v * |phi(clear)-phi(pred)| / (|phi(pred)-phi(hazy)| + eps).

    Pulls the prediction toward the clear anchor and away from the hazy
    negative in feature space.
    """
    phi_clear = extractor.features(clear)
    phi_pred = extractor.features(pred)
    phi_hazy = extractor.features(hazy)
    weights = level_weights or getattr(extractor, "level_weights", None)
    if weights is None:
        weights = [1.0] * len(phi_pred)
    total = pred.new_zeros(())
    for w, fc, fp, fh in zip(weights, phi_clear, phi_pred, phi_hazy):
        num = (fc - fp).abs().mean()
        den = (fp - fh).abs().mean()
        total = total + w * num / (den + EPS)
    return total


def predeh_loss(pred, clear, hazy, extractor, lam=0.1) -> torch.Tensor:
    """Stage-1 objective: l1 + lambda * contrastive ratio."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    loss = l1_loss(pred, clear)
    if lam > 0:
        loss = loss + lam * contrastive_ratio(clear, pred, hazy, extractor)
    return loss


def dehaze_loss(pred_modulated, clear, hazy, extractor, lam=0.1) -> torch.Tensor:
    """Stage-2 restoration term: same form, applied to the modulated output."""
    return predeh_loss(pred_modulated, clear, hazy, extractor, lam)


def mcr_loss(l_w, l_p, l_h, beta1=0.1, beta2=0.3) -> torch.Tensor:
    """Multi-level ranking hinge: modulated < initial (margin beta1) and
    modulated < hazy (margin beta2)."""
    if not beta1 < beta2:
        raise ConfigError(f"beta1 ({beta1}) must be < beta2 ({beta2})")
    l_w = l_w if torch.is_tensor(l_w) else torch.as_tensor(float(l_w))
    l_p = l_p if torch.is_tensor(l_p) else torch.as_tensor(float(l_p), dtype=l_w.dtype)
    l_h = l_h if torch.is_tensor(l_h) else torch.as_tensor(float(l_h), dtype=l_w.dtype)
    zero = l_w.new_zeros(())
    return torch.maximum(l_w - l_p + beta1, zero) + torch.maximum(l_w - l_h + beta2, zero)


@dataclass
class LossBreakdown:
    l1: float
    ratio: float
    dehaze: float
    mcr: float
    down: float
    total: float
    l_w: float
    l_p: float
    l_h: float


def total_loss(
    pred_modulated,
    initial_pred,
    clear,
    hazy,
    extractor,
    task_loss,
    lam=0.1,
    beta1=0.1,
    beta2=0.3,
    gamma=0.01,
):
    """Overall objective: dehaze + mcr + gamma * down.

    Returns (differentiable total, LossBreakdown of detached scalars).
    """
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    l_w = l1_loss(pred_modulated, clear)
    l_p = l1_loss(initial_pred, clear)
    l_h = l1_loss(hazy, clear)
    ratio = (
        contrastive_ratio(clear, pred_modulated, hazy, extractor)
        if lam > 0
        else l_w.new_zeros(())
    )
    dehaze = l_w + lam * ratio
    mcr = mcr_loss(l_w, l_p, l_h, beta1, beta2)
    down = task_loss if torch.is_tensor(task_loss) else torch.as_tensor(float(task_loss))
    total = dehaze + mcr + gamma * down
    breakdown = LossBreakdown(
        l1=float(l_w.detach()),
        ratio=float(ratio.detach()),
        dehaze=float(dehaze.detach()),
        mcr=float(mcr.detach()),
        down=float(down.detach()),
        total=float(total.detach()),
        l_w=float(l_w.detach()),
        l_p=float(l_p.detach()),
        l_h=float(l_h.detach()),
    )
    return total, breakdown
