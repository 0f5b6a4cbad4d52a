"""Feature adaption: hazy backbone features -> dehazed features, and the
distillation losses that pull them toward clear-image features."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .odconv import CBAM, make_conv

LOSS_KINDS = ("cwd", "mimic_l1", "mimic_l2")


class FABlock(nn.Module):
    """conv_1 (C->C) -> conv_2 (C->2C) -> CBAM(2C) -> 1×1 projection (2C->C).

    Both dynamic convolutions are followed by BatchNorm + SiLU. CBAM cannot
    change the channel count, so the projection brings the 2C attention
    output back to C.
    """

    def __init__(self, channels, conv_kind="od", n_kernels=4, cbam_reduction=16):
        super().__init__()
        kw = {"n_kernels": n_kernels} if conv_kind == "od" else {}
        self.channels = channels
        self.conv1 = make_conv(conv_kind, channels, channels, 1, bias=False, **kw)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = make_conv(conv_kind, channels, 2 * channels, 1, bias=False, **kw)
        self.bn2 = nn.BatchNorm2d(2 * channels)
        self.act = nn.SiLU()
        self.cbam = CBAM(2 * channels, reduction=cbam_reduction)
        self.proj = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected N×{self.channels}×H×W features, got {tuple(x.shape)}")
        x = self.act(self.bn1(self.conv1(x)))
        x = self.act(self.bn2(self.conv2(x)))
        return self.proj(self.cbam(x))


class FeatureAdapter(nn.Module):
    """One FABlock per pyramid level."""

    def __init__(self, channels=(32, 64, 128), conv_kind="od", n_kernels=4):
        super().__init__()
        self.blocks = nn.ModuleList(FABlock(c, conv_kind, n_kernels) for c in channels)

    def forward(self, pyramid):
        if len(pyramid) != len(self.blocks):
            raise ValueError(f"expected {len(self.blocks)} pyramid levels, got {len(pyramid)}")
        return [blk(f) for blk, f in zip(self.blocks, pyramid)]


def _check_pair(f_c, f_d):
    if f_c.shape != f_d.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_c.shape)} vs {tuple(f_d.shape)}")


def cwd_loss(f_c, f_d, tau=1.0):
    """Channel-wise distillation: KL between per-channel spatial softmaxes.

    Summed over channels, averaged over the batch, scaled by tau**2. The clear
    features are a fixed target (detached).
    """
    _check_pair(f_c, f_d)
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    n, c = f_c.shape[:2]
    t = f_c.detach().reshape(n, c, -1) / tau
    s = f_d.reshape(n, c, -1) / tau
    log_p = F.log_softmax(t, dim=2)
    log_q = F.log_softmax(s, dim=2)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=2)  # N×C
    return kl.sum(dim=1).mean() * tau**2


def mimic_loss(f_c, f_d, p=2):
    _check_pair(f_c, f_d)
    diff = f_d - f_c.detach()
    if p == 1:
        return diff.abs().mean()
    if p == 2:
        return diff.pow(2).mean()
    raise ValueError(f"p must be 1 or 2, got {p}")


@dataclass
class AdaptionLossConfig:
    kind: str = "cwd"
    tau: float = 1.0
    scale_weights: tuple[float, float, float] = (0.7, 0.2, 0.1)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"adaption.kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not self.tau > 0:
            raise ValueError(f"adaption.tau must be > 0, got {self.tau}")
        w = tuple(float(v) for v in self.scale_weights)
        if len(w) != 3 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"adaption.scale_weights must be 3 non-negative values summing to 1, got {w}")
        self.scale_weights = w


def level_loss(f_c, f_d, cfg: AdaptionLossConfig):
    if cfg.kind == "cwd":
        return cwd_loss(f_c, f_d, cfg.tau)
    return mimic_loss(f_c, f_d, 1 if cfg.kind == "mimic_l1" else 2)


def multiscale_adaption_loss(fc_pyr, fd_pyr, cfg: AdaptionLossConfig | None = None):
    """Weighted sum over the three levels; level 0 is the highest resolution."""
    cfg = cfg or AdaptionLossConfig()
    if len(fc_pyr) != 3 or len(fd_pyr) != 3:
        raise ValueError(f"expected 3 pyramid levels, got {len(fc_pyr)} and {len(fd_pyr)}")
    total = 0.0
    for w, f_c, f_d in zip(cfg.scale_weights, fc_pyr, fd_pyr):
        total = total + w * level_loss(f_c, f_d, cfg)
    return total
