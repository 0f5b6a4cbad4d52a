import torch
import torch.nn as nn
import torch.nn.functional as F


class AttentionFusion(nn.Module):
    """Blend dehazed and hazy features with a pooled spatial attention map.

    X = F_d + F_h
    T = X + UP(conv_t(Pool_r(X)))
    F_f = conv_d(F_d) * sigmoid(T) + conv_h(F_h) * (1 - sigmoid(T))

    Pooling is non-overlapping r×r averaging in ceil mode (partial windows
    average only the valid pixels) and UP is bilinear back to the input size,
    so any H, W is accepted.
    """

    def __init__(self, channels, r=4):
        super().__init__()
        if r < 1:
            raise ValueError("pooling window r must be >= 1")
        self.channels = channels
        self.r = r
        self.conv_t = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv_d = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv_h = nn.Conv2d(channels, channels, 3, padding=1)
        # test hook: when set, replaces T by this constant
        self.t_override = None

    def attention_logits(self, f_d, f_h):
        x = f_d + f_h
        pooled = F.avg_pool2d(x, self.r, stride=self.r, ceil_mode=True, count_include_pad=False)
        up = F.interpolate(self.conv_t(pooled), size=x.shape[-2:], mode="bilinear", align_corners=False)
        return x + up

    def forward(self, f_d, f_h):
        if f_d.shape != f_h.shape:
            raise ValueError(f"branch shapes differ: {tuple(f_d.shape)} vs {tuple(f_h.shape)}")
        if f_d.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {f_d.shape[1]}")
        if self.t_override is None:
            att = torch.sigmoid(self.attention_logits(f_d, f_h))
        else:
            att = torch.sigmoid(torch.full_like(f_d, float(self.t_override)))
        return self.conv_d(f_d) * att + self.conv_h(f_h) * (1 - att)


class PyramidFusion(nn.Module):
    def __init__(self, channels=(32, 64, 128), r=4):
        super().__init__()
        self.levels = nn.ModuleList(AttentionFusion(c, r) for c in channels)

    def forward(self, fd_pyr, fh_pyr):
        return [m(d, h) for m, d, h in zip(self.levels, fd_pyr, fh_pyr)]
