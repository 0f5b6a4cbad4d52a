import torch
import torch.nn as nn
import torch.nn.functional as F


class ODConv2d(nn.Module):
    """Omni-dimensional dynamic convolution.

    A squeeze (GAP -> FC -> ReLU) feeds four heads producing a spatial
    attention over the k×k kernel window, an input-channel attention, an
    output-filter attention (all sigmoid) and a softmax over ``n`` candidate
    kernels. The per-sample kernel is

        W(x) = sum_i a_w[i] * (a_s ⊙ a_c ⊙ a_f ⊙ W_i)

    and is applied as an ordinary convolution.

    Setting ``pin_attention = True`` replaces every attention by ones.
    """

    def __init__(self, in_channels, out_channels, kernel_size=1, stride=1, padding=None,
                 n_kernels=4, reduction=0.25, min_hidden=4, bias=True):
        super().__init__()
        if n_kernels < 1:
            raise ValueError("n_kernels must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.n_kernels = n_kernels
        self.pin_attention = False

        hidden = max(int(in_channels * reduction), min_hidden)
        self.fc = nn.Linear(in_channels, hidden)
        self.spatial_fc = nn.Linear(hidden, kernel_size * kernel_size)
        self.channel_fc = nn.Linear(hidden, in_channels)
        self.filter_fc = nn.Linear(hidden, out_channels)
        self.kernel_fc = nn.Linear(hidden, n_kernels)

        self.weight = nn.Parameter(torch.empty(n_kernels, out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        for i in range(n_kernels):
            nn.init.kaiming_normal_(self.weight.data[i], mode="fan_out", nonlinearity="relu")

    def attentions(self, x):
        """Per-sample (a_s [N,k,k], a_c [N,C_in], a_f [N,C_out], a_w [N,n])."""
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected N×{self.in_channels}×H×W input, got {tuple(x.shape)}")
        n, k = x.shape[0], self.kernel_size
        if self.pin_attention:
            one = x.new_ones
            return one(n, k, k), one(n, self.in_channels), one(n, self.out_channels), one(n, self.n_kernels)
        z = F.relu(self.fc(x.mean(dim=(2, 3))))
        a_s = torch.sigmoid(self.spatial_fc(z)).view(n, k, k)
        a_c = torch.sigmoid(self.channel_fc(z))
        a_f = torch.sigmoid(self.filter_fc(z))
        a_w = torch.softmax(self.kernel_fc(z), dim=1)
        return a_s, a_c, a_f, a_w

    def aggregate_kernel(self, x):
        a_s, a_c, a_f, a_w = self.attentions(x)
        w = torch.einsum("bn,noikl->boikl", a_w, self.weight)
        return w * a_s[:, None, None] * a_c[:, None, :, None, None] * a_f[:, :, None, None, None]

    def forward(self, x):
        n, _, h, w = x.shape
        kernel = self.aggregate_kernel(x)
        out = F.conv2d(
            x.reshape(1, n * self.in_channels, h, w),
            kernel.reshape(n * self.out_channels, self.in_channels, self.kernel_size, self.kernel_size),
            stride=self.stride, padding=self.padding, groups=n,
        )
        out = out.view(n, self.out_channels, out.shape[-2], out.shape[-1])
        if self.bias is not None:
            out = out + self.bias.view(1, -1, 1, 1)
        return out


class SEConv2d(nn.Module):
    """Convolution whose input channels are re-weighted by squeeze-excitation attention."""

    def __init__(self, in_channels, out_channels, kernel_size=1, stride=1, reduction=0.25, min_hidden=4,
                 bias=True):
        super().__init__()
        self.in_channels = in_channels
        hidden = max(int(in_channels * reduction), min_hidden)
        self.fc1 = nn.Linear(in_channels, hidden)
        self.fc2 = nn.Linear(hidden, in_channels)
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, stride, kernel_size // 2, bias=bias)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        a_c = torch.sigmoid(self.fc2(F.relu(self.fc1(x.mean(dim=(2, 3))))))
        return self.conv(x * a_c[:, :, None, None])


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def forward(self, x):
        avg = self.mlp(x.mean(dim=(2, 3), keepdim=True))
        mx = self.mlp(x.amax(dim=(2, 3), keepdim=True))
        return torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size=7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class CBAM(nn.Module):
    def __init__(self, channels, reduction=16, kernel_size=7):
        super().__init__()
        self.channels = channels
        self.channel_attention = ChannelAttention(channels, reduction)
        self.spatial_attention = SpatialAttention(kernel_size)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected N×{self.channels}×H×W input, got {tuple(x.shape)}")
        x = x * self.channel_attention(x)
        return x * self.spatial_attention(x)


def make_conv(kind, in_channels, out_channels, kernel_size=1, bias=True, **kw):
    """Factory for the FA convolution arms: ``od`` | ``se`` | ``plain``."""
    if kind == "od":
        return ODConv2d(in_channels, out_channels, kernel_size, bias=bias, **kw)
    if kind == "se":
        return SEConv2d(in_channels, out_channels, kernel_size, bias=bias)
    if kind == "plain":
        return nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2, bias=bias)
    raise ValueError(f"unknown conv kind {kind!r}")
