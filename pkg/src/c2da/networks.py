"""Segmentor (encoder + decoder), generator and feature discriminator."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .volume import N_CLASSES

__all__ = ["Segmentor", "Generator", "Discriminator", "ConvBlock"]


class ConvBlock(nn.Module):
    """Conv(3, n, stride) -> norm -> ReLU -> Conv(3, n, 1) -> norm -> ReLU.

    The norm is a single-group GroupNorm (statistics over channels and
    space, per sample); instance statistics are ill-conditioned on the
    one- or two-pixel bottleneck of small inputs.
    """

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
            nn.GroupNorm(1, out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.GroupNorm(1, out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


def _match(x, ref):
    """Crop or zero-pad ``x`` spatially to the extents of ``ref``."""
    dh = ref.shape[-2] - x.shape[-2]
    dw = ref.shape[-1] - x.shape[-1]
    if dh == 0 and dw == 0:
        return x
    return F.pad(x, [0, dw, 0, dh])


class _UpBlock(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, out_ch, 2, stride=2)
        self.conv = ConvBlock(out_ch + skip_ch, out_ch)

    def forward(self, x, skip):
        x = _match(self.up(x), skip)
        return self.conv(torch.cat([x, skip], dim=1))


class Encoder(nn.Module):
    def __init__(self, in_ch=1, base_width=32, depth=4):
        super().__init__()
        widths = [base_width * 2**i for i in range(depth)]
        self.stem = ConvBlock(in_ch, base_width)
        self.stages = nn.ModuleList()
        prev = base_width
        for w in widths:
            self.stages.append(ConvBlock(prev, w, stride=2))
            prev = w
        self.widths = [base_width] + widths

    def forward(self, x):
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats


class Decoder(nn.Module):
    def __init__(self, widths, out_ch):
        super().__init__()
        rev = widths[::-1]
        self.ups = nn.ModuleList(_UpBlock(rev[i], rev[i + 1], rev[i + 1]) for i in range(len(rev) - 1))
        self.head = nn.Conv2d(widths[0], out_ch, 1)

    def forward(self, feats):
        x = feats[-1]
        for up, skip in zip(self.ups, feats[-2::-1]):
            x = up(x, skip)
        return self.head(x)


class Segmentor(nn.Module):
    """2D encoder-decoder with skip connections.

    With ``base_width=32`` and ``depth=4`` the bottleneck has 256 channels at
    1/16 of the input resolution.  :meth:`encode` returns that bottleneck;
    :meth:`forward` returns 7-channel logits at input resolution.
    """

    def __init__(self, in_channels=1, n_classes=N_CLASSES, base_width=32, depth=4):
        super().__init__()
        self.encoder = Encoder(in_channels, base_width, depth)
        self.decoder = Decoder(self.encoder.widths, n_classes)
        self.in_channels = in_channels
        self.n_classes = n_classes

    @property
    def bottleneck_channels(self) -> int:
        return self.encoder.widths[-1]

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (B, {self.in_channels}, H, W) input, got {tuple(x.shape)}")

    def encode_all(self, x):
        self._check(x)
        return self.encoder(x)

    def encode(self, x):
        return self.encode_all(x)[-1]

    def decode(self, feats):
        return self.decoder(feats)

    def forward(self, x):
        return self.decoder(self.encode_all(x))


class Generator(nn.Module):
    """Synthesizes an image slice from a softmax segmentation map and its style code."""

    def __init__(self, n_classes=N_CLASSES, base_width=32, depth=3):
        super().__init__()
        self.n_classes = n_classes
        self.encoder = Encoder(n_classes + 1, base_width, depth)
        self.decoder = Decoder(self.encoder.widths, 1)

    def forward(self, seg_softmax, fsc):
        if seg_softmax.ndim != 4 or seg_softmax.shape[1] != self.n_classes:
            raise ValueError(f"segmentation input needs {self.n_classes} channels, got {tuple(seg_softmax.shape)}")
        if fsc.ndim != 4 or fsc.shape[1] != 1:
            raise ValueError(f"style input needs 1 channel, got {tuple(fsc.shape)}")
        if fsc.shape[-2:] != seg_softmax.shape[-2:]:
            raise ValueError("segmentation and style inputs differ in spatial extent")
        return self.decoder(self.encoder(torch.cat([seg_softmax, fsc], dim=1)))


class Discriminator(nn.Module):
    """Bottleneck features -> two strided convs -> global average pool -> FC -> FC -> logit."""

    def __init__(self, in_channels=256, width=None):
        super().__init__()
        width = width or in_channels
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.fc1 = nn.Linear(width, max(width // 2, 1))
        self.fc2 = nn.Linear(max(width // 2, 1), 1)

    def forward(self, feats):
        x = self.features(feats).mean(dim=(-2, -1))
        x = F.leaky_relu(self.fc1(x), 0.2)
        return self.fc2(x).squeeze(-1)
