"""Relative spatial transformer: one localization net, two affine outputs.

The two object images are concatenated channel-wise, and a single
localization network regresses both 2x3 affine transforms, one per object,
so the objects are placed relative to each other. The final fully connected
layer starts at zero weight with identity biases, so an untrained model
reproduces its inputs exactly.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from . import warp

_IDENTITY_BIAS = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


class RelativeSTN(nn.Module):
    def __init__(self, image_size: int = 64, base: int = 16, fc_dim: int = 128,
                 background: float = -1.0):
        super().__init__()
        self.background = background
        channels = (base, base * 2, base * 4)
        convs: list[nn.Module] = []
        prev = 6
        for ch in channels:
            convs += [nn.Conv2d(prev, ch, 5, padding=2), nn.MaxPool2d(2), nn.ReLU(inplace=True)]
            prev = ch
        self.features = nn.Sequential(*convs)
        spatial = image_size // 2 ** len(channels)
        if spatial < 1:
            raise ValueError(f"image_size {image_size} too small for {len(channels)} pool stages")
        self.fc1 = nn.Linear(prev * spatial * spatial, fc_dim)
        self.fc2 = nn.Linear(fc_dim, 12)
        nn.init.zeros_(self.fc2.weight)
        with torch.no_grad():
            self.fc2.bias.copy_(torch.tensor(_IDENTITY_BIAS * 2))

    def localize(self, x: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
        """Predict (theta1, theta2), each (B, 2, 3), from an image pair."""
        feats = self.features(torch.cat((x, y), dim=1))
        params = self.fc2(torch.relu(self.fc1(feats.flatten(1))))
        theta = params.reshape(-1, 2, 2, 3)
        return theta[:, 0], theta[:, 1]

    def forward(self, x: Tensor, y: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        if x.shape != y.shape:
            raise ValueError(f"resolution mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
        theta1, theta2 = self.localize(x, y)
        h, w = x.shape[-2:]
        x_t = warp.bilinear_sample(x, warp.affine_grid(theta1, h, w), padding_value=self.background)
        y_t = warp.bilinear_sample(y, warp.affine_grid(theta2, h, w), padding_value=self.background)
        return x_t, y_t, theta1, theta2


def stn_l1_loss(x_t: Tensor, y_t: Tensor, x_c: Tensor, y_c: Tensor) -> Tensor:
    """Mean absolute error over both placed/target pairs, all elements."""
    if x_t.shape != x_c.shape or y_t.shape != y_c.shape:
        raise ValueError("shape mismatch between transformer outputs and targets")
    return torch.cat(((x_t - x_c).reshape(-1), (y_t - y_c).reshape(-1))).abs().mean()
