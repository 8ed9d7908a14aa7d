"""Shared network building blocks and adversarial loss primitives.

Generators are encoder-decoder convnets (optionally with skip connections);
discriminators are patch-level convolutional classifiers emitting logit maps.
The cGAN losses are the cross-entropy form: at a discriminator stuck at
probability 0.5 (logit 0) both sides evaluate to ln 2 per sample.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn


def down_block(in_ch: int, out_ch: int, norm: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1)]
    if norm:
        layers.append(nn.BatchNorm2d(out_ch))
    layers.append(nn.LeakyReLU(0.2, inplace=True))
    return nn.Sequential(*layers)


def up_block(in_ch: int, out_ch: int, dropout: float = 0.0, norm: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = [nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1)]
    if norm:
        layers.append(nn.BatchNorm2d(out_ch))
    if dropout > 0:
        layers.append(nn.Dropout(dropout))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class UnetEncoder(nn.Module):
    """Stack of stride-2 convolutions; returns all intermediate features."""

    def __init__(self, in_ch: int, base: int, depth: int = 4):
        super().__init__()
        widths = [min(base * 2**i, base * 8) for i in range(depth)]
        blocks = [down_block(in_ch, widths[0], norm=False)]
        for i in range(1, depth):
            blocks.append(down_block(widths[i - 1], widths[i]))
        self.blocks = nn.ModuleList(blocks)
        self.widths = widths

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class UnetDecoder(nn.Module):
    """Mirror decoder consuming skip features from a UnetEncoder.

    Dropout (when enabled) sits in the innermost decoder blocks, the only
    stochasticity in the generators.
    """

    def __init__(self, out_ch: int, base: int, depth: int = 4, dropout: float = 0.0,
                 dropout_blocks: int = 3):
        super().__init__()
        widths = [min(base * 2**i, base * 8) for i in range(depth)]
        ups = []
        for i in range(depth - 1, 0, -1):
            in_w = widths[i] if i == depth - 1 else widths[i] * 2
            drop = dropout if (depth - 1 - i) < dropout_blocks else 0.0
            ups.append(up_block(in_w, widths[i - 1], dropout=drop))
        self.ups = nn.ModuleList(ups)
        final_in = widths[0] * 2 if depth > 1 else widths[0]
        self.final = nn.ConvTranspose2d(final_in, out_ch, 4, stride=2, padding=1)

    def forward(self, feats: list[Tensor]) -> Tensor:
        x = feats[-1]
        for i, up in enumerate(self.ups):
            x = up(x if i == 0 else torch.cat((x, feats[-1 - i]), dim=1))
        if len(feats) > 1:
            x = torch.cat((x, feats[0]), dim=1)
        return self.final(x)


class UnetGenerator(nn.Module):
    """Encoder-decoder with skip connections and a Tanh output."""

    def __init__(self, in_ch: int, out_ch: int, base: int = 16, depth: int = 4,
                 dropout: float = 0.5):
        super().__init__()
        self.encoder = UnetEncoder(in_ch, base, depth)
        self.decoder = UnetDecoder(out_ch, base, depth, dropout=dropout)

    def forward(self, x: Tensor) -> Tensor:
        return torch.tanh(self.decoder(self.encoder(x)))


class PlainEncoder(nn.Module):
    """Skip-less convolutional encoder (batch-normalized, ReLU)."""

    def __init__(self, in_ch: int, base: int, depth: int = 4):
        super().__init__()
        widths = [min(base * 2**i, base * 8) for i in range(depth)]
        layers: list[nn.Module] = []
        prev = in_ch
        for w in widths:
            layers += [nn.Conv2d(prev, w, 4, stride=2, padding=1), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            prev = w
        self.net = nn.Sequential(*layers)
        self.out_width = prev

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class PlainDecoder(nn.Module):
    """Skip-less transposed-conv decoder; caller applies the output unit."""

    def __init__(self, in_ch: int, out_ch: int, base: int, depth: int = 4):
        super().__init__()
        widths = [min(base * 2**i, base * 8) for i in range(depth)]
        layers: list[nn.Module] = []
        prev = in_ch
        for w in reversed(widths[:-1]):
            layers += [nn.ConvTranspose2d(prev, w, 4, stride=2, padding=1), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            prev = w
        layers.append(nn.ConvTranspose2d(prev, out_ch, 4, stride=2, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class PatchDiscriminator(nn.Module):
    """Patch-level convolutional classifier; outputs a logit map."""

    def __init__(self, in_ch: int, base: int = 16, n_layers: int = 3):
        super().__init__()
        layers: list[nn.Module] = [
            nn.Conv2d(in_ch, base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        prev = base
        for i in range(1, n_layers):
            width = min(base * 2**i, base * 8)
            stride = 2 if i < n_layers - 1 else 1
            layers += [
                nn.Conv2d(prev, width, 4, stride=stride, padding=1),
                nn.BatchNorm2d(width),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            prev = width
        layers.append(nn.Conv2d(prev, 1, 4, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


# ---------------------------------------------------------------------------
# Adversarial losses. Discriminator outputs are logits.
# ---------------------------------------------------------------------------

def gan_generator_loss(fake_logits: Tensor) -> Tensor:
    """Non-saturating generator side: -E[log D(fake)]; ln 2 at logit 0."""
    return F.softplus(-fake_logits).mean()


def gan_discriminator_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """Cross-entropy discriminator side, averaged over the real and fake
    halves so a constant D at probability 0.5 scores ln 2."""
    return 0.5 * (F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean())


def bce_loss(prob: Tensor, target: Tensor, clamp: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy on probabilities, clamped for log stability."""
    p = prob.clamp(clamp, 1.0 - clamp)
    return -(target * p.log() + (1.0 - target) * (1.0 - p).log()).mean()


def gradient_penalty(critic, real: Tensor, fake: Tensor, generator: torch.Generator | None = None) -> Tensor:
    """Penalize deviation of ||grad critic|| from 1 at real/fake interpolates.

    critic maps the interpolated tensor to scores; any conditioning is the
    caller's closure. Zero when the critic is linear with unit-norm weights.
    """
    b = real.shape[0]
    eps_shape = (b,) + (1,) * (real.dim() - 1)
    eps = torch.rand(eps_shape, dtype=real.dtype, device=real.device, generator=generator)
    interp = (eps * real + (1.0 - eps) * fake.detach()).requires_grad_(True)
    scores = critic(interp)
    grads = torch.autograd.grad(
        scores.sum(), interp, create_graph=True, retain_graph=True
    )[0]
    norms = grads.reshape(b, -1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
