"""Self-supervised inpainting used to turn unpaired data into paired data.

One network per object domain. Training corrupts a complete object image
with an occluder mask drawn from the opposite domain's mask pool, then asks
a conditional GAN to restore it. At conversion time the same networks
complete the occluded object cutouts of a real composite, producing the
paired placement targets.

The generator only ever fills the occluded region: its raw output is
composited as occ * generated + (1 - occ) * input, so unmasked pixels pass
through bitwise.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .core import BACKGROUND, labels_to_masks
from .nets import (
    PatchDiscriminator,
    UnetGenerator,
    gan_discriminator_loss,
    gan_generator_loss,
    gradient_penalty,
)


class InpaintModel(nn.Module):
    def __init__(self, base: int = 16, depth: int = 4, dropout: float = 0.5):
        super().__init__()
        # generator input: masked RGB + occlusion mask; D is conditioned on
        # the same 4 channels plus the 3-channel candidate.
        self.generator = UnetGenerator(4, 3, base=base, depth=depth, dropout=dropout)
        self.discriminator = PatchDiscriminator(7, base=base)

    def forward(self, masked: Tensor, occ: Tensor) -> Tensor:
        """Fill the occluded region; pass everything else through."""
        occ3 = occ.unsqueeze(1)
        raw = self.generator(torch.cat((masked, occ3), dim=1))
        return occ3 * raw + (1.0 - occ3) * masked


def make_occluded(img: Tensor, occluder: Tensor, background: float = BACKGROUND) -> tuple[Tensor, Tensor]:
    """Zero out (to background) the pixels under the occluder mask."""
    occ3 = occluder.unsqueeze(-3)
    masked = img * (1.0 - occ3) + background * occ3
    return masked, occluder


def translate_mask(mask: Tensor, dx: int, dy: int) -> Tensor:
    """Integer-shift a mask, zero-filling vacated pixels."""
    out = torch.zeros_like(mask)
    h, w = mask.shape[-2:]
    sy0, sy1 = max(0, -dy), min(h, h - dy)
    sx0, sx1 = max(0, -dx), min(w, w - dx)
    if sy0 < sy1 and sx0 < sx1:
        out[..., sy0 + dy : sy1 + dy, sx0 + dx : sx1 + dx] = mask[..., sy0:sy1, sx0:sx1]
    return out


def random_occluders(mask_pool: Tensor, batch: int, max_shift_frac: float = 0.25,
                     generator: torch.Generator | None = None) -> Tensor:
    """Draw occluders from the pool, each randomly translated."""
    n, h, w = mask_pool.shape
    idx = torch.randint(0, n, (batch,), generator=generator)
    max_dy = int(max_shift_frac * h)
    max_dx = int(max_shift_frac * w)
    shifts = torch.stack(
        (
            torch.randint(-max_dx, max_dx + 1, (batch,), generator=generator),
            torch.randint(-max_dy, max_dy + 1, (batch,), generator=generator),
        ),
        dim=1,
    )
    return torch.stack(
        [translate_mask(mask_pool[i], int(s[0]), int(s[1])) for i, s in zip(idx, shifts)]
    )


def inpaint_loss(
    model: InpaintModel,
    masked: Tensor,
    occ: Tensor,
    original: Tensor,
    gan_weight: float = 0.1,
    gp_weight: float = 10.0,
    gp_generator: torch.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Generator and discriminator objectives for one corrupted batch."""
    filled = model(masked, occ)
    cond = torch.cat((masked, occ.unsqueeze(1)), dim=1)

    def critic(candidate: Tensor) -> Tensor:
        return model.discriminator(torch.cat((cond.detach(), candidate), dim=1))

    g_loss = (filled - original).abs().mean()
    if gan_weight > 0:
        g_loss = g_loss + gan_weight * gan_generator_loss(critic(filled))
    d_loss = gan_discriminator_loss(critic(original), critic(filled.detach()))
    if gp_weight > 0:
        d_loss = d_loss + gp_weight * gradient_penalty(critic, original, filled, generator=gp_generator)
    if torch.isnan(g_loss) or torch.isnan(d_loss):
        raise ValueError("NaN in inpainting losses")
    return g_loss, d_loss


def convert_unpaired_to_paired(
    c: Tensor,
    c_labels: Tensor,
    model_x: InpaintModel,
    model_y: InpaintModel,
    background: float = BACKGROUND,
) -> tuple[Tensor, Tensor]:
    """Complete the two object cutouts of a composite image.

    The cutout of each object keeps only its visible segment; the region
    covered by the other object is handed to that domain's inpainting
    network to fill. Visible pixels pass through unchanged. Accepts a
    single example (3, H, W) or a batch.
    """
    single = c.dim() == 3
    if single:
        c = c.unsqueeze(0)
        c_labels = c_labels.unsqueeze(0)
    masks = [labels_to_masks(lbl) for lbl in c_labels]
    m_x = torch.stack([m[0] for m in masks])
    m_y = torch.stack([m[1] for m in masks])

    def complete(model: InpaintModel, own: Tensor, other: Tensor) -> Tensor:
        cutout = c * own.unsqueeze(1) + background * (1.0 - own.unsqueeze(1))
        with torch.no_grad():
            model.eval()
            return model(cutout, other)

    x_c = complete(model_x, m_x, m_y)
    y_c = complete(model_y, m_y, m_x)
    if single:
        return x_c[0], y_c[0]
    return x_c, y_c
