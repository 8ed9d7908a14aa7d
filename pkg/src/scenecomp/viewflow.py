"""Appearance-flow view synthesis conditioned on the partner object's mask.

Re-renders the first object in the viewpoint of the second one. The target
viewpoint is not given as an angle; it is encoded implicitly in the second
object's binary foreground mask, which is concatenated with the input image.
A shared convolutional encoder feeds two decoders: one predicts a per-pixel
flow field (Tanh, absolute normalized source coordinates) that resamples the
input image, the other predicts the synthesized view's foreground mask
(Sigmoid).
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from . import warp
from .nets import PlainDecoder, PlainEncoder, bce_loss


class ViewFlowNet(nn.Module):
    def __init__(self, base: int = 16, depth: int = 4, background: float = -1.0):
        super().__init__()
        self.background = background
        self.encoder = PlainEncoder(4, base, depth)
        self.flow_decoder = PlainDecoder(self.encoder.out_width, 2, base, depth)
        self.mask_decoder = PlainDecoder(self.encoder.out_width, 1, base, depth)

    def forward(self, x_r: Tensor, y_mask: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Synthesize the input object in the mask-encoded target view.

        x_r: (B, 3, H, W) object in an arbitrary view; y_mask: (B, H, W).
        Returns (x_synth, flow, fg_prob) with flow (B, 2, H, W) in [-1, 1]
        and fg_prob (B, H, W) in (0, 1).
        """
        if x_r.shape[-2:] != y_mask.shape[-2:] or x_r.shape[0] != y_mask.shape[0]:
            raise ValueError(
                f"shape mismatch: image {tuple(x_r.shape)} vs mask {tuple(y_mask.shape)}"
            )
        latent = self.encoder(torch.cat((x_r, y_mask.unsqueeze(1)), dim=1))
        flow = torch.tanh(self.flow_decoder(latent))
        fg_prob = torch.sigmoid(self.mask_decoder(latent)).squeeze(1)
        x_synth = warp.bilinear_sample(
            x_r, warp.flow_to_grid(flow), padding_value=self.background
        )
        return x_synth, flow, fg_prob


def view_synthesis_loss(
    x_synth: Tensor,
    x_gt: Tensor,
    fg_prob: Tensor,
    fg_gt: Tensor,
    mask_weight: float = 0.1,
) -> Tensor:
    """L1 to the target-view image plus weighted mask cross-entropy."""
    if torch.isnan(x_synth).any() or torch.isnan(fg_prob).any():
        raise ValueError("NaN in view synthesis outputs")
    recon = (x_synth - x_gt).abs().mean()
    return recon + mask_weight * bce_loss(fg_prob, fg_gt)
