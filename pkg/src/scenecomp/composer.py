"""Composition core: compose two placed objects, decompose the result back.

The composition generator consumes the two placed object images
channel-wise and emits the composite. A decomposition generator maps the
composite back to the two objects, providing the self-consistency signal
that supervises composition; a mask head sharing the decomposition encoder
predicts per-pixel {background, first object, second object} probabilities.
Patch discriminators score (objects, composite) and (composite, object)
pairs, with a gradient penalty regularizing each.

No noise input anywhere: dropout in the generators is the only source of
randomness.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .nets import (
    PatchDiscriminator,
    UnetDecoder,
    UnetEncoder,
    UnetGenerator,
    gan_discriminator_loss,
    gan_generator_loss,
    gradient_penalty,
)
from .stn import RelativeSTN, stn_l1_loss


class DivergenceError(RuntimeError):
    """A training loss went NaN; carries a diagnostic snapshot."""

    def __init__(self, message: str, state: dict | None = None):
        super().__init__(message)
        self.state = state or {}


@dataclass
class LossWeights:
    lambda1: float = 100.0
    lambda2: float = 50.0
    lambda3: float = 1.0
    gp_weight: float = 10.0


class Decomposer(nn.Module):
    """Shared encoder with an image decoder and a mask decoder."""

    def __init__(self, base: int = 16, depth: int = 4, dropout: float = 0.5):
        super().__init__()
        self.encoder = UnetEncoder(3, base, depth)
        self.image_decoder = UnetDecoder(6, base, depth, dropout=dropout)
        self.mask_decoder = UnetDecoder(3, base, depth, dropout=0.0)

    def forward(self, c_hat: Tensor) -> tuple[Tensor, Tensor]:
        feats = self.encoder(c_hat)
        images = torch.tanh(self.image_decoder(feats))
        mask_logits = self.mask_decoder(feats)
        return images, mask_logits


class CompositionModel(nn.Module):
    def __init__(self, base: int = 16, depth: int = 4, dropout: float = 0.5,
                 disc_base: int = 16):
        super().__init__()
        self.g_comp = UnetGenerator(6, 3, base=base, depth=depth, dropout=dropout)
        self.decomp = Decomposer(base=base, depth=depth, dropout=dropout)
        self.d_comp = PatchDiscriminator(9, base=disc_base)
        self.d_dec = PatchDiscriminator(6, base=disc_base)


def compose(model: CompositionModel, x_t: Tensor, y_t: Tensor, train: bool = False) -> Tensor:
    """Generate the composite of two placed objects."""
    if x_t.shape != y_t.shape:
        raise ValueError(f"shape mismatch: {tuple(x_t.shape)} vs {tuple(y_t.shape)}")
    model.g_comp.train(train)
    return model.g_comp(torch.cat((x_t, y_t), dim=1))


def decompose(model: CompositionModel, c_hat: Tensor, train: bool = False) -> tuple[Tensor, Tensor]:
    """Split a composite back into its two constituent object images."""
    model.decomp.train(train)
    feats = model.decomp.encoder(c_hat)
    images = torch.tanh(model.decomp.image_decoder(feats))
    return images[:, :3], images[:, 3:]


def _argmax_lowest(probs: Tensor) -> Tensor:
    """Per-pixel argmax over classes, ties resolved to the lower index."""
    p0, p1, p2 = probs.unbind(1)
    lab12 = torch.where(p1 >= p2, 1, 2).to(torch.int64)
    p12 = torch.maximum(p1, p2)
    return torch.where(p0 >= p12, torch.zeros_like(lab12), lab12)


def predict_masks(model: CompositionModel, c_hat: Tensor) -> tuple[Tensor, Tensor]:
    """Per-pixel class probabilities over {bg, x, y} and their argmax labels."""
    model.decomp.train(False)
    feats = model.decomp.encoder(c_hat)
    probs = F.softmax(model.decomp.mask_decoder(feats), dim=1)
    return probs, _argmax_lowest(probs)


def mask_ce_loss(probs: Tensor, c_labels: Tensor) -> Tensor:
    """Mean per-pixel categorical cross-entropy against integer labels."""
    picked = probs.gather(1, c_labels.unsqueeze(1)).clamp(min=1e-7)
    return -picked.log().mean()


def _conditioned_critic(disc: nn.Module, cond: Tensor):
    cond = cond.detach()

    def critic(candidate: Tensor) -> Tensor:
        return disc(torch.cat((cond, candidate), dim=1))

    return critic


def gan_losses_composition(
    model: CompositionModel,
    x_t: Tensor,
    y_t: Tensor,
    c_real: Tensor,
    c_hat: Tensor,
    gp_weight: float = 10.0,
    gp_generator: torch.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Generator- and discriminator-side scores for the composition GAN.

    The discriminator sees the 9-channel (x_t, y_t, candidate) stack. The
    condition is treated as a constant; candidate gradients are live on the
    generator side only.
    """
    critic = _conditioned_critic(model.d_comp, torch.cat((x_t, y_t), dim=1))
    g_term = gan_generator_loss(critic(c_hat))
    d_term = gan_discriminator_loss(critic(c_real.detach()), critic(c_hat.detach()))
    if gp_weight > 0:
        d_term = d_term + gp_weight * gradient_penalty(critic, c_real, c_hat, generator=gp_generator)
    return g_term, d_term


def gan_losses_decomposition(
    model: CompositionModel,
    c_hat: Tensor,
    x_c: Tensor,
    y_c: Tensor,
    x_hat: Tensor,
    y_hat: Tensor,
    gp_weight: float = 10.0,
    gp_generator: torch.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """One shared discriminator scores (composite, object) pairs: real
    objects are the placement targets, fakes the decomposed estimates."""
    critic = _conditioned_critic(model.d_dec, c_hat)
    g_term = 0.5 * (gan_generator_loss(critic(x_hat)) + gan_generator_loss(critic(y_hat)))
    d_term = 0.5 * (
        gan_discriminator_loss(critic(x_c.detach()), critic(x_hat.detach()))
        + gan_discriminator_loss(critic(y_c.detach()), critic(y_hat.detach()))
    )
    if gp_weight > 0:
        pen = gradient_penalty(critic, x_c, x_hat, generator=gp_generator) + gradient_penalty(
            critic, y_c, y_hat, generator=gp_generator
        )
        d_term = d_term + gp_weight * 0.5 * pen
    return g_term, d_term


@dataclass
class SceneBatch:
    """Stacked paired training tensors (converted or native)."""

    x: Tensor
    y: Tensor
    x_c: Tensor
    y_c: Tensor
    c: Tensor | None = None
    c_labels: Tensor | None = None


@dataclass
class PipelineOut:
    x_t: Tensor
    y_t: Tensor
    c_hat: Tensor
    x_hat: Tensor
    y_hat: Tensor
    probs: Tensor


def run_pipeline(model: CompositionModel, stn_model: RelativeSTN, batch: SceneBatch,
                 train: bool = True) -> PipelineOut:
    """Place, compose, decompose, and predict masks for one batch."""
    model.train(train)
    stn_model.train(train)
    x_t, y_t, _, _ = stn_model(batch.x, batch.y)
    c_hat = model.g_comp(torch.cat((x_t, y_t), dim=1))
    feats = model.decomp.encoder(c_hat)
    images = torch.tanh(model.decomp.image_decoder(feats))
    probs = F.softmax(model.decomp.mask_decoder(feats), dim=1)
    return PipelineOut(x_t, y_t, c_hat, images[:, :3], images[:, 3:], probs)


def generator_objective(
    model: CompositionModel,
    out: PipelineOut,
    batch: SceneBatch,
    weights: LossWeights,
    dec_target: str = "stn",
) -> tuple[Tensor, dict]:
    """Weighted full objective for all generator components."""
    if batch.c is None or batch.c_labels is None:
        raise ValueError("paired-mode batch is missing the composite or its labels")
    l1_comp = (batch.c - out.c_hat).abs().mean()
    if dec_target == "stn":
        target = torch.cat((out.x_t, out.y_t), dim=1)
    elif dec_target == "targets":
        target = torch.cat((batch.x_c, batch.y_c), dim=1)
    else:
        raise ValueError(f"unknown dec_target {dec_target!r}")
    l1_dec = (target - torch.cat((out.x_hat, out.y_hat), dim=1)).abs().mean()
    l1_stn = stn_l1_loss(out.x_t, out.y_t, batch.x_c, batch.y_c)
    ce = mask_ce_loss(out.probs, batch.c_labels)

    comp_critic = _conditioned_critic(model.d_comp, torch.cat((out.x_t, out.y_t), dim=1))
    dec_critic = _conditioned_critic(model.d_dec, out.c_hat)
    gan_comp = gan_generator_loss(comp_critic(out.c_hat))
    gan_dec = 0.5 * (
        gan_generator_loss(dec_critic(out.x_hat)) + gan_generator_loss(dec_critic(out.y_hat))
    )

    total = (
        weights.lambda1 * (l1_comp + l1_dec + l1_stn)
        + weights.lambda2 * ce
        + weights.lambda3 * (gan_comp + gan_dec)
    )
    metrics = {
        "l1_comp": float(l1_comp.detach()),
        "l1_dec": float(l1_dec.detach()),
        "l1_stn": float(l1_stn.detach()),
        "mask_ce": float(ce.detach()),
        "gan_g_comp": float(gan_comp.detach()),
        "gan_g_dec": float(gan_dec.detach()),
        "loss_g": float(total.detach()),
    }
    return total, metrics


def full_generator_loss(
    model: CompositionModel,
    stn_model: RelativeSTN,
    batch: SceneBatch,
    weights: LossWeights,
    dec_target: str = "stn",
    train: bool = True,
) -> tuple[Tensor, dict]:
    out = run_pipeline(model, stn_model, batch, train=train)
    return generator_objective(model, out, batch, weights, dec_target=dec_target)


def discriminator_objective(
    model: CompositionModel,
    out: PipelineOut,
    batch: SceneBatch,
    weights: LossWeights,
    gp_generator: torch.Generator | None = None,
) -> tuple[Tensor, dict]:
    _, d_comp_term = gan_losses_composition(
        model, out.x_t.detach(), out.y_t.detach(), batch.c, out.c_hat.detach(),
        gp_weight=weights.gp_weight, gp_generator=gp_generator,
    )
    _, d_dec_term = gan_losses_decomposition(
        model, out.c_hat.detach(), batch.x_c, batch.y_c,
        out.x_hat.detach(), out.y_hat.detach(),
        gp_weight=weights.gp_weight, gp_generator=gp_generator,
    )
    total = d_comp_term + d_dec_term
    metrics = {"d_comp": float(d_comp_term.detach()), "d_dec": float(d_dec_term.detach()), "loss_d": float(total.detach())}
    return total, metrics


def train_step(
    model: CompositionModel,
    stn_model: RelativeSTN,
    batch: SceneBatch,
    weights: LossWeights,
    opt_g: torch.optim.Optimizer,
    opt_d: torch.optim.Optimizer,
    dec_target: str = "stn",
    gp_generator: torch.Generator | None = None,
) -> dict:
    """One discriminator update, then one joint generator/STN update."""
    out = run_pipeline(model, stn_model, batch, train=True)

    opt_d.zero_grad(set_to_none=True)
    d_total, d_metrics = discriminator_objective(model, out, batch, weights, gp_generator)
    d_total.backward()
    opt_d.step()

    opt_g.zero_grad(set_to_none=True)
    g_total, g_metrics = generator_objective(model, out, batch, weights, dec_target=dec_target)
    g_total.backward()
    opt_g.step()

    metrics = {**g_metrics, **d_metrics}
    bad = [k for k, v in metrics.items() if v != v]
    if bad:
        raise DivergenceError(f"NaN in loss terms {bad}", state=metrics)
    return metrics
