"""Per-example test-time refinement of the composition/decomposition pair.

Given one test pair, the trained pipeline runs once to produce an initial
composite, then the composition generator and the decomposition image
decoder are fine-tuned on that single example. Supervision is the
decomposition of the current composite plus mask-gated consistency between
the composite and each placed object; masks come from the frozen mask
head and are recomputed from the current composite every step, as
constants (no gradient through the argmax).

Frozen throughout: the spatial transformer, view synthesis, the shared
decomposition encoder, the mask decoder, and (by default) both
discriminators. Refinement operates on a private copy of the weights; the
caller's checkpoint is never mutated.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .composer import CompositionModel, _conditioned_critic, _argmax_lowest
from .core import assemble_composite, labels_to_masks
from .nets import gan_discriminator_loss, gan_generator_loss
from .stn import RelativeSTN

import torch.nn.functional as F


def esmr_self_consistency(
    x_hat: Tensor, y_hat: Tensor, x_t: Tensor, y_t: Tensor, c_hat: Tensor,
    m_x: Tensor, m_y: Tensor,
) -> Tensor:
    """Sum of the four refinement L1 terms (unweighted).

    Two decomposition-consistency terms plus two mask-gated terms comparing
    the composite against each placed object inside its predicted mask.
    """
    mx = m_x.unsqueeze(-3)
    my = m_y.unsqueeze(-3)
    return (
        (x_hat - x_t).abs().mean()
        + (mx * (c_hat - x_t)).abs().mean()
        + (y_hat - y_t).abs().mean()
        + (my * (c_hat - y_t)).abs().mean()
    )


def esmr_loss(
    x_hat: Tensor, y_hat: Tensor, x_t: Tensor, y_t: Tensor, c_hat: Tensor,
    m_x: Tensor, m_y: Tensor, lam: float = 100.0,
    gan_terms: Tensor | float = 0.0,
) -> Tensor:
    """Weighted refinement objective; masks are treated as constants."""
    sc = esmr_self_consistency(x_hat, y_hat, x_t, y_t, c_hat, m_x.detach(), m_y.detach())
    return lam * sc + gan_terms


def weights_hash(module: nn.Module) -> str:
    """Content hash of a module's full state (parameters and buffers)."""
    h = hashlib.sha256()
    for key, tensor in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class RefineResult:
    c_before: Tensor
    c_after: Tensor
    labels: Tensor
    c_assembled: Tensor
    x_t: Tensor
    y_t: Tensor
    history: list[dict] = field(default_factory=list)


def _predict_masks_frozen(model: CompositionModel, c_hat: Tensor) -> Tensor:
    with torch.no_grad():
        feats = model.decomp.encoder(c_hat)
        probs = F.softmax(model.decomp.mask_decoder(feats), dim=1)
    return _argmax_lowest(probs)


def refine(
    model: CompositionModel,
    stn_model: RelativeSTN,
    x_test: Tensor,
    y_test: Tensor,
    steps: int = 100,
    lam: float = 100.0,
    lr: float = 1e-4,
    update_d: bool = False,
    real_cache: dict[str, Tensor] | None = None,
    seed: int = 0,
) -> RefineResult:
    """Fine-tune a private copy of the models on one centered test pair.

    x_test, y_test: (3, H, W) already centered. real_cache supplies cached
    training samples for discriminator updates when update_d is true.
    Returns composites before and after refinement, the predicted label
    map, and the mask-assembled composite.
    """
    if update_d and real_cache is None:
        raise ValueError("update_d requires the checkpoint's real-sample cache")
    model = copy.deepcopy(model)
    stn_model = copy.deepcopy(stn_model)
    torch.manual_seed(seed)

    model.eval()
    stn_model.eval()
    with torch.no_grad():
        x_t, y_t, _, _ = stn_model(x_test.unsqueeze(0), y_test.unsqueeze(0))
        c_before = model.g_comp(torch.cat((x_t, y_t), dim=1))

    tuned = list(model.g_comp.parameters()) + list(model.decomp.image_decoder.parameters())
    opt = torch.optim.Adam(tuned, lr=lr, betas=(0.5, 0.999))
    opt_d = None
    if update_d:
        d_params = list(model.d_comp.parameters()) + list(model.d_dec.parameters())
        opt_d = torch.optim.Adam(d_params, lr=lr, betas=(0.5, 0.999))

    history: list[dict] = []
    for step in range(steps):
        # dropout active in the tuned generators; frozen parts stay in eval
        # mode so their batch-norm buffers remain bit-identical.
        model.g_comp.train(True)
        model.decomp.image_decoder.train(True)
        model.decomp.encoder.train(False)
        model.decomp.mask_decoder.train(False)
        model.d_comp.train(update_d)
        model.d_dec.train(update_d)

        c_hat = model.g_comp(torch.cat((x_t, y_t), dim=1))
        feats = model.decomp.encoder(c_hat)
        images = torch.tanh(model.decomp.image_decoder(feats))
        x_hat, y_hat = images[:, :3], images[:, 3:]
        labels = _predict_masks_frozen(model, c_hat.detach())
        m_x, m_y = labels_to_masks(labels[0])
        m_x = m_x.unsqueeze(0)
        m_y = m_y.unsqueeze(0)

        comp_critic = _conditioned_critic(model.d_comp, torch.cat((x_t, y_t), dim=1))
        dec_critic = _conditioned_critic(model.d_dec, c_hat)
        gan = comp_critic(c_hat)
        gan = gan_generator_loss(gan) + 0.5 * (
            gan_generator_loss(dec_critic(x_hat)) + gan_generator_loss(dec_critic(y_hat))
        )
        sc = esmr_self_consistency(x_hat, y_hat, x_t, y_t, c_hat, m_x, m_y)
        loss = lam * sc + gan

        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

        if opt_d is not None:
            k = real_cache["c"].shape[0]
            i = step % k
            real_c = real_cache["c"][i : i + 1]
            real_x = real_cache["x_c"][i : i + 1]
            real_y = real_cache["y_c"][i : i + 1]
            d_loss = gan_discriminator_loss(
                model.d_comp(torch.cat((x_t, y_t, real_c), dim=1)),
                model.d_comp(torch.cat((x_t, y_t, c_hat.detach()), dim=1)),
            ) + 0.5 * (
                gan_discriminator_loss(
                    model.d_dec(torch.cat((c_hat.detach(), real_x), dim=1)),
                    model.d_dec(torch.cat((c_hat.detach(), x_hat.detach()), dim=1)),
                )
                + gan_discriminator_loss(
                    model.d_dec(torch.cat((c_hat.detach(), real_y), dim=1)),
                    model.d_dec(torch.cat((c_hat.detach(), y_hat.detach()), dim=1)),
                )
            )
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()

        history.append(
            {
                "step": step,
                "self_consistency": float(sc.detach()),
                "gan": float(gan.detach()),
                "loss": float(loss.detach()),
            }
        )

    model.eval()
    with torch.no_grad():
        c_after = model.g_comp(torch.cat((x_t, y_t), dim=1))
    labels = _predict_masks_frozen(model, c_after)[0]
    m_x, m_y = labels_to_masks(labels)
    c_assembled = assemble_composite(x_t[0], y_t[0], m_x, m_y)
    return RefineResult(
        c_before=c_before[0],
        c_after=c_after[0],
        labels=labels,
        c_assembled=c_assembled,
        x_t=x_t[0],
        y_t=y_t[0],
        history=history,
    )
