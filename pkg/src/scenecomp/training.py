"""Training loops and evaluation for the staged pipeline.

Every loop is deterministic under a fixed seed: model init comes off the
global torch RNG right after seeding, batch order comes from a dedicated
generator, and stochastic loss terms (gradient-penalty interpolates,
occluder placement) draw from their own seeded generators.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
import torch

from . import core, report
from .composer import (
    CompositionModel,
    LossWeights,
    SceneBatch,
    compose,
    predict_masks,
    train_step,
)
from .config import Config
from .data import DatasetBundle, generate_view_dataset
from .inpaint import InpaintModel, inpaint_loss, make_occluded, random_occluders
from .inpaint import convert_unpaired_to_paired
from .stn import RelativeSTN, stn_l1_loss
from .viewflow import ViewFlowNet, view_synthesis_loss


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def build_models(cfg: Config) -> tuple[CompositionModel, RelativeSTN]:
    model = CompositionModel(
        base=cfg.gen_base_channels, disc_base=cfg.disc_base_channels, dropout=cfg.dropout
    )
    stn_model = RelativeSTN(
        image_size=cfg.resolution, base=cfg.stn_base_channels, fc_dim=cfg.stn_fc_dim,
        background=cfg.background_value,
    )
    return model, stn_model


def build_optimizers(cfg: Config, model: CompositionModel, stn_model: RelativeSTN):
    gen_params = (
        list(model.g_comp.parameters())
        + list(model.decomp.parameters())
        + list(stn_model.parameters())
    )
    disc_params = list(model.d_comp.parameters()) + list(model.d_dec.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(disc_params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    return opt_g, opt_d


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------

def center_stack(images: torch.Tensor, masks: torch.Tensor, cfg: Config) -> torch.Tensor:
    out = []
    for img, mask in zip(images, masks):
        cen, _ = core.center_and_scale(img, mask, cfg.target_fill, cfg.background_value)
        out.append(cen)
    return torch.stack(out)


def paired_tensors(bundle: DatasetBundle, cfg: Config) -> SceneBatch:
    """Centered inputs plus placement/composite targets for a paired bundle."""
    if bundle.c is None or bundle.x_c is None:
        raise core.DataError("bundle has no composites or placement targets; convert it first")
    return SceneBatch(
        x=center_stack(bundle.x, bundle.x_mask, cfg),
        y=center_stack(bundle.y, bundle.y_mask, cfg),
        x_c=bundle.x_c,
        y_c=bundle.y_c,
        c=bundle.c,
        c_labels=bundle.c_labels,
    )


def convert_bundle(
    bundle: DatasetBundle, model_x: InpaintModel, model_y: InpaintModel, cfg: Config
) -> DatasetBundle:
    """Turn an unpaired bundle into a paired one via inpainted cutouts.

    The completed objects become the placement targets and, centered, the
    training inputs; composites whose label map lacks an object class are
    skipped with a warning.
    """
    if bundle.c is None or bundle.c_labels is None:
        raise core.DataError("unpaired bundle has no composites to convert")
    keep = []
    for i in range(bundle.c.shape[0]):
        classes = bundle.c_labels[i].unique().tolist()
        if 1 in classes and 2 in classes:
            keep.append(i)
        else:
            warnings.warn(f"composite {i} lacks an object class {classes}; skipped")
    c = bundle.c[keep]
    c_labels = bundle.c_labels[keep]
    x_c, y_c = convert_unpaired_to_paired(c, c_labels, model_x, model_y, cfg.background_value)
    x_masks = torch.stack([core.support_mask(img, cfg.background_value) for img in x_c])
    y_masks = torch.stack([core.support_mask(img, cfg.background_value) for img in y_c])
    return DatasetBundle(
        mode="paired",
        resolution=bundle.resolution,
        x=x_c,
        x_mask=x_masks,
        y=y_c,
        y_mask=y_masks,
        c=c,
        c_labels=c_labels,
        x_c=x_c,
        y_c=y_c,
        front=None if bundle.front is None else bundle.front[keep],
    )


def split_indices(n: int, holdout_fraction: float) -> tuple[list[int], list[int]]:
    n_hold = int(round(n * holdout_fraction))
    n_hold = min(max(n_hold, 1 if holdout_fraction > 0 else 0), n - 1)
    return list(range(n - n_hold)), list(range(n - n_hold, n))


def _index_batch(t: SceneBatch, idx) -> SceneBatch:
    return SceneBatch(
        x=t.x[idx], y=t.y[idx], x_c=t.x_c[idx], y_c=t.y_c[idx],
        c=t.c[idx], c_labels=t.c_labels[idx],
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def class_iou(pred: torch.Tensor, target: torch.Tensor, cls: int) -> float:
    p = pred == cls
    t = target == cls
    union = (p | t).sum().item()
    if union == 0:
        return 1.0
    return (p & t).sum().item() / union


@torch.no_grad()
def evaluate_composition(
    model: CompositionModel,
    stn_model: RelativeSTN,
    tensors: SceneBatch,
    idx: list[int],
    overlap_front: tuple[torch.Tensor, torch.Tensor] | None = None,
    batch_size: int = 16,
) -> dict:
    """Held-out L1, per-class label IoU, and occlusion-order accuracy.

    overlap_front: (overlap mask over composites, front-class codes) from
    toy ground truth; occlusion accuracy is skipped when unavailable.
    """
    if not idx:
        return {"eval_l1": float("nan"), "iou_bg": float("nan"),
                "iou_x": float("nan"), "iou_y": float("nan")}
    model.eval()
    stn_model.eval()
    l1_sum = 0.0
    n = 0
    preds = []
    for start in range(0, len(idx), batch_size):
        chunk = idx[start : start + batch_size]
        b = _index_batch(tensors, chunk)
        x_t, y_t, _, _ = stn_model(b.x, b.y)
        c_hat = model.g_comp(torch.cat((x_t, y_t), dim=1))
        l1_sum += (c_hat - b.c).abs().mean().item() * len(chunk)
        n += len(chunk)
        _, labels = predict_masks(model, c_hat)
        preds.append(labels)
    pred_labels = torch.cat(preds)
    gt_labels = tensors.c_labels[idx]
    out = {
        "eval_l1": l1_sum / n,
        "iou_bg": class_iou(pred_labels, gt_labels, 0),
        "iou_x": class_iou(pred_labels, gt_labels, 1),
        "iou_y": class_iou(pred_labels, gt_labels, 2),
    }
    if overlap_front is not None:
        overlap, front = overlap_front
        overlap = overlap[idx]
        front = front[idx]
        total = overlap.sum().item()
        if total > 0:
            correct = ((pred_labels == front.view(-1, 1, 1)) & (overlap > 0.5)).sum().item()
            out["occlusion_acc"] = correct / total
    return out


# ---------------------------------------------------------------------------
# Stage training loops
# ---------------------------------------------------------------------------

def train_stn_alone(
    cfg: Config,
    tensors: SceneBatch,
    stn_model: RelativeSTN,
    steps: int,
    writer: report.MetricsWriter | None = None,
) -> list[float]:
    """Optimize only the spatial transformer on its placement L1."""
    opt = torch.optim.Adam(stn_model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    order = torch.Generator().manual_seed(cfg.seed + 17)
    n = tensors.x.shape[0]
    history = []
    stn_model.train()
    for step in range(steps):
        idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=order)
        b = _index_batch(tensors, idx)
        x_t, y_t, _, _ = stn_model(b.x, b.y)
        loss = stn_l1_loss(x_t, y_t, b.x_c, b.y_c)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        value = float(loss.detach())
        history.append(value)
        if writer is not None:
            writer.write({"step": step, "stn_l1": value})
    return history


def train_inpaint_domain(
    cfg: Config,
    images: torch.Tensor,
    occluder_pool: torch.Tensor,
    run_dir: Path | None = None,
    steps: int | None = None,
) -> tuple[InpaintModel, list[dict]]:
    """Self-supervised inpainting for one domain.

    images: complete object images of the domain; occluder_pool: the other
    domain's segmentation masks, randomly translated before application.
    """
    steps = cfg.inpaint_steps if steps is None else steps
    model = InpaintModel(base=cfg.inpaint_base_channels, dropout=cfg.dropout)
    opt_g = torch.optim.Adam(model.generator.parameters(), lr=cfg.inpaint_lr,
                             betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=cfg.inpaint_lr,
                             betas=(cfg.beta1, cfg.beta2))
    order = torch.Generator().manual_seed(cfg.seed + 23)
    occ_gen = torch.Generator().manual_seed(cfg.seed + 29)
    gp_gen = torch.Generator().manual_seed(cfg.seed + 31)
    writer = report.MetricsWriter(run_dir / "metrics.txt") if run_dir else None
    n = images.shape[0]
    history = []
    model.train()
    for step in range(steps):
        idx = torch.randint(0, n, (min(cfg.inpaint_batch, n),), generator=order)
        batch = images[idx]
        occ = random_occluders(occluder_pool, batch.shape[0], generator=occ_gen)
        masked, _ = make_occluded(batch, occ, cfg.background_value)

        g_loss, d_loss = inpaint_loss(
            model, masked, occ, batch,
            gan_weight=cfg.inpaint_gan_weight, gp_weight=cfg.gp_weight, gp_generator=gp_gen,
        )
        # generator first: its adversarial term was built against the
        # current discriminator weights, which the D step mutates in place
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        opt_d.step()

        rec = {"step": step, "g_loss": float(g_loss.detach()), "d_loss": float(d_loss.detach())}
        history.append(rec)
        if writer is not None:
            writer.write(rec)
    return model, history


@torch.no_grad()
def masked_region_l1(model: InpaintModel, images: torch.Tensor, occ: torch.Tensor,
                     background: float = -1.0) -> float:
    """Reconstruction error restricted to the occluded region."""
    model.eval()
    masked, _ = make_occluded(images, occ, background)
    filled = model(masked, occ)
    weight = occ.unsqueeze(1)
    denom = weight.sum() * images.shape[1]
    return float(((filled - images).abs() * weight).sum() / denom)


def train_viewflow(
    cfg: Config,
    dataset: dict[str, torch.Tensor] | None = None,
    run_dir: Path | None = None,
    steps: int | None = None,
) -> tuple[ViewFlowNet, list[dict]]:
    """Supervised appearance-flow view synthesis on toy view pairs."""
    steps = cfg.flow_steps if steps is None else steps
    if dataset is None:
        dataset = generate_view_dataset(cfg.toy_n, cfg.seed, size=cfg.resolution)
    model = ViewFlowNet(base=cfg.flow_base_channels, background=cfg.background_value)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.flow_lr, betas=(cfg.beta1, cfg.beta2))
    order = torch.Generator().manual_seed(cfg.seed + 37)
    writer = report.MetricsWriter(run_dir / "metrics.txt") if run_dir else None
    n = dataset["x_r"].shape[0]
    history = []
    model.train()
    for step in range(steps):
        idx = torch.randint(0, n, (min(cfg.flow_batch, n),), generator=order)
        x_synth, _, fg_prob = model(dataset["x_r"][idx], dataset["y_mask"][idx])
        loss = view_synthesis_loss(
            x_synth, dataset["x_gt"][idx], fg_prob, dataset["fg_gt"][idx],
            mask_weight=cfg.flow_mask_weight,
        )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rec = {"step": step, "loss": float(loss.detach())}
        history.append(rec)
        if writer is not None:
            writer.write(rec)
    return model, history


def train_composition(
    cfg: Config,
    bundle: DatasetBundle,
    run_dir: Path | None = None,
    epochs: int | None = None,
    stop_when: dict | None = None,
    on_epoch=None,
) -> dict:
    """Full joint training of the composition core and the transformer.

    Returns the final state and per-epoch evaluations. stop_when, if given,
    maps evaluation keys to thresholds; training stops early once every
    threshold is met ("eval_l1_ratio" compares against the first epoch).
    on_epoch(state, epoch) runs after each epoch's evaluation, e.g. for
    interval checkpointing.
    """
    epochs = cfg.epochs if epochs is None else epochs
    seed_everything(cfg.seed)
    model, stn_model = build_models(cfg)
    opt_g, opt_d = build_optimizers(cfg, model, stn_model)
    weights = LossWeights(cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.gp_weight)
    gp_gen = torch.Generator().manual_seed(cfg.seed + 41)
    order = torch.Generator().manual_seed(cfg.seed + 43)

    tensors = paired_tensors(bundle, cfg)
    train_idx, hold_idx = split_indices(tensors.x.shape[0], cfg.holdout_fraction)
    overlap_front = None
    if bundle.x_c_mask is not None and bundle.front is not None:
        overlap_front = (bundle.x_c_mask * bundle.y_c_mask, bundle.front)

    writer = report.MetricsWriter(run_dir / "metrics.txt") if run_dir else None
    eval_writer = report.MetricsWriter(run_dir / "eval.txt") if run_dir else None

    if cfg.stn_pretrain_steps > 0:
        train_stn_alone(cfg, _index_batch(tensors, train_idx), stn_model, cfg.stn_pretrain_steps)

    state = {
        "model": model,
        "stn": stn_model,
        "opt_g": opt_g,
        "opt_d": opt_d,
        "evals": [],
        "tensors": tensors,
        "train_idx": train_idx,
        "hold_idx": hold_idx,
        "steps": 0,
    }
    for epoch in range(epochs):
        perm = torch.randperm(len(train_idx), generator=order)
        for start in range(0, len(perm), cfg.batch_size):
            chunk = [train_idx[i] for i in perm[start : start + cfg.batch_size]]
            if len(chunk) < 2:
                continue  # batch-norm needs more than one example
            metrics = train_step(
                model, stn_model, _index_batch(tensors, chunk), weights, opt_g, opt_d,
                dec_target=cfg.dec_target, gp_generator=gp_gen,
            )
            if writer is not None:
                writer.write({"step": state["steps"], "epoch": epoch, **metrics})
            state["steps"] += 1
        ev = evaluate_composition(model, stn_model, tensors, hold_idx, overlap_front,
                                  batch_size=cfg.batch_size)
        ev = {"epoch": epoch, **ev}
        state["evals"].append(ev)
        if eval_writer is not None:
            eval_writer.write(ev)
        if run_dir is not None and (epoch + 1) % cfg.sample_interval == 0:
            _save_samples(model, stn_model, tensors, hold_idx[:6], run_dir, epoch)
        if on_epoch is not None:
            on_epoch(state, epoch)
        if stop_when and _met(stop_when, state["evals"]):
            break

    state["real_cache"] = _build_real_cache(tensors, train_idx, cfg.real_cache_size)
    return state


def _met(stop_when: dict, evals: list[dict]) -> bool:
    last = evals[-1]
    first = evals[0]
    for key, bound in stop_when.items():
        if key == "eval_l1_ratio":
            if last["eval_l1"] > bound * first["eval_l1"]:
                return False
        elif key == "min_iou":
            if min(last["iou_x"], last["iou_y"], last["iou_bg"]) < bound:
                return False
        elif key == "occlusion_acc":
            if last.get("occlusion_acc", 0.0) < bound:
                return False
        else:
            raise ValueError(f"unknown stop criterion {key}")
    return True


def _build_real_cache(tensors: SceneBatch, train_idx: list[int], k: int) -> dict:
    take = train_idx[:k]
    return {
        "c": tensors.c[take].clone(),
        "x_c": tensors.x_c[take].clone(),
        "y_c": tensors.y_c[take].clone(),
        "x": tensors.x[take].clone(),
        "y": tensors.y[take].clone(),
    }


@torch.no_grad()
def _save_samples(model, stn_model, tensors, idx, run_dir: Path, epoch: int) -> None:
    if not idx:
        return
    model.eval()
    stn_model.eval()
    b = _index_batch(tensors, idx)
    x_t, y_t, _, _ = stn_model(b.x, b.y)
    c_hat = model.g_comp(torch.cat((x_t, y_t), dim=1))
    _, labels = predict_masks(model, c_hat)
    samples = run_dir / "samples"
    samples.mkdir(exist_ok=True)
    report.save_image_grid(
        [
            ("x", list(b.x)),
            ("y", list(b.y)),
            ("placed x", list(x_t)),
            ("placed y", list(y_t)),
            ("composite", list(c_hat)),
            ("real", list(b.c)),
            ("labels", [l.float() for l in labels]),
        ],
        samples / f"epoch_{epoch:03d}.png",
    )
