"""Checkpoint bundles: weights, optimizer state, config echo, real-sample cache.

A composition checkpoint is everything test-time refinement needs: the
generator/discriminator/transformer weights, optimizer state to resume
training, the run's full config, and a small cache of real training
samples for discriminator updates at refinement time. Stage models (view
synthesis, inpainting) live in their own lighter files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .composer import CompositionModel
from .config import Config, config_dict, from_dict
from .inpaint import InpaintModel
from .stn import RelativeSTN
from .training import build_models
from .viewflow import ViewFlowNet


@dataclass
class CompositionCheckpoint:
    cfg: Config
    model: CompositionModel
    stn: RelativeSTN
    opt_g_state: dict | None
    opt_d_state: dict | None
    real_cache: dict | None
    step: int


def save_composition(
    path: str | Path,
    cfg: Config,
    model: CompositionModel,
    stn: RelativeSTN,
    opt_g=None,
    opt_d=None,
    real_cache: dict | None = None,
    step: int = 0,
) -> None:
    payload = {
        "kind": "composition",
        "config": config_dict(cfg),
        "model": model.state_dict(),
        "stn": stn.state_dict(),
        "opt_g": None if opt_g is None else opt_g.state_dict(),
        "opt_d": None if opt_d is None else opt_d.state_dict(),
        "real_cache": real_cache,
        "step": step,
    }
    torch.save(payload, path)


def load_composition(path: str | Path) -> CompositionCheckpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    required = ("kind", "config", "model", "stn")
    missing = [k for k in required if k not in payload]
    if missing or payload.get("kind") != "composition":
        raise ValueError(f"not a composition checkpoint (missing {missing}): {path}")
    cfg = from_dict(payload["config"])
    model, stn = build_models(cfg)
    model.load_state_dict(payload["model"])
    stn.load_state_dict(payload["stn"])
    return CompositionCheckpoint(
        cfg=cfg,
        model=model,
        stn=stn,
        opt_g_state=payload.get("opt_g"),
        opt_d_state=payload.get("opt_d"),
        real_cache=payload.get("real_cache"),
        step=int(payload.get("step", 0)),
    )


def save_viewflow(path: str | Path, cfg: Config, model: ViewFlowNet) -> None:
    torch.save({"kind": "viewflow", "config": config_dict(cfg), "model": model.state_dict()}, path)


def load_viewflow(path: str | Path) -> tuple[Config, ViewFlowNet]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "viewflow":
        raise ValueError(f"not a view-synthesis checkpoint: {path}")
    cfg = from_dict(payload["config"])
    model = ViewFlowNet(base=cfg.flow_base_channels, background=cfg.background_value)
    model.load_state_dict(payload["model"])
    return cfg, model


def save_inpaint(path: str | Path, cfg: Config, model: InpaintModel, domain: str) -> None:
    torch.save(
        {"kind": "inpaint", "domain": domain, "config": config_dict(cfg), "model": model.state_dict()},
        path,
    )


def load_inpaint(path: str | Path) -> tuple[Config, InpaintModel, str]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "inpaint":
        raise ValueError(f"not an inpainting checkpoint: {path}")
    cfg = from_dict(payload["config"])
    model = InpaintModel(base=cfg.inpaint_base_channels, dropout=cfg.dropout)
    model.load_state_dict(payload["model"])
    return cfg, model, payload.get("domain", "x")
