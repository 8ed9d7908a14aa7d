"""Command-line surface: staged training, inference, and reporting.

Commands write self-describing run directories: a full config echo, metrics
as line-delimited key-value records, checkpoints at fixed intervals, and
rendered PNG sample grids. Exit codes: 0 success, 2 config error, 3 data
error, 4 numerical divergence. The environment variable CODEGAN_SEED
overrides the config seed (an explicit --seed flag wins over both).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt
from . import core, report, training
from .composer import DivergenceError, predict_masks
from .config import Config, ConfigError, echo_config, load_config
from .core import DataError
from .data import (
    DatasetBundle,
    ToyLayoutRule,
    augment_flip,
    dataset_checksum,
    generate_toy_dataset,
    generate_view_dataset,
    load_dataset,
    save_dataset,
)
from .refine import refine

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


def _resolve_config(args) -> Config:
    cfg = load_config(getattr(args, "config", None))
    env_seed = os.environ.get("CODEGAN_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"CODEGAN_SEED must be an integer, got {env_seed!r}") from exc
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _rule_from(cfg: Config) -> ToyLayoutRule:
    return ToyLayoutRule(
        offset_frac=(cfg.layout_offset_x, cfg.layout_offset_y),
        scale_ratio=cfg.layout_scale_ratio,
        occlusion_order=cfg.layout_occlusion_order,
        jitter_offset=cfg.layout_jitter_offset,
        jitter_scale=cfg.layout_jitter_scale,
        fill_a=cfg.layout_fill_a,
    )


def _run_dir(args, cfg: Config) -> Path:
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, run / "config.cfg")
    return run


def _load_bundle(args, cfg: Config) -> DatasetBundle:
    if getattr(args, "data", None):
        bundle = load_dataset(args.data)
    else:
        bundle = generate_toy_dataset(
            _rule_from(cfg), cfg.toy_n, cfg.seed, mode=cfg.toy_mode,
            size=cfg.resolution, background=cfg.background_value,
        )
    if cfg.augment_flip:
        bundle = augment_flip(bundle)
    return bundle


def _centered_query(cfg: Config, img_path: str, mask_path: str | None):
    img = core.load_image(img_path)
    if mask_path:
        mask = core.load_mask(mask_path)
    else:
        mask = core.support_mask(img, cfg.background_value)
    if not (mask > 0.5).any():
        raise DataError(f"no foreground found in {img_path}")
    return core.center_and_scale(img, mask, cfg.target_fill, cfg.background_value)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_make_data(args) -> int:
    cfg = _resolve_config(args)
    if args.n is not None:
        cfg.toy_n = args.n
    if args.mode is not None:
        cfg.toy_mode = args.mode
    cfg.validate()
    bundle = generate_toy_dataset(
        _rule_from(cfg), cfg.toy_n, cfg.seed, mode=cfg.toy_mode,
        size=cfg.resolution, background=cfg.background_value,
    )
    out = Path(args.out)
    save_dataset(bundle, out)
    echo_config(cfg, out / "config.cfg")
    print(
        f"wrote {out}: mode={bundle.mode} counts={len(bundle)}/{len(bundle)}/{bundle.num_composites()} "
        f"checksum={dataset_checksum(bundle)[:16]}"
    )
    return EXIT_OK


def cmd_train_rafn(args) -> int:
    cfg = _resolve_config(args)
    run = _run_dir(args, cfg)
    training.seed_everything(cfg.seed)
    dataset = generate_view_dataset(cfg.toy_n, cfg.seed, size=cfg.resolution)
    model, history = training.train_viewflow(cfg, dataset, run_dir=run)
    (run / "checkpoints").mkdir(exist_ok=True)
    ckpt.save_viewflow(run / "checkpoints" / "viewflow.pt", cfg, model)
    model.eval()
    with torch.no_grad():
        x_synth, _, fg = model(dataset["x_r"][:6], dataset["y_mask"][:6])
    report.save_image_grid(
        [
            ("input view", list(dataset["x_r"][:6])),
            ("target mask", list(dataset["y_mask"][:6])),
            ("synthesized", list(x_synth)),
            ("target view", list(dataset["x_gt"][:6])),
            ("fg prob", list(fg)),
        ],
        run / "samples.png",
    )
    report.save_loss_curves(history, ["loss"], run / "loss.png")
    print(f"view synthesis trained for {len(history)} steps; final loss {history[-1]['loss']:.4f}")
    return EXIT_OK


def cmd_train_inpaint(args) -> int:
    cfg = _resolve_config(args)
    run = _run_dir(args, cfg)
    training.seed_everything(cfg.seed)
    bundle = _load_bundle(args, cfg)
    if args.domain == "x":
        images, pool = bundle.x, bundle.y_mask
    else:
        images, pool = bundle.y, bundle.x_mask
    model, history = training.train_inpaint_domain(cfg, images, pool, run_dir=run)
    (run / "checkpoints").mkdir(exist_ok=True)
    ckpt.save_inpaint(run / "checkpoints" / f"inpaint_{args.domain}.pt", cfg, model, args.domain)

    gen = torch.Generator().manual_seed(cfg.seed)
    from .inpaint import make_occluded, random_occluders

    occ = random_occluders(pool, 6, generator=gen)
    masked, _ = make_occluded(images[:6], occ, cfg.background_value)
    model.eval()
    with torch.no_grad():
        filled = model(masked, occ)
    report.save_image_grid(
        [("original", list(images[:6])), ("masked", list(masked)), ("filled", list(filled))],
        run / "samples.png",
    )
    report.save_loss_curves(history, ["g_loss", "d_loss"], run / "loss.png")
    print(f"inpainting[{args.domain}] trained for {len(history)} steps")
    return EXIT_OK


def cmd_train_code(args) -> int:
    cfg = _resolve_config(args)
    run = _run_dir(args, cfg)
    bundle = _load_bundle(args, cfg)
    if bundle.mode != "paired" or bundle.x_c is None:
        if not (args.inpaint_x and args.inpaint_y):
            raise ConfigError(
                "unpaired data needs --inpaint-x and --inpaint-y checkpoints for conversion"
            )
        _, model_x, _ = ckpt.load_inpaint(args.inpaint_x)
        _, model_y, _ = ckpt.load_inpaint(args.inpaint_y)
        bundle = training.convert_bundle(bundle, model_x, model_y, cfg)

    ckpt_dir = run / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    def on_epoch(state, epoch):
        if (epoch + 1) % cfg.checkpoint_interval == 0:
            training_cache = training._build_real_cache(
                state["tensors"], state["train_idx"], cfg.real_cache_size
            )
            ckpt.save_composition(
                ckpt_dir / f"code_epoch{epoch:03d}.pt", cfg, state["model"], state["stn"],
                state["opt_g"], state["opt_d"], training_cache, step=state["steps"],
            )

    state = training.train_composition(cfg, bundle, run_dir=run, on_epoch=on_epoch)
    ckpt.save_composition(
        ckpt_dir / "code.pt", cfg, state["model"], state["stn"],
        state["opt_g"], state["opt_d"], state["real_cache"], step=state["steps"],
    )
    last = state["evals"][-1]
    metrics = report.read_metrics(run / "metrics.txt")
    report.save_loss_curves(metrics, ["l1_comp", "l1_dec", "l1_stn", "mask_ce"], run / "loss.png")
    print(
        f"trained {state['steps']} steps over {len(state['evals'])} epochs; "
        f"held-out l1={last['eval_l1']:.4f} iou=({last['iou_bg']:.3f},{last['iou_x']:.3f},{last['iou_y']:.3f})"
    )
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg_ck = ckpt.load_composition(args.checkpoint)
    cfg = cfg_ck.cfg
    if args.steps is not None:
        cfg.esmr_steps = args.steps
    env_seed = os.environ.get("CODEGAN_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x_cen, x_mask = _centered_query(cfg, args.x, args.x_mask)
    y_cen, y_mask = _centered_query(cfg, args.y, args.y_mask)

    if args.flow_checkpoint:
        _, flow_model = ckpt.load_viewflow(args.flow_checkpoint)
        flow_model.eval()
        with torch.no_grad():
            x_cen, _, _ = flow_model(x_cen.unsqueeze(0), y_mask.unsqueeze(0))
        x_cen = x_cen[0]

    result = refine(
        cfg_ck.model, cfg_ck.stn, x_cen, y_cen,
        steps=cfg.esmr_steps, lam=cfg.esmr_lambda, lr=cfg.esmr_lr,
        update_d=cfg.esmr_update_d, real_cache=cfg_ck.real_cache, seed=cfg.seed,
    )
    core.save_image(result.c_before, out_dir / "c_before.png")
    core.save_image(result.c_after, out_dir / "c_after.png")
    core.save_image(result.c_assembled, out_dir / "c_assembled.png")
    core.save_label_map(result.labels, out_dir / "labels.png")
    if result.history:
        writer = report.MetricsWriter(out_dir / "refine_metrics.txt")
        for rec in result.history:
            writer.write(rec)
    report.save_image_grid(
        [
            ("inputs", [x_cen, y_cen]),
            ("placed", [result.x_t, result.y_t]),
            ("before/after", [result.c_before, result.c_after]),
            ("assembled/labels", [result.c_assembled, result.labels.float()]),
        ],
        out_dir / "summary.png",
    )
    print(f"wrote {out_dir}/c_before.png c_after.png c_assembled.png labels.png")
    return EXIT_OK


def encoder_extractor(model):
    """Pooled decomposition-encoder features as the retrieval embedding."""

    def extract(images: torch.Tensor) -> torch.Tensor:
        model.decomp.encoder.eval()
        with torch.no_grad():
            feats = model.decomp.encoder(images)
        return feats[-1].mean(dim=(2, 3))

    return extract


def nearest_neighbor(x, y, train: DatasetBundle, extractor):
    """Training composite whose constituent objects are closest in feature
    space (summed Euclidean distance; ties go to the lowest index)."""
    if train.c is None or train.c.shape[0] == 0:
        raise DataError("training set has no composites")
    fx = extractor(x.unsqueeze(0))[0]
    fy = extractor(y.unsqueeze(0))[0]
    feats_x = extractor(train.x)
    feats_y = extractor(train.y)
    dist = (feats_x - fx).norm(dim=1) + (feats_y - fy).norm(dim=1)
    best = int(dist.argmin())  # torch argmin returns the first minimum
    return train.c[best], best, float(dist[best])


def cmd_eval_nn(args) -> int:
    cfg_ck = ckpt.load_composition(args.checkpoint)
    cfg = cfg_ck.cfg
    bundle = load_dataset(args.data)
    x = core.load_image(args.x)
    y = core.load_image(args.y)
    extractor = encoder_extractor(cfg_ck.model)
    composite, index, distance = nearest_neighbor(x, y, bundle, extractor)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    core.save_image(composite, out_dir / "nn.png")
    (out_dir / "nn.txt").write_text(f"index={index} distance={distance:.8g}\n")
    report.save_image_grid(
        [("query", [x, y]), ("nearest composite", [composite])],
        out_dir / "nn_summary.png",
    )
    print(f"nearest neighbor: index={index} distance={distance:.6f}")
    return EXIT_OK


def cmd_emit_grid(args) -> int:
    bundle = load_dataset(args.data)
    n = min(args.n, len(bundle))
    rows = [("x", list(bundle.x[:n])), ("y", list(bundle.y[:n]))]
    if bundle.c is not None:
        m = min(args.n, bundle.num_composites())
        rows.append(("composite", list(bundle.c[:m])))
        if bundle.c_labels is not None:
            rows.append(("labels", [l.float() for l in bundle.c_labels[:m]]))
    report.save_image_grid(rows, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenecomp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if needs_out:
            p.add_argument("--out", required=True, help="run/output directory")

    p = sub.add_parser("make-data", help="generate a toy dataset directory")
    common(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--mode", choices=("paired", "unpaired"), default=None)
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("train-rafn", help="train the appearance-flow view synthesizer")
    common(p)
    p.set_defaults(fn=cmd_train_rafn)

    p = sub.add_parser("train-inpaint", help="train one domain's inpainting network")
    common(p)
    p.add_argument("--domain", choices=("x", "y"), required=True)
    p.add_argument("--data", default=None, help="dataset directory (default: generated toy)")
    p.set_defaults(fn=cmd_train_inpaint)

    p = sub.add_parser("train-code", help="train the composition/decomposition core")
    common(p)
    p.add_argument("--data", default=None, help="dataset directory (default: generated toy)")
    p.add_argument("--inpaint-x", default=None, help="inpainting checkpoint for domain x")
    p.add_argument("--inpaint-y", default=None, help="inpainting checkpoint for domain y")
    p.set_defaults(fn=cmd_train_code)

    p = sub.add_parser("infer", help="compose one test pair with test-time refinement")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--x-mask", default=None)
    p.add_argument("--y-mask", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--flow-checkpoint", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval-nn", help="nearest-neighbor training composite for a query pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_eval_nn)

    p = sub.add_parser("emit-grid", help="render a dataset sample grid to PNG")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.set_defaults(fn=cmd_emit_grid)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        dump = Path(getattr(args, "out", ".")) / "divergence_dump.pt"
        try:
            torch.save({"state": exc.state}, dump)
            print(f"diagnostic state written to {dump}", file=sys.stderr)
        except OSError:
            pass
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    raise SystemExit(main())
