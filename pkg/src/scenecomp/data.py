"""Procedural toy scenes, dataset directory I/O, and augmentation.

Sprites are hard-edged convex polygons or disks rasterized on pixel
centers with no anti-aliasing, so their masks are exact and every render
is bitwise deterministic in (kind, azimuth, scale, color seed). Each
instance gets a distinct hue so texture preservation is observable.
Viewpoint is in-plane rotation on a 10-degree grid; within a composite
both objects share the same azimuth so mask-conditioned view synthesis is
well posed.

Directory layout: X/, X_mask/, Y/, Y_mask/, C/, C_labels/ plus meta.json.
Toy bundles additionally persist the pre-occlusion placed objects under
XC/, YC/ (and their masks) so placement targets survive a round trip.
"""

from __future__ import annotations

import colorsys
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import core
from .core import BACKGROUND, DataError, SceneExample

AZIMUTH_GRID = tuple(range(-180, 181, 10))

X_KINDS = ("square", "pentagon", "bar")
Y_KINDS = ("disk", "triangle", "wedge")

_UNIT_POLYGONS = {
    "square": [(np.cos(a), np.sin(a)) for a in np.pi / 4 + np.arange(4) * np.pi / 2],
    "pentagon": [(np.cos(a), np.sin(a)) for a in np.pi / 2 + np.arange(5) * 2 * np.pi / 5],
    "triangle": [(np.cos(a), np.sin(a)) for a in np.pi / 2 + np.arange(3) * 2 * np.pi / 3],
    "bar": [(1.0, 0.35), (-1.0, 0.35), (-1.0, -0.35), (1.0, -0.35)],
    "wedge": [(1.0, 0.0), (-0.55, 0.65), (-0.45, -0.3)],
}


@dataclass(frozen=True)
class ViewpointSpec:
    """In-plane rotation angle, restricted to the 10-degree grid."""

    azimuth: int

    def __post_init__(self):
        if self.azimuth not in AZIMUTH_GRID:
            raise ValueError(f"azimuth {self.azimuth} not on the 10-degree grid [-180, 180]")


def sprite_color(color_seed: int) -> np.ndarray:
    """Distinct saturated color on the 8-bit lattice, from a seed."""
    rng = np.random.default_rng(color_seed)
    hue = rng.uniform(0.0, 1.0)
    sat = rng.uniform(0.65, 1.0)
    val = rng.uniform(0.7, 1.0)
    rgb = np.array(colorsys.hsv_to_rgb(hue, sat, val))
    u8 = np.round(rgb * 255.0).astype(np.float32)
    # same float32 arithmetic as PNG decoding, so saved sprites round-trip
    # bitwise
    return u8 / np.float32(255.0) * np.float32(2.0) - np.float32(1.0)


def _rasterize(kind: str, azimuth_deg: float, radius: float, center: tuple[float, float],
               size: int) -> np.ndarray:
    """Boolean inside-mask of a sprite placed at center (cx, cy) in pixels."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xs - center[0]
    dy = ys - center[1]
    if kind == "disk":
        return dx * dx + dy * dy <= radius * radius
    if kind not in _UNIT_POLYGONS:
        raise ValueError(f"unknown sprite kind {kind!r}")
    ang = np.deg2rad(azimuth_deg)
    rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    verts = np.asarray(_UNIT_POLYGONS[kind]) @ rot.T * radius
    inside = np.ones((size, size), dtype=bool)
    m = len(verts)
    for i in range(m):
        ex, ey = verts[(i + 1) % m] - verts[i]
        inside &= (dx - verts[i][0]) * ey - (dy - verts[i][1]) * ex <= 0
    return inside


def render_sprite(
    kind: str,
    azimuth: ViewpointSpec | int,
    scale: float,
    color_seed: int,
    size: int = 64,
    background: float = BACKGROUND,
    center: tuple[float, float] | None = None,
) -> tuple[Tensor, Tensor]:
    """Render a sprite; scale is the circumradius in pixels.

    Deterministic per argument tuple. Returns (image, mask).
    """
    az = azimuth if isinstance(azimuth, ViewpointSpec) else ViewpointSpec(int(azimuth))
    if center is None:
        center = ((size - 1) / 2.0, (size - 1) / 2.0)
    inside = _rasterize(kind, az.azimuth, scale, center, size)
    color = sprite_color(color_seed)
    img = np.full((3, size, size), background, dtype=np.float32)
    img[:, inside] = color[:, None]
    return torch.from_numpy(img), torch.from_numpy(inside.astype(np.float32))


@dataclass
class ToyLayoutRule:
    """Relative placement of object B with respect to object A."""

    offset_frac: tuple[float, float] = (0.26, 0.1)
    scale_ratio: float = 0.62
    occlusion_order: str = "y_front"
    jitter_offset: float = 0.0
    jitter_scale: float = 0.0
    fill_a: float = 0.42

    def __post_init__(self):
        if self.scale_ratio <= 0:
            raise ValueError("scale_ratio must be positive")
        if self.occlusion_order not in ("x_front", "y_front"):
            raise ValueError(f"occlusion_order must be x_front or y_front, got {self.occlusion_order!r}")
        if not 0 < self.fill_a < 1:
            raise ValueError("fill_a must be in (0, 1)")


@dataclass
class DatasetBundle:
    """Tensors for the marginal sets X, Y and the composite set C.

    In paired mode index i of X/Y corresponds to composite i; x_c/y_c hold
    the placed (pre-occlusion) objects and x_c_mask/y_c_mask their full
    masks. In unpaired mode there is no index correspondence and the
    placement targets are absent until inpainting conversion fills them.
    """

    mode: str
    resolution: int
    x: Tensor
    x_mask: Tensor
    y: Tensor
    y_mask: Tensor
    c: Tensor | None = None
    c_labels: Tensor | None = None
    x_c: Tensor | None = None
    y_c: Tensor | None = None
    x_c_mask: Tensor | None = None
    y_c_mask: Tensor | None = None
    front: Tensor | None = None  # per composite: 1 if x occludes y, else 2
    recipes: dict | None = None  # generation provenance, not persisted

    def __len__(self) -> int:
        return self.x.shape[0]

    def num_composites(self) -> int:
        return 0 if self.c is None else self.c.shape[0]

    def example(self, i: int) -> SceneExample:
        paired = self.mode == "paired" and self.c is not None
        return SceneExample(
            x=self.x[i],
            y=self.y[i],
            mask_x=self.x_mask[i],
            mask_y=self.y_mask[i],
            paired=paired,
            c=None if self.c is None else self.c[i],
            c_labels=None if self.c_labels is None else self.c_labels[i],
            x_c=None if self.x_c is None else self.x_c[i],
            y_c=None if self.y_c is None else self.y_c[i],
        )


def _compose_scene(img_a, mask_a, img_b, mask_b, order: str, background: float):
    """Layer two placed sprites; front object wins overlapping pixels."""
    if order == "y_front":
        vis_a = mask_a * (1.0 - mask_b)
        vis_b = mask_b
    else:
        vis_a = mask_a
        vis_b = mask_b * (1.0 - mask_a)
    c = core.assemble_composite(img_a, img_b, vis_a, vis_b, background=background)
    labels = (vis_a > 0.5).to(torch.int64) + 2 * (vis_b > 0.5).to(torch.int64)
    return c, labels


def _bbox_inside(mask: Tensor, size: int, margin: int = 2) -> bool:
    if not (mask > 0.5).any():
        return False
    r0, r1, c0, c1 = core.mask_bbox(mask)
    return r0 >= margin and c0 >= margin and r1 < size - margin and c1 < size - margin


def generate_toy_dataset(
    rule: ToyLayoutRule,
    n: int,
    seed: int,
    mode: str = "paired",
    size: int = 64,
    background: float = BACKGROUND,
) -> DatasetBundle:
    """Scenes of one X-family and one Y-family sprite placed per the rule.

    Deterministic in (rule, n, seed); seeds are partitioned per example, so
    any parallel split produces the same records. In unpaired mode the
    composites come from a seed stream disjoint from X and Y (disjoint
    color seeds guarantee no shared identity triples).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if mode not in ("paired", "unpaired"):
        raise ValueError(f"mode must be paired or unpaired, got {mode!r}")

    def scene(stream: int, i: int, color_parity: int):
        rng = np.random.default_rng([seed, stream, i])
        kind_a = X_KINDS[rng.integers(len(X_KINDS))]
        kind_b = Y_KINDS[rng.integers(len(Y_KINDS))]
        azimuth = int(AZIMUTH_GRID[rng.integers(len(AZIMUTH_GRID))])
        color_a = int(rng.integers(0, 2**30)) * 2 + color_parity
        color_b = int(rng.integers(0, 2**30)) * 2 + color_parity
        radius_a = rule.fill_a * size / 2.0
        center_a = ((size - 1) / 2.0, (size - 1) / 2.0)
        for _ in range(20):
            jx, jy = rng.uniform(-rule.jitter_offset, rule.jitter_offset, 2)
            js = rng.uniform(-rule.jitter_scale, rule.jitter_scale)
            center_b = (
                center_a[0] + (rule.offset_frac[0] + jx) * size,
                center_a[1] + (rule.offset_frac[1] + jy) * size,
            )
            radius_b = radius_a * rule.scale_ratio * (1.0 + js)
            img_b, mask_b = render_sprite(
                kind_b, azimuth, radius_b, color_b, size, background, center=center_b
            )
            if _bbox_inside(mask_b, size):
                break
        else:
            raise DataError(f"layout rule pushes object B off-frame (example {i})")
        img_a, mask_a = render_sprite(kind_a, azimuth, radius_a, color_a, size, background)
        c, labels = _compose_scene(img_a, mask_a, img_b, mask_b, rule.occlusion_order, background)
        return {
            "kind_a": kind_a, "kind_b": kind_b, "azimuth": azimuth,
            "color_a": color_a, "color_b": color_b,
            "radius_a": radius_a, "radius_b": radius_b,
            "img_a": img_a, "mask_a": mask_a, "img_b": img_b, "mask_b": mask_b,
            "c": c, "labels": labels,
        }

    def marginal(stream: int, i: int, kinds, color_parity: int):
        rng = np.random.default_rng([seed, stream, i])
        kind = kinds[rng.integers(len(kinds))]
        azimuth = int(AZIMUTH_GRID[rng.integers(len(AZIMUTH_GRID))])
        color = int(rng.integers(0, 2**30)) * 2 + color_parity
        radius = rule.fill_a * size / 2.0
        img, mask = render_sprite(kind, azimuth, radius, color, size, background)
        return img, mask, (kind, radius, color)

    front_code = 1 if rule.occlusion_order == "x_front" else 2
    if mode == "paired":
        scenes = [scene(0, i, 1) for i in range(n)]
        # X/Y marginal images are the scene objects in canonical position:
        # A is already centered; B is re-rendered centered at its canonical
        # radius so the transformer has a consistent scale to learn.
        xs, ys = [], []
        for s in scenes:
            xs.append(render_sprite(s["kind_a"], s["azimuth"], rule.fill_a * size / 2.0,
                                    s["color_a"], size, background))
            ys.append(render_sprite(s["kind_b"], s["azimuth"], rule.fill_a * size / 2.0,
                                    s["color_b"], size, background))
        bundle = DatasetBundle(
            mode="paired",
            resolution=size,
            x=torch.stack([im for im, _ in xs]),
            x_mask=torch.stack([m for _, m in xs]),
            y=torch.stack([im for im, _ in ys]),
            y_mask=torch.stack([m for _, m in ys]),
            c=torch.stack([s["c"] for s in scenes]),
            c_labels=torch.stack([s["labels"] for s in scenes]),
            x_c=torch.stack([s["img_a"] for s in scenes]),
            y_c=torch.stack([s["img_b"] for s in scenes]),
            x_c_mask=torch.stack([s["mask_a"] for s in scenes]),
            y_c_mask=torch.stack([s["mask_b"] for s in scenes]),
            front=torch.full((n,), front_code, dtype=torch.int64),
            recipes={
                "c": [(s["kind_a"], s["radius_a"], s["color_a"]) for s in scenes]
                + [(s["kind_b"], s["radius_b"], s["color_b"]) for s in scenes],
            },
        )
        return bundle

    scenes = [scene(0, i, 0) for i in range(n)]
    xs = [marginal(1, i, X_KINDS, 1) for i in range(n)]
    ys = [marginal(2, i, Y_KINDS, 1) for i in range(n)]
    return DatasetBundle(
        mode="unpaired",
        resolution=size,
        x=torch.stack([im for im, _, _ in xs]),
        x_mask=torch.stack([m for _, m, _ in xs]),
        y=torch.stack([im for im, _, _ in ys]),
        y_mask=torch.stack([m for _, m, _ in ys]),
        c=torch.stack([s["c"] for s in scenes]),
        c_labels=torch.stack([s["labels"] for s in scenes]),
        front=torch.full((n,), front_code, dtype=torch.int64),
        recipes={
            "c": [(s["kind_a"], s["radius_a"], s["color_a"]) for s in scenes]
            + [(s["kind_b"], s["radius_b"], s["color_b"]) for s in scenes],
            "xy": [r for _, _, r in xs] + [r for _, _, r in ys],
        },
    )


def generate_view_dataset(
    n: int,
    seed: int,
    size: int = 64,
    azimuths: tuple[int, ...] = AZIMUTH_GRID,
    kinds: tuple[str, ...] = ("wedge",),
    mask_kinds: tuple[str, ...] = ("wedge",),
    fill: float = 0.5,
    background: float = BACKGROUND,
) -> dict[str, Tensor]:
    """Supervision for view synthesis: (input view, target view, target mask).

    Each record renders one X-family sprite at a source azimuth (x_r) and a
    target azimuth (x_gt with mask fg_gt), plus a Y-family sprite mask at
    the target azimuth (y_mask) encoding that viewpoint.
    """
    radius = fill * size / 2.0
    rows = {"x_r": [], "x_gt": [], "fg_gt": [], "y_mask": []}
    for i in range(n):
        rng = np.random.default_rng([seed, 3, i])
        kind = kinds[rng.integers(len(kinds))]
        mask_kind = mask_kinds[rng.integers(len(mask_kinds))]
        az_r = int(azimuths[rng.integers(len(azimuths))])
        az_t = int(azimuths[rng.integers(len(azimuths))])
        color = int(rng.integers(0, 2**30))
        x_r, _ = render_sprite(kind, az_r, radius, color, size, background)
        x_gt, fg_gt = render_sprite(kind, az_t, radius, color, size, background)
        _, y_mask = render_sprite(mask_kind, az_t, radius, color + 1, size, background)
        rows["x_r"].append(x_r)
        rows["x_gt"].append(x_gt)
        rows["fg_gt"].append(fg_gt)
        rows["y_mask"].append(y_mask)
    return {k: torch.stack(v) for k, v in rows.items()}


def augment_flip(bundle: DatasetBundle) -> DatasetBundle:
    """Append horizontal mirrors of every image, mask, and label map."""

    def flip_cat(t: Tensor | None) -> Tensor | None:
        return None if t is None else torch.cat((t, t.flip(-1)))

    def plain_cat(t: Tensor | None) -> Tensor | None:
        return None if t is None else torch.cat((t, t))

    return DatasetBundle(
        mode=bundle.mode,
        resolution=bundle.resolution,
        x=flip_cat(bundle.x),
        x_mask=flip_cat(bundle.x_mask),
        y=flip_cat(bundle.y),
        y_mask=flip_cat(bundle.y_mask),
        c=flip_cat(bundle.c),
        c_labels=flip_cat(bundle.c_labels),
        x_c=flip_cat(bundle.x_c),
        y_c=flip_cat(bundle.y_c),
        x_c_mask=flip_cat(bundle.x_c_mask),
        y_c_mask=flip_cat(bundle.y_c_mask),
        front=plain_cat(bundle.front),
    )


def dataset_checksum(bundle: DatasetBundle) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in ("x", "x_mask", "y", "y_mask", "c", "c_labels", "x_c", "y_c"):
        t = getattr(bundle, name)
        if t is not None:
            h.update(name.encode())
            h.update(t.numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Directory persistence
# ---------------------------------------------------------------------------

_DIRS = {
    "x": ("X", core.save_image, core.load_image),
    "x_mask": ("X_mask", core.save_mask, core.load_mask),
    "y": ("Y", core.save_image, core.load_image),
    "y_mask": ("Y_mask", core.save_mask, core.load_mask),
    "c": ("C", core.save_image, core.load_image),
    "c_labels": ("C_labels", core.save_label_map, core.load_label_map),
    "x_c": ("XC", core.save_image, core.load_image),
    "y_c": ("YC", core.save_image, core.load_image),
    "x_c_mask": ("XC_mask", core.save_mask, core.load_mask),
    "y_c_mask": ("YC_mask", core.save_mask, core.load_mask),
}


def save_dataset(bundle: DatasetBundle, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for attr, (dirname, saver, _) in _DIRS.items():
        tensor = getattr(bundle, attr)
        if tensor is None:
            continue
        sub = root / dirname
        sub.mkdir(exist_ok=True)
        for i in range(tensor.shape[0]):
            saver(tensor[i], sub / f"{i:05d}.png")
    meta = {
        "mode": bundle.mode,
        "resolution": bundle.resolution,
        "count_x": int(bundle.x.shape[0]),
        "count_y": int(bundle.y.shape[0]),
        "count_c": bundle.num_composites(),
        "front": None if bundle.front is None else bundle.front.tolist(),
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2))


def _load_dir(root: Path, dirname: str, loader, expected: int | None) -> Tensor | None:
    sub = root / dirname
    if not sub.is_dir():
        return None
    files = sorted(sub.glob("*.png"))
    if expected is not None and len(files) != expected:
        raise DataError(f"{sub} holds {len(files)} files, expected {expected}")
    if not files:
        return None
    return torch.stack([loader(f) for f in files])


def load_dataset(root: str | Path) -> DatasetBundle:
    """Read a dataset directory back into tensors, validating as it goes."""
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"missing manifest {meta_path}")
    meta = json.loads(meta_path.read_text())
    mode = meta.get("mode", "unpaired")
    res = int(meta.get("resolution", 0))

    x = _load_dir(root, "X", core.load_image, meta.get("count_x"))
    x_mask = _load_dir(root, "X_mask", core.load_mask, meta.get("count_x"))
    y = _load_dir(root, "Y", core.load_image, meta.get("count_y"))
    y_mask = _load_dir(root, "Y_mask", core.load_mask, meta.get("count_y"))
    if x is None or y is None or x_mask is None or y_mask is None:
        raise DataError(f"dataset at {root} is missing X/, X_mask/, Y/, or Y_mask/")

    c = _load_dir(root, "C", core.load_image, meta.get("count_c") or None)
    c_labels = _load_dir(root, "C_labels", core.load_label_map, meta.get("count_c") or None)
    if c is None:
        if mode == "paired":
            warnings.warn(f"dataset at {root} has no composites; switching to unpaired-incomplete")
            mode = "unpaired-incomplete"
    elif c_labels is None:
        if mode == "paired":
            raise DataError(f"paired dataset at {root} is missing {root / 'C_labels'}")
        warnings.warn(f"dataset at {root} has composites but no labels")

    x_c = _load_dir(root, "XC", core.load_image, None)
    y_c = _load_dir(root, "YC", core.load_image, None)
    x_c_mask = _load_dir(root, "XC_mask", core.load_mask, None)
    y_c_mask = _load_dir(root, "YC_mask", core.load_mask, None)
    if mode == "paired" and c is not None and x_c is None:
        # External paired data has no pre-occlusion objects; fall back to
        # the visible cutouts of each composite.
        mx = torch.stack([core.labels_to_masks(l)[0] for l in c_labels])
        my = torch.stack([core.labels_to_masks(l)[1] for l in c_labels])
        x_c = c * mx.unsqueeze(1) + BACKGROUND * (1 - mx.unsqueeze(1))
        y_c = c * my.unsqueeze(1) + BACKGROUND * (1 - my.unsqueeze(1))
        x_c_mask, y_c_mask = mx, my

    if res and x.shape[-1] != res:
        raise DataError(f"resolution mismatch: meta says {res}, X images are {x.shape[-1]}")
    front = meta.get("front")
    return DatasetBundle(
        mode=mode,
        resolution=res or x.shape[-1],
        x=x, x_mask=x_mask, y=y, y_mask=y_mask,
        c=c, c_labels=c_labels,
        x_c=x_c, y_c=y_c, x_c_mask=x_c_mask, y_c_mask=y_c_mask,
        front=None if front is None else torch.tensor(front, dtype=torch.int64),
    )
