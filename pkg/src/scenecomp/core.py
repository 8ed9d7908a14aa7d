"""Domain types and deterministic image/mask utilities.

Tensor conventions used across the package:
  - Image: float32 torch tensor (3, H, W), values in [-1, 1], finite.
  - BinaryMask: float32 tensor (H, W) with values in {0, 1}.
  - SegLabelMap: int64 tensor (H, W) with values {0=background, 1=first
    object, 2=second object}.
Batched variants prepend a batch dimension. Pixels nobody claims take the
background value, -1 by default (black after denormalization).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage
from torch import Tensor

from . import warp

BACKGROUND = -1.0

# Displacement (in pixels, at the grid corners) below which a centering
# transform is collapsed to the identity. Corrections this small are
# below the resolution of hard-mask bounding boxes and would only blur.
_SNAP_PX = 1.25


class DataError(Exception):
    """Malformed dataset content (bad file, bad label value, bad shape)."""


def check_image(img: Tensor, name: str = "image") -> None:
    if img.dim() != 3 or img.shape[0] != 3:
        raise ValueError(f"{name} must be (3, H, W), got {tuple(img.shape)}")
    if not torch.isfinite(img).all():
        raise ValueError(f"{name} contains non-finite values")


def check_mask(mask: Tensor, name: str = "mask") -> None:
    if mask.dim() != 2:
        raise ValueError(f"{name} must be (H, W), got {tuple(mask.shape)}")
    bad = ~((mask == 0) | (mask == 1))
    if bad.any():
        raise ValueError(f"{name} must be exactly binary")


def clamp_image(img: Tensor) -> Tensor:
    """Enforce the [-1, 1] range contract on an image-producing op."""
    return img.clamp(-1.0, 1.0)


@dataclass
class SceneExample:
    """One training record: two objects, their masks, and pairing data.

    x_c / y_c are the ground-truth placed objects matching the composite
    (native in paired mode, inpainted cutouts after unpaired conversion).
    """

    x: Tensor
    y: Tensor
    mask_x: Tensor
    mask_y: Tensor
    paired: bool
    c: Tensor | None = None
    c_labels: Tensor | None = None
    x_c: Tensor | None = None
    y_c: Tensor | None = None

    def validate(self) -> None:
        check_image(self.x, "x")
        check_image(self.y, "y")
        check_mask(self.mask_x, "mask_x")
        check_mask(self.mask_y, "mask_y")
        if self.mask_x.shape != self.x.shape[1:] or self.mask_y.shape != self.y.shape[1:]:
            raise ValueError("mask dims must match image dims")
        if self.paired:
            missing = [n for n in ("c", "c_labels", "x_c", "y_c") if getattr(self, n) is None]
            if missing:
                raise ValueError(f"paired example missing {missing}")


def assemble_composite(
    x_t: Tensor, y_t: Tensor, m_x: Tensor, m_y: Tensor, background: float = BACKGROUND
) -> Tensor:
    """Mask-select composite: m_x * x_t + m_y * y_t, background elsewhere.

    Accepts single images (3, H, W) with masks (H, W) or batched versions.
    Linear in (x_t, y_t) for fixed masks; output clamped to [-1, 1].
    """
    if x_t.shape != y_t.shape or m_x.shape != m_y.shape:
        raise ValueError("x_t/y_t and m_x/m_y must agree in shape")
    if x_t.shape[-2:] != m_x.shape[-2:]:
        raise ValueError(
            f"spatial dims differ: images {tuple(x_t.shape[-2:])} vs masks {tuple(m_x.shape[-2:])}"
        )
    mx = m_x.unsqueeze(-3)
    my = m_y.unsqueeze(-3)
    out = mx * x_t + my * y_t + (1.0 - mx) * (1.0 - my) * background
    return clamp_image(out)


def labels_to_masks(labels: Tensor) -> tuple[Tensor, Tensor]:
    """Split a {0,1,2} label map into per-object binary masks (disjoint)."""
    bad = ~((labels == 0) | (labels == 1) | (labels == 2))
    if bad.any():
        raise ValueError(f"label map contains values outside {{0,1,2}}")
    mask_x = (labels == 1).to(torch.float32)
    mask_y = (labels == 2).to(torch.float32)
    return mask_x, mask_y


def mask_bbox(mask: Tensor) -> tuple[int, int, int, int]:
    """Inclusive (r0, r1, c0, c1) of the foreground; raises on empty mask."""
    fg = mask > 0.5
    if not fg.any():
        raise ValueError("mask has no foreground pixels")
    rows = torch.where(fg.any(dim=1))[0]
    cols = torch.where(fg.any(dim=0))[0]
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def centering_theta(mask: Tensor, target_fill: float) -> Tensor:
    """Affine sending output pixels onto the mask's scaled bounding box."""
    h, w = mask.shape
    r0, r1, c0, c1 = mask_bbox(mask)
    box_h = r1 - r0 + 1
    box_w = c1 - c0 + 1
    if box_h >= box_w:
        zoom = target_fill * h / box_h
    else:
        zoom = target_fill * w / box_w
    s = 1.0 / zoom
    cx = (c0 + c1) / (w - 1) - 1.0  # normalized coord of box center
    cy = (r0 + r1) / (h - 1) - 1.0
    theta = torch.tensor([[s, 0.0, cx], [0.0, s, cy]], dtype=torch.float32)

    # Snap to identity when the correction is within bounding-box noise.
    corners = torch.tensor([[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]])
    moved = corners * s + torch.tensor([cx, cy])
    disp = moved - corners
    disp_px = torch.stack([disp[:, 0] * (w - 1) / 2, disp[:, 1] * (h - 1) / 2], dim=1)
    if disp_px.abs().max() <= _SNAP_PX:
        return warp.identity_theta()
    return theta


def center_and_scale(
    img: Tensor,
    mask: Tensor,
    target_fill: float = 0.5,
    background: float = BACKGROUND,
) -> tuple[Tensor, Tensor]:
    """Center the masked object and scale its box to target_fill * side.

    The same affine resamples both the image and the mask; the resampled
    mask is re-binarized at 0.5. Idempotent up to the identity snap.
    """
    check_image(img)
    if mask.shape != img.shape[1:]:
        raise ValueError("mask dims must match image dims")
    theta = centering_theta(mask, target_fill)
    grid = warp.affine_grid(theta, img.shape[1], img.shape[2])
    out_img = clamp_image(warp.bilinear_sample(img, grid, padding_value=background))
    out_mask = warp.bilinear_sample(mask.unsqueeze(0), grid, padding_value=0.0)[0]
    out_mask = (out_mask >= 0.5).to(torch.float32)
    return out_img, out_mask


def support_mask(img: Tensor, background: float = BACKGROUND, threshold: float = 0.1) -> Tensor:
    """Estimate an object's support as pixels that differ from background."""
    return ((img - background).abs().amax(dim=0) > threshold).to(torch.float32)


# ---------------------------------------------------------------------------
# PNG I/O: 8-bit, mapped linearly between [-1, 1] and [0, 255].
# ---------------------------------------------------------------------------

def image_to_uint8(img: Tensor) -> np.ndarray:
    arr = ((img.detach().cpu().numpy() + 1.0) * 0.5 * 255.0).round()
    return np.clip(arr, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def uint8_to_image(arr: np.ndarray) -> Tensor:
    t = torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1)
    return t / 255.0 * 2.0 - 1.0


def save_image(img: Tensor, path: str | Path) -> None:
    PILImage.fromarray(image_to_uint8(img), mode="RGB").save(path)


def load_image(path: str | Path) -> Tensor:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return uint8_to_image(arr)


def save_mask(mask: Tensor, path: str | Path) -> None:
    arr = (mask.detach().cpu().numpy() > 0.5).astype(np.uint8) * 255
    PILImage.fromarray(arr, mode="L").save(path)


def load_mask(path: str | Path) -> Tensor:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except Exception as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    return torch.from_numpy((arr >= 128).astype(np.float32))


def save_label_map(labels: Tensor, path: str | Path) -> None:
    arr = labels.detach().cpu().numpy().astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


def load_label_map(path: str | Path) -> Tensor:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im)
    except Exception as exc:
        raise DataError(f"cannot read label map {path}: {exc}") from exc
    vals = np.unique(arr)
    if not np.isin(vals, [0, 1, 2]).all():
        raise DataError(f"label map {path} has values outside {{0,1,2}}: {vals.tolist()}")
    return torch.from_numpy(arr.astype(np.int64))
