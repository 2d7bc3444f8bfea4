"""Differentiable compositing of a patch into a scene at annotated cars.

ON places the patch on the box centre; OFF places three strips adjacent
to the left, top and right box edges (a '⊓' opening toward the image
bottom), rotated jointly about the box centre. Warping uses bilinear
resampling with zero padding, so pixels one kernel radius outside a
footprint are untouched and gradients flow back to the patch pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .augment import AugmentationSpec, apply_color_transform
from .types import Box, Patch, PatchDesign

# Default embedded-width / box-width ratios, from the print dimensions
# against assumed car dimensions (1.8 m wide, 4.5 m long).
ON_PATCH_TO_CAR_RATIO = 1189.0 / 1800.0
OFF_PATCH_TO_CAR_RATIO = 3200.0 / 4500.0

# Fraction of box width between a box edge and the nearest OFF strip.
# Large enough that a ±20° joint rotation never sweeps a strip into the
# box interior for car-like aspect ratios.
DEFAULT_OFF_GAP_FRAC = 0.25

OFF_SIDES = ("left", "top", "right")


@dataclass(frozen=True)
class PlacementGeometry:
    """How the patch sits relative to a car bounding box.

    patch_to_car_ratio is embedded patch width over box width at unit
    scale jitter. For OFF, off_gap_px (absolute, if set) or off_gap_frac
    (relative to box width) separates strips from the box edges.
    """

    design: PatchDesign
    patch_to_car_ratio: float = 0.0  # 0 -> design default
    off_gap_frac: float = DEFAULT_OFF_GAP_FRAC
    off_gap_px: float | None = None
    off_layout: tuple[str, ...] = OFF_SIDES

    def __post_init__(self) -> None:
        if self.patch_to_car_ratio < 0.0:
            raise ValueError("patch_to_car_ratio must be positive (or 0 for default)")
        if self.patch_to_car_ratio == 0.0:
            default = (ON_PATCH_TO_CAR_RATIO if self.design is PatchDesign.ON
                       else OFF_PATCH_TO_CAR_RATIO)
            object.__setattr__(self, "patch_to_car_ratio", default)
        if self.off_gap_frac < 0.0 or (self.off_gap_px is not None and self.off_gap_px < 0.0):
            raise ValueError("OFF gap must be non-negative")
        if tuple(sorted(self.off_layout)) != tuple(sorted(OFF_SIDES)):
            raise ValueError(f"off_layout must be a permutation of {OFF_SIDES}")

    def gap_for(self, box: Box) -> float:
        if self.off_gap_px is not None:
            return self.off_gap_px
        return self.off_gap_frac * (box[2] - box[0])


@dataclass(frozen=True)
class RotatedRect:
    """A rectangle with centre, full size (w, h) and rotation in degrees."""

    center: tuple[float, float]
    size: tuple[float, float]
    angle_deg: float

    def corners(self) -> np.ndarray:
        """The 4 corners (clockwise from top-left in local frame), shape (4, 2)."""
        cx, cy = self.center
        hw, hh = self.size[0] / 2.0, self.size[1] / 2.0
        local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
        t = math.radians(self.angle_deg)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        return local @ rot.T + np.array([cx, cy])


def _rotate_about(point: tuple[float, float], pivot: tuple[float, float],
                  angle_deg: float) -> tuple[float, float]:
    t = math.radians(angle_deg)
    dx, dy = point[0] - pivot[0], point[1] - pivot[1]
    return (pivot[0] + dx * math.cos(t) - dy * math.sin(t),
            pivot[1] + dx * math.sin(t) + dy * math.cos(t))


def off_footprint(box: Box, geometry: PlacementGeometry,
                  scale_factor: float, rotation_deg: float = 0.0,
                  strip_size_px: tuple[int, int] = (400, 25)) -> list[RotatedRect]:
    """Embedded footprints of the three OFF strips for one box.

    Pre-rotation the strips sit flush against the left, top and right box
    edges at the configured gap, long axis parallel to the adjacent edge;
    the whole arrangement is then rotated rigidly by rotation_deg about
    the box centre. Returned in geometry.off_layout order.
    """
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    gap = geometry.gap_for(box)
    length = scale_factor * strip_size_px[0]
    thick = scale_factor * strip_size_px[1]

    base = {
        "left": RotatedRect((x0 - gap - thick / 2.0, cy), (length, thick), 90.0),
        "top": RotatedRect((cx, y0 - gap - thick / 2.0), (length, thick), 0.0),
        "right": RotatedRect((x1 + gap + thick / 2.0, cy), (length, thick), 90.0),
    }
    out = []
    for side in geometry.off_layout:
        rect = base[side]
        center = _rotate_about(rect.center, (cx, cy), rotation_deg)
        out.append(RotatedRect(center, rect.size, rect.angle_deg + rotation_deg))
    return out


def _composite_unit(image: torch.Tensor, unit: torch.Tensor,
                    center: tuple[float, float], scale: float,
                    angle_deg: float) -> torch.Tensor:
    """Paste one pixel grid into the image, scaled and rotated about center.

    Bilinear inverse warp with zero padding: inside the warped footprint
    the patch is fully opaque, the <1 px soft border blends with the
    scene, and everything one kernel radius outside is returned
    bit-identical. Differentiable w.r.t. both image and unit pixels.
    """
    _, img_h, img_w = image.shape
    _, ph, pw = unit.shape
    dtype = image.dtype

    # ROI: bounding box of the rotated footprint plus the kernel radius.
    half_w = (pw + 1) / 2.0 * scale
    half_h = (ph + 1) / 2.0 * scale
    reach = math.hypot(half_w, half_h)
    x_lo = max(0, int(math.floor(center[0] - reach)) - 1)
    x_hi = min(img_w, int(math.ceil(center[0] + reach)) + 2)
    y_lo = max(0, int(math.floor(center[1] - reach)) - 1)
    y_hi = min(img_h, int(math.ceil(center[1] + reach)) + 2)
    if x_lo >= x_hi or y_lo >= y_hi:
        return image  # footprint entirely outside: clipped silently

    xs = torch.arange(x_lo, x_hi, dtype=dtype, device=image.device)
    ys = torch.arange(y_lo, y_hi, dtype=dtype, device=image.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    dx = gx - center[0]
    dy = gy - center[1]

    # Inverse rotation then inverse scale into patch pixel coordinates.
    t = math.radians(angle_deg)
    cos_t, sin_t = math.cos(t), math.sin(t)
    u = (cos_t * dx + sin_t * dy) / scale + (pw - 1) / 2.0
    v = (-sin_t * dx + cos_t * dy) / scale + (ph - 1) / 2.0

    u0 = torch.floor(u)
    v0 = torch.floor(v)
    fu = u - u0
    fv = v - v0

    flat = unit.reshape(3, -1)
    sampled = torch.zeros((3,) + u.shape, dtype=dtype, device=image.device)
    alpha = torch.zeros_like(u)
    for du, wu in ((0, 1.0 - fu), (1, fu)):
        for dv, wv in ((0, 1.0 - fv), (1, fv)):
            ui = u0 + du
            vi = v0 + dv
            valid = (ui >= 0) & (ui <= pw - 1) & (vi >= 0) & (vi <= ph - 1)
            weight = wu * wv * valid.to(dtype)
            idx = (vi.clamp(0, ph - 1) * pw + ui.clamp(0, pw - 1)).long()
            sampled = sampled + flat[:, idx.reshape(-1)].reshape(3, *idx.shape) * weight
            alpha = alpha + weight

    out = image.clone()
    roi = image[:, y_lo:y_hi, x_lo:x_hi]
    out[:, y_lo:y_hi, x_lo:x_hi] = sampled + (1.0 - alpha) * roi
    return out


def embed_patch(image: torch.Tensor, patch: Patch, boxes: list[Box],
                specs: list[AugmentationSpec],
                geometry: PlacementGeometry) -> torch.Tensor:
    """Composite the patch into the image at every box, one spec per box.

    The patch pixels are colour-transformed per spec, scaled and rotated
    about the box centre, and alpha-composited. Overlapping footprints
    composite in box order (later wins). Footprints extending beyond the
    image are clipped silently; zero boxes returns the image unchanged.
    """
    if len(boxes) != len(specs):
        raise ValueError(f"{len(boxes)} boxes but {len(specs)} augmentation specs")
    if not boxes:
        return image
    if geometry.design is not patch.design:
        raise ValueError(f"geometry design {geometry.design} != patch design {patch.design}")

    out = image
    for box, spec in zip(boxes, specs):
        x0, y0, x1, y1 = box
        tx = spec.translate_frac[0] * (x1 - x0)
        ty = spec.translate_frac[1] * (y1 - y0)
        colored = apply_color_transform(patch.pixels, spec)

        if patch.design is PatchDesign.ON:
            center = ((x0 + x1) / 2.0 + tx, (y0 + y1) / 2.0 + ty)
            out = _composite_unit(out, colored, center,
                                  spec.scale_factor, spec.rotation_deg)
        else:
            # Translation jitter shifts the whole strip arrangement.
            shifted = (x0 + tx, y0 + ty, x1 + tx, y1 + ty)
            rects = off_footprint(shifted, geometry, spec.scale_factor,
                                  spec.rotation_deg, strip_size_px=patch.digital_size)
            for strip, rect in zip(colored, rects):
                out = _composite_unit(out, strip, rect.center,
                                      spec.scale_factor, rect.angle_deg)
    return out
