"""Composite adversarial loss: detector suppression plus print regularizers.

Per-image loss = max objectness of the composited image
               + delta * non-printability + gamma * total variation.
Regularizers are computed in float64 so brute-force oracle comparisons
hold to 1e-6 even for float32 patches.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
import torch

from .augment import AugmentationSpec, AugmentConfig, apply_weather, sample_augmentation
from .detector import DetectorBackend, letterbox, max_objectness
from .embed import PlacementGeometry, embed_patch
from .types import Box, Patch, PrintableColorSet

# Inside-sqrt stabilizers. NPS subtracts sqrt(eps) back out so exact
# colour matches score exactly zero; TV keeps the spec's 1e-8.
NPS_EPS = 1e-16
TV_EPS = 1e-8


class PipelineVariant(str, Enum):
    GC = "gc"            # geometric + colour-space augmentations
    GCW = "gcw"          # full pipeline including weather
    CONTROL = "control"  # optimization bypassed, random patch


@dataclass(frozen=True)
class LossWeights:
    """delta scales non-printability, gamma total variation."""

    delta: float = 0.01
    gamma: float = 2.5

    def __post_init__(self) -> None:
        if self.delta < 0.0 or self.gamma < 0.0:
            raise ValueError("loss weights must be non-negative")


def nps(patch: Patch, colors: PrintableColorSet) -> torch.Tensor:
    """Sum over patch pixels of the distance to the nearest printable colour.

    Differentiable w.r.t. pixels; exactly zero when every pixel sits on a
    palette colour.
    """
    if len(colors) == 0:
        raise ValueError("empty colour set")
    palette = torch.from_numpy(colors.colors)  # (n, 3) float64
    total = torch.zeros((), dtype=torch.float64)
    for unit in patch.units():
        flat = unit.double().reshape(3, -1).T  # (npx, 3)
        sq = ((flat[:, None, :] - palette[None, :, :]) ** 2).sum(dim=2)
        dist = torch.sqrt(sq.min(dim=1).values + NPS_EPS) - NPS_EPS ** 0.5
        total = total + dist.sum()
    return total


def tv(patch: Patch) -> torch.Tensor:
    """Smoothed total variation: sum of sqrt(dy^2 + dx^2 + eps) terms.

    Differences run over rows and columns jointly; the last row and
    column are excluded so both terms exist at every summand.
    """
    total = torch.zeros((), dtype=torch.float64)
    for unit in patch.units():
        _, h, w = unit.shape
        if h < 2 or w < 2:
            raise ValueError(f"patch unit {h}x{w} too small for total variation")
        p = unit.double()
        d_row = p[:, :-1, :-1] - p[:, 1:, :-1]
        d_col = p[:, :-1, :-1] - p[:, :-1, 1:]
        total = total + torch.sqrt(d_row ** 2 + d_col ** 2 + TV_EPS).sum()
    return total


@dataclass
class AttackSetup:
    """Everything image_loss needs besides the patch and the image."""

    detector: DetectorBackend
    geometry: PlacementGeometry
    aug: AugmentConfig            # weather_enabled toggled per variant
    colors: PrintableColorSet
    max_scope: str = "image"      # "image" or "boxes"
    soft_max_temp: float = 0.0
    per_image_spec: bool = False


def sample_specs(rng: np.random.Generator, config: AugmentConfig,
                 boxes: list[Box], per_image: bool = False) -> list[AugmentationSpec]:
    """One augmentation spec per box; per_image shares all but the scale."""
    if not per_image or len(boxes) <= 1:
        return [sample_augmentation(rng, config, box) for box in boxes]
    first = sample_augmentation(rng, config, boxes[0])
    jitter = first.scale_factor / (
        config.base_scale_ratio * (boxes[0][2] - boxes[0][0]) / config.patch_width_px)
    specs = [first]
    for box in boxes[1:]:
        base = config.base_scale_ratio * (box[2] - box[0]) / config.patch_width_px
        specs.append(replace(first, scale_factor=base * jitter))
    return specs


def _aug_for_variant(setup: AttackSetup, variant: PipelineVariant) -> AugmentConfig:
    use_weather = variant is PipelineVariant.GCW
    if setup.aug.weather_enabled == use_weather:
        return setup.aug
    return replace(setup.aug, weather_enabled=use_weather)


def composite_image(setup: AttackSetup, patch: Patch, image: torch.Tensor,
                    boxes: list[Box], variant: PipelineVariant,
                    rng: np.random.Generator) -> tuple[torch.Tensor, list[Box]]:
    """Embed the patch at every box and apply image-level weather if due.

    Weather (GCW only) comes from the first sampled spec and acts on the
    whole composited frame. Returns the letterboxed frame at detector
    input size plus the boxes mapped into that frame.
    """
    specs = sample_specs(rng, _aug_for_variant(setup, variant), boxes,
                         setup.per_image_spec)
    composited = embed_patch(image, patch, boxes, specs, setup.geometry)
    if variant is PipelineVariant.GCW and specs and specs[0].weather is not None:
        composited = apply_weather(composited, specs[0].weather)
    canvas, scale = letterbox(composited, setup.detector.input_size)
    lb_boxes = [(b[0] * scale, b[1] * scale, b[2] * scale, b[3] * scale) for b in boxes]
    return canvas, lb_boxes


def image_loss(setup: AttackSetup, patch: Patch, image: torch.Tensor,
               boxes: list[Box], weights: LossWeights,
               variant: PipelineVariant,
               rng: np.random.Generator) -> tuple[torch.Tensor, dict[str, float]]:
    """Loss for one training image; differentiable w.r.t. patch pixels.

    Returns the scalar loss and its parts (max_objectness, nps, tv).
    Images without detections are the caller's to skip; empty boxes here
    is an error.
    """
    if not boxes:
        raise ValueError("image_loss requires at least one annotated box")
    canvas, lb_boxes = composite_image(setup, patch, image, boxes, variant, rng)
    output = setup.detector.forward(canvas)
    m = max_objectness(output,
                       boxes=lb_boxes if setup.max_scope == "boxes" else None,
                       soft_temp=setup.soft_max_temp)
    nps_value = nps(patch, setup.colors)
    tv_value = tv(patch)
    loss = m.double() + weights.delta * nps_value + weights.gamma * tv_value
    parts = {"max_objectness": float(m.detach()),
             "nps": float(nps_value.detach()),
             "tv": float(tv_value.detach())}
    return loss, parts
