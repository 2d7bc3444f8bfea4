"""Procedural overhead scenes for training and attacking the toy detector.

Cars are oriented rounded rectangles with a windshield cue and a soft
drop shadow, placed on textured ground. Ground-truth boxes are the exact
axis-aligned extents of the rotated bodies. Everything is deterministic
given the caller's rng.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .types import Box, Detection, DetectionSet, save_image

CAR_COLORS = np.array([
    [0.92, 0.92, 0.92],  # white
    [0.10, 0.10, 0.12],  # black
    [0.72, 0.72, 0.74],  # silver
    [0.30, 0.31, 0.33],  # dark grey
    [0.65, 0.12, 0.10],  # red
    [0.12, 0.22, 0.55],  # blue
    [0.13, 0.35, 0.18],  # green
])


@dataclass(frozen=True)
class SynthParams:
    image_size: int = 128
    car_count: tuple[int, int] = (1, 4)
    car_length: tuple[float, float] = (26.0, 38.0)
    car_aspect: tuple[float, float] = (0.42, 0.52)  # width / length

    def __post_init__(self) -> None:
        if self.car_count[0] < 0 or self.car_count[1] < self.car_count[0]:
            raise ValueError(f"bad car count range {self.car_count}")
        if self.car_length[0] <= 0:
            raise ValueError("car length must be positive")


def _ground(size: int, rng: np.random.Generator) -> np.ndarray:
    """Textured ground: tinted base + low-frequency patches + speckle."""
    base = np.array([rng.uniform(0.32, 0.5)] * 3) + rng.uniform(-0.03, 0.03, 3)
    coarse = rng.uniform(-0.06, 0.06, (8, 8))
    reps = int(np.ceil(size / 8))
    lowfreq = np.kron(coarse, np.ones((reps, reps)))[:size, :size]
    speckle = rng.uniform(-0.02, 0.02, (size, size))
    img = base.reshape(3, 1, 1) + (lowfreq + speckle)[None, :, :]
    return np.clip(img, 0.0, 1.0)


def _render_car(img: np.ndarray, center: tuple[float, float], length: float,
                width: float, theta: float, color: np.ndarray) -> Box:
    """Draw one car and return its exact axis-aligned bounding box."""
    size = img.shape[1]
    cx, cy = center
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    corners = np.array([[dx * length / 2, dy * width / 2]
                        for dx, dy in ((-1, -1), (1, -1), (1, 1), (-1, 1))])
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
    world = corners @ rot.T + np.array([cx, cy])
    x0, y0 = world.min(axis=0)
    x1, y1 = world.max(axis=0)

    ix0, iy0 = max(0, int(np.floor(x0)) - 2), max(0, int(np.floor(y0)) - 2)
    ix1, iy1 = min(size, int(np.ceil(x1)) + 3), min(size, int(np.ceil(y1)) + 3)
    ys, xs = np.mgrid[iy0:iy1, ix0:ix1]
    dx = xs - cx
    dy = ys - cy
    lx = cos_t * dx + sin_t * dy    # along the car length
    ly = -sin_t * dx + cos_t * dy   # across the car width

    # Rounded-rectangle signed distance, negative inside.
    r = 0.18 * width
    qx = np.abs(lx) - (length / 2 - r)
    qy = np.abs(ly) - (width / 2 - r)
    sdf = (np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
           + np.minimum(np.maximum(qx, qy), 0) - r)
    body = np.clip(0.5 - sdf, 0.0, 1.0)

    # Drop shadow offset toward bottom-right, drawn under the body.
    sh_dx, sh_dy = 0.08 * length, 0.08 * length
    lxs = cos_t * (dx - sh_dx) + sin_t * (dy - sh_dy)
    lys = -sin_t * (dx - sh_dx) + cos_t * (dy - sh_dy)
    qxs = np.abs(lxs) - (length / 2 - r)
    qys = np.abs(lys) - (width / 2 - r)
    sdf_s = (np.hypot(np.maximum(qxs, 0), np.maximum(qys, 0))
             + np.minimum(np.maximum(qxs, qys), 0) - r)
    shadow = np.clip(0.5 - sdf_s, 0.0, 1.0) * 0.35

    # Windshield: dark band near the front, fully inside the body.
    band = ((np.abs(lx - 0.22 * length) < 0.09 * length)
            & (np.abs(ly) < width / 2 - 1.0)).astype(float)

    roi = img[:, iy0:iy1, ix0:ix1]
    roi *= (1.0 - shadow[None] * (1.0 - body[None]))
    car_rgb = color.reshape(3, 1, 1) * (1.0 - 0.62 * band[None])
    img[:, iy0:iy1, ix0:ix1] = roi * (1.0 - body[None]) + car_rgb * body[None]
    return (float(x0), float(y0), float(x1), float(y1))


def gen_synthetic_scene(params: SynthParams,
                        rng: np.random.Generator) -> tuple[torch.Tensor, list[Box]]:
    """One scene image plus exact ground-truth boxes.

    Raises when the requested car count cannot be packed without overlap.
    """
    size = params.image_size
    img = _ground(size, rng)
    n_cars = int(rng.integers(params.car_count[0], params.car_count[1] + 1))

    boxes: list[Box] = []
    placed = 0
    for _ in range(n_cars):
        length = rng.uniform(*params.car_length)
        width = length * rng.uniform(*params.car_aspect)
        ok = False
        for _ in range(60):
            margin = length * 0.75
            cx = rng.uniform(margin, size - margin)
            cy = rng.uniform(margin, size - margin)
            theta = rng.uniform(0, np.pi)
            half = length / 2 + 4.0
            cand = (cx - half, cy - half, cx + half, cy + half)
            if all(not _intersects(cand, b) for b in boxes):
                ok = True
                break
        if not ok:
            raise ValueError(
                f"cannot pack {n_cars} cars of length ~{length:.0f} into "
                f"a {size}px scene (placed {placed})")
        color = CAR_COLORS[int(rng.integers(0, len(CAR_COLORS)))]
        color = np.clip(color + rng.uniform(-0.04, 0.04, 3), 0.0, 1.0)
        boxes.append(_render_car(img, (cx, cy), length, width, theta, color))
        placed += 1

    return torch.from_numpy(img.astype(np.float32)), boxes


def _intersects(a: Box, b: Box) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def gen_synthetic_dataset(out_dir: str | Path, n_train: int, n_test: int,
                          params: SynthParams, seed: int) -> dict:
    """Write a scene directory in the standard layout plus ground truth.

    Produces <out>/train/*.png, <out>/test/*.png and
    ground_truth_{train,test}.json (DetectionSet schema, objectness 1.0).
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    counts = {}
    for split, n in (("train", n_train), ("test", n_test)):
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        truth: dict[str, list[Detection]] = {}
        for i in range(n):
            image, boxes = gen_synthetic_scene(params, rng)
            name = f"{split}_{i:05d}.png"
            save_image(image, split_dir / name)
            truth[name] = [Detection(b, 1.0) for b in boxes]
        DetectionSet(truth).save(out_dir / f"ground_truth_{split}.json")
        counts[split] = n
    return counts
