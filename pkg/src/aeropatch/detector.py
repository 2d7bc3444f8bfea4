"""Single-class detector interface plus the bundled toy detector.

The plug-in contract: a detector backend exposes `input_size`,
`forward(image) -> DetectorOutput` (decoded boxes with differentiable
objectness), and `param_checksum()`. An adapter for external three-scale
YOLO-style weights only needs to satisfy this contract; the bundled toy
detector is a small fully-convolutional net with one prediction scale and
one box per cell, trained on procedurally generated overhead scenes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch
from torch import nn

from .metrics import box_iou
from .types import Box, Detection, DetectionSet, SceneDataset, validate_dataset

ANNOTATION_OBJECTNESS = 0.5
ANNOTATION_NMS_IOU = 0.4


@dataclass
class ScaleGrid:
    """Decoded predictions of one scale: boxes in input-size pixel coords."""

    boxes_xyxy: torch.Tensor  # (anchors, gh, gw, 4)
    objectness: torch.Tensor  # (anchors, gh, gw), values in [0, 1]
    stride: int


@dataclass
class DetectorOutput:
    """Multi-scale prediction grids; one entry per scale."""

    scales: list[ScaleGrid]
    input_size: int

    def flat_scores(self) -> torch.Tensor:
        return torch.cat([s.objectness.reshape(-1) for s in self.scales])

    def flat_boxes(self) -> torch.Tensor:
        return torch.cat([s.boxes_xyxy.reshape(-1, 4) for s in self.scales])


@runtime_checkable
class DetectorBackend(Protocol):
    input_size: int

    def forward(self, image: torch.Tensor) -> DetectorOutput: ...

    def param_checksum(self) -> str: ...


class ToyDetector(nn.Module):
    """Fully-convolutional single-scale car detector for desk experiments.

    Head predicts (tx, ty, tw, th, obj) per cell; one box per cell at
    stride 16. SiLU activations keep the score surface smooth for
    gradient checks. The multi-scale interface is honoured with a
    one-element scale list.
    """

    stride = 16

    def __init__(self, input_size: int = 128, anchor: float = 32.0):
        super().__init__()
        if input_size % self.stride != 0:
            raise ValueError(f"input size {input_size} not divisible by stride {self.stride}")
        self.input_size = input_size
        self.anchor = anchor
        # Receptive field ~95 px so off-car context influences car cells.
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, 64, 3, stride=1, padding=1), nn.SiLU(),
            nn.Conv2d(64, 64, 3, stride=1, padding=1), nn.SiLU(),
            nn.Conv2d(64, 5, 1),
        )

    def raw_forward(self, batch: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) -> (B, 5, gh, gw) raw head outputs."""
        if batch.ndim != 4 or batch.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(batch.shape)}")
        if batch.shape[2] != self.input_size or batch.shape[3] != self.input_size:
            raise ValueError(
                f"input {tuple(batch.shape[2:])} does not match detector size "
                f"{self.input_size}; letterbox first")
        return self.net(batch)

    def decode(self, raw: torch.Tensor) -> ScaleGrid:
        """Raw (5, gh, gw) head outputs to pixel boxes and objectness."""
        gh, gw = raw.shape[1], raw.shape[2]
        dtype = raw.dtype
        cols = torch.arange(gw, dtype=dtype, device=raw.device).view(1, gw)
        rows = torch.arange(gh, dtype=dtype, device=raw.device).view(gh, 1)
        cx = (torch.sigmoid(raw[0]) + cols) * self.stride
        cy = (torch.sigmoid(raw[1]) + rows) * self.stride
        w = self.anchor * torch.exp(raw[2].clamp(max=4.0))
        h = self.anchor * torch.exp(raw[3].clamp(max=4.0))
        obj = torch.sigmoid(raw[4])
        boxes = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)
        return ScaleGrid(boxes.unsqueeze(0), obj.unsqueeze(0), self.stride)

    def forward(self, image: torch.Tensor) -> DetectorOutput:
        """Decoded predictions for one (3, S, S) image at the input size."""
        if image.ndim != 3:
            raise ValueError(f"expected (3, H, W) image, got {tuple(image.shape)}")
        raw = self.raw_forward(image.unsqueeze(0))[0]
        return DetectorOutput([self.decode(raw)], self.input_size)

    def param_checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            digest.update(name.encode())
            digest.update(p.detach().cpu().numpy().tobytes())
        return digest.hexdigest()

    def save(self, path: str | Path) -> None:
        torch.save({"state_dict": self.state_dict(),
                    "input_size": self.input_size,
                    "anchor": self.anchor}, Path(path))

    @staticmethod
    def load(path: str | Path) -> "ToyDetector":
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
        det = ToyDetector(input_size=int(blob["input_size"]), anchor=float(blob["anchor"]))
        det.load_state_dict(blob["state_dict"])
        det.eval()
        for p in det.parameters():
            p.requires_grad_(False)
        return det


def max_objectness(output: DetectorOutput,
                   boxes: list[Box] | None = None,
                   soft_temp: float = 0.0) -> torch.Tensor:
    """Maximum predicted objectness over all scales, differentiable.

    Hard max by default (gradient through the winning cell). With
    soft_temp > 0 returns temperature * logsumexp(scores / temperature),
    a smooth upper bound. With boxes given, only cells whose stride
    footprint overlaps one of the boxes participate; if no cell overlaps,
    falls back to the whole-image max.
    """
    if not output.scales:
        raise ValueError("empty detector output")
    scores = []
    for grid in output.scales:
        obj = grid.objectness
        if boxes:
            mask = _cells_overlapping(obj.shape[1], obj.shape[2], grid.stride,
                                      boxes, obj.device)
            if mask.any():
                obj = obj * mask - (1.0 - mask.to(obj.dtype))  # excluded cells -> -1
        scores.append(obj.reshape(-1))
    flat = torch.cat(scores)
    if soft_temp > 0.0:
        return soft_temp * torch.logsumexp(flat / soft_temp, dim=0)
    return flat.max()


def _cells_overlapping(gh: int, gw: int, stride: int, boxes: list[Box],
                       device: torch.device) -> torch.Tensor:
    mask = torch.zeros((1, gh, gw), device=device)
    for x0, y0, x1, y1 in boxes:
        c0 = max(0, int(np.floor(x0 / stride)))
        c1 = min(gw, int(np.ceil(x1 / stride)))
        r0 = max(0, int(np.floor(y0 / stride)))
        r1 = min(gh, int(np.ceil(y1 / stride)))
        if c0 < c1 and r0 < r1:
            mask[0, r0:r1, c0:c1] = 1.0
    return mask


def letterbox(image: torch.Tensor, size: int) -> tuple[torch.Tensor, float]:
    """Resize to fit a size x size canvas, zero-padded bottom/right.

    Returns (canvas, scale); original coords = canvas coords / scale.
    Identity (no resampling) when the image is already size x size.
    """
    _, h, w = image.shape
    if h == size and w == size:
        return image, 1.0
    scale = min(size / w, size / h)
    new_w = max(1, round(w * scale))
    new_h = max(1, round(h * scale))
    resized = torch.nn.functional.interpolate(
        image.unsqueeze(0), size=(new_h, new_w), mode="bilinear",
        align_corners=False)[0]
    canvas = torch.zeros((3, size, size), dtype=image.dtype, device=image.device)
    canvas[:, :new_h, :new_w] = resized
    return canvas, scale


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-max suppression; keeps descending-objectness order."""
    ranked = sorted(detections, key=lambda d: -d.objectness)
    kept: list[Detection] = []
    for det in ranked:
        if all(box_iou(det.box, k.box) <= iou_threshold for k in kept):
            kept.append(det)
    return kept


def detect(backend: DetectorBackend, image: torch.Tensor,
           objectness_threshold: float, nms_iou: float) -> list[Detection]:
    """Detections in original pixel coordinates, NMS'd, sorted by score."""
    if not 0.0 <= objectness_threshold <= 1.0 or not 0.0 <= nms_iou <= 1.0:
        raise ValueError("thresholds must lie in [0, 1]")
    _, h, w = image.shape
    canvas, scale = letterbox(image, backend.input_size)
    with torch.no_grad():
        output = backend.forward(canvas)
    scores = output.flat_scores()
    boxes = output.flat_boxes()
    keep = scores >= objectness_threshold
    candidates = []
    for box, score in zip(boxes[keep].tolist(), scores[keep].tolist()):
        x0 = min(max(box[0] / scale, 0.0), w)
        y0 = min(max(box[1] / scale, 0.0), h)
        x1 = min(max(box[2] / scale, 0.0), w)
        y1 = min(max(box[3] / scale, 0.0), h)
        if x1 - x0 <= 0.0 or y1 - y0 <= 0.0:
            continue
        candidates.append(Detection((x0, y0, x1, y1), score))
    return nms(candidates, nms_iou)


@dataclass
class AnnotationResult:
    """Detections per split plus the review trail for manual cleanup."""

    train: DetectionSet
    test: DetectionSet
    review: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


def build_annotations(backend: DetectorBackend, dataset: SceneDataset,
                      objectness_threshold: float = ANNOTATION_OBJECTNESS,
                      nms_iou: float = ANNOTATION_NMS_IOU,
                      review_threshold: float = 0.65) -> AnnotationResult:
    """Run the detector over both splits to produce training annotations.

    Detections below review_threshold are listed in the review trail so
    false positives can be removed by editing the emitted JSON. Unreadable
    images are skipped with a warning in the result.
    """
    validate_dataset(dataset)
    result = AnnotationResult(DetectionSet({}), DetectionSet({}))
    for split_name, images, dest in (("train", dataset.train_images, result.train),
                                     ("test", dataset.test_images, result.test)):
        for img in images:
            try:
                pixels = img.pixels()
            except Exception as exc:  # unreadable file: skip, keep going
                result.skipped.append(f"{split_name}/{img.image_id}: {exc}")
                continue
            dets = detect(backend, pixels, objectness_threshold, nms_iou)
            dest.per_image[img.image_id] = dets
            for k, d in enumerate(dets):
                if d.objectness < review_threshold:
                    result.review.append(
                        f"{split_name} {img.image_id} det{k} "
                        f"objectness={d.objectness:.3f} box={[round(v, 1) for v in d.box]}")
    return result


def _occlude(image: torch.Tensor, box: Box, rng: np.random.Generator) -> None:
    """Paste random-noise occluders on or around one car (in place).

    Mimics unoptimized control patches so the trained detector does not
    collapse under arbitrary high-frequency patterns.
    """
    _, h, w = image.shape
    x0, y0, x1, y1 = box
    bw, bh = x1 - x0, y1 - y0
    mode = rng.choice(["roof", "strips"], p=[0.7, 0.3])
    rects = []
    if mode == "roof":
        rw, rh = 0.66 * bw, 0.66 * bh
        cx = (x0 + x1) / 2 + rng.uniform(-0.08, 0.08) * bw
        cy = (y0 + y1) / 2 + rng.uniform(-0.08, 0.08) * bh
        rects.append((cx - rw / 2, cy - rh / 2, cx + rw / 2, cy + rh / 2))
    else:
        gap = 0.25 * bw
        t = max(2.0, 0.045 * bw * rng.uniform(0.8, 1.5))
        length = 0.71 * bw
        cy = (y0 + y1) / 2
        rects.append((x0 - gap - t, cy - length / 2, x0 - gap, cy + length / 2))
        rects.append((x1 + gap, cy - length / 2, x1 + gap + t, cy + length / 2))
        cx = (x0 + x1) / 2
        rects.append((cx - length / 2, y0 - gap - t, cx + length / 2, y0 - gap))
    for rx0, ry0, rx1, ry1 in rects:
        ix0, iy0 = max(0, int(rx0)), max(0, int(ry0))
        ix1, iy1 = min(w, int(rx1) + 1), min(h, int(ry1) + 1)
        if ix0 >= ix1 or iy0 >= iy1:
            continue
        noise = rng.random((3, iy1 - iy0, ix1 - ix0)).astype(np.float32)
        image[:, iy0:iy1, ix0:ix1] = torch.from_numpy(noise).to(image.dtype)


def train_toy_detector(detector: ToyDetector,
                       scenes: list[tuple[torch.Tensor, list[Box]]],
                       epochs: int = 40, batch_size: int = 16,
                       learning_rate: float = 1e-3, seed: int = 11,
                       occlusion_augment: bool = True) -> list[float]:
    """Supervised training on synthetic scenes; returns per-epoch losses.

    Targets: objectness 1 for the cell containing a car centre, box
    offsets/log-sizes regressed on positive cells. With
    occlusion_augment, cars are randomly overlaid with noise rectangles
    (roof patches or surrounding strips) so random patterns alone do not
    suppress detections.
    """
    stride = detector.stride
    g = detector.input_size // stride
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(detector.parameters(), lr=learning_rate)
    bce = nn.BCEWithLogitsLoss(pos_weight=torch.tensor(4.0))
    detector.train()

    targets = []
    for image, boxes in scenes:
        obj = torch.zeros((g, g))
        txy = torch.zeros((2, g, g))
        twh = torch.zeros((2, g, g))
        for x0, y0, x1, y1 in boxes:
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            col, row = int(cx / stride), int(cy / stride)
            if not (0 <= col < g and 0 <= row < g):
                continue
            obj[row, col] = 1.0
            txy[0, row, col] = cx / stride - col
            txy[1, row, col] = cy / stride - row
            twh[0, row, col] = float(np.log(max(x1 - x0, 1.0) / detector.anchor))
            twh[1, row, col] = float(np.log(max(y1 - y0, 1.0) / detector.anchor))
        targets.append((obj, txy, twh))

    history = []
    n = len(scenes)
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            imgs, objs, txys, twhs = [], [], [], []
            for i in idx:
                img = scenes[i][0].clone()
                if occlusion_augment:
                    for box in scenes[i][1]:
                        if rng.random() < 0.5:
                            _occlude(img, box, rng)
                    # brightness/contrast jitter on the whole frame
                    img = (img * rng.uniform(0.85, 1.15)
                           + rng.uniform(-0.08, 0.08)).clamp(0, 1)
                imgs.append(img)
                objs.append(targets[i][0])
                txys.append(targets[i][1])
                twhs.append(targets[i][2])
            raw = detector.raw_forward(torch.stack(imgs))
            obj_t = torch.stack(objs)
            pos = obj_t > 0.5
            loss = bce(raw[:, 4], obj_t)
            if pos.any():
                txy_t = torch.stack(txys)
                twh_t = torch.stack(twhs)
                pred_xy = torch.sigmoid(raw[:, 0:2])
                loss = loss + ((pred_xy - txy_t) ** 2).permute(1, 0, 2, 3)[:, pos].mean()
                loss = loss + ((raw[:, 2:4] - twh_t) ** 2).permute(1, 0, 2, 3)[:, pos].mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
        history.append(epoch_loss / max(1, int(np.ceil(n / batch_size))))
    detector.eval()
    return history
