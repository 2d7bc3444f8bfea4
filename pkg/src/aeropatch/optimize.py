"""Adam-driven patch optimization over a scene's training split."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .losses import (AttackSetup, LossWeights, PipelineVariant,
                     composite_image, nps, tv)
from .detector import DetectorOutput, max_objectness
from .embed import PlacementGeometry
from .types import DetectionSet, Patch, SceneDataset

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    pipeline_variant: PipelineVariant = PipelineVariant.GC
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 0.03
    rng_seed: int = 0
    checkpoint_interval: int = 50

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be positive")


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    mean_max_objectness: float
    nps: float
    tv: float


@dataclass
class TrainingResult:
    patch: Patch
    epochs: list[EpochStats]
    step_losses: list[float]

    def curve_csv(self) -> str:
        lines = ["epoch,mean_loss,mean_max_objectness,nps,tv"]
        for e in self.epochs:
            lines.append(f"{e.epoch},{e.mean_loss!r},{e.mean_max_objectness!r},"
                         f"{e.nps!r},{e.tv!r}")
        return "\n".join(lines) + "\n"


def save_checkpoint(path: str | Path, patch: Patch, epoch: int,
                    config: TrainConfig, torch_rng: torch.Tensor,
                    np_rng_state: dict) -> None:
    """Versioned binary container: patch + config + rng state + epoch."""
    cfg = asdict(config)
    cfg["pipeline_variant"] = config.pipeline_variant.value
    np.savez(
        Path(path),
        format_version=np.int64(CHECKPOINT_FORMAT_VERSION),
        design=np.str_(patch.design.value),
        pixels=patch.pixels.detach().cpu().numpy(),
        digital_size=np.asarray(patch.digital_size, dtype=np.int64),
        physical_size=np.asarray(patch.physical_size, dtype=np.float64),
        epoch=np.int64(epoch),
        config_json=np.str_(json.dumps(cfg, sort_keys=True)),
        torch_rng=torch_rng.numpy(),
        np_rng_json=np.str_(json.dumps(np_rng_state, default=str)),
    )


def load_checkpoint(path: str | Path) -> dict:
    from .types import PatchDesign

    with np.load(Path(path)) as data:
        if int(data["format_version"]) != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(data['format_version'])}")
        patch = Patch(
            design=PatchDesign(str(data["design"])),
            pixels=torch.from_numpy(data["pixels"].copy()),
            digital_size=tuple(int(v) for v in data["digital_size"]),
            physical_size=tuple(float(v) for v in data["physical_size"]),
        )
        return {
            "patch": patch,
            "epoch": int(data["epoch"]),
            "config": json.loads(str(data["config_json"])),
        }


def optimize_patch(dataset: SceneDataset, annotations: DetectionSet,
                   geometry: PlacementGeometry, config: TrainConfig,
                   weights: LossWeights, setup: AttackSetup,
                   digital_size: tuple[int, int] | None = None,
                   physical_size: tuple[float, float] | None = None,
                   checkpoint_dir: str | Path | None = None,
                   dump_dir: str | Path | None = None) -> TrainingResult:
    """Minimize the per-batch mean image loss over the training split.

    Pixels start uniform random in [0, 1] and are clamped back after
    every Adam step; the detector is never updated. The CONTROL variant
    returns the freshly initialized patch untouched. Raises on non-finite
    loss after dumping the offending batch.
    """
    gen = torch.Generator().manual_seed(config.rng_seed)
    patch = Patch.random(geometry.design, gen, digital_size, physical_size)
    if config.pipeline_variant is PipelineVariant.CONTROL:
        return TrainingResult(patch, [], [])

    rng = np.random.default_rng(config.rng_seed)
    items = []
    for img in dataset.train_images:
        boxes = [d.box for d in annotations.per_image.get(img.image_id, [])]
        if boxes:
            items.append((img.image_id, img.pixels(), boxes))
    if not items:
        raise ValueError("no training images with annotated detections")

    patch.pixels.requires_grad_(True)
    opt = torch.optim.Adam([patch.pixels], lr=config.learning_rate)
    variant = config.pipeline_variant
    epochs: list[EpochStats] = []
    step_losses: list[float] = []

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(items))
        loss_sum = 0.0
        max_sum = 0.0
        n_batches = 0
        for start in range(0, len(items), config.batch_size):
            idx = order[start:start + config.batch_size]
            canvases = []
            for i in idx:
                canvas, _ = composite_image(setup, patch, items[i][1],
                                            items[i][2], variant, rng)
                canvases.append(canvas)
            batch_max = []
            if hasattr(setup.detector, "raw_forward"):
                # Batched path for backends exposing raw head outputs.
                raw = setup.detector.raw_forward(torch.stack(canvases))
                for b in range(raw.shape[0]):
                    grid = setup.detector.decode(raw[b])
                    out = DetectorOutput([grid], setup.detector.input_size)
                    batch_max.append(max_objectness(out, soft_temp=setup.soft_max_temp))
            else:
                for canvas in canvases:
                    out = setup.detector.forward(canvas)
                    batch_max.append(max_objectness(out, soft_temp=setup.soft_max_temp))
            mean_max = torch.stack(batch_max).mean()
            nps_value = nps(patch, setup.colors)
            tv_value = tv(patch)
            loss = (mean_max.double()
                    + weights.delta * nps_value + weights.gamma * tv_value)

            if not torch.isfinite(loss):
                ids = [items[i][0] for i in idx]
                if dump_dir is not None:
                    Path(dump_dir).mkdir(parents=True, exist_ok=True)
                    np.savez(Path(dump_dir) / "nonfinite_batch.npz",
                             pixels=patch.pixels.detach().numpy(),
                             batch=torch.stack(canvases).detach().numpy(),
                             image_ids=np.asarray(ids))
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} on images {ids}")

            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                patch.pixels.clamp_(0.0, 1.0)
            step_losses.append(float(loss.detach()))
            loss_sum += float(loss.detach())
            max_sum += float(mean_max.detach())
            n_batches += 1

        with torch.no_grad():
            epochs.append(EpochStats(
                epoch=epoch,
                mean_loss=loss_sum / n_batches,
                mean_max_objectness=max_sum / n_batches,
                nps=float(nps(patch, setup.colors)),
                tv=float(tv(patch)),
            ))
        if checkpoint_dir is not None and epoch % config.checkpoint_interval == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(checkpoint_dir) / f"checkpoint_epoch{epoch:05d}.npz",
                            patch, epoch, config, torch.get_rng_state(),
                            rng.bit_generator.state)

    patch.pixels.requires_grad_(False)
    return TrainingResult(patch, epochs, step_losses)
