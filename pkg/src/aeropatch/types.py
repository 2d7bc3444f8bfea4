"""Core data model: patches, detections, datasets, tracked score series.

Images and patch pixels are 3-channel float32 tensors with intensities in
[0, 1]; 8-bit files are normalized on load. Bounding boxes use corner
representation (x_min, y_min, x_max, y_max) in pixel units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from PIL import Image


class PatchDesign(str, Enum):
    """ON: single rectangle on the car roof. OFF: three ground strips."""

    ON = "on"
    OFF = "off"


# Default patch geometry: (width, height) in pixels and millimetres.
ON_DIGITAL_SIZE = (200, 160)
ON_PHYSICAL_SIZE = (1189.0, 841.0)
OFF_DIGITAL_SIZE = (400, 25)
OFF_PHYSICAL_SIZE = (3200.0, 200.0)

# Number of strips in the OFF design ('⊓' arrangement: left, top, right).
OFF_STRIP_COUNT = 3

PATCH_FORMAT_VERSION = 1


@dataclass
class Patch:
    """An optimizable pixel grid with its print geometry.

    pixels holds intensities in [0, 1]: shape (3, h, w) for the ON design,
    (3 strips, 3, h, w) for OFF. digital_size / physical_size are (w, h)
    per unit in pixels / millimetres. Pixels are the only mutable state;
    the optimizer clamps them to [0, 1] after every step.
    """

    design: PatchDesign
    pixels: torch.Tensor
    digital_size: tuple[int, int]
    physical_size: tuple[float, float]

    def __post_init__(self) -> None:
        expect = self._expected_shape()
        if tuple(self.pixels.shape) != expect:
            raise ValueError(
                f"patch pixels shape {tuple(self.pixels.shape)} does not match "
                f"{self.design.value} design with digital size {self.digital_size}; "
                f"expected {expect}"
            )

    def _expected_shape(self) -> tuple[int, ...]:
        w, h = self.digital_size
        if self.design is PatchDesign.ON:
            return (3, h, w)
        return (OFF_STRIP_COUNT, 3, h, w)

    def units(self) -> list[torch.Tensor]:
        """The independent pixel grids: [patch] for ON, 3 strips for OFF."""
        if self.design is PatchDesign.ON:
            return [self.pixels]
        return [self.pixels[i] for i in range(OFF_STRIP_COUNT)]

    def clamp_(self) -> None:
        """Clamp pixels into [0, 1] in place."""
        self.pixels.clamp_(0.0, 1.0)

    def clone(self) -> "Patch":
        return Patch(self.design, self.pixels.detach().clone(),
                     self.digital_size, self.physical_size)

    @staticmethod
    def random(design: PatchDesign,
               generator: torch.Generator | None = None,
               digital_size: tuple[int, int] | None = None,
               physical_size: tuple[float, float] | None = None,
               dtype: torch.dtype = torch.float32) -> "Patch":
        """A patch with pixels drawn uniformly from [0, 1]."""
        if digital_size is None:
            digital_size = ON_DIGITAL_SIZE if design is PatchDesign.ON else OFF_DIGITAL_SIZE
        if physical_size is None:
            physical_size = ON_PHYSICAL_SIZE if design is PatchDesign.ON else OFF_PHYSICAL_SIZE
        w, h = digital_size
        shape = (3, h, w) if design is PatchDesign.ON else (OFF_STRIP_COUNT, 3, h, w)
        pixels = torch.rand(shape, generator=generator, dtype=dtype)
        return Patch(design, pixels, digital_size, physical_size)

    def save(self, path: str | Path) -> None:
        """Write the patch to an .npz container (bit-exact round trip)."""
        np.savez(
            Path(path),
            format_version=np.int64(PATCH_FORMAT_VERSION),
            design=np.str_(self.design.value),
            pixels=self.pixels.detach().cpu().numpy(),
            digital_size=np.asarray(self.digital_size, dtype=np.int64),
            physical_size=np.asarray(self.physical_size, dtype=np.float64),
        )

    @staticmethod
    def load(path: str | Path) -> "Patch":
        with np.load(Path(path)) as data:
            version = int(data["format_version"])
            if version != PATCH_FORMAT_VERSION:
                raise ValueError(f"unsupported patch format version {version}")
            return Patch(
                design=PatchDesign(str(data["design"])),
                pixels=torch.from_numpy(data["pixels"].copy()),
                digital_size=tuple(int(v) for v in data["digital_size"]),
                physical_size=tuple(float(v) for v in data["physical_size"]),
            )


@dataclass(frozen=True)
class PrintableColorSet:
    """RGB colours a printing device can reproduce, components in [0, 1]."""

    colors: np.ndarray  # (n, 3) float

    def __post_init__(self) -> None:
        arr = np.asarray(self.colors, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
            raise ValueError("colour set must be a non-empty (n, 3) array")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("colour components must lie in [0, 1]")
        if len(np.unique(arr, axis=0)) != arr.shape[0]:
            raise ValueError("colour set contains duplicate entries")
        object.__setattr__(self, "colors", arr)

    def __len__(self) -> int:
        return int(self.colors.shape[0])

    @staticmethod
    def from_file(path: str | Path) -> "PrintableColorSet":
        """Parse a plain-text palette: one 'r g b' triplet per line."""
        rows = []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"malformed colour line: {line!r}")
            rows.append([float(p) for p in parts])
        return PrintableColorSet(np.asarray(rows))

    @staticmethod
    def default() -> "PrintableColorSet":
        """The palette shipped with the package (30 triplets)."""
        from importlib import resources

        ref = resources.files("aeropatch").joinpath("data/printable_colors.txt")
        with resources.as_file(ref) as path:
            return PrintableColorSet.from_file(path)


Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class Detection:
    """One detected object: corner box plus objectness score."""

    box: Box
    objectness: float

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError(f"objectness {self.objectness} outside [0, 1]")


class DetectionSet:
    """Per-image detections, keyed by image id (unique by construction)."""

    def __init__(self, per_image: dict[str, list[Detection]]):
        self.per_image = per_image

    def __eq__(self, other: object) -> bool:
        return isinstance(other, DetectionSet) and self.per_image == other.per_image

    def __len__(self) -> int:
        return len(self.per_image)

    def total_detections(self) -> int:
        return sum(len(v) for v in self.per_image.values())

    def to_json(self) -> str:
        doc = {
            image_id: [{"box": list(d.box), "objectness": d.objectness} for d in dets]
            for image_id, dets in self.per_image.items()
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "DetectionSet":
        doc = json.loads(text)
        per_image = {
            image_id: [Detection(tuple(e["box"]), float(e["objectness"])) for e in entries]
            for image_id, entries in doc.items()
        }
        return DetectionSet(per_image)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path: str | Path) -> "DetectionSet":
        return DetectionSet.from_json(Path(path).read_text())


def load_image(path: str | Path) -> torch.Tensor:
    """Read an image file as a (3, H, W) float32 tensor in [0, 1].

    Any source mode (grayscale, palette, RGBA) is converted to RGB.
    """
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(tensor: torch.Tensor, path: str | Path,
               dpi: tuple[float, float] | None = None) -> None:
    """Write a (3, H, W) tensor in [0, 1] as an 8-bit image file."""
    arr = (tensor.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255.0)
    img = Image.fromarray(np.round(arr).astype(np.uint8))
    if dpi is not None:
        img.save(path, dpi=dpi)
    else:
        img.save(path)


@dataclass
class SceneImage:
    """A dataset image, loaded lazily when backed by a file."""

    image_id: str
    path: Path | None = None
    _pixels: torch.Tensor | None = field(default=None, repr=False)

    def pixels(self) -> torch.Tensor:
        if self._pixels is None:
            if self.path is None:
                raise ValueError(f"image {self.image_id} has no file and no pixels")
            self._pixels = load_image(self.path)
        return self._pixels

    def size(self) -> tuple[int, int]:
        """(width, height) without decoding the full image when file-backed."""
        if self._pixels is not None:
            return (int(self._pixels.shape[2]), int(self._pixels.shape[1]))
        with Image.open(self.path) as img:
            return img.size

    def raw_bands(self) -> int:
        """Channel count of the source before RGB normalization."""
        if self._pixels is not None:
            return int(self._pixels.shape[0])
        with Image.open(self.path) as img:
            return len(img.getbands())


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class SceneDataset:
    """Train/test images for one scene of attack."""

    scene_name: str
    train_images: list[SceneImage]
    test_images: list[SceneImage]

    @staticmethod
    def from_dir(scene_dir: str | Path) -> "SceneDataset":
        """Load the `<scene>/train/*.png|jpg`, `<scene>/test/*.png|jpg` layout."""
        scene_dir = Path(scene_dir)
        splits = {}
        for split in ("train", "test"):
            folder = scene_dir / split
            paths = sorted(
                p for p in folder.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES
            ) if folder.is_dir() else []
            splits[split] = [SceneImage(p.name, p) for p in paths]
        return SceneDataset(scene_dir.name, splits["train"], splits["test"])


@dataclass
class DatasetReport:
    """Outcome of validate_dataset: counts and resolution histogram."""

    M: int
    N: int
    resolutions: dict[tuple[int, int], int]
    warnings: list[str]


class DatasetError(ValueError):
    """Raised when a dataset violates a structural invariant."""


def validate_dataset(dataset: SceneDataset) -> DatasetReport:
    """Check split sizes, id uniqueness, and channel consistency.

    Never mutates the dataset. Empty splits, id collisions (within or
    across splits) and mixed channel counts are hard errors.
    """
    if not dataset.train_images:
        raise DatasetError(f"empty split: {dataset.scene_name}/train")
    if not dataset.test_images:
        raise DatasetError(f"empty split: {dataset.scene_name}/test")

    all_images = list(dataset.train_images) + list(dataset.test_images)
    seen: set[str] = set()
    for img in all_images:
        if img.image_id in seen:
            raise DatasetError(f"id collision: {img.image_id!r}")
        seen.add(img.image_id)

    resolutions: dict[tuple[int, int], int] = {}
    bands: set[int] = set()
    for img in all_images:
        resolutions[img.size()] = resolutions.get(img.size(), 0) + 1
        bands.add(img.raw_bands())
    if len(bands) > 1:
        raise DatasetError(f"mixed channel counts across images: {sorted(bands)}")

    warnings = []
    if len(resolutions) > 1:
        warnings.append(f"{len(resolutions)} distinct resolutions present")
    return DatasetReport(
        M=len(dataset.train_images),
        N=len(dataset.test_images),
        resolutions=resolutions,
        warnings=warnings,
    )


LIGHTING_TAGS = ("sun", "shade", "both")
MOTION_TAGS = ("static", "moving")


@dataclass
class TrackedScoreSeries:
    """Per-frame objectness of one tracked object, patched vs clean footage.

    A frame where the object yields no detection above the near-zero
    retrieval threshold records score 0.
    """

    object_id: str
    patched_scores: list[float]
    clean_scores: list[float]
    conditions: dict[str, str] = field(default_factory=lambda: {"lighting": "both",
                                                                "motion": "static"})

    def __post_init__(self) -> None:
        if not self.patched_scores or not self.clean_scores:
            raise ValueError(f"series {self.object_id}: both score lists must be non-empty")
        for name, scores in (("patched", self.patched_scores), ("clean", self.clean_scores)):
            for s in scores:
                if not 0.0 <= s <= 1.0:
                    raise ValueError(f"series {self.object_id}: {name} score {s} out of range")
        if self.conditions.get("lighting") not in LIGHTING_TAGS:
            raise ValueError(f"unknown lighting tag {self.conditions.get('lighting')!r}")
        if self.conditions.get("motion") not in MOTION_TAGS:
            raise ValueError(f"unknown motion tag {self.conditions.get('motion')!r}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "object_id": self.object_id,
                "patched_scores": self.patched_scores,
                "clean_scores": self.clean_scores,
                "conditions": self.conditions,
            },
            indent=2,
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "TrackedScoreSeries":
        doc = json.loads(text)
        return TrackedScoreSeries(
            object_id=doc["object_id"],
            patched_scores=[float(s) for s in doc["patched_scores"]],
            clean_scores=[float(s) for s in doc["clean_scores"]],
            conditions=dict(doc["conditions"]),
        )
