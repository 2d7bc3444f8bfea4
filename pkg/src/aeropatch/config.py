"""Dotted-key configuration: defaults, config files, CLI overrides, manifest.

Config files are plain text, one `key = value` per line, # comments.
Every key can also be passed on the command line as --key=value. Unknown
keys are hard errors listing the valid set.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from . import __version__
from .augment import AugmentConfig, WeatherEffect
from .embed import PlacementGeometry
from .losses import LossWeights, PipelineVariant
from .optimize import TrainConfig
from .types import (OFF_DIGITAL_SIZE, OFF_PHYSICAL_SIZE, ON_DIGITAL_SIZE,
                    ON_PHYSICAL_SIZE, PatchDesign)


class ConfigError(ValueError):
    """Invalid key, value, or combination; exits with status 2 in the CLI."""


# key -> (type, default, help)
SCHEMA: dict[str, tuple[type, Any, str]] = {
    "patch.design": (str, "on", "patch design: on | off"),
    "patch.width_px": (int, 0, "digital patch width (0 = design default)"),
    "patch.height_px": (int, 0, "digital patch height (0 = design default)"),
    "patch.phys_w_mm": (float, 0.0, "physical width in mm (0 = design default)"),
    "patch.phys_h_mm": (float, 0.0, "physical height in mm (0 = design default)"),
    "embed.ratio": (float, 0.0, "embedded patch width / box width (0 = design default)"),
    "embed.off_gap": (float, 0.25, "OFF strip gap as a fraction of box width"),
    "embed.off_gap_px": (float, -1.0, "absolute OFF gap in px (overrides embed.off_gap if >= 0)"),
    "embed.compose_order": (str, "given", "composite order for overlapping boxes: given | score"),
    "embed.translate_jitter": (float, 0.0, "placement jitter as a fraction of box size"),
    "aug.rotation_deg": (float, 20.0, "rotation range, degrees"),
    "aug.brightness": (float, 0.1, "brightness range"),
    "aug.contrast_min": (float, 0.8, "contrast lower bound"),
    "aug.contrast_max": (float, 1.2, "contrast upper bound"),
    "aug.noise": (float, 0.1, "per-pixel noise amplitude"),
    "aug.scale_jitter": (float, 0.1, "relative scale jitter"),
    "aug.per_image": (bool, False, "draw one augmentation per image instead of per box"),
    "aug.weather.enabled": (bool, False, "allow weather transforms"),
    "aug.weather.effects": (str, "sun_brightness,snow,rain,fog,autumn_leaves",
                            "comma-separated enabled weather effects"),
    "aug.weather.intensity_min": (float, 0.1, "weather intensity lower bound"),
    "aug.weather.intensity_max": (float, 0.5, "weather intensity upper bound"),
    "detector.input_size": (int, 128, "detector input size (square)"),
    "detector.checkpoint": (str, "", "detector checkpoint path"),
    "detector.max_scope": (str, "image", "loss max over: image | boxes"),
    "detector.soft_max_temp": (float, 0.0, "softmax temperature for the loss max (0 = hard)"),
    "annotate.objectness": (float, 0.5, "annotation objectness threshold"),
    "annotate.nms_iou": (float, 0.4, "annotation NMS IoU threshold"),
    "annotate.review_threshold": (float, 0.65, "detections below this go to the review file"),
    "loss.delta": (float, 0.01, "non-printability weight"),
    "loss.gamma": (float, 2.5, "total variation weight"),
    "train.variant": (str, "gc", "pipeline variant: gc | gcw | control"),
    "train.epochs": (int, 200, "training epochs"),
    "train.batch_size": (int, 8, "training batch size"),
    "train.learning_rate": (float, 0.03, "Adam learning rate"),
    "train.seed": (int, 0, "training rng seed"),
    "train.checkpoint_interval": (int, 50, "epochs between checkpoints"),
    "eval.regime": (str, "std", "digital evaluation regime: std | std_w"),
    "eval.min_iou": (float, 0.5, "matching IoU for AORR"),
    "eval.retrieval_threshold": (float, 0.001, "near-zero objectness retrieval threshold"),
    "eval.nms_iou": (float, 0.4, "NMS IoU during evaluation"),
    "eval.aorr_norm": (str, "total", "AORR normalization: total | per_image"),
    "eval.seed": (int, 1, "evaluation rng seed"),
    "eval.noop_patch": (bool, False, "skip compositing (pipeline sanity baseline)"),
    "physical.min_iou": (float, 0.5, "track-to-detection matching IoU"),
    "physical.retrieval_threshold": (float, 0.001, "retrieval threshold for frame re-runs"),
    "synth.image_size": (int, 128, "synthetic scene size"),
    "synth.n_train": (int, 60, "synthetic training images"),
    "synth.n_test": (int, 12, "synthetic test images"),
    "synth.car_min": (int, 1, "min cars per scene"),
    "synth.car_max": (int, 4, "max cars per scene"),
    "synth.car_len_min": (float, 26.0, "min car length px"),
    "synth.car_len_max": (float, 38.0, "max car length px"),
    "synth.seed": (int, 7, "synthetic generation seed"),
    "dettrain.epochs": (int, 40, "toy detector training epochs"),
    "dettrain.batch_size": (int, 16, "toy detector batch size"),
    "dettrain.learning_rate": (float, 0.001, "toy detector learning rate"),
    "dettrain.seed": (int, 11, "toy detector training seed"),
    "dettrain.occlusion_augment": (bool, True, "train detector against noise occluders"),
}


def _coerce(key: str, raw: str) -> Any:
    kind = SCHEMA[key][0]
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for key {key} (expected {kind.__name__})")


def _unknown(key: str) -> ConfigError:
    valid = "\n  ".join(sorted(SCHEMA))
    return ConfigError(f"unknown config key {key!r}; valid keys:\n  {valid}")


class RunConfig:
    """Resolved configuration: schema defaults, then file, then CLI flags."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {k: v[1] for k, v in SCHEMA.items()}
        for key, value in (values or {}).items():
            if key not in SCHEMA:
                raise _unknown(key)
            self.values[key] = value

    def __getitem__(self, key: str) -> Any:
        if key not in SCHEMA:
            raise _unknown(key)
        return self.values[key]

    def set(self, key: str, raw: str) -> None:
        if key not in SCHEMA:
            raise _unknown(key)
        self.values[key] = _coerce(key, raw)

    def load_file(self, path: str | Path) -> None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, raw = stripped.partition("=")
            self.set(key.strip(), raw.strip())

    def apply_flags(self, flags: list[str]) -> None:
        """Consume `--key=value` / `--key value` override arguments."""
        i = 0
        while i < len(flags):
            flag = flags[i]
            if not flag.startswith("--"):
                raise ConfigError(f"unexpected argument {flag!r}")
            body = flag[2:]
            if "=" in body:
                key, _, raw = body.partition("=")
                i += 1
            else:
                key = body
                if i + 1 >= len(flags):
                    raise ConfigError(f"flag --{key} needs a value")
                raw = flags[i + 1]
                i += 2
            self.set(key, raw)

    # Builders for the domain objects the pipeline consumes.

    def design(self) -> PatchDesign:
        try:
            return PatchDesign(self["patch.design"])
        except ValueError:
            raise ConfigError(f"patch.design must be on|off, got {self['patch.design']!r}")

    def patch_sizes(self) -> tuple[tuple[int, int], tuple[float, float]]:
        design = self.design()
        digital = (ON_DIGITAL_SIZE if design is PatchDesign.ON else OFF_DIGITAL_SIZE)
        physical = (ON_PHYSICAL_SIZE if design is PatchDesign.ON else OFF_PHYSICAL_SIZE)
        if self["patch.width_px"] > 0 and self["patch.height_px"] > 0:
            digital = (self["patch.width_px"], self["patch.height_px"])
        if self["patch.phys_w_mm"] > 0 and self["patch.phys_h_mm"] > 0:
            physical = (self["patch.phys_w_mm"], self["patch.phys_h_mm"])
        return digital, physical

    def geometry(self) -> PlacementGeometry:
        gap_px = self["embed.off_gap_px"]
        return PlacementGeometry(
            design=self.design(),
            patch_to_car_ratio=self["embed.ratio"],
            off_gap_frac=self["embed.off_gap"],
            off_gap_px=gap_px if gap_px >= 0 else None,
        )

    def variant(self) -> PipelineVariant:
        try:
            return PipelineVariant(self["train.variant"])
        except ValueError:
            raise ConfigError(f"train.variant must be gc|gcw|control, got "
                              f"{self['train.variant']!r}")

    def weather_effects(self) -> tuple[WeatherEffect, ...]:
        names = [s.strip() for s in self["aug.weather.effects"].split(",") if s.strip()]
        try:
            return tuple(WeatherEffect(n) for n in names)
        except ValueError as exc:
            raise ConfigError(f"unknown weather effect in aug.weather.effects: {exc}")

    def aug_config(self, weather: bool) -> AugmentConfig:
        if weather and not self["aug.weather.enabled"]:
            raise ConfigError("weather required (train.variant=gcw or eval.regime=std_w) "
                              "but aug.weather.enabled is false")
        digital, _ = self.patch_sizes()
        geometry = self.geometry()
        try:
            return AugmentConfig(
                base_scale_ratio=geometry.patch_to_car_ratio,
                patch_width_px=digital[0],
                rotation_deg=self["aug.rotation_deg"],
                brightness=self["aug.brightness"],
                contrast_min=self["aug.contrast_min"],
                contrast_max=self["aug.contrast_max"],
                noise=self["aug.noise"],
                scale_jitter=self["aug.scale_jitter"],
                translate_jitter=self["embed.translate_jitter"],
                weather_enabled=weather,
                weather_effects=self.weather_effects(),
                weather_intensity=(self["aug.weather.intensity_min"],
                                   self["aug.weather.intensity_max"]),
            )
        except ValueError as exc:
            raise ConfigError(str(exc))

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                pipeline_variant=self.variant(),
                epochs=self["train.epochs"],
                batch_size=self["train.batch_size"],
                learning_rate=self["train.learning_rate"],
                rng_seed=self["train.seed"],
                checkpoint_interval=self["train.checkpoint_interval"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc))

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(self["loss.delta"], self["loss.gamma"])
        except ValueError as exc:
            raise ConfigError(str(exc))

    def manifest(self, command: str, extras: dict[str, Any]) -> str:
        """Reproducibility manifest: config echo, seeds, checksums, version.

        Deliberately carries no timestamps or hostnames so identical runs
        produce identical manifests.
        """
        doc = {
            "command": command,
            "config": {k: self.values[k] for k in sorted(self.values)},
            "version": __version__,
        }
        doc.update(extras)
        return json.dumps(doc, indent=2, sort_keys=True)


def write_atomic(path: str | Path, text: str) -> None:
    """Write via temp file + rename so partial output never lands."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
