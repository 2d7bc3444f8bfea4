"""Geometric, colour-space, and weather transforms for patch training and eval.

Colour transforms act on the patch pixels before embedding; weather
effects act on the whole composited image. Every transform is built from
differentiable primitives (affine blends, gains, overlays with
pre-sampled masks) so gradients can flow back to patch pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from PIL import Image, ImageDraw

from .types import Box

# Hard bounds on the sampled transform parameters.
MAX_ROTATION_DEG = 20.0
MAX_BRIGHTNESS = 0.1
CONTRAST_BOUNDS = (0.8, 1.2)
MAX_NOISE = 0.1


class WeatherEffect(str, Enum):
    SUN_BRIGHTNESS = "sun_brightness"
    SNOW = "snow"
    RAIN = "rain"
    FOG = "fog"
    AUTUMN_LEAVES = "autumn_leaves"


@dataclass(frozen=True)
class WeatherSpec:
    """One weather effect at a given strength; seed fixes the overlay masks."""

    effect: WeatherEffect
    intensity: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"weather intensity {self.intensity} outside [0, 1]")


@dataclass(frozen=True)
class AugmentationSpec:
    """Sampled transform parameters for one embed pass.

    noise_seed fixes the per-pixel noise map so repeated application of
    the same spec is deterministic and differentiable w.r.t. the input.
    translate_frac offsets the placement as a fraction of box size
    (optional jitter, zero by default).
    """

    scale_factor: float
    rotation_deg: float
    brightness_delta: float
    contrast_factor: float
    noise_amplitude: float
    noise_seed: int = 0
    translate_frac: tuple[float, float] = (0.0, 0.0)
    weather: WeatherSpec | None = None

    def __post_init__(self) -> None:
        if self.scale_factor <= 0.0:
            raise ValueError(f"scale factor {self.scale_factor} must be positive")
        if abs(self.rotation_deg) > MAX_ROTATION_DEG:
            raise ValueError(f"rotation {self.rotation_deg} outside ±{MAX_ROTATION_DEG}")
        if abs(self.brightness_delta) > MAX_BRIGHTNESS:
            raise ValueError(f"brightness {self.brightness_delta} outside ±{MAX_BRIGHTNESS}")
        if not CONTRAST_BOUNDS[0] <= self.contrast_factor <= CONTRAST_BOUNDS[1]:
            raise ValueError(f"contrast {self.contrast_factor} outside {CONTRAST_BOUNDS}")
        if not 0.0 <= self.noise_amplitude <= MAX_NOISE:
            raise ValueError(f"noise amplitude {self.noise_amplitude} outside [0, {MAX_NOISE}]")

    @staticmethod
    def identity(scale_factor: float = 1.0) -> "AugmentationSpec":
        return AugmentationSpec(scale_factor, 0.0, 0.0, 1.0, 0.0)


@dataclass(frozen=True)
class AugmentConfig:
    """Sampling ranges plus the scale anchor used to size embedded patches.

    base_scale_ratio is the patch-to-car width ratio; with patch_width_px
    it converts a target box width into the base scale factor, which is
    then jittered by ±scale_jitter relative.
    """

    base_scale_ratio: float
    patch_width_px: int
    rotation_deg: float = MAX_ROTATION_DEG
    brightness: float = MAX_BRIGHTNESS
    contrast_min: float = CONTRAST_BOUNDS[0]
    contrast_max: float = CONTRAST_BOUNDS[1]
    noise: float = MAX_NOISE
    scale_jitter: float = 0.1
    translate_jitter: float = 0.0
    weather_enabled: bool = False
    weather_effects: tuple[WeatherEffect, ...] = tuple(WeatherEffect)
    weather_intensity: tuple[float, float] = (0.1, 0.5)

    def __post_init__(self) -> None:
        if self.base_scale_ratio <= 0.0:
            raise ValueError("base scale ratio must be positive")
        if not 0.0 <= self.rotation_deg <= MAX_ROTATION_DEG:
            raise ValueError(f"rotation range {self.rotation_deg} outside [0, {MAX_ROTATION_DEG}]")
        if not 0.0 <= self.brightness <= MAX_BRIGHTNESS:
            raise ValueError(f"brightness range {self.brightness} outside [0, {MAX_BRIGHTNESS}]")
        if not CONTRAST_BOUNDS[0] <= self.contrast_min <= self.contrast_max <= CONTRAST_BOUNDS[1]:
            raise ValueError("contrast range must nest inside " + str(CONTRAST_BOUNDS))
        if not 0.0 <= self.noise <= MAX_NOISE:
            raise ValueError(f"noise range {self.noise} outside [0, {MAX_NOISE}]")
        if self.weather_enabled and not self.weather_effects:
            raise ValueError("weather enabled but no effects configured")


def sample_augmentation(rng: np.random.Generator,
                        config: AugmentConfig,
                        target_box: Box) -> AugmentationSpec:
    """Draw one transform spec for embedding the patch at target_box.

    The scale factor maps patch pixels to image pixels so the embedded
    patch width is roughly base_scale_ratio times the box width, jittered
    by ±scale_jitter relative. Weather is sampled only when enabled
    (the G/C pipeline excludes it by definition).
    """
    x0, y0, x1, y1 = target_box
    if (x1 - x0) <= 0.0 or (y1 - y0) <= 0.0:
        raise ValueError(f"degenerate target box {target_box}")

    base_scale = config.base_scale_ratio * (x1 - x0) / config.patch_width_px
    scale = base_scale * (1.0 + rng.uniform(-config.scale_jitter, config.scale_jitter))
    rotation = rng.uniform(-config.rotation_deg, config.rotation_deg)
    brightness = rng.uniform(-config.brightness, config.brightness)
    contrast = rng.uniform(config.contrast_min, config.contrast_max)
    translate = (rng.uniform(-config.translate_jitter, config.translate_jitter),
                 rng.uniform(-config.translate_jitter, config.translate_jitter))
    noise_seed = int(rng.integers(0, 2**31 - 1))

    weather = None
    if config.weather_enabled:
        effect = config.weather_effects[int(rng.integers(0, len(config.weather_effects)))]
        lo, hi = config.weather_intensity
        weather = WeatherSpec(effect, float(rng.uniform(lo, hi)),
                              seed=int(rng.integers(0, 2**31 - 1)))

    return AugmentationSpec(
        scale_factor=float(scale),
        rotation_deg=float(rotation),
        brightness_delta=float(brightness),
        contrast_factor=float(contrast),
        noise_amplitude=float(config.noise),
        noise_seed=noise_seed,
        translate_frac=(float(translate[0]), float(translate[1])),
        weather=weather,
    )


def apply_color_transform(patch_pixels: torch.Tensor,
                          spec: AugmentationSpec) -> torch.Tensor:
    """clamp(contrast * pixels + brightness + noise, 0, 1).

    Noise is uniform per pixel within ±noise_amplitude, generated from
    spec.noise_seed, so the map is fixed for a fixed spec and the output
    is differentiable w.r.t. the input pixels.
    """
    out = patch_pixels * spec.contrast_factor + spec.brightness_delta
    if spec.noise_amplitude > 0.0:
        gen = torch.Generator().manual_seed(spec.noise_seed)
        noise = torch.empty_like(patch_pixels, device="cpu").uniform_(
            -spec.noise_amplitude, spec.noise_amplitude, generator=gen)
        out = out + noise.to(patch_pixels.device)
    return out.clamp(0.0, 1.0)


# Effect constants; exposed here rather than buried in the formulas.
SUN_MAX_GAIN = 0.5            # global gain 1 + intensity * SUN_MAX_GAIN
FOG_GREY = 0.5                # blend target; alpha equals intensity
RAIN_TONE = 0.75              # streaks pull pixels toward this grey
SNOW_FLAKE_DENSITY = 1 / 400  # flakes per pixel of image area
RAIN_STREAK_DENSITY = 1 / 600
AUTUMN_COLOR = (0.80, 0.45, 0.12)
AUTUMN_MASK_GAIN = 4.0        # sharpness of the vegetation mask


def _snow_mask(height: int, width: int, seed: int) -> torch.Tensor:
    """Soft white flakes: disks at seeded random positions, values in [0, 1]."""
    rng = np.random.default_rng(seed)
    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    n = max(1, int(height * width * SNOW_FLAKE_DENSITY))
    for _ in range(n):
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        r = rng.uniform(1.0, 2.5)
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
    return torch.from_numpy(np.asarray(canvas, dtype=np.float32) / 255.0)


def _rain_mask(height: int, width: int, seed: int) -> torch.Tensor:
    """Near-vertical streak overlay mask, values in [0, 1]."""
    rng = np.random.default_rng(seed)
    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    n = max(1, int(height * width * RAIN_STREAK_DENSITY))
    for _ in range(n):
        x = rng.uniform(0, width)
        y = rng.uniform(0, height)
        length = rng.uniform(8.0, 18.0)
        angle = math.radians(rng.uniform(70.0, 110.0))
        dx = math.cos(angle) * length
        dy = math.sin(angle) * length
        draw.line([x, y, x + dx, y + dy], fill=180, width=1)
    return torch.from_numpy(np.asarray(canvas, dtype=np.float32) / 255.0)


def apply_weather(image: torch.Tensor, spec: WeatherSpec) -> torch.Tensor:
    """Apply one weather effect to a (3, H, W) image in [0, 1].

    Every effect is the identity at intensity 0 and keeps outputs in
    [0, 1]. Overlay masks are pre-sampled from spec.seed, so the output
    is deterministic per spec and differentiable w.r.t. the image.
    """
    if not isinstance(spec.effect, WeatherEffect):
        raise ValueError(f"unknown weather effect {spec.effect!r}")
    k = spec.intensity
    _, h, w = image.shape

    if spec.effect is WeatherEffect.SUN_BRIGHTNESS:
        return (image * (1.0 + k * SUN_MAX_GAIN)).clamp(0.0, 1.0)

    if spec.effect is WeatherEffect.FOG:
        return image + k * (FOG_GREY - image)

    if spec.effect is WeatherEffect.SNOW:
        mask = _snow_mask(h, w, spec.seed).to(image.dtype)
        return image + k * mask * (1.0 - image)

    if spec.effect is WeatherEffect.RAIN:
        mask = _rain_mask(h, w, spec.seed).to(image.dtype)
        return (image + k * mask * (RAIN_TONE - image)).clamp(0.0, 1.0)

    # autumn_leaves: hue-shift vegetation-coloured pixels toward orange.
    r, g, b = image[0], image[1], image[2]
    greenness = (g - torch.maximum(r, b)).clamp(min=0.0)
    veg = (greenness * AUTUMN_MASK_GAIN).clamp(0.0, 1.0)
    target = torch.tensor(AUTUMN_COLOR, dtype=image.dtype,
                          device=image.device).view(3, 1, 1)
    return image + k * veg.unsqueeze(0) * (target - image)
