"""The five image augmentation operations, compound modes, support-set
expansion, and test-time augmentation averaging.

Images are (C, H, W) float64 arrays with pixels in [0, 1]; every operation
clamps its output back into that range. Compound modes are strings of
operation initials applied left to right:

    S  scale (bilinear resize to a square output size)
    C  random resized crop (area and aspect-ratio sampled, then resized)
    J  colour jitter (brightness, contrast, colour, each strength 0.4)
    H  horizontal flip with probability 0.5
    R  rotation by a uniform angle in [0, 45] degrees, zero fill

Deterministic geometry primitives (``resize_bilinear``, ``rotate``,
``flip_h``, ``crop``, ``jitter``) carry the math; the random wrappers only
sample parameters from the provided generator, a fixed number of draws per
op, so a fixed stream reproduces identical pixels.

Resampling uses half-pixel-centre bilinear interpolation with edge clamping
(resize) or zero fill (rotation); resizing to the input size is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

__all__ = [
    "AugmentParams",
    "parse_compound_mode",
    "resize_bilinear",
    "crop",
    "rotate",
    "flip_h",
    "jitter",
    "apply_op",
    "apply_variant",
    "expand_support",
    "tta_predict",
]

OP_INITIALS = "SCJHR"
MAX_OUT_SIZE = 4096


@dataclass(frozen=True)
class AugmentParams:
    """Operation hyperparameters; defaults follow the standard recipe
    (jitter strengths 0.4, flip probability 0.5, rotation up to 45 degrees,
    crop area in [0.08, 1] with aspect ratio in [3/4, 4/3])."""

    out_size: int = 84
    brightness: float = 0.4
    contrast: float = 0.4
    color: float = 0.4
    flip_prob: float = 0.5
    max_rotation_deg: float = 45.0
    crop_area: tuple[float, float] = (0.08, 1.0)
    crop_ratio: tuple[float, float] = (0.75, 4.0 / 3.0)

    def __post_init__(self):
        if not 1 <= self.out_size <= MAX_OUT_SIZE:
            raise ConfigError(
                f"augmentation output size {self.out_size} outside [1, {MAX_OUT_SIZE}]"
            )


def parse_compound_mode(text: str) -> tuple[str, ...]:
    """Split a '+'-separated compound mode string into variant strings."""
    variants = tuple(part.strip() for part in text.split("+"))
    if not variants or any(not v for v in variants):
        raise ConfigError(f"empty variant in compound mode {text!r}")
    for variant in variants:
        bad = set(variant) - set(OP_INITIALS)
        if bad:
            raise ConfigError(
                f"unknown augmentation initials {sorted(bad)} in {variant!r} "
                f"(allowed: {OP_INITIALS})"
            )
    return variants


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ContractError(f"expected a (C, H, W) image, got shape {img.shape}")
    return img


def _clamp(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping; resizing
    to the input size reproduces it exactly."""
    img = _check_image(img)
    _, h, w = img.shape
    src_y = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    src_x = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (src_y - y0)[None, :, None]
    wx = (src_x - x0)[None, None, :]
    top = img[:, y0[:, None], x0[None, :]] * (1 - wx) + img[:, y0[:, None], x1[None, :]] * wx
    bot = img[:, y1[:, None], x0[None, :]] * (1 - wx) + img[:, y1[:, None], x1[None, :]] * wx
    return top * (1 - wy) + bot * wy


def crop(img: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    img = _check_image(img)
    _, h, w = img.shape
    if not (0 <= top and top + height <= h and 0 <= left and left + width <= w):
        raise ContractError(
            f"crop ({top},{left},{height},{width}) outside image {h}x{w}"
        )
    return img[:, top : top + height, left : left + width]


def flip_h(img: np.ndarray) -> np.ndarray:
    return _check_image(img)[:, :, ::-1].copy()


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image centre, bilinear sampling, zero fill outside.

    A zero angle reproduces the input exactly.
    """
    img = _check_image(img)
    _, h, w = img.shape
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    src_y = cy + cos_t * dy - sin_t * dx
    src_x = cx + sin_t * dy + cos_t * dx
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    wy = src_y - y0
    wx = src_x - x0
    out = np.zeros_like(img)
    for oy, ox, wgt in (
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x0 + 1, (1 - wy) * wx),
        (y0 + 1, x0, wy * (1 - wx)),
        (y0 + 1, x0 + 1, wy * wx),
    ):
        valid = (oy >= 0) & (oy < h) & (ox >= 0) & (ox < w)
        vals = img[:, np.clip(oy, 0, h - 1), np.clip(ox, 0, w - 1)]
        out += vals * (wgt * valid)[None, :, :]
    return out


def jitter(
    img: np.ndarray, brightness_factor: float, contrast_factor: float, color_factor: float
) -> np.ndarray:
    """Multiplicative brightness, blend with the image mean for contrast,
    blend with the per-pixel channel mean for colour; clamp to [0, 1]."""
    img = _check_image(img)
    out = img * brightness_factor
    out = contrast_factor * out + (1.0 - contrast_factor) * out.mean()
    gray = out.mean(axis=0, keepdims=True)
    out = color_factor * out + (1.0 - color_factor) * gray
    return _clamp(out)


def _random_resized_crop(
    img: np.ndarray, rng: np.random.Generator, params: AugmentParams
) -> np.ndarray:
    _, h, w = img.shape
    area_frac = rng.uniform(params.crop_area[0], params.crop_area[1])
    log_ratio = rng.uniform(math.log(params.crop_ratio[0]), math.log(params.crop_ratio[1]))
    ratio = math.exp(log_ratio)
    target_area = area_frac * h * w
    cw = min(max(int(round(math.sqrt(target_area * ratio))), 1), w)
    ch = min(max(int(round(math.sqrt(target_area / ratio))), 1), h)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    patch = crop(img, top, left, ch, cw)
    return resize_bilinear(patch, params.out_size, params.out_size)


def apply_op(
    initial: str, img: np.ndarray, rng: np.random.Generator, params: AugmentParams
) -> np.ndarray:
    """One operation by initial; output pixels are clamped to [0, 1]."""
    if initial == "S":
        out = resize_bilinear(img, params.out_size, params.out_size)
    elif initial == "C":
        out = _random_resized_crop(img, rng, params)
    elif initial == "J":
        bf = rng.uniform(1.0 - params.brightness, 1.0 + params.brightness)
        cf = rng.uniform(1.0 - params.contrast, 1.0 + params.contrast)
        sf = rng.uniform(1.0 - params.color, 1.0 + params.color)
        out = jitter(img, bf, cf, sf)
    elif initial == "H":
        out = flip_h(img) if rng.uniform() < params.flip_prob else _check_image(img).copy()
    elif initial == "R":
        out = rotate(img, float(rng.uniform(0.0, params.max_rotation_deg)))
    else:
        raise ConfigError(f"unknown augmentation initial {initial!r}")
    return _clamp(out)


def apply_variant(
    variant: str, img: np.ndarray, rng: np.random.Generator, params: AugmentParams
) -> np.ndarray:
    """Left-to-right composition of the initials in ``variant``."""
    out = img
    for initial in variant:
        out = apply_op(initial, out, rng, params)
    return out


def expand_support(
    inputs: np.ndarray,
    labels: np.ndarray,
    mode: tuple[str, ...],
    rng: np.random.Generator,
    params: AugmentParams,
) -> tuple[np.ndarray, np.ndarray]:
    """One variant per compound string per image, labels preserved.

    Output is ordered variant-major (all images under the first variant,
    then the second, ...), size |inputs| * |mode|.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 4 or inputs.shape[0] < 1:
        raise ContractError(f"expected a non-empty (n, C, H, W) batch, got {inputs.shape}")
    out_batches = []
    for variant in mode:
        batch = [apply_variant(variant, img, rng, params) for img in inputs]
        shapes = {b.shape for b in batch}
        if len(shapes) != 1:
            raise ConfigError(f"variant {variant!r} produced mixed image sizes {shapes}")
        out_batches.append(np.stack(batch))
    shapes = {b.shape[1:] for b in out_batches}
    if len(shapes) != 1:
        raise ConfigError(
            f"compound mode variants disagree on output size ({shapes}); "
            f"start each variant with S or C"
        )
    aug_inputs = np.concatenate(out_batches, axis=0)
    aug_labels = np.tile(np.asarray(labels), len(mode))
    return aug_inputs, aug_labels


def tta_predict(
    predict_fn,
    img: np.ndarray,
    mode: tuple[str, ...],
    rng: np.random.Generator,
    params: AugmentParams,
) -> np.ndarray:
    """Mean of ``predict_fn`` over the augmented variants of one image."""
    acc = None
    for variant in mode:
        probs = np.asarray(predict_fn(apply_variant(variant, img, rng, params)))
        acc = probs if acc is None else acc + probs
    return acc / len(mode)
