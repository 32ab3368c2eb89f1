"""Synthetic cross-domain datasets for constructed experiments.

Vector kind: every class is a Gaussian blob around a mean on a sphere of
radius ``class_sep``. The source split uses the first ``source_classes``
generators; the target split's blobs are affine-shifted versions of the
remaining held-out generators (scaled by ``shift_scale`` and shifted along a
shared random offset of length ``shift_offset``), giving novel classes with
a controlled domain gap.

Image kind: every class is a Gaussian bump with a class-specific centre and
per-channel amplitude on a C=3 square canvas plus pixel noise; target
classes shift the held-out centres by a shared offset and rescale the
amplitudes.

Samples are rounded to float32 so the FTE1 files round-trip bit-exactly.
Spec files use the same flat key=value syntax as experiment configs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .config import parse_kv_text
from .data_io import save_dataset
from .episodes import Dataset
from .errors import ConfigError
from .linalg import RngStream

__all__ = ["SynthSpec", "parse_synth_text", "load_synth_spec", "generate", "write_datasets"]


@dataclass
class SynthSpec:
    kind: str = "vector"  # "vector" or "image"
    dim: int = 16
    image_size: int = 16
    source_classes: int = 8
    target_classes: int = 5
    source_per_class: int = 100
    target_per_class: int = 25
    noise: float = 0.25
    class_sep: float = 2.0
    shift_scale: float = 1.0
    shift_offset: float = 0.5
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.kind not in ("vector", "image"):
            raise ConfigError(f"kind must be 'vector' or 'image', got {self.kind!r}")
        for name in ("dim", "image_size", "source_classes", "target_classes",
                     "source_per_class", "target_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kind == "image" and self.image_size < 4:
            raise ConfigError(f"image_size must be >= 4, got {self.image_size}")
        if self.noise < 0 or self.class_sep <= 0:
            raise ConfigError("noise must be >= 0 and class_sep > 0")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        return self


def parse_synth_text(text: str, source: str = "<synth>") -> SynthSpec:
    spec = SynthSpec()
    names = {f.name: f.type for f in fields(SynthSpec)}
    for key, value in parse_kv_text(text, source):
        if key not in names:
            raise ConfigError(f"{source}: unknown synth key {key!r}")
        kind = names[key]
        try:
            if kind == "int":
                setattr(spec, key, int(value))
            elif kind == "float":
                setattr(spec, key, float(value))
            else:
                setattr(spec, key, value)
        except ValueError:
            raise ConfigError(f"{source}: bad value {value!r} for {key}")
    return spec.validate()


def load_synth_spec(path) -> SynthSpec:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"synthetic spec file not found: {path}")
    return parse_synth_text(path.read_text(), source=str(path))


def _unit(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)


def _f32_round(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def _generate_vector(spec: SynthSpec) -> tuple[Dataset, Dataset]:
    g = RngStream(spec.seed, 0).generator()
    total = spec.source_classes + spec.target_classes
    means = np.stack(
        [spec.class_sep * _unit(g.normal(size=spec.dim)) for _ in range(total)]
    )
    offset = spec.shift_offset * _unit(g.normal(size=spec.dim))

    def blob(mean, count):
        return mean + spec.noise * g.normal(size=(count, spec.dim))

    src_x, src_y = [], []
    for c in range(spec.source_classes):
        src_x.append(blob(means[c], spec.source_per_class))
        src_y.append(np.full(spec.source_per_class, c))
    tgt_x, tgt_y = [], []
    for c in range(spec.target_classes):
        mean = spec.shift_scale * means[spec.source_classes + c] + offset
        tgt_x.append(blob(mean, spec.target_per_class))
        tgt_y.append(np.full(spec.target_per_class, c))
    source = Dataset(_f32_round(np.concatenate(src_x)), np.concatenate(src_y), "source")
    target = Dataset(_f32_round(np.concatenate(tgt_x)), np.concatenate(tgt_y), "target")
    return source, target


def _generate_image(spec: SynthSpec) -> tuple[Dataset, Dataset]:
    g = RngStream(spec.seed, 1).generator()
    s = spec.image_size
    total = spec.source_classes + spec.target_classes
    centers = g.uniform(0.25 * s, 0.75 * s, size=(total, 2))
    amps = g.uniform(0.4, 1.0, size=(total, 3))
    width = 0.18 * s
    offset = g.uniform(-0.15 * s, 0.15 * s, size=2)
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")

    def render(center, amp, count):
        out = np.empty((count, 3, s, s))
        for i in range(count):
            cy = center[0] + g.normal() * 0.03 * s
            cx = center[1] + g.normal() * 0.03 * s
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width**2))
            img = amp[:, None, None] * bump[None, :, :]
            img = img + spec.noise * 0.1 * g.normal(size=img.shape)
            out[i] = np.clip(img, 0.0, 1.0)
        return out

    src_x, src_y = [], []
    for c in range(spec.source_classes):
        src_x.append(render(centers[c], amps[c], spec.source_per_class))
        src_y.append(np.full(spec.source_per_class, c))
    tgt_x, tgt_y = [], []
    for c in range(spec.target_classes):
        idx = spec.source_classes + c
        center = centers[idx] + offset
        amp = np.clip(spec.shift_scale * amps[idx], 0.0, 1.0)
        tgt_x.append(render(center, amp, spec.target_per_class))
        tgt_y.append(np.full(spec.target_per_class, c))
    source = Dataset(_f32_round(np.concatenate(src_x)), np.concatenate(src_y), "source")
    target = Dataset(_f32_round(np.concatenate(tgt_x)), np.concatenate(tgt_y), "target")
    return source, target


def generate(spec: SynthSpec) -> tuple[Dataset, Dataset]:
    """Source and target datasets for a constructed cross-domain task."""
    if spec.kind == "vector":
        return _generate_vector(spec)
    return _generate_image(spec)


def write_datasets(spec: SynthSpec, out_dir) -> tuple[Path, Path]:
    """Emit source.fte1 and target.fte1 under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source, target = generate(spec)
    src_path = out_dir / "source.fte1"
    tgt_path = out_dir / "target.fte1"
    save_dataset(source, src_path)
    save_dataset(target, tgt_path)
    return src_path, tgt_path
