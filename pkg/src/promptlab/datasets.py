"""Synthetic classification data and on-disk sample storage.

Each class is a sinusoidal grating with its own orientation and spatial
frequency. The difficulty knob degrades the signal five ways at once.
One corruption is identical for every sample (a dataset-wide domain
shift): a solid watermark square stamped at a fixed position, growing
with difficulty. Four are per-sample: orientation jitter, phase
randomization, a random-orientation distractor grating, and additive
pixel noise.

At difficulty 0 every sample is a clean, fixed-phase class template, so
a linear readout on frozen features separates the classes. At higher
difficulty the per-sample corruptions hurt any method, but the watermark
is exactly the kind of shift learned prompt tokens can counter (steer
attention around a fixed occlusion) while a retrained linear head on
frozen features cannot.

Datasets reuse the checkpoint container: tensors "images" and "labels"
(labels stored as float32 class indices, exact for any realistic count).
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass

import numpy as np

from .model import CheckpointError, read_named_arrays, write_named_arrays
from .tensor import Rng

SIGNAL_AMP = 0.35
BASE_NOISE_STD = 0.04
NOISE_STD_PER_DIFFICULTY = 0.05
JITTER_STD_PER_DIFFICULTY = 0.06  # radians of orientation wobble
FULL_PHASE_SPAN_AT = 6.0  # difficulty at which phase becomes uniform over [0, 2pi)
DISTRACTOR_AMP_PER_DIFFICULTY = 0.05
WATERMARK_SIDE_FRACTION_PER_DIFFICULTY = 0.3  # of image side, per difficulty unit
WATERMARK_ORIGIN_FRACTION = 0.125  # top-left corner of the stamp


@dataclass
class LabeledSet:
    images: np.ndarray  # [N, H, W, C] float32 in [0, 1]
    labels: np.ndarray  # [N] int64 class indices
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, H, W, C], got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.class_count < 2:
            raise ValueError(f"need at least 2 classes, got {self.class_count}")
        if len(self.labels):
            if self.labels.min() < 0 or self.labels.max() >= self.class_count:
                raise ValueError(f"labels outside [0, {self.class_count})")
            lo, hi = float(self.images.min()), float(self.images.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"pixel values outside [0, 1]: range [{lo}, {hi}]")

    def __len__(self) -> int:
        return len(self.labels)


def class_signature(label: int, class_count: int) -> tuple[float, float]:
    """(orientation, frequency) carrying all class information."""
    orientation = math.pi * label / class_count
    frequency = 2.0 + float(label % 3)
    return orientation, frequency


def synth_generate(
    classes: int,
    samples_per_class: int,
    difficulty: float = 0.0,
    seed: int = 0,
    image_size: int = 32,
) -> LabeledSet:
    """Balanced grating dataset, deterministic in every argument."""
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be positive")
    if difficulty < 0:
        raise ValueError("difficulty must be nonnegative")
    rng = Rng(seed)
    coords = (np.arange(image_size, dtype=np.float32) + 0.5) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    jitter_std = JITTER_STD_PER_DIFFICULTY * difficulty
    phase_span = 2.0 * math.pi * min(1.0, difficulty / FULL_PHASE_SPAN_AT)
    noise_std = BASE_NOISE_STD + NOISE_STD_PER_DIFFICULTY * difficulty
    distractor_amp = DISTRACTOR_AMP_PER_DIFFICULTY * difficulty
    mark_side = int(round(WATERMARK_SIDE_FRACTION_PER_DIFFICULTY * difficulty * image_size))
    mark_origin = int(round(WATERMARK_ORIGIN_FRACTION * image_size))

    images = np.empty((classes * samples_per_class, image_size, image_size, 3), dtype=np.float32)
    labels = np.empty(classes * samples_per_class, dtype=np.int64)
    row = 0
    for label in range(classes):
        cls_rng = rng.split(("class", label))
        theta0, freq = class_signature(label, classes)
        n = samples_per_class
        theta = theta0 + cls_rng.split("jitter").normal((n,), std=jitter_std)
        phase = cls_rng.split("phase").uniform((n,), 0.0, phase_span)
        d_theta = cls_rng.split("d_theta").uniform((n,), 0.0, math.pi)
        d_freq = cls_rng.split("d_freq").uniform((n,), 1.5, 4.5)
        d_phase = cls_rng.split("d_phase").uniform((n,), 0.0, 2.0 * math.pi)
        noise = cls_rng.split("noise").normal((n, image_size, image_size, 3), std=noise_std)
        for i in range(n):
            wave = np.sin(
                2.0 * math.pi * freq * (xx * math.cos(theta[i]) + yy * math.sin(theta[i]))
                + phase[i]
            )
            img = 0.5 + SIGNAL_AMP * wave
            if distractor_amp > 0.0:
                img = img + distractor_amp * np.sin(
                    2.0 * math.pi * d_freq[i] * (xx * np.cos(d_theta[i]) + yy * np.sin(d_theta[i]))
                    + d_phase[i]
                )
            stack = img[:, :, None] + noise[i]
            images[row] = np.clip(stack, 0.0, 1.0)
            labels[row] = label
            row += 1
    if mark_side > 0:
        # opaque stamp, identical for every sample at this difficulty
        lo, hi = mark_origin, min(mark_origin + mark_side, image_size)
        images[:, lo:hi, lo:hi, :] = 1.0
    return LabeledSet(images=images, labels=labels, class_count=classes)


def save_set(dataset: LabeledSet, path: str) -> None:
    write_named_arrays(
        path,
        {"images": dataset.images, "labels": dataset.labels.astype(np.float32)},
        {"kind": "dataset", "class_count": dataset.class_count},
    )


def load_set(path: str) -> LabeledSet:
    arrays, meta = read_named_arrays(path)
    if meta.get("kind") != "dataset" or "images" not in arrays or "labels" not in arrays:
        raise CheckpointError(f"{path}: not a dataset container")
    return LabeledSet(
        images=arrays["images"],
        labels=arrays["labels"].astype(np.int64),
        class_count=int(meta["class_count"]),
    )


def batch_iter(dataset: LabeledSet, batch_size: int, seed: int = 0, shuffle: bool = False):
    """Yield (images, labels) slices; the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = Rng(seed).permutation(len(dataset)) if shuffle else np.arange(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


_SPEC_RE = re.compile(r"^synth:(\d+)x(\d+)@([0-9.]+)#(\d+)$")


@dataclass(frozen=True)
class SynthSpec:
    """Parsed form of the CLI data string synth:<classes>x<per_class>@<difficulty>#<seed>."""

    classes: int
    samples_per_class: int
    difficulty: float
    seed: int

    @classmethod
    def parse(cls, spec: str) -> "SynthSpec":
        m = _SPEC_RE.match(spec)
        if not m:
            raise ValueError(
                f"bad data spec {spec!r}; expected synth:<classes>x<per_class>@<difficulty>#<seed>"
            )
        return cls(
            classes=int(m.group(1)),
            samples_per_class=int(m.group(2)),
            difficulty=float(m.group(3)),
            seed=int(m.group(4)),
        )

    def __str__(self) -> str:
        diff = f"{self.difficulty:g}"
        return f"synth:{self.classes}x{self.samples_per_class}@{diff}#{self.seed}"

    def generate(self, image_size: int = 32) -> LabeledSet:
        return synth_generate(
            self.classes, self.samples_per_class, self.difficulty, self.seed, image_size
        )


def load_data(spec: str, image_size: int = 32) -> LabeledSet:
    """A --data argument is either a synth: spec or a container path."""
    if spec.startswith("synth:"):
        return SynthSpec.parse(spec).generate(image_size)
    if not os.path.exists(spec):
        raise FileNotFoundError(f"no dataset at {spec!r} (and it is not a synth: spec)")
    return load_set(spec)
