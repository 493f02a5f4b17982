"""Image datasets: IDX reading/writing, a synthetic digit corpus, trigger injection."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import DomainError, make_rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file; the message names the byte offset."""


class TargetAbsentWarning(UserWarning):
    pass


@dataclass
class LabeledSet:
    """Flattened images in [0, 1] with integer labels.

    ``attacked`` holds the row indices stamped by :func:`inject_trigger`.
    """

    inputs: np.ndarray
    labels: np.ndarray
    image_shape: tuple
    attacked: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.image_shape = tuple(int(s) for s in self.image_shape)
        m = self.image_shape[0] * self.image_shape[1]
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.size != len(self.labels) * m:
            raise DomainError(f"{inputs.size} pixel values do not make {len(self.labels)} "
                              f"images of shape {self.image_shape}")
        self.inputs = inputs.reshape(len(self.labels), m)
        if len(self.inputs) and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise DomainError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def m(self):
        return self.image_shape[0] * self.image_shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.inputs[idx], self.labels[idx], self.image_shape)


@dataclass(frozen=True)
class TriggerSpec:
    height: int = 4
    width: int = 6
    margin_bottom: int = 2
    margin_right: int = 2
    intensity: float = 1.0

    def check(self, shape):
        s, t = shape
        if not 0.0 <= self.intensity <= 1.0:
            raise DomainError(f"trigger intensity must be in [0, 1], got {self.intensity}")
        if self.height < 1 or self.width < 1 or self.margin_bottom < 0 or self.margin_right < 0:
            raise DomainError("trigger size must be positive and margins non-negative")
        if self.height + self.margin_bottom > s or self.width + self.margin_right > t:
            raise DomainError(f"trigger {self} does not fit in a {s}x{t} image")


@dataclass(frozen=True)
class PoisonPlan:
    target_class: int = 0
    fraction: float = 1.0
    trigger: TriggerSpec = TriggerSpec()


# ----------------------------------------------------------------------
# IDX


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def _header(buf, path, ndim_expected, magic_expected):
    if len(buf) < 4:
        raise IdxFormatError(f"{path}: file too short for magic number at byte offset 0")
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != magic_expected:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0 "
                             f"(expected 0x{magic_expected:08x})")
    need = 4 + 4 * ndim_expected
    if len(buf) < need:
        raise IdxFormatError(f"{path}: header truncated at byte offset {len(buf)} (needs {need} bytes)")
    return struct.unpack_from(">" + "I" * ndim_expected, buf, 4), need


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair; pixels are scaled from bytes to [0, 1]."""
    ibuf = _read(images_path)
    (count, rows, cols), off = _header(ibuf, images_path, 3, IMAGE_MAGIC)
    expected = off + count * rows * cols
    if len(ibuf) != expected:
        raise IdxFormatError(f"{images_path}: payload ends at byte offset {len(ibuf)}, "
                             f"expected {expected} for {count} images of {rows}x{cols}")
    lbuf = _read(labels_path)
    (lcount,), loff = _header(lbuf, labels_path, 1, LABEL_MAGIC)
    if len(lbuf) != loff + lcount:
        raise IdxFormatError(f"{labels_path}: payload ends at byte offset {len(lbuf)}, "
                             f"expected {loff + lcount}")
    if lcount != count:
        raise IdxFormatError(f"{labels_path}: {lcount} labels at byte offset 4 "
                             f"but {count} images in {images_path}")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, offset=off).reshape(count, rows * cols)
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=loff)
    return LabeledSet(pixels / 255.0, labels.astype(np.int64), (rows, cols))


def to_bytes(inputs):
    return np.rint(np.clip(inputs, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_idx(data, images_path, labels_path):
    """Write ``data`` in IDX layout; pixels are rounded to the nearest byte."""
    s, t = data.image_shape
    if len(data.labels) and (data.labels.min() < 0 or data.labels.max() > 255):
        raise DomainError("IDX labels must fit in one byte")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, len(data), s, t))
        fh.write(to_bytes(data.inputs).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, len(data)))
        fh.write(data.labels.astype(np.uint8).tobytes())


# ----------------------------------------------------------------------
# synthetic digits
#
# Strokes are drawn on the unit square (x right, y down) and rasterised
# with a soft distance falloff. Coordinates loosely trace handwritten
# digits so the classes share some curvature, as real digits do.


def _arc(cx, cy, rx, ry, a0, a1, steps=24):
    a = np.radians(np.linspace(a0, a1, steps))
    pts = np.column_stack([cx + rx * np.cos(a), cy - ry * np.sin(a)])
    return [pts]


def _line(*pts):
    return [np.asarray(pts, dtype=float)]


_TEMPLATES = {
    0: _arc(0.5, 0.5, 0.24, 0.34, 0, 360),
    1: _line((0.42, 0.25), (0.52, 0.15), (0.52, 0.85)),
    2: _arc(0.5, 0.34, 0.22, 0.19, 160, -40) + _line((0.66, 0.47), (0.28, 0.85), (0.74, 0.85)),
    3: _arc(0.48, 0.33, 0.2, 0.17, 150, -90) + _arc(0.48, 0.67, 0.22, 0.18, 90, -150),
    4: _line((0.62, 0.85), (0.62, 0.15), (0.25, 0.62), (0.78, 0.62)),
    5: _line((0.72, 0.16), (0.35, 0.16), (0.32, 0.46)) + _arc(0.5, 0.64, 0.22, 0.2, 130, -160),
    6: _arc(0.52, 0.45, 0.22, 0.3, 70, 180) + _arc(0.5, 0.66, 0.2, 0.18, 180, -180),
    7: _line((0.25, 0.17), (0.75, 0.17), (0.42, 0.85)),
    8: _arc(0.5, 0.32, 0.17, 0.16, 0, 360) + _arc(0.5, 0.67, 0.21, 0.18, 0, 360),
    9: _arc(0.5, 0.34, 0.2, 0.18, 0, 360) + _line((0.7, 0.36), (0.62, 0.85)),
}

MIN_SHAPE = 8


def _random_template(cls):
    rng = make_rng(10_000 + cls)
    pts = rng.uniform(0.2, 0.8, size=(rng.integers(3, 6), 2))
    return [pts]


def _raster(strokes, shape, width):
    s, t = shape
    yy, xx = np.mgrid[0:s, 0:t]
    px = np.column_stack([(xx.ravel() + 0.5) / t, (yy.ravel() + 0.5) / s])
    dist = np.full(len(px), np.inf)
    for pts in strokes:
        a, b = pts[:-1], pts[1:]
        d = b - a
        len2 = np.maximum(np.sum(d * d, axis=1), 1e-12)
        # distance from every pixel to every segment
        proj = ((px[:, None, :] - a[None]) * d[None]).sum(-1) / len2[None]
        proj = np.clip(proj, 0.0, 1.0)
        near = a[None] + proj[..., None] * d[None]
        seg = np.sqrt(((px[:, None, :] - near) ** 2).sum(-1)).min(axis=1)
        dist = np.minimum(dist, seg)
    return np.clip(1.5 - dist / width, 0.0, 1.0)


def synth_digits(n_per_class, classes=10, shape=(28, 28), seed=0, noise=0.06):
    """Deterministic digit-like corpus: per-class stroke template plus jitter and noise.

    Pixel values are quantised to multiples of 1/255 so that an IDX round
    trip is exact.
    """
    s, t = shape
    if s < MIN_SHAPE or t < MIN_SHAPE:
        raise DomainError(f"synthetic images must be at least {MIN_SHAPE}x{MIN_SHAPE}, got {shape}")
    rng = make_rng(seed)
    n = n_per_class * classes
    inputs = np.zeros((n, s * t))
    labels = np.repeat(np.arange(classes), n_per_class)
    base_width = 0.045
    for row, cls in enumerate(labels):
        strokes = _TEMPLATES.get(int(cls)) or _random_template(int(cls))
        angle = rng.normal(0.0, 0.12)
        scale = rng.uniform(0.85, 1.1, size=2)
        shift = rng.normal(0.0, 0.035, size=2)
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        moved = [((pts - 0.5) * scale) @ rot.T + 0.5 + shift for pts in strokes]
        img = _raster(moved, shape, base_width * rng.uniform(0.8, 1.3))
        img = img * rng.uniform(0.75, 1.0) + rng.normal(0.0, noise, size=img.shape)
        inputs[row] = np.clip(img, 0.0, 1.0)
    inputs = np.rint(inputs * 255.0) / 255.0
    return LabeledSet(inputs, labels, shape)


# ----------------------------------------------------------------------
# backdoor trigger


def trigger_mask(shape, trigger):
    """Boolean mask (length ``s*t``) that is true exactly on the trigger rectangle."""
    trigger.check(shape)
    s, t = shape
    mask = np.zeros((s, t), dtype=bool)
    r1 = s - trigger.margin_bottom
    c1 = t - trigger.margin_right
    mask[r1 - trigger.height:r1, c1 - trigger.width:c1] = True
    return mask.ravel()


def inject_trigger(data, plan, seed=0):
    """Stamp the trigger on a seeded ``fraction`` of the target-class inputs.

    Labels are left untouched and every other row is copied bit for bit.
    A missing target class raises :class:`TargetAbsentWarning` and returns
    an unmodified copy with an empty ``attacked`` index.
    """
    mask = trigger_mask(data.image_shape, plan.trigger)
    if not 0.0 <= plan.fraction <= 1.0:
        raise DomainError(f"poison fraction must be in [0, 1], got {plan.fraction}")
    inputs = data.inputs.copy()
    targets = np.flatnonzero(data.labels == plan.target_class)
    if len(targets) == 0:
        warnings.warn(f"target class {plan.target_class} is absent; nothing was poisoned",
                      TargetAbsentWarning, stacklevel=2)
        return replace(data, inputs=inputs, attacked=np.zeros(0, dtype=np.int64))
    k = int(round(plan.fraction * len(targets)))
    if k == len(targets):
        chosen = targets
    else:
        chosen = np.sort(make_rng(seed).choice(targets, size=k, replace=False))
    rows = inputs[chosen]
    rows[:, mask] = plan.trigger.intensity
    inputs[chosen] = rows
    return LabeledSet(inputs, data.labels.copy(), data.image_shape, attacked=chosen)
