"""MNIST IDX ingestion, 2x2 downsampling, and a synthetic digit fallback."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX content; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _read_header(data, magic, ndims):
    header_len = 4 + 4 * ndims
    if len(data) < header_len:
        raise IdxFormatError(f"header needs {header_len} bytes, file has {len(data)}", len(data))
    found = struct.unpack(">I", data[:4])[0]
    if found != magic:
        raise IdxFormatError(f"bad magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    dims = struct.unpack(f">{ndims}I", data[4:header_len])
    return dims, header_len


def _payload(data, offset, expected):
    actual = len(data) - offset
    if actual != expected:
        kind = "truncated" if actual < expected else "trailing bytes in"
        raise IdxFormatError(f"{kind} payload: expected {expected} bytes, found {actual}",
                             offset + min(actual, expected))
    return np.frombuffer(data, dtype=np.uint8, offset=offset)


def load_idx_images(path):
    """Read an uncompressed IDX image file as float64 ``(N, 28, 28)`` in [0, 1]."""
    data = Path(path).read_bytes()
    (n, rows, cols), offset = _read_header(data, IMAGE_MAGIC, 3)
    if (rows, cols) != (28, 28):
        raise IdxFormatError(f"expected 28x28 images, header says {rows}x{cols}", 8)
    pixels = _payload(data, offset, n * rows * cols)
    return pixels.reshape(n, rows, cols) / 255.0


def load_idx_labels(path):
    data = Path(path).read_bytes()
    (n,), offset = _read_header(data, LABEL_MAGIC, 1)
    labels = _payload(data, offset, n)
    bad = np.flatnonzero(labels > 9)
    if len(bad):
        raise IdxFormatError(f"label {labels[bad[0]]} outside 0-9", offset + int(bad[0]))
    return labels.astype(np.int64)


def write_idx_images(path, images):
    """Quantize images in [0, 1] to bytes and write them in IDX format."""
    images = np.asarray(images)
    q = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    header = struct.pack(">IIII", IMAGE_MAGIC, *q.shape)
    Path(path).write_bytes(header + q.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())


def downsample(image):
    """Non-overlapping 2x2 mean pooling, 28x28 -> 14x14 (batches allowed)."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-2:] != (28, 28):
        raise ValueError(f"expected trailing shape (28, 28), got {image.shape}")
    lead = image.shape[:-2]
    return image.reshape(*lead, 14, 2, 14, 2).mean(axis=(-3, -1))


@dataclass
class DigitPool:
    """Per-class banks of 14x14 grayscale digits."""

    banks: list

    def __post_init__(self):
        if len(self.banks) != 10:
            raise ValueError("a digit pool needs exactly 10 class banks")
        for c, bank in enumerate(self.banks):
            if len(bank) == 0:
                raise LookupError(f"digit pool has no images for class {c}")
            if np.asarray(bank).shape[1:] != (14, 14):
                raise ValueError(f"class {c} images must be 14x14")
        self.banks = [np.asarray(b, dtype=np.float32) for b in self.banks]

    def images(self, class_label):
        bank = self.banks[class_label]
        if len(bank) == 0:
            raise LookupError(f"no images for class {class_label}")
        return bank

    stack = images

    def class_means(self):
        return np.stack([b.mean(axis=0) for b in self.banks])

    @classmethod
    def from_arrays(cls, images, labels):
        images = np.asarray(images)
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        if images.shape[1:] == (28, 28):
            images = downsample(images)
        return cls([images[labels == c] for c in range(10)])


def load_mnist_pool(directory, split="train"):
    """Build a pool from ``{split}-images-idx3-ubyte`` / ``{split}-labels-idx1-ubyte``."""
    directory = Path(directory)
    prefix = "train" if split == "train" else "t10k"
    images = load_idx_images(directory / f"{prefix}-images-idx3-ubyte")
    labels = load_idx_labels(directory / f"{prefix}-labels-idx1-ubyte")
    if len(images) != len(labels):
        raise ValueError(f"image/label count mismatch: {len(images)} vs {len(labels)}")
    return DigitPool.from_arrays(images, labels)


# Seven-segment layout on a 14x14 canvas: (row slice, col slice) per segment.
_SEGMENTS = {
    "a": (slice(1, 3), slice(3, 11)),
    "b": (slice(2, 7), slice(10, 12)),
    "c": (slice(7, 12), slice(10, 12)),
    "d": (slice(11, 13), slice(3, 11)),
    "e": (slice(7, 12), slice(2, 4)),
    "f": (slice(2, 7), slice(2, 4)),
    "g": (slice(6, 8), slice(3, 11)),
}
_DIGIT_SEGMENTS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"]


def glyph(class_label):
    canvas = np.zeros((14, 14))
    for seg in _DIGIT_SEGMENTS[class_label]:
        rows, cols = _SEGMENTS[seg]
        canvas[rows, cols] = 1.0
    return canvas


def synth_digits(rng, per_class=200, noise=0.1):
    """Seven-segment style digits with per-sample stroke intensity and noise.

    Noise is confined to stroke pixels so the background stays exactly zero,
    as in MNIST; a positive background would saturate binarized conv maps.
    """
    banks = []
    for c in range(10):
        base = glyph(c)
        ink = rng.uniform(0.7, 1.0, size=(per_class, 1, 1))
        jitter = rng.normal(0.0, noise, size=(per_class, 14, 14))
        samples = base * (ink + jitter)
        banks.append(np.clip(samples, 0.0, 1.0))
    return DigitPool(banks)
