"""Datasets: procedurally generated image classes and the IDX file format."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
PATTERNS = ("stripes", "blobs", "gratings")


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ConfigurationError(
                f"images {self.images.shape} and labels {self.labels.shape} do not form a dataset"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]

    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index])

    def where(self, classes) -> "Dataset":
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))))


@dataclass
class SynthSpec:
    """Procedural image classes.

    Each class owns a prototype drawn once from ``class_seed``.  A class is
    oriented stripes, a Gaussian blob or a 2-D grating (cycling through
    ``patterns`` by class index), with per-channel gains.  Each sample moves
    the prototype by a random phase (stripes, gratings; uniform over
    ``jitter`` * 2pi) or offset (blobs; uniform over +-``jitter`` pixels), then
    adds Gaussian pixel noise of std ``noise``.  With ``jitter = 0`` and
    ``noise = 0`` all images of a class are identical.

    Stripes and gratings are zero-mean over their period, whereas a blob is a
    positive bump.  The blob prototype is therefore a linear separator
    between a blob class and a stripe class whose period is shorter than the
    blob's width.
    """

    classes: int = 4
    per_class: int = 20
    size: int = 12
    channels: int = 1
    noise: float = 0.1
    jitter: float = 1.0
    class_seed: int = 0
    patterns: tuple = PATTERNS
    first_class: int = 0

    def validate(self) -> None:
        if self.classes < 2 or self.per_class < 1:
            raise ValueError("need at least 2 classes and 1 image per class")
        if self.size < 4 or self.channels < 1 or self.noise < 0 or self.jitter < 0:
            raise ValueError("size >= 4, channels >= 1, noise >= 0 and jitter >= 0 are required")
        if not self.patterns or any(p not in PATTERNS for p in self.patterns):
            raise ValueError(f"patterns must be drawn from {PATTERNS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patterns"] = list(self.patterns)
        return d


def _prototype(spec: SynthSpec, cls: int) -> dict:
    rng = np.random.default_rng([spec.class_seed, cls])
    kind = spec.patterns[cls % len(spec.patterns)]
    n = spec.size
    proto = {"kind": kind, "gain": rng.uniform(0.5, 1.0, size=spec.channels)}
    if kind == "stripes":
        proto["angle"] = rng.uniform(0, np.pi)
        proto["freq"] = rng.uniform(0.25, 0.4)  # cycles per pixel
    elif kind == "blobs":
        proto["center"] = rng.uniform(0.35 * n, 0.65 * n, size=2)
        proto["sigma"] = rng.uniform(0.15, 0.25) * n
    else:
        proto["freq"] = rng.uniform(0.12, 0.3, size=2) * rng.choice([-1, 1], size=2)
    return proto


def _render(proto: dict, n: int, rng: np.random.Generator, jitter: float) -> np.ndarray:
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    if proto["kind"] == "stripes":
        phase = rng.uniform(0, 2 * np.pi) * jitter
        u = x * np.cos(proto["angle"]) + y * np.sin(proto["angle"])
        img = np.sin(2 * np.pi * proto["freq"] * u + phase)
    elif proto["kind"] == "blobs":
        cy, cx = proto["center"] + rng.uniform(-1, 1, size=2) * jitter
        img = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * proto["sigma"] ** 2))
    else:
        phase = rng.uniform(0, 2 * np.pi, size=2) * jitter
        fy, fx = proto["freq"]
        img = np.sin(2 * np.pi * fx * x + phase[0]) * np.sin(2 * np.pi * fy * y + phase[1])
    return img


def synth_dataset(spec: SynthSpec, seed: int) -> Dataset:
    """Labeled images (N, C, size, size); labels run from ``first_class``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for cls in range(spec.first_class, spec.first_class + spec.classes):
        proto = _prototype(spec, cls)
        for _ in range(spec.per_class):
            base = _render(proto, spec.size, rng, spec.jitter)
            img = proto["gain"][:, None, None] * base[None]
            img = img + spec.noise * rng.normal(size=img.shape)
            images.append(img)
            labels.append(cls)
    return Dataset(np.array(images), np.array(labels, dtype=np.int64))


def read_idx(path) -> np.ndarray:
    """Raw IDX contents as an unsigned-byte array of the declared shape."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise FormatError(f"{path}: unsupported IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    actual = len(raw) - header
    if actual != expected:
        raise FormatError(f"{path}: payload has {actual} bytes, dimensions {dims} need {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(path) -> np.ndarray:
    """IDX file as float64: image files scaled to [0, 1], label files left as integers."""
    data = read_idx(path)
    if data.ndim == 3:
        return data.astype(np.float64) / 255.0
    return data.astype(np.float64)


def write_idx(path, array) -> None:
    """Write unsigned bytes as an IDX file (3-D images or 1-D labels).

    Float input is taken to be in [0, 1] for images (scaled by 255) and
    integral for labels.
    """
    a = np.asarray(array)
    if a.ndim not in (1, 3):
        raise FormatError(f"IDX writer supports 1-D labels and 3-D images, got {a.ndim}-D")
    if a.dtype != np.uint8:
        scaled = a * 255.0 if a.ndim == 3 else a
        a = np.rint(scaled)
        if a.min() < 0 or a.max() > 255:
            raise FormatError("values do not fit in unsigned bytes")
        a = a.astype(np.uint8)
    magic = IDX_IMAGES if a.ndim == 3 else IDX_LABELS
    header = struct.pack(f">I{a.ndim}I", magic, *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def load_idx_dataset(images_path, labels_path) -> Dataset:
    images = load_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise FormatError("expected a 3-D image file and a 1-D label file")
    return Dataset(images[:, None], labels.astype(np.int64))
