"""Class registry, partial-label datasets, synthetic phantoms and on-disk containers.

Array container (one file per array, little-endian)::

    b"UMS1" | u8 kind (0 = float32 image, 1 = uint8 labels) | u32 H | u32 W | H*W values

Manifests are ``key = value`` text files; ``item`` may repeat.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"UMS1"
KIND_IMAGE = 0
KIND_LABELS = 1
_HEADER = struct.Struct("<4sBII")
_DTYPES = {KIND_IMAGE: np.dtype("<f4"), KIND_LABELS: np.dtype("u1")}


@dataclass(frozen=True)
class ClassRegistry:
    """Ordered foreground class names. Background is index 0 and never named."""

    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ValidationError("registry needs at least one foreground class")
        if any(not n or n != n.strip() or "," in n for n in names):
            raise ValidationError(f"invalid class name in registry: {names!r}")
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate class names in registry: {names!r}")
        if "background" in names:
            raise ValidationError("'background' is implicit and cannot be registered")

    @property
    def num_foreground(self) -> int:
        return len(self.names)

    @property
    def num_classes(self) -> int:
        return len(self.names) + 1

    def index(self, name: str) -> int:
        try:
            return self.names.index(name) + 1
        except ValueError:
            raise ValidationError(f"unknown class {name!r}; registry has {list(self.names)}") from None

    def name(self, index: int) -> str:
        return "background" if index == 0 else self.names[index - 1]


@dataclass(frozen=True)
class PartialLabelSpec:
    """Foreground classes a dataset actually annotates."""

    annotated: frozenset[int]

    def __post_init__(self):
        annotated = frozenset(int(c) for c in self.annotated)
        object.__setattr__(self, "annotated", annotated)
        if not annotated:
            raise ValidationError("PartialLabelSpec.annotated must be non-empty")
        if 0 in annotated or min(annotated) < 0:
            raise ValidationError("PartialLabelSpec.annotated holds foreground indices >= 1 only")

    @classmethod
    def full(cls, registry: ClassRegistry) -> "PartialLabelSpec":
        return cls(frozenset(range(1, registry.num_classes)))

    def check(self, registry: ClassRegistry) -> None:
        if max(self.annotated) > registry.num_foreground:
            raise ValidationError(
                f"annotated classes {sorted(self.annotated)} exceed registry size {registry.num_foreground}"
            )


@dataclass
class DatasetDescriptor:
    name: str
    kind: str
    spec: PartialLabelSpec | None
    items: list[tuple[Path, Path | None]]

    def __post_init__(self):
        if self.kind not in ("labeled", "unlabeled"):
            raise ValidationError(f"dataset {self.name!r}: kind must be labeled|unlabeled, got {self.kind!r}")
        if self.kind == "labeled":
            if self.spec is None:
                raise ValidationError(f"labeled dataset {self.name!r} needs a class list")
            missing = [str(img) for img, lab in self.items if lab is None]
            if missing:
                raise ValidationError(f"labeled dataset {self.name!r}: items without label path: {missing[:3]}")
        else:
            if self.spec is not None:
                raise ValidationError(f"unlabeled dataset {self.name!r} must not list classes")
            with_labels = [str(img) for img, lab in self.items if lab is not None]
            if with_labels:
                raise ValidationError(f"unlabeled dataset {self.name!r} lists label files: {with_labels[:3]}")


@dataclass(frozen=True)
class OrganShape:
    """Placement and appearance of one phantom organ.

    ``center`` is a fractional (row, col) mean position; ``center_jitter`` a
    fractional standard deviation. Radii are in pixels.
    """

    center: tuple[float, float]
    radius_range: tuple[float, float]
    intensity_mean: float
    intensity_std: float = 0.0
    center_jitter: float = 0.04
    presence: float = 1.0


@dataclass(frozen=True)
class PhantomSpec:
    size: tuple[int, int]
    organs: tuple[OrganShape, ...]
    background_mean: float = 0.05
    background_std: float = 0.0
    body_mean: float | None = 0.35
    body_std: float = 0.0
    noise_std: float = 0.0
    count: int = 1
    seed: int = 0
    max_tries: int = 60

    def validate(self, registry: ClassRegistry | None = None) -> None:
        h, w = self.size
        if h < 8 or w < 8:
            raise ValidationError(f"PhantomSpec.size must be >= 8x8, got {self.size}")
        if self.count < 1:
            raise ValidationError(f"PhantomSpec.count must be >= 1, got {self.count}")
        if self.noise_std < 0:
            raise ValidationError(f"PhantomSpec.noise_std must be >= 0, got {self.noise_std}")
        if self.background_std < 0 or self.body_std < 0:
            raise ValidationError("PhantomSpec.background_std/body_std must be >= 0")
        if registry is not None and len(self.organs) != registry.num_foreground:
            raise ValidationError(
                f"PhantomSpec.organs has {len(self.organs)} entries, registry has {registry.num_foreground}"
            )
        for i, organ in enumerate(self.organs):
            lo, hi = organ.radius_range
            if lo < 2 or hi < lo:
                raise ValidationError(f"PhantomSpec.organs[{i}].radius_range must satisfy 2 <= lo <= hi, got {organ.radius_range}")
            if organ.intensity_std < 0:
                raise ValidationError(f"PhantomSpec.organs[{i}].intensity_std must be >= 0")
            if not 0.0 <= organ.presence <= 1.0:
                raise ValidationError(f"PhantomSpec.organs[{i}].presence must lie in [0, 1]")


DEFAULT_CLASSES = ("liver", "kidney", "spleen")


def default_phantom_spec(size: int = 96, count: int = 1, seed: int = 0, noise_std: float = 0.06) -> PhantomSpec:
    """Liver/kidney/spleen phantom tuned for a ``size`` x ``size`` grid."""
    s = size / 96.0
    organs = (
        OrganShape((0.48, 0.33), (13 * s, 21 * s), 0.60, 0.06),
        OrganShape((0.64, 0.68), (6 * s, 10 * s), 0.74, 0.06),
        OrganShape((0.36, 0.70), (8 * s, 13 * s), 0.52, 0.06),
    )
    return PhantomSpec(
        size=(size, size),
        organs=organs,
        background_mean=0.05,
        background_std=0.02,
        body_mean=0.38,
        body_std=0.05,
        noise_std=noise_std,
        count=count,
        seed=seed,
    )


def _ellipse_mask(shape, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _one_phantom(spec: PhantomSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.size
    labels = np.zeros((h, w), dtype=np.uint8)
    image = np.full((h, w), spec.background_mean + spec.background_std * rng.standard_normal(), dtype=np.float64)
    if spec.body_mean is not None:
        body = _ellipse_mask((h, w), h / 2, w / 2, 0.44 * h, 0.47 * w, 0.0)
        image[body] = spec.body_mean + spec.body_std * rng.standard_normal()
    occupied = np.zeros((h, w), dtype=bool)
    for cls, organ in enumerate(spec.organs, start=1):
        present = rng.random() < organ.presence
        intensity = organ.intensity_mean + organ.intensity_std * rng.standard_normal()
        for _ in range(spec.max_tries):
            lo, hi = organ.radius_range
            ry, rx = rng.uniform(lo, hi, size=2)
            theta = rng.uniform(0.0, math.pi)
            cy = (organ.center[0] + organ.center_jitter * rng.standard_normal()) * h
            cx = (organ.center[1] + organ.center_jitter * rng.standard_normal()) * w
            mask = _ellipse_mask((h, w), cy, cx, ry, rx, theta)
            if mask.sum() < 4 or (_dilate(mask) & occupied).any():
                continue
            break
        else:
            present = False
        if not present:
            continue
        occupied |= mask
        labels[mask] = cls
        image[mask] = intensity
    if spec.noise_std > 0:
        image = image + spec.noise_std * rng.standard_normal((h, w))
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def generate_phantom(spec: PhantomSpec, registry: ClassRegistry) -> list[tuple[np.ndarray, np.ndarray]]:
    """Generate ``spec.count`` (image, labels) pairs of disjoint elliptical organs.

    Each image draws from its own child of ``SeedSequence(spec.seed)`` so the
    output depends only on the spec, and images can be produced independently.
    """
    spec.validate(registry)
    children = np.random.SeedSequence(spec.seed).spawn(spec.count)
    pairs = [_one_phantom(spec, np.random.default_rng(child)) for child in children]
    seen = set()
    for _, lab in pairs:
        seen.update(np.unique(lab).tolist())
    missing = [registry.name(c) for c in range(1, registry.num_classes) if c not in seen]
    if missing:
        raise ValidationError(f"PhantomSpec.organs: classes {missing} never placed; enlarge count or presence")
    return pairs


def restrict_labels(full: np.ndarray, spec: PartialLabelSpec) -> np.ndarray:
    """Zero out every class not annotated by ``spec``."""
    keep = np.isin(full, sorted(spec.annotated))
    return np.where(keep, full, 0).astype(full.dtype, copy=False)


# ---------------------------------------------------------------------------
# UMS1 containers


def encode_array(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValidationError(f"UMS1 stores 2-D arrays, got shape {array.shape}")
    if array.dtype == np.uint8:
        kind = KIND_LABELS
    elif array.dtype.kind == "f":
        kind = KIND_IMAGE
    else:
        raise ValidationError(f"UMS1 stores float32 or uint8, got {array.dtype}")
    h, w = array.shape
    payload = np.ascontiguousarray(array, dtype=_DTYPES[kind]).tobytes()
    return _HEADER.pack(MAGIC, kind, h, w) + payload


def decode_array(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise FormatError("truncated header", len(data))
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", len(data))
    _, kind, h, w = _HEADER.unpack_from(data)
    if kind not in _DTYPES:
        raise FormatError(f"unknown kind byte {kind}", 4)
    if h == 0 or w == 0:
        raise FormatError(f"empty dimensions {h}x{w}", 5)
    expected = _HEADER.size + h * w * _DTYPES[kind].itemsize
    if len(data) < expected:
        raise FormatError(f"truncated payload: need {expected} bytes, have {len(data)}", len(data))
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after payload", expected)
    arr = np.frombuffer(data, dtype=_DTYPES[kind], count=h * w, offset=_HEADER.size)
    return arr.reshape(h, w).astype(_DTYPES[kind].newbyteorder("="), copy=True)


def write_array(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_array(array))


def read_array(path) -> np.ndarray:
    return decode_array(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# registry and manifest files


def write_registry(path, registry: ClassRegistry) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in registry.names))


def read_registry(path) -> ClassRegistry:
    names = [line.strip() for line in Path(path).read_text().splitlines()]
    return ClassRegistry(tuple(n for n in names if n and not n.startswith("#")))


def _parse_kv(path: Path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        pairs.append((key.strip(), value.strip()))
    return pairs


def read_manifest(path, registry: ClassRegistry) -> DatasetDescriptor:
    path = Path(path)
    root = path.parent
    fields: dict[str, str] = {}
    items: list[tuple[Path, Path | None]] = []
    for key, value in _parse_kv(path):
        if key == "item":
            parts = [p.strip() for p in value.split(",")]
            if len(parts) > 2 or not parts[0]:
                raise ValidationError(f"{path}: bad item line {value!r}")
            items.append((root / parts[0], root / parts[1] if len(parts) == 2 and parts[1] else None))
        elif key in ("name", "kind", "classes"):
            if key in fields:
                raise ValidationError(f"{path}: duplicate key {key!r}")
            fields[key] = value
        else:
            raise ValidationError(f"{path}: unknown key {key!r}")
    for key in ("name", "kind"):
        if key not in fields:
            raise ValidationError(f"{path}: missing key {key!r}")
    spec = None
    if "classes" in fields:
        names = [n.strip() for n in fields["classes"].split(",") if n.strip()]
        spec = PartialLabelSpec(frozenset(registry.index(n) for n in names))
    return DatasetDescriptor(fields["name"], fields["kind"], spec, items)


def write_manifest(path, descriptor: DatasetDescriptor, registry: ClassRegistry) -> None:
    path = Path(path)
    root = path.parent
    lines = [f"name = {descriptor.name}", f"kind = {descriptor.kind}"]
    if descriptor.spec is not None:
        lines.append("classes = " + ",".join(registry.name(c) for c in sorted(descriptor.spec.annotated)))
    for img, lab in descriptor.items:
        entry = os.path.relpath(img, root)
        if lab is not None:
            entry += "," + os.path.relpath(lab, root)
        lines.append(f"item = {entry}")
    path.write_text("\n".join(lines) + "\n")


@dataclass
class Dataset:
    """A manifest together with its loaded arrays."""

    descriptor: DatasetDescriptor
    images: list[np.ndarray]
    labels: list[np.ndarray] | None = None

    @property
    def name(self) -> str:
        return self.descriptor.name

    @property
    def spec(self) -> PartialLabelSpec | None:
        return self.descriptor.spec

    def __len__(self) -> int:
        return len(self.images)


def write_dataset(
    directory,
    name: str,
    images: Sequence[np.ndarray],
    labels: Sequence[np.ndarray] | None,
    registry: ClassRegistry,
    spec: PartialLabelSpec | None = None,
) -> Path:
    """Write arrays plus ``manifest.txt`` under ``directory``; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    if labels is not None:
        (directory / "labels").mkdir(exist_ok=True)
        if spec is None:
            spec = PartialLabelSpec.full(registry)
    items = []
    for i, img in enumerate(images):
        img_path = directory / "images" / f"{i:04d}.ums"
        write_array(img_path, np.asarray(img, dtype=np.float32))
        lab_path = None
        if labels is not None:
            lab_path = directory / "labels" / f"{i:04d}.ums"
            write_array(lab_path, np.asarray(labels[i], dtype=np.uint8))
        items.append((img_path, lab_path))
    desc = DatasetDescriptor(name, "labeled" if labels is not None else "unlabeled", spec, items)
    manifest = directory / "manifest.txt"
    write_manifest(manifest, desc, registry)
    return manifest


def load_dataset(manifest, registry: ClassRegistry) -> Dataset:
    desc = read_manifest(manifest, registry)
    if not desc.items:
        raise ValidationError(f"dataset {desc.name!r} ({manifest}) is empty")
    if desc.spec is not None:
        desc.spec.check(registry)
    images, labels = [], []
    for img_path, lab_path in desc.items:
        img = read_array(img_path)
        if img.dtype != np.float32:
            raise ValidationError(f"{img_path}: expected an image container, found labels")
        images.append(img)
        if lab_path is not None:
            lab = read_array(lab_path)
            if lab.dtype != np.uint8:
                raise ValidationError(f"{lab_path}: expected a label container, found an image")
            if lab.shape != img.shape:
                raise ValidationError(f"{lab_path}: shape {lab.shape} does not match image {img.shape}")
            stray = set(np.unique(lab).tolist()) - set(desc.spec.annotated) - {0}
            if stray:
                raise ValidationError(
                    f"{lab_path}: classes {sorted(stray)} are outside the dataset's annotated set "
                    f"{sorted(desc.spec.annotated)}"
                )
            labels.append(lab)
    return Dataset(desc, images, labels if desc.kind == "labeled" else None)


def label_histogram(labels: Iterable[np.ndarray], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for lab in labels:
        counts += np.bincount(np.asarray(lab).ravel(), minlength=num_classes)[:num_classes]
    return counts
