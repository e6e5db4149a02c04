"""Synthetic three-class segmentation data, binary tensor files, and manifests.

Binary layout (all integers little-endian)::

    magic   4 bytes   b"UQTB" (float32 payload) or b"UQLB" (uint8 labels)
    ndim    u32
    dims    ndim x u32
    payload prod(dims) elements, row-major
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (DimOverflowError, MagicMismatchError, PathError, TruncationError,
                     ValidationError)

FLOAT_MAGIC = b"UQTB"
LABEL_MAGIC = b"UQLB"
MAX_NDIM = 16
NUM_CLASSES = 3


# -- tensor files ---------------------------------------------------------

def save_tensor(path, array, labels: bool = False) -> None:
    array = np.asarray(array)
    if labels:
        if array.size and (array.min() < 0 or array.max() > 255):
            raise ValidationError("label values must fit in uint8")
        magic, payload = LABEL_MAGIC, array.astype("<u1")
    else:
        magic, payload = FLOAT_MAGIC, array.astype("<f4")
    header = magic + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(payload).tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a tensor file; floats come back as float64, labels as uint8."""
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise PathError(f"no such tensor file: {path}") from exc
    return parse_tensor(raw, source=str(path))


def parse_tensor(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < 8:
        raise TruncationError(f"{source}: header needs at least 8 bytes, got {len(raw)}")
    magic = raw[:4]
    if magic == FLOAT_MAGIC:
        dtype = np.dtype("<f4")
    elif magic == LABEL_MAGIC:
        dtype = np.dtype("<u1")
    else:
        raise MagicMismatchError(f"{source}: bad magic {magic!r}, expected {FLOAT_MAGIC!r} or {LABEL_MAGIC!r}")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    if ndim > MAX_NDIM:
        raise DimOverflowError(f"{source}: ndim {ndim} exceeds limit {MAX_NDIM}")
    header_len = 8 + 4 * ndim
    if len(raw) < header_len:
        raise TruncationError(f"{source}: expected {header_len} header bytes, got {len(raw)}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    count = 1
    for d in dims:
        count *= d
    expected = header_len + count * dtype.itemsize
    if expected > 2**40:
        raise DimOverflowError(f"{source}: dims {dims} describe an implausibly large payload")
    if len(raw) < expected:
        raise TruncationError(f"{source}: expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise TruncationError(f"{source}: expected {expected} bytes, got {len(raw)} (trailing data)")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=header_len).reshape(dims)
    return arr.astype(np.float64) if dtype.kind == "f" else arr.astype(np.uint8)


# -- generator ------------------------------------------------------------

@dataclass
class SynthConfig:
    size: int = 32
    num_images: int = 96
    num_classes: int = NUM_CLASSES
    scale_range: tuple[float, float] = (0.16, 0.26)
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.scale_range = tuple(float(s) for s in self.scale_range)
        if self.size < 16:
            raise ValidationError(f"image size must be >= 16, got {self.size}")
        if self.num_images < 1:
            raise ValidationError("num_images must be >= 1")
        if self.num_classes != NUM_CLASSES:
            raise ValidationError("the generator produces exactly 3 classes")
        lo, hi = self.scale_range
        if not 0 < lo <= hi < 0.5:
            raise ValidationError(f"scale_range must satisfy 0 < lo <= hi < 0.5, got {self.scale_range}")
        if self.noise < 0:
            raise ValidationError("noise must be >= 0")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SegData:
    images: np.ndarray  # [n, 1, H, W] float64
    labels: np.ndarray  # [n, H, W] uint8

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "SegData":
        idx = np.asarray(idx, dtype=int)
        return SegData(self.images[idx], self.labels[idx])


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    u = ((xx - cx) * c + (yy - cy) * s) / rx
    v = (-(xx - cx) * s + (yy - cy) * c) / ry
    return u * u + v * v <= 1.0


def _one_image(rng: np.random.Generator, cfg: SynthConfig):
    h = cfg.size
    yy, xx = np.mgrid[0:h, 0:h].astype(np.float64) + 0.5
    while True:
        angle = rng.uniform(0, np.pi)
        r1 = rng.uniform(*cfg.scale_range) * h
        r2 = r1 * rng.uniform(0.65, 0.9)
        width = rng.uniform(0.45, 0.7)
        cy, cx = rng.uniform(0.35 * h, 0.65 * h, size=2)
        # two touching ellipses along a common axis: a head and a smaller tail
        d = np.array([np.cos(angle), np.sin(angle)])
        c1 = np.array([cx, cy]) - d * r2 * 0.8
        c2 = np.array([cx, cy]) + d * r1 * 0.8
        m1 = _ellipse(yy, xx, c1[1], c1[0], r1 * width, r1, angle)
        m2 = _ellipse(yy, xx, c2[1], c2[0], r2 * width, r2, angle) & ~m1
        if m1.any() and m2.any():
            break
    labels = np.zeros((h, h), dtype=np.uint8)
    labels[m1] = 1
    labels[m2] = 2

    gy, gx = rng.normal(0, 0.1, size=2)
    background = 0.2 + gy * (yy / h - 0.5) + gx * (xx / h - 0.5)
    img = background.copy()
    img[m1] = rng.uniform(0.65, 0.8)
    img[m2] = rng.uniform(0.45, 0.55)
    img = np.clip(img + rng.normal(0.0, cfg.noise, size=img.shape), 0.0, 1.0)
    return img, labels


def generate(cfg: SynthConfig) -> SegData:
    """Seeded images with a background ramp and two adjacent elliptical blobs."""
    rng = np.random.default_rng(cfg.seed)
    images = np.empty((cfg.num_images, 1, cfg.size, cfg.size))
    labels = np.empty((cfg.num_images, cfg.size, cfg.size), dtype=np.uint8)
    for i in range(cfg.num_images):
        images[i, 0], labels[i] = _one_image(rng, cfg)
    return SegData(images, labels)


# -- splits and manifests -------------------------------------------------

@dataclass
class DatasetManifest:
    split: str
    entries: list[tuple[str, str]] = field(default_factory=list)
    config_hash: str = ""

    def to_json(self) -> dict:
        return {"split": self.split, "config_hash": self.config_hash,
                "entries": [{"image": i, "label": l} for i, l in self.entries]}

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        return cls(obj["split"], [(e["image"], e["label"]) for e in obj["entries"]],
                   obj.get("config_hash", ""))


SPLIT_NAMES = ("train", "val", "test")


def split_indices(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded shuffle then contiguous cut into train/val/test index arrays."""
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValidationError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(n)
    cuts = np.round(np.cumsum(fractions) * n).astype(int)
    parts = np.split(perm, cuts[:2])
    for name, part in zip(SPLIT_NAMES, parts):
        if len(part) == 0:
            raise ValidationError(f"split '{name}' is empty (n={n}, fractions={fractions.tolist()})")
    return dict(zip(SPLIT_NAMES, parts))


def split(data: SegData, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, SegData]:
    return {k: data.subset(v) for k, v in split_indices(len(data), fractions, seed).items()}


def write_dataset(root, data: SegData, cfg: SynthConfig, fractions=(0.8, 0.1, 0.1),
                  seed: int = 0) -> dict[str, DatasetManifest]:
    """Write every image/label pair plus one JSON manifest per split under ``root``."""
    root = Path(root)
    parts = split_indices(len(data), fractions, seed)
    manifests = {}
    for name, idx in parts.items():
        man = DatasetManifest(name, config_hash=cfg.digest())
        for i in idx:
            img_rel, lab_rel = f"images/img_{i:04d}.bin", f"labels/lab_{i:04d}.bin"
            save_tensor(root / img_rel, data.images[i])
            save_tensor(root / lab_rel, data.labels[i], labels=True)
            man.entries.append((img_rel, lab_rel))
        (root / f"{name}.json").write_text(json.dumps(man.to_json(), indent=2) + "\n")
        manifests[name] = man
    meta = {"generator": asdict(cfg), "fractions": list(fractions), "split_seed": seed}
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return manifests


def load_split(manifest_path, num_classes: int = NUM_CLASSES) -> SegData:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise PathError(f"manifest not found: {manifest_path}")
    man = DatasetManifest.from_json(json.loads(manifest_path.read_text()))
    root = manifest_path.parent
    images, labels = [], []
    for img_rel, lab_rel in man.entries:
        for rel in (img_rel, lab_rel):
            if not (root / rel).exists():
                raise PathError(f"manifest {manifest_path} references missing file {rel}")
        img = load_tensor(root / img_rel)
        lab = load_tensor(root / lab_rel)
        if lab.size and lab.max() >= num_classes:
            raise ValidationError(f"{lab_rel}: label {lab.max()} outside [0, {num_classes})")
        images.append(img if img.ndim == 3 else img[None])
        labels.append(lab)
    return SegData(np.stack(images), np.stack(labels))


def dataset_exists(root) -> bool:
    root = Path(root)
    return all((root / f"{s}.json").exists() for s in SPLIT_NAMES)
