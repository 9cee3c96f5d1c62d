"""Dataset loading, normalisation and a synthetic image generator."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# name -> (samples, classes, (C, H, W))
DESCRIPTORS = {
    "MNIST-full": (70_000, 10, (1, 28, 28)),
    "MNIST-test": (10_000, 10, (1, 28, 28)),
    "USPS": (11_000, 10, (1, 16, 16)),
    "FRGC": (2_462, 20, (3, 32, 32)),
    "YTF": (10_000, 41, (3, 55, 55)),
    "CMU-PIE": (2_856, 68, (1, 32, 32)),
}

# standard file names of the MNIST distribution
MNIST_FILES = {
    "MNIST-test": [("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")],
    "MNIST-full": [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ],
}


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray | None = None
    name: str = "custom"
    n_classes: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise ValueError("labels and images differ in length")
            if self.n_classes is None:
                self.n_classes = int(self.labels.max()) + 1
            if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
                raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.images)

    @property
    def descriptor(self):
        return self.name, len(self.images), self.n_classes, tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.name, self.n_classes, dict(self.meta))


def dataset_descriptor(name: str):
    """``(samples, classes, (C, H, W))`` for one of the benchmark datasets."""
    for key, row in DESCRIPTORS.items():
        if key.lower() == name.replace("_", "-").lower():
            return row
    raise KeyError(f"unknown dataset {name!r}; known: {sorted(DESCRIPTORS)}")


def normalize_to_range(x, low=0.0, high=255.0) -> np.ndarray:
    """Affine map of ``[low, high]`` onto ``[-1, 1]``."""
    x = np.asarray(x, dtype=np.float64)
    if high <= low:
        raise ValueError("high must exceed low")
    return (x - low) * (2.0 / (high - low)) - 1.0


def _read_idx(path, expected_magic):
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise DataFormatError(f"{path}: truncated header at byte {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataFormatError(f"{path}: truncated header at byte {len(data)} (need {header})")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = 1
    for d in dims:
        count *= d
    if count > 2**40:
        raise DataFormatError(f"{path}: dimensions {dims} overflow")
    if len(data) < header + count:
        raise DataFormatError(
            f"{path}: truncated payload at byte {len(data)}, expected {header + count} bytes"
        )
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None, name="custom", n_classes=None) -> Dataset:
    """Read MNIST-style IDX files; pixels are normalised to ``[-1, 1]``."""
    raw = _read_idx(images_path, IDX_IMAGES_MAGIC)
    images = normalize_to_range(raw)[:, None, :, :]
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
        if len(labels) != len(images):
            raise DataFormatError(f"{labels_path}: {len(labels)} labels for {len(images)} images")
    return Dataset(images, labels, name=name, n_classes=n_classes)


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(">3I", *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", IDX_LABELS_MAGIC))
        f.write(struct.pack(">I", len(labels)))
        f.write(labels.tobytes())


def load_mnist(directory, name="MNIST-test") -> Dataset:
    """MNIST-test or MNIST-full (train and test concatenated) from IDX files."""
    key = "MNIST-full" if "full" in name.lower() else "MNIST-test"
    parts = []
    for img, lab in MNIST_FILES[key]:
        img_path = _find(directory, img)
        lab_path = _find(directory, lab)
        parts.append(load_idx(img_path, lab_path))
    images = np.concatenate([p.images for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    return Dataset(images, labels, name=key, n_classes=10)


def _find(directory, stem):
    for candidate in (stem, stem.replace("-idx", ".idx")):
        path = Path(directory) / candidate
        if path.exists():
            return path
    raise FileNotFoundError(f"{stem} not found in {directory}")


# Raw-tensor directory layout:
#   header.txt   key=value lines: count, channels, height, width, classes,
#                has_labels (0/1), name
#   images.f64   count*channels*height*width float64 little-endian, row-major,
#                intensities already in [-1, 1]
#   labels.i64   count int64 little-endian (present iff has_labels=1)
def save_raw_tensor_dir(dataset: Dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, c, h, w = dataset.images.shape
    header = {
        "name": dataset.name,
        "count": n,
        "channels": c,
        "height": h,
        "width": w,
        "classes": dataset.n_classes or 0,
        "has_labels": int(dataset.labels is not None),
    }
    (directory / "header.txt").write_text("".join(f"{k}={v}\n" for k, v in header.items()))
    (directory / "images.f64").write_bytes(np.ascontiguousarray(dataset.images, dtype="<f8").tobytes())
    if dataset.labels is not None:
        (directory / "labels.i64").write_bytes(np.ascontiguousarray(dataset.labels, dtype="<i8").tobytes())


def load_raw_tensor_dir(directory) -> Dataset:
    directory = Path(directory)
    header = dict(
        line.split("=", 1)
        for line in (directory / "header.txt").read_text().splitlines()
        if line.strip()
    )
    n, c, h, w = (int(header[k]) for k in ("count", "channels", "height", "width"))
    payload = (directory / "images.f64").read_bytes()
    if len(payload) != n * c * h * w * 8:
        raise DataFormatError(
            f"{directory}/images.f64: {len(payload)} bytes, expected {n * c * h * w * 8}"
        )
    images = np.frombuffer(payload, dtype="<f8").reshape(n, c, h, w).astype(np.float64)
    if images.size and (images.min() < -1.0 or images.max() > 1.0):
        raise DataFormatError(f"{directory}: intensities outside [-1, 1]")
    labels = None
    if int(header.get("has_labels", 0)):
        raw = (directory / "labels.i64").read_bytes()
        if len(raw) != n * 8:
            raise DataFormatError(f"{directory}/labels.i64: {len(raw)} bytes, expected {n * 8}")
        labels = np.frombuffer(raw, dtype="<i8").astype(np.int64)
    classes = int(header.get("classes", 0)) or None
    return Dataset(images, labels, name=header.get("name", directory.name), n_classes=classes)


def _patch_centres(k, side):
    radius = side / 4.0
    angles = 2 * np.pi * np.arange(k) / k + np.pi / 4
    return np.stack([side / 2 + radius * np.sin(angles), side / 2 + radius * np.cos(angles)], 1)


def synthetic_blobs(n, k, image_side=16, separation=1.0, seed=0, noise=0.3, jitter=1,
                    background=0.5) -> Dataset:
    """Images with one bright square patch per class on a grey background.

    Class ``c`` puts its patch at the ``c``-th of ``k`` positions spaced on a
    circle. Intensities are built in ``[0, 1]``: the background sits at
    ``background`` and a patch adds ``separation * (1 - background)``;
    ``noise`` is the per-pixel Gaussian standard deviation and ``jitter`` the
    maximum random patch shift in pixels. Labels are assigned round-robin then
    shuffled.
    """
    if k < 1 or n < k:
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    if image_side < 8:
        raise ValueError(f"image_side must be >= 8, got {image_side}")
    if not 0.0 <= background < 1.0:
        raise ValueError(f"background must lie in [0, 1), got {background}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % k)
    centres = _patch_centres(k, image_side)
    half = max(1, image_side // 8)
    shifts = rng.integers(-jitter, jitter + 1, size=(n, 2)) if jitter else np.zeros((n, 2), int)
    rows = np.arange(image_side)[None, :]
    cy = np.rint(centres[labels, 0]).astype(int) + shifts[:, 0]
    cx = np.rint(centres[labels, 1]).astype(int) + shifts[:, 1]
    in_y = (rows >= (cy - half)[:, None]) & (rows < (cy + half)[:, None])
    in_x = (rows >= (cx - half)[:, None]) & (rows < (cx + half)[:, None])
    patch = (in_y[:, :, None] & in_x[:, None, :]).astype(float)
    images = background + separation * (1.0 - background) * patch
    images += noise * rng.standard_normal(images.shape)
    images = normalize_to_range(np.clip(images, 0.0, 1.0), 0.0, 1.0)
    meta = {"separation": separation, "noise": noise, "jitter": jitter, "seed": seed,
            "background": background}
    return Dataset(images[:, None], labels, name="synthetic", n_classes=k, meta=meta)


def load_dataset(name: str, data_dir=None, **synthetic) -> Dataset:
    """Resolve a dataset by name (``synthetic``, ``MNIST-test``, ``MNIST-full``) or path."""
    key = name.lower()
    if key == "synthetic":
        return synthetic_blobs(**synthetic)
    if key in ("mnist-test", "mnist-full"):
        directory = data_dir or os.environ.get("DEPICT_MNIST_DIR")
        if directory is None:
            raise FileNotFoundError(
                f"{name}: set data_dir (or DEPICT_MNIST_DIR) to the directory holding the IDX files"
            )
        return load_mnist(directory, name)
    path = Path(name if data_dir is None else data_dir)
    if (path / "header.txt").exists():
        return load_raw_tensor_dir(path)
    raise FileNotFoundError(f"cannot resolve dataset {name!r}")
