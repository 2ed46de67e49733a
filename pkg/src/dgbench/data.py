"""Multi-domain datasets: IDX ingestion, Colored/Rotated MNIST, splits, minibatches.

Images are kept as ``uint8`` with a ``scale`` of 1/255 and only turned into
float64 when a batch is requested, so a full 70k-image dataset stays small.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .autodiff import Tensor

IDX_UBYTE = 0x08
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

COLORED_MNIST_PARAMS = (0.1, 0.2, 0.9)
ROTATED_MNIST_ANGLES = (0, 15, 30, 45, 60, 75)

MNIST_FILES = (
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
)


class IdxFormatError(ValueError):
    """Malformed IDX buffer."""


# IDX -----------------------------------------------------------------------


def read_idx(buf: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX buffer of any rank."""
    if len(buf) < 4:
        raise IdxFormatError(f"truncated header at offset 0: need 4 bytes, have {len(buf)}")
    zero, dtype, ndim = struct.unpack_from(">HBB", buf, 0)
    if zero != 0 or dtype != IDX_UBYTE:
        magic = struct.unpack_from(">I", buf, 0)[0]
        raise IdxFormatError(f"bad magic 0x{magic:08x} at offset 0")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError(f"truncated dimensions at offset 4: need {4 * ndim} bytes, have {len(buf) - 4}")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - header < count:
        raise IdxFormatError(f"truncated data at offset {header}: need {count} bytes, have {len(buf) - header}")
    if len(buf) - header > count:
        raise IdxFormatError(f"trailing bytes at offset {header + count}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise TypeError(f"IDX writer only supports uint8, got {array.dtype}")
    head = struct.pack(">HBB", 0, IDX_UBYTE, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    return head + np.ascontiguousarray(array).tobytes()


def _check_magic(buf: bytes, expected: int, what: str):
    if len(buf) < 4:
        raise IdxFormatError(f"{what}: truncated header at offset 0")
    magic = struct.unpack_from(">I", buf, 0)[0]
    if magic != expected:
        raise IdxFormatError(f"{what}: bad magic 0x{magic:08x} at offset 0 (expected 0x{expected:08x})")


def read_mnist_pair(image_bytes: bytes, label_bytes: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``uint8`` images (n, rows, cols) and int64 labels from an IDX pair."""
    _check_magic(image_bytes, IMAGES_MAGIC, "images")
    _check_magic(label_bytes, LABELS_MAGIC, "labels")
    images = read_idx(image_bytes)
    labels = read_idx(label_bytes).astype(np.int64)
    if len(images) != len(labels):
        raise IdxFormatError(f"count mismatch at offset 4: {len(images)} images vs {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise IdxFormatError(f"label {labels.max()} out of range 0-9 at offset 8")
    return images, labels


def load_idx(image_bytes: bytes, label_bytes: bytes) -> tuple[Tensor, np.ndarray]:
    """Images as a float64 tensor (n, 1, rows, cols) in [0, 1], plus labels."""
    images, labels = read_mnist_pair(image_bytes, label_bytes)
    return Tensor(images[:, None].astype(np.float64) / 255.0), labels


def _read_maybe_gz(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise FileNotFoundError(path)


def load_mnist(data_dir: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Pool every MNIST IDX pair found under ``data_dir`` (or ``data_dir/MNIST``)."""
    root = Path(data_dir)
    candidates = [root, root / "MNIST", root / "MNIST" / "raw", root / "mnist"]
    images, labels = [], []
    for base in candidates:
        for img_name, lbl_name in MNIST_FILES:
            try:
                img = _read_maybe_gz(base / img_name)
                lbl = _read_maybe_gz(base / lbl_name)
            except FileNotFoundError:
                continue
            x, y = read_mnist_pair(img, lbl)
            images.append(x)
            labels.append(y)
        if images:
            break
    if not images:
        raise FileNotFoundError(f"no MNIST IDX files under {root}")
    return np.concatenate(images), np.concatenate(labels)


def save_mnist_idx(directory: str | os.PathLike, images: np.ndarray, labels: np.ndarray) -> Path:
    """Write images and labels as the MNIST training IDX pair; returns ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img_name, lbl_name = MNIST_FILES[0]
    (directory / img_name).write_bytes(write_idx(np.asarray(images, dtype=np.uint8)))
    (directory / lbl_name).write_bytes(write_idx(np.asarray(labels, dtype=np.uint8)))
    return directory


# containers ----------------------------------------------------------------


@dataclass
class DomainData:
    """One domain's examples and its train/validation split."""

    name: str
    x: np.ndarray
    y: np.ndarray
    scale: float = 1.0
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None
    # provenance: indices into the source digit array, colours, ...
    meta: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.y)

    def inputs(self, idx=slice(None)) -> np.ndarray:
        x = self.x[idx].astype(np.float64)
        return x * self.scale if self.scale != 1.0 else x

    def split_indices(self, split: str) -> np.ndarray:
        idx = {"train": self.train_idx, "val": self.val_idx}[split]
        if idx is None:
            raise ValueError(f"domain {self.name!r} has not been split")
        return idx


@dataclass
class MultiDomainDataset:
    name: str
    domains: list[DomainData]
    num_classes: int
    input_shape: tuple[int, ...]
    n_steps: int = 5000
    checkpoint_freq: int = 100
    family: str = "mnist"

    def __post_init__(self):
        for d in self.domains:
            if tuple(d.x.shape[1:]) != tuple(self.input_shape):
                raise ValueError(f"domain {d.name!r} has input shape {d.x.shape[1:]}, expected {self.input_shape}")
            if len(d.y) and d.y.max() >= self.num_classes:
                raise ValueError(f"domain {d.name!r} has label {d.y.max()} >= {self.num_classes}")

    def __len__(self) -> int:
        return len(self.domains)

    def __getitem__(self, i: int) -> DomainData:
        return self.domains[i]

    @property
    def domain_names(self) -> list[str]:
        return [d.name for d in self.domains]

    def with_splits(self, seeds: Sequence[int], fraction: float = 0.8) -> "MultiDomainDataset":
        """Copy with every domain split by its own seed; arrays are shared, not copied."""
        if len(seeds) != len(self.domains):
            raise ValueError("need one split seed per domain")
        return replace(self, domains=[split_dataset(d, fraction, s) for d, s in zip(self.domains, seeds)])


# splitting and sampling ----------------------------------------------------


def split_dataset(domain: DomainData, fraction: float = 0.8, seed: int = 0) -> DomainData:
    """Seeded permutation; the first ``floor(fraction * n)`` indices train."""
    n = len(domain)
    if n < 2:
        raise ValueError(f"domain {domain.name!r} needs at least 2 examples to split, has {n}")
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(np.floor(fraction * n))
    return replace(domain, train_idx=np.sort(perm[:cut]), val_idx=np.sort(perm[cut:]))


def sample_minibatches(
    dataset: MultiDomainDataset,
    train_domain_ids: Sequence[int],
    batch_size: int,
    rng: np.random.Generator,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """One minibatch per training domain, drawn with replacement from its train split."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    batches = []
    for i in train_domain_ids:
        d = dataset.domains[i]
        pool = d.split_indices("train")
        idx = pool[rng.integers(0, len(pool), size=batch_size)]
        batches.append((d.inputs(idx), d.y[idx]))
    return batches


# generators ----------------------------------------------------------------


def _shards(n: int, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    return np.array_split(rng.permutation(n), k)


def generate_colored_mnist(
    digits: np.ndarray,
    labels: np.ndarray,
    domain_params: Sequence[float] = COLORED_MNIST_PARAMS,
    label_noise: float = 0.25,
    seed: int = 0,
) -> MultiDomainDataset:
    """Two-channel binary MNIST where colour is spuriously tied to the label.

    Per domain with parameter ``d``: ``y = [digit >= 5]`` flipped with
    probability ``label_noise``; colour is ``y`` flipped with probability
    ``d``; the digit is written into the channel named by the colour.
    """
    digits = np.asarray(digits)
    labels = np.asarray(labels)
    if len(digits) != len(labels):
        raise ValueError("digits and labels must align")
    if not all(0 <= d <= 1 for d in domain_params):
        raise ValueError(f"domain parameters must lie in [0, 1], got {domain_params}")
    rng = np.random.default_rng(seed)
    domains = []
    for d, idx in zip(domain_params, _shards(len(digits), len(domain_params), rng)):
        y = (labels[idx] >= 5).astype(np.int64)
        y ^= (rng.random(len(idx)) < label_noise).astype(np.int64)
        color = y ^ (rng.random(len(idx)) < d).astype(np.int64)
        x = np.zeros((len(idx), 2) + digits.shape[1:], dtype=digits.dtype)
        x[np.arange(len(idx)), color] = digits[idx]
        scale = 1.0 / 255 if digits.dtype == np.uint8 else 1.0
        domains.append(DomainData(f"{d:g}", x, y, scale, meta={"source_ids": idx, "colors": color}))
    return MultiDomainDataset(
        "ColoredMNIST", domains, num_classes=2, input_shape=(2,) + digits.shape[1:], n_steps=5000, checkpoint_freq=100
    )


def rotate_images(images: np.ndarray, angle: float) -> np.ndarray:
    """Counter-clockwise rotation about the image centre, bilinear, zero fill.

    ``uint8`` input is rounded back to ``uint8``.
    """
    if angle % 360 == 0:
        return images.copy()
    out = ndimage.rotate(images.astype(np.float64), angle, axes=(1, 2), reshape=False, order=1, mode="constant", cval=0.0)
    if images.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def generate_rotated_mnist(
    digits: np.ndarray,
    labels: np.ndarray,
    angles: Sequence[float] = ROTATED_MNIST_ANGLES,
    seed: int = 0,
) -> MultiDomainDataset:
    """Disjoint digit shards, one per angle, each rotated by its angle."""
    digits = np.asarray(digits)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    domains = []
    for angle, idx in zip(angles, _shards(len(digits), len(angles), rng)):
        x = rotate_images(digits[idx], angle)[:, None]
        scale = 1.0 / 255 if digits.dtype == np.uint8 else 1.0
        domains.append(DomainData(f"{angle:g}", x, labels[idx].copy(), scale, meta={"source_ids": idx}))
    return MultiDomainDataset(
        "RotatedMNIST", domains, num_classes=10, input_shape=(1,) + digits.shape[1:], n_steps=5000, checkpoint_freq=100
    )


def make_toy_dataset(
    n_domains: int = 2,
    n_per_domain: int = 400,
    spurious: Sequence[float] | None = None,
    invariant_noise: float = 0.0,
    spurious_noise: float = 0.1,
    seed: int = 0,
) -> MultiDomainDataset:
    """Two-feature binary problem for fast checks.

    Feature 0 is ``+-1`` by label plus ``invariant_noise`` Gaussian noise.
    Feature 1 is ``spurious[d] * (+-1)`` plus ``spurious_noise`` noise,
    so its relation to the label changes across domains.
    """
    spurious = [0.0] * n_domains if spurious is None else list(spurious)
    if len(spurious) != n_domains:
        raise ValueError("one spurious coefficient per domain")
    rng = np.random.default_rng(seed)
    domains = []
    for d in range(n_domains):
        y = rng.integers(0, 2, n_per_domain)
        sign = 2.0 * y - 1.0
        x0 = sign + invariant_noise * rng.standard_normal(n_per_domain)
        x1 = spurious[d] * sign + spurious_noise * rng.standard_normal(n_per_domain)
        domains.append(DomainData(f"env{d}", np.stack([x0, x1], axis=1), y.astype(np.int64)))
    return MultiDomainDataset("Toy", domains, num_classes=2, input_shape=(2,), n_steps=500, checkpoint_freq=50)


# caching and registry ------------------------------------------------------


def save_dataset_idx(dataset: MultiDomainDataset, directory: str | os.PathLike) -> None:
    """Write each domain as an IDX image/label pair."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, d in enumerate(dataset.domains):
        if d.x.dtype != np.uint8:
            raise TypeError("only uint8 datasets can be cached as IDX")
        (directory / f"domain{i}-images.idx").write_bytes(write_idx(d.x))
        (directory / f"domain{i}-labels.idx").write_bytes(write_idx(d.y.astype(np.uint8)))


def load_dataset_idx(template: MultiDomainDataset, directory: str | os.PathLike) -> MultiDomainDataset:
    """Inverse of :func:`save_dataset_idx`; names and metadata come from ``template``."""
    directory = Path(directory)
    domains = []
    for i, d in enumerate(template.domains):
        x = read_idx((directory / f"domain{i}-images.idx").read_bytes())
        y = read_idx((directory / f"domain{i}-labels.idx").read_bytes()).astype(np.int64)
        domains.append(DomainData(d.name, x, y, scale=d.scale))
    return replace(template, domains=domains)


def _colored(data_dir, seed=0, limit=None, **kw):
    digits, labels = load_mnist(data_dir)
    if limit:
        digits, labels = digits[:limit], labels[:limit]
    return generate_colored_mnist(digits, labels, seed=seed, **kw)


def _rotated(data_dir, seed=0, limit=None, **kw):
    digits, labels = load_mnist(data_dir)
    if limit:
        digits, labels = digits[:limit], labels[:limit]
    return generate_rotated_mnist(digits, labels, seed=seed, **kw)


def _toy(data_dir=None, seed=0, **kw):
    kw.setdefault("spurious", (0.0, 0.0))
    return make_toy_dataset(n_domains=len(kw["spurious"]), seed=seed, **kw)


DATASETS: dict[str, Callable[..., MultiDomainDataset]] = {
    "cmnist": _colored,
    "rmnist": _rotated,
    "toy": _toy,
}

DATA_DIR_ENV = "DGBENCH_DATA"


def get_dataset(name: str, data_dir=None, seed: int = 0, **kwargs) -> MultiDomainDataset:
    """Build a registered dataset. ``data_dir`` falls back to ``$DGBENCH_DATA``."""
    try:
        factory = DATASETS[name]
    except KeyError:
        raise KeyError(f"unknown dataset {name!r}; available: {', '.join(DATASETS)}") from None
    if data_dir is None:
        data_dir = os.environ.get(DATA_DIR_ENV)
    if name != "toy" and data_dir is None:
        raise FileNotFoundError(f"dataset {name!r} needs --data-dir or ${DATA_DIR_ENV}")
    return factory(data_dir, seed=seed, **kwargs)
