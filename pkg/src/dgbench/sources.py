"""Offline MNIST samples that ship inside ordinary packages.

Full MNIST needs a download. Two package registries carry usable subsets:
the npm ``mnist`` package (10,000 digits as JSON) and the mlxtend wheel
(5,000 digits as CSV). Both are converted here into ``uint8`` arrays that
:func:`dgbench.data.save_mnist_idx` can write out.
"""

from __future__ import annotations

import gzip
import importlib.util
import io
import json
import tarfile
from pathlib import Path

import numpy as np


def _shuffle(images: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # fixed order so that taking a prefix gives a class-balanced sample
    order = np.random.default_rng(0).permutation(len(labels))
    return images[order], labels[order]


def npm_mnist_digits(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Digits from the npm ``mnist`` package, given its tarball or unpacked directory.

    The package stores one JSON file per class with pixels in [0, 1].
    """
    path = Path(path)
    blobs: dict[int, bytes] = {}
    if path.is_dir():
        for k in range(10):
            f = next(iter(path.glob(f"**/digits/{k}.json")), None)
            if f is not None:
                blobs[k] = f.read_bytes()
    else:
        with tarfile.open(path) as tar:
            for member in tar.getmembers():
                p = Path(member.name)
                if p.parent.name == "digits" and p.suffix == ".json" and p.stem.isdigit():
                    blobs[int(p.stem)] = tar.extractfile(member).read()
    if sorted(blobs) != list(range(10)):
        raise FileNotFoundError(f"{path} does not look like the npm mnist package (digits/0-9.json)")
    images, labels = [], []
    for k in range(10):
        pixels = np.asarray(json.load(io.BytesIO(blobs[k]))["data"], dtype=np.float64).reshape(-1, 28, 28)
        images.append(np.clip(np.round(pixels * 255), 0, 255).astype(np.uint8))
        labels.append(np.full(len(pixels), k, dtype=np.uint8))
    return _shuffle(np.concatenate(images), np.concatenate(labels))


def mlxtend_csv() -> Path | None:
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        return None
    path = Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"
    return path if path.exists() else None


def mlxtend_digits() -> tuple[np.ndarray, np.ndarray]:
    """The 5,000-digit sample bundled with mlxtend (784 pixel columns, label last)."""
    csv = mlxtend_csv()
    if csv is None:
        raise FileNotFoundError("mlxtend and its bundled mnist_5k.csv.gz are not installed")
    with gzip.open(csv, "rt") as f:
        table = np.loadtxt(f, delimiter=",", dtype=np.uint8)
    return _shuffle(table[:, :784].reshape(-1, 28, 28), table[:, 784])
