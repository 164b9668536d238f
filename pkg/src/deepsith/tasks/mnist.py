"""Sequential and permuted-sequential MNIST.

Images are read from IDX files (optionally gzipped), scaled to ``[0, 1]`` and
flattened row-major into length-784 sequences. A permuted variant applies one
fixed pixel permutation to every image.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import logging
import os
import shutil
import struct
import subprocess
import tarfile
import tempfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SequenceDataset, train_val_split

__all__ = [
    "IDXError",
    "MnistData",
    "read_idx",
    "write_idx",
    "default_data_dir",
    "mnist_permutation",
    "load_mnist_sequences",
    "fetch_mnist",
    "import_npm_digits",
    "FILES",
]

log = logging.getLogger(__name__)

ENV_DATA_DIR = "DEEPSITH_DATA_DIR"
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
# md5 of the gzipped originals
MD5 = {
    "train_images": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train_labels": "d53e105ee54ea40749a09fcbcd1e9432",
    "test_images": "9fb629c4189551a2d022fa330f9573f3",
    "test_labels": "ec29112dd5afa0611ce80d1b7f02629c",
}
MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)


class IDXError(ValueError):
    pass


@dataclass
class MnistData:
    train: SequenceDataset
    test: SequenceDataset | None
    validation: SequenceDataset | None
    permutation: np.ndarray | None


def default_data_dir() -> Path:
    return Path(os.environ.get(ENV_DATA_DIR, "data"))


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: str | Path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IDXError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise IDXError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise IDXError(f"{path}: unsupported IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IDXError(f"{path}: truncated data ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    path = Path(path)
    with (gzip.open(path, "wb") if path.suffix == ".gz" else open(path, "wb")) as fh:
        fh.write(header)
        fh.write(array.tobytes())


def _find(data_dir: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz"):
        if (data_dir / name).exists():
            return data_dir / name
    return None


def _load_pair(data_dir: Path, which: str) -> tuple[np.ndarray, np.ndarray] | None:
    img_path = _find(data_dir, FILES[f"{which}_images"])
    lab_path = _find(data_dir, FILES[f"{which}_labels"])
    if img_path is None or lab_path is None:
        return None
    images = read_idx(img_path, IMAGE_MAGIC)
    labels = read_idx(lab_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IDXError(f"{which}: {images.shape[0]} images but {labels.shape[0]} labels")
    return images, labels


def mnist_permutation(seed: int, length: int = 784) -> np.ndarray:
    return np.random.default_rng(seed).permutation(length)


def _to_sequences(images: np.ndarray, perm: np.ndarray | None, dtype) -> np.ndarray:
    seq = images.reshape(images.shape[0], -1).astype(dtype) / 255.0
    if perm is not None:
        seq = seq[:, perm]
    return seq[:, :, None]


def load_mnist_sequences(
    data_dir: str | Path | None = None,
    permuted: bool = False,
    perm_seed: int = 0,
    validation_fraction: float | None = None,
    split_seed: int = 0,
    limit: int | None = None,
    dtype=np.float32,
) -> MnistData:
    """Load ``(n, 784, 1)`` pixel sequences.

    The test pair is optional (a directory holding only training files is
    accepted). With ``validation_fraction`` the training items are split,
    e.g. 0.2 for an 80/20 split. ``limit`` keeps the first ``limit`` training
    items before splitting.
    """
    data_dir = Path(data_dir) if data_dir is not None else default_data_dir()
    train = _load_pair(data_dir, "train")
    if train is None:
        raise FileNotFoundError(f"no MNIST training files in {data_dir}; run `deepsith fetch-data`")
    perm = mnist_permutation(perm_seed, train[0][0].size) if permuted else None
    images, labels = train
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    train_ds = SequenceDataset(_to_sequences(images, perm, dtype), labels.astype(np.int64))
    val_ds = None
    if validation_fraction:
        train_ds, val_ds = train_val_split(train_ds, 1.0 - validation_fraction, split_seed)
    test = _load_pair(data_dir, "test")
    test_ds = None
    if test is not None:
        test_ds = SequenceDataset(_to_sequences(test[0], perm, dtype), test[1].astype(np.int64))
    return MnistData(train_ds, test_ds, val_ds, perm)


def fetch_mnist(data_dir: str | Path | None = None, mirrors=MIRRORS) -> Path:
    """Download the four standard files and verify their md5 sums."""
    data_dir = Path(data_dir) if data_dir is not None else default_data_dir()
    data_dir.mkdir(parents=True, exist_ok=True)
    for key, stem in FILES.items():
        target = data_dir / (stem + ".gz")
        if target.exists() and hashlib.md5(target.read_bytes()).hexdigest() == MD5[key]:
            continue
        errors = []
        for base in mirrors:
            try:
                with urllib.request.urlopen(base + stem + ".gz", timeout=60) as resp:
                    payload = resp.read()
            except OSError as exc:
                errors.append(f"{base}: {exc}")
                continue
            digest = hashlib.md5(payload).hexdigest()
            if digest != MD5[key]:
                errors.append(f"{base}: md5 {digest} does not match")
                continue
            target.write_bytes(payload)
            log.info("fetched %s", target)
            break
        else:
            raise OSError(f"could not fetch {stem}.gz:\n  " + "\n  ".join(errors))
    return data_dir


def import_npm_digits(out_dir: str | Path, package_dir: str | Path | None = None) -> Path:
    """Convert the 10,000 MNIST digits shipped in the npm ``mnist`` package to IDX.

    Useful when the standard mirrors are unreachable. The digits are written
    as ``train-*`` files in class order (0s first); shuffle before splitting.
    If ``package_dir`` is None the package is obtained with ``npm pack``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        if package_dir is None:
            if shutil.which("npm") is None:
                raise OSError("npm is not available to fetch the mnist package")
            subprocess.run(["npm", "pack", "mnist", "--silent"], cwd=tmp, check=True, capture_output=True)
            (tarball,) = Path(tmp).glob("mnist-*.tgz")
            with tarfile.open(tarball) as tf:
                tf.extractall(tmp)
            package_dir = Path(tmp) / "package"
        digits_dir = Path(package_dir) / "src" / "digits"
        images, labels = [], []
        for digit in range(10):
            flat = np.asarray(json.loads((digits_dir / f"{digit}.json").read_text())["data"])
            if flat.size % 784:
                raise IDXError(f"{digit}.json does not hold whole 28x28 images")
            imgs = np.rint(flat.reshape(-1, 28, 28) * 255.0).clip(0, 255).astype(np.uint8)
            images.append(imgs)
            labels.append(np.full(len(imgs), digit, dtype=np.uint8))
    write_idx(out_dir / (FILES["train_images"] + ".gz"), np.concatenate(images))
    write_idx(out_dir / (FILES["train_labels"] + ".gz"), np.concatenate(labels))
    return out_dir
