"""Binary datasets: IDX image files and synthetic logistic-MF draws."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

IDX_UBYTE = 0x08
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MAX_IDX_ELEMENTS = 2**31 - 1


class IdxFormatError(ValueError):
    """Malformed IDX content; the message names the byte offset of the problem."""


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX buffer into an array of its stated shape."""
    if len(raw) < 4:
        raise IdxFormatError(f"offset 0: file too short for a magic number ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    ndim = magic & 0xFF
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != IDX_UBYTE or ndim == 0:
        raise IdxFormatError(f"offset 0: bad magic number 0x{magic:08X}; expected 0x00000801 or 0x00000803")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"offset 4: header needs {4 * ndim} bytes of dimension sizes, "
                             f"found {len(raw) - 4}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for i, d in enumerate(dims):
        count *= d
        if count > MAX_IDX_ELEMENTS:
            raise IdxFormatError(f"offset {4 + 4 * i}: dimension sizes {dims[:i + 1]} overflow "
                                 f"the element limit {MAX_IDX_ELEMENTS}")
    if len(raw) - header < count:
        raise IdxFormatError(f"offset {header}: truncated payload, expected {count} bytes, "
                             f"found {len(raw) - header}")
    if len(raw) - header > count:
        raise IdxFormatError(f"offset {header + count}: {len(raw) - header - count} trailing bytes "
                             f"after the payload")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims).copy()


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed) as raw unsigned bytes."""
    return parse_idx(_read_bytes(path))


def encode_idx(array) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        if np.any((array < 0) | (array > 255)) or np.any(array != np.round(array)):
            raise ValueError("IDX payload must be integers in [0, 255]")
        array = array.astype(np.uint8)
    if not 1 <= array.ndim <= 255:
        raise ValueError("IDX arrays need between 1 and 255 dimensions")
    head = struct.pack(">I", (IDX_UBYTE << 8) | array.ndim)
    head += struct.pack(f">{array.ndim}I", *array.shape)
    return head + np.ascontiguousarray(array).tobytes()


def write_idx(path, array):
    from .io import atomic_write_bytes

    atomic_write_bytes(path, encode_idx(array))


def binarize(pixels, threshold=0.5):
    """1 where ``pixel / 255 >= threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("binarize_threshold must lie in [0, 1]")
    return (np.asarray(pixels, dtype=np.float64) / 255.0 >= threshold).astype(np.uint8)


@dataclass
class Dataset:
    """Binary rows with a per-row split tag (``"train"`` or ``"test"``)."""

    rows: np.ndarray
    split: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.uint8)
        self.split = np.asarray(self.split, dtype=object)
        if self.rows.ndim != 2:
            raise ValueError("dataset rows must form an N x D matrix")
        if self.split.shape != (self.rows.shape[0],):
            raise ValueError("need one split tag per row")
        if np.any(self.rows > 1):
            raise ValueError("dataset entries must be 0 or 1")
        bad = set(self.split.tolist()) - {"train", "test"}
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")

    @property
    def train(self):
        return self.rows[self.split == "train"]

    @property
    def test(self):
        return self.rows[self.split == "test"]

    @property
    def dim(self):
        return self.rows.shape[1]


def split_tags(n, n_train):
    if not 0 <= n_train <= n:
        raise ValueError(f"cannot take {n_train} training rows from {n}")
    return np.array(["train"] * n_train + ["test"] * (n - n_train), dtype=object)


def load_idx(path, binarize_threshold=0.5, n_train=None) -> Dataset:
    """Load an IDX image tensor as flattened binary rows.

    The first ``n_train`` rows are tagged train and the rest test; by default
    every row is train.
    """
    pixels = read_idx(path)
    if pixels.ndim != 3:
        raise IdxFormatError(f"offset 3: expected a 3-D image tensor (magic 0x00000803), "
                             f"got {pixels.ndim} dimension(s)")
    rows = binarize(pixels.reshape(pixels.shape[0], -1), binarize_threshold)
    n = rows.shape[0]
    return Dataset(rows, split_tags(n, n if n_train is None else n_train))


def synthetic_logistic_mf(n_train=700, n_test=200, data_dim=20, latent_dim=5, seed=0,
                          weight_std=1.5):
    """Draw rows from a logistic-MF model with Gaussian loadings.

    Returns the dataset and the generating ``(weights, intercepts)``.
    """
    rng = np.random.default_rng(seed)
    weights = weight_std * rng.standard_normal((data_dim, latent_dim))
    intercepts = rng.standard_normal(data_dim)
    z = rng.standard_normal((n_train + n_test, latent_dim))
    probs = expit(z @ weights.T + intercepts)
    rows = (rng.random(probs.shape) < probs).astype(np.uint8)
    return Dataset(rows, split_tags(n_train + n_test, n_train)), (weights, intercepts)
