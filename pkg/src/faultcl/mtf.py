"""Markov Transition Field encoding of 1-D windows."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

N_BINS = 8
IMAGE_SIZE = 32

_MAGIC = b"MTF1"
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class MtfImage:
    pixels: np.ndarray
    source_len: int
    bins: int

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


def quantize(samples: np.ndarray, q_bins: int) -> np.ndarray:
    """Assign every sample to one of ``q_bins`` empirical-quantile bins.

    Sorted position ``r`` belongs to bin ``floor(r * Q / N)`` when values are
    distinct; equal values share the lower bin.  A constant window lands
    entirely in bin 0.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if q_bins < 2:
        raise ValueError("q_bins must be >= 2")
    if n < q_bins:
        raise ValueError(f"need at least {q_bins} samples, got {n}")
    xs = np.sort(x)
    # last sorted position of each of the first Q-1 bins
    cut = (np.arange(1, q_bins) * n) // q_bins - 1
    return np.searchsorted(xs[cut], x, side="left").astype(np.int64)


def transition_matrix(bins: np.ndarray, q_bins: int) -> np.ndarray:
    """Row-stochastic first-order transition matrix; unvisited rows stay zero."""
    b = np.asarray(bins, dtype=np.int64)
    if b.size < 2:
        raise ValueError("need at least two states")
    if b.min() < 0 or b.max() >= q_bins:
        raise ValueError("bin index out of range")
    counts = np.zeros((q_bins, q_bins))
    np.add.at(counts, (b[:-1], b[1:]), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def mtf_field(bins: np.ndarray, w: np.ndarray) -> np.ndarray:
    b = np.asarray(bins, dtype=np.int64)
    return w[b[:, None], b[None, :]]


def _block_starts(n: int, out_size: int) -> np.ndarray:
    block = n // out_size
    return np.arange(out_size) * block


def aggregate(field: np.ndarray, out_size: int, q_bins: int = N_BINS) -> MtfImage:
    """Mean-pool an N x N field into ``out_size`` x ``out_size`` blocks.

    Blocks are ``N // S`` wide; the remainder is folded into the last block.
    """
    f = np.asarray(field, dtype=float)
    n = f.shape[0]
    if f.ndim != 2 or f.shape[1] != n:
        raise ValueError("field must be square")
    if not 1 <= out_size <= n:
        raise ValueError(f"out_size must be in 1..{n}")
    starts = _block_starts(n, out_size)
    widths = np.diff(np.append(starts, n)).astype(float)
    sums = np.add.reduceat(np.add.reduceat(f, starts, axis=0), starts, axis=1)
    pixels = sums / np.outer(widths, widths)
    return MtfImage(pixels=np.clip(pixels, 0.0, 1.0), source_len=n, bins=q_bins)


def encode(samples: np.ndarray, q_bins: int = N_BINS, out_size: int = IMAGE_SIZE) -> MtfImage:
    bins = quantize(samples, q_bins)
    w = transition_matrix(bins, q_bins)
    return aggregate(mtf_field(bins, w), out_size, q_bins)


def encode_batch(windows: Iterable[np.ndarray], q_bins: int = N_BINS, out_size: int = IMAGE_SIZE) -> np.ndarray:
    """Encode many windows into a float32 array of shape (n, S, S)."""
    images = [encode(w, q_bins, out_size).pixels for w in windows]
    if not images:
        return np.zeros((0, out_size, out_size), dtype=np.float32)
    return np.stack(images).astype(np.float32)


# -- binary dump: "MTF1", u32 S, u32 Q, then S*S little-endian float32 ------


def write_image(fh: BinaryIO, image: MtfImage) -> None:
    fh.write(_HEADER.pack(_MAGIC, image.size, image.bins))
    fh.write(np.ascontiguousarray(image.pixels, dtype="<f4").tobytes())


def read_image(fh: BinaryIO) -> MtfImage | None:
    head = fh.read(_HEADER.size)
    if not head:
        return None
    if len(head) != _HEADER.size:
        raise ValueError("truncated MTF header")
    magic, size, q = _HEADER.unpack(head)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    payload = fh.read(4 * size * size)
    if len(payload) != 4 * size * size:
        raise ValueError("truncated MTF payload")
    pixels = np.frombuffer(payload, dtype="<f4").reshape(size, size).astype(np.float32)
    return MtfImage(pixels=pixels, source_len=-1, bins=q)


def save_images(path: str | Path, images: Iterable[MtfImage]) -> int:
    """Write images back to back; a file holding one record is a plain dump."""
    n = 0
    with open(path, "wb") as fh:
        for image in images:
            write_image(fh, image)
            n += 1
    return n


def load_images(path: str | Path) -> list[MtfImage]:
    out = []
    with open(path, "rb") as fh:
        while (image := read_image(fh)) is not None:
            out.append(image)
    return out


def write_pgm(path: str | Path, image: MtfImage) -> None:
    """Binary 8-bit portable graymap for eyeballing an encoding."""
    gray = np.round(np.clip(image.pixels, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())
