"""Time-domain <-> feature-domain transforms, chunking, and spectrogram export.

The encoder is a learned filter bank (strided valid convolution followed by
ReLU), the decoder its transposed counterpart with the same kernel size and
stride. Chunking slices a feature map into 50%-overlapping windows along
time; overlap-add sums them back, so the interior of a round trip is
counted twice and the first/last half-window once.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeMismatch,
    Tensor,
    conv1d,
    frame,
    narrow,
    overlap_add_frames,
    pad_last,
    relu,
    transposed_conv1d,
)


class Encoder:
    """Waveform (T,) -> nonnegative representation (F, T')."""

    def __init__(self, store, filters, kernel, stride, prefix="encoder"):
        self.filters = filters
        self.kernel = kernel
        self.stride = stride
        self.weight = store.add(f"{prefix}.kernel", (filters, kernel), fan_in=kernel)

    def out_len(self, t):
        return (t - self.kernel) // self.stride + 1

    def encode(self, x: Tensor) -> Tensor:
        if x.ndim != 1 or x.shape[0] < self.kernel:
            raise ShapeMismatch(
                f"encode: waveform of shape {tuple(x.shape)} is shorter than kernel {self.kernel}")
        return relu(conv1d(x, self.weight, stride=self.stride))


class Decoder:
    """Masked representation (F, T') -> waveform ((T'-1)*stride + kernel,)."""

    def __init__(self, store, filters, kernel, stride, prefix="decoder"):
        self.filters = filters
        self.kernel = kernel
        self.stride = stride
        self.weight = store.add(f"{prefix}.kernel", (filters, kernel), fan_in=kernel)

    def out_len(self, t_prime):
        return (t_prime - 1) * self.stride + self.kernel

    def decode(self, rep: Tensor) -> Tensor:
        if rep.ndim != 2 or rep.shape[0] != self.filters:
            raise ShapeMismatch(
                f"decode: representation of shape {tuple(rep.shape)} does not match {self.filters} filters")
        return transposed_conv1d(rep, self.weight, stride=self.stride)


@dataclass
class ChunkedRep:
    """Overlapping chunks of a representation plus the padding bookkeeping."""

    data: Tensor      # (F, K, S)
    pad_len: int      # zeros appended before chunking
    hop: int          # K // 2
    base_len: int     # time length before padding

    @property
    def n_chunks(self):
        return self.data.shape[2]


def chunk(h: Tensor, k: int) -> ChunkedRep:
    """Slice (F, T') into 50%-overlapping chunks of length k.

    The input is zero-padded at the end to the smallest k + m*hop >= T',
    so the number of chunks is m + 1 and pad_len < hop + k.
    """
    if k < 2 or k % 2 != 0:
        raise ValueError(f"chunk: chunk length must be even and >= 2, got {k}")
    if h.ndim != 2:
        raise ShapeMismatch(f"chunk: expected (F, T'), got {tuple(h.shape)}")
    hop = k // 2
    t_prime = h.shape[1]
    m = 0 if t_prime <= k else -(-(t_prime - k) // hop)
    padded = k + m * hop
    pad_len = padded - t_prime
    data = frame(pad_last(h, padded) if pad_len else h, k, hop)
    return ChunkedRep(data=data, pad_len=pad_len, hop=hop, base_len=t_prime)


def overlap_add(c: ChunkedRep) -> Tensor:
    """Sum overlapping chunks back to (F, T'), trimming the recorded padding."""
    full = overlap_add_frames(c.data, c.hop)
    if c.pad_len:
        return narrow(full, 1, 0, c.base_len)
    return full


def spectrogram(x, frame_len: int, hop: int) -> np.ndarray:
    """Magnitude short-time spectrum of a waveform (plain numpy, no tape).

    Rectangular window; returns (frame_len // 2 + 1, n_frames) with
    n_frames = floor((T - frame_len) / hop) + 1.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatch(f"spectrogram: expected 1-D waveform, got {tuple(x.shape)}")
    if frame_len > x.shape[0]:
        raise ValueError(
            f"spectrogram: frame length {frame_len} exceeds signal length {x.shape[0]}")
    if hop < 1:
        raise ValueError(f"spectrogram: hop must be >= 1, got {hop}")
    windows = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop]
    return np.abs(np.fft.rfft(windows, axis=1)).T


def write_pgm(image, path, max_gray=255):
    """Write a magnitude image as ASCII PGM (P2), brightest value -> max_gray."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeMismatch(f"write_pgm: expected a 2-D image, got {tuple(img.shape)}")
    peak = img.max()
    scaled = np.zeros_like(img) if peak <= 0 else img / peak * max_gray
    quant = np.clip(np.rint(scaled), 0, max_gray).astype(int)
    h, w = quant.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"P2\n{w} {h}\n{max_gray}\n")
        for row in quant:
            fh.write(" ".join(str(v) for v in row) + "\n")


def read_pgm(path):
    """Read back an ASCII PGM written by write_pgm (test/inspection helper)."""
    with open(path, encoding="ascii") as fh:
        tokens = fh.read().split()
    if tokens[0] != "P2":
        raise ValueError(f"read_pgm: {path} is not an ASCII PGM file")
    w, h, _maxg = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array(tokens[4:4 + w * h], dtype=np.int64)
    return vals.reshape(h, w)


def write_csv_matrix(image, path):
    """Write a matrix as comma-separated rows (one row per frequency bin)."""
    img = np.asarray(image, dtype=np.float64)
    np.savetxt(path, img, delimiter=",", fmt="%.8g")
