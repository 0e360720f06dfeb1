"""Mask estimation networks.

One dual-path masking architecture serves both stages: the enhancement
network is the single-source special case (C = 1) of the separation
network. The pipeline over a representation (F, T') is:

    layer norm -> linear(F) -> chunk(K) -> dual-path blocks
    -> PReLU -> linear(C*F) -> overlap-add -> two feed-forward layers
    -> ReLU -> C nonnegative masks (C, F, T')

Each dual-path block runs a bidirectional recurrence inside every chunk
(local context) and then across chunks at every intra-chunk position
(global context); both passes are followed by a linear projection back to
F and layer norm, and wrapped in residual connections.
"""
from __future__ import annotations

from dataclasses import dataclass

from .autodiff import (
    ShapeMismatch,
    Tensor,
    bi_recurrent,
    layer_norm,
    linear,
    make_bigru,
    mul,
    narrow,
    pad_last,
    prelu,
    relu,
    reshape,
    tanh,
    transpose,
)
from .signal import ChunkedRep, chunk, overlap_add


@dataclass
class MaskNetConfig:
    """Sizes of one mask network; sources=1 yields the enhancement stage."""

    filters: int
    chunk: int
    num_blocks: int
    hidden: int
    sources: int = 1

    def __post_init__(self):
        if self.sources < 1:
            raise ValueError(f"sources must be >= 1, got {self.sources}")
        if self.chunk % 2 != 0 or self.chunk < 2:
            raise ValueError(f"chunk must be even and >= 2, got {self.chunk}")
        if self.num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {self.num_blocks}")


class DualPathBlock:
    """Intra-chunk then inter-chunk recurrence, shape preserving."""

    def __init__(self, store, prefix, filters, hidden):
        self.filters = filters
        self.intra = make_bigru(store, f"{prefix}.intra", filters, hidden)
        self.intra_proj_w = store.add(f"{prefix}.intra_proj.weight", (filters, 2 * hidden), fan_in=2 * hidden)
        self.intra_proj_b = store.add(f"{prefix}.intra_proj.bias", (filters,), fan_in=2 * hidden)
        self.intra_norm_g = store.add(f"{prefix}.intra_norm.gain", (filters,), init="ones")
        self.intra_norm_b = store.add(f"{prefix}.intra_norm.bias", (filters,), init="zeros")
        self.inter = make_bigru(store, f"{prefix}.inter", filters, hidden)
        self.inter_proj_w = store.add(f"{prefix}.inter_proj.weight", (filters, 2 * hidden), fan_in=2 * hidden)
        self.inter_proj_b = store.add(f"{prefix}.inter_proj.bias", (filters,), fan_in=2 * hidden)
        self.inter_norm_g = store.add(f"{prefix}.inter_norm.gain", (filters,), init="ones")
        self.inter_norm_b = store.add(f"{prefix}.inter_norm.bias", (filters,), init="zeros")

    def forward(self, c: Tensor) -> Tensor:
        """(F, K, S) -> (F, K, S)."""
        if c.ndim != 3 or c.shape[0] != self.filters:
            raise ShapeMismatch(f"dual_path_block: expected (F, K, S), got {tuple(c.shape)}")
        u = bi_recurrent(c, self.intra)                      # over K, batched on S
        u = linear(u, self.intra_proj_w, self.intra_proj_b)
        u = layer_norm(u, self.intra_norm_g, self.intra_norm_b)
        x = c + u
        v = transpose(x, (0, 2, 1))                          # (F, S, K)
        v = bi_recurrent(v, self.inter)                      # over S, batched on K
        v = linear(v, self.inter_proj_w, self.inter_proj_b)
        v = layer_norm(v, self.inter_norm_g, self.inter_norm_b)
        v = transpose(v, (0, 2, 1))
        return x + v


class MaskNet:
    """Representation (F, T') -> masks (C, F, T'), elementwise >= 0."""

    def __init__(self, store, cfg: MaskNetConfig, prefix):
        f = cfg.filters
        self.cfg = cfg
        self.in_norm_g = store.add(f"{prefix}.in_norm.gain", (f,), init="ones")
        self.in_norm_b = store.add(f"{prefix}.in_norm.bias", (f,), init="zeros")
        self.in_proj_w = store.add(f"{prefix}.in_proj.weight", (f, f), fan_in=f)
        self.in_proj_b = store.add(f"{prefix}.in_proj.bias", (f,), fan_in=f)
        self.blocks = [
            DualPathBlock(store, f"{prefix}.block{i}", f, cfg.hidden)
            for i in range(cfg.num_blocks)
        ]
        self.mask_prelu = store.add(f"{prefix}.mask_prelu.slope", (1,), init="const", value=0.25)
        self.mask_proj_w = store.add(f"{prefix}.mask_proj.weight", (cfg.sources * f, f), fan_in=f)
        self.mask_proj_b = store.add(f"{prefix}.mask_proj.bias", (cfg.sources * f,), fan_in=f)
        self.out_ff1_w = store.add(f"{prefix}.out_ff1.weight", (f, f), fan_in=f)
        self.out_ff1_b = store.add(f"{prefix}.out_ff1.bias", (f,), fan_in=f)
        self.out_ff2_w = store.add(f"{prefix}.out_ff2.weight", (f, f), fan_in=f)
        # masks start near identity (passthrough) so an untrained model emits
        # roughly the mixture instead of near-silence
        self.out_ff2_b = store.add(f"{prefix}.out_ff2.bias", (f,), init="const", value=1.0)

    def forward(self, h: Tensor) -> Tensor:
        cfg = self.cfg
        if h.ndim != 2 or h.shape[0] != cfg.filters:
            raise ShapeMismatch(f"mask_net: expected ({cfg.filters}, T'), got {tuple(h.shape)}")
        t_prime = h.shape[1]
        y = layer_norm(h, self.in_norm_g, self.in_norm_b)
        y = linear(y, self.in_proj_w, self.in_proj_b)
        chunks = chunk(y, cfg.chunk)
        d = chunks.data
        for block in self.blocks:
            d = block.forward(d)
        d = prelu(d, self.mask_prelu)
        d = linear(d, self.mask_proj_w, self.mask_proj_b)   # (C*F, K, S)
        rep = overlap_add(ChunkedRep(d, chunks.pad_len, chunks.hop, chunks.base_len))
        per_source = reshape(rep, (cfg.sources, cfg.filters, t_prime))
        z = transpose(per_source, (1, 0, 2))                 # (F, C, T') so linear acts on F
        z = tanh(linear(z, self.out_ff1_w, self.out_ff1_b))
        z = linear(z, self.out_ff2_w, self.out_ff2_b)
        return relu(transpose(z, (1, 0, 2)))


def se_apply(h_n: Tensor, mask: Tensor) -> Tensor:
    """Enhanced representation: elementwise mask * noisy representation."""
    if mask.ndim == 3:
        if mask.shape[0] != 1:
            raise ShapeMismatch(f"se_apply: expected a single mask, got {tuple(mask.shape)}")
        mask = reshape(mask, (mask.shape[1], mask.shape[2]))
    if mask.shape != h_n.shape:
        raise ShapeMismatch(f"se_apply: mask {tuple(mask.shape)} vs representation {tuple(h_n.shape)}")
    return mul(mask, h_n)


def separate(h_e: Tensor, masks: Tensor, decoder, out_len: int):
    """Per-source masked decoding back to C waveforms of length out_len.

    Each decoded waveform is trimmed or zero-padded to out_len so the loss
    compares aligned signals.
    """
    if masks.ndim != 3 or masks.shape[1:] != h_e.shape:
        raise ShapeMismatch(f"separate: masks {tuple(masks.shape)} vs representation {tuple(h_e.shape)}")
    n_sources = masks.shape[0]
    out = []
    for k in range(n_sources):
        m_k = reshape(narrow(masks, 0, k, 1), h_e.shape)
        wave = decoder.decode(mul(m_k, h_e))
        if wave.shape[0] > out_len:
            wave = narrow(wave, 0, 0, out_len)
        elif wave.shape[0] < out_len:
            wave = pad_last(wave, out_len)
        out.append(wave)
    return out
