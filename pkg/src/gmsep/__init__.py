"""gmsep: unified speech enhancement + separation with gradient modulation.

A small numpy autodiff engine drives a two-stage masking model: an
enhancement network cleans the encoded noisy mixture under supervision from
the parallel clean mixture, a separation network splits the result into
sources, and the two task gradients are harmonized per layer before each
optimizer step.
"""
from .autodiff import (
    BiGruCell,
    GradientSet,
    GraphTape,
    GruDirection,
    ParamStore,
    ShapeMismatch,
    TapeConsumed,
    Tensor,
    bi_recurrent,
    make_bigru,
    no_grad,
)
from .data import DatasetSpec, MixtureSample, load_wav, make_sample, make_split, synth_source, write_wav
from .gradmod import ConflictStats, clip_global_norm, combine, conflict_stats, modulate
from .losses import LossBundle, se_loss, separation_metrics, si_snr, total_loss, upit_ss_loss
from .model import DualPathBlock, MaskNet, MaskNetConfig, se_apply, separate
from .signal import ChunkedRep, Decoder, Encoder, chunk, overlap_add, spectrogram
from .train import (
    Adam,
    EpochMetrics,
    ModelConfig,
    PlateauHalving,
    SeparationSystem,
    TrainConfig,
    TrainResult,
    evaluate,
    run_ablation,
    run_training,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "Adam", "BiGruCell", "ChunkedRep", "ConflictStats", "DatasetSpec", "Decoder",
    "DualPathBlock", "Encoder", "EpochMetrics", "GradientSet", "GraphTape",
    "GruDirection", "LossBundle", "MaskNet", "MaskNetConfig", "MixtureSample",
    "ModelConfig", "ParamStore", "PlateauHalving", "SeparationSystem",
    "ShapeMismatch", "TapeConsumed", "Tensor", "TrainConfig", "TrainResult",
    "bi_recurrent", "chunk", "clip_global_norm", "combine", "conflict_stats",
    "evaluate", "load_wav", "make_bigru", "make_sample", "make_split", "modulate",
    "no_grad", "overlap_add", "run_ablation", "run_training", "se_apply",
    "se_loss", "separate", "separation_metrics", "si_snr", "spectrogram",
    "synth_source", "total_loss", "train_step", "upit_ss_loss", "write_wav",
]
