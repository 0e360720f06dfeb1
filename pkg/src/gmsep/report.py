"""Report figures rendered next to the delimited outputs.

Every training or ablation run writes its CSVs plus PNG figures: loss and
validation curves, the per-epoch conflicting-layer percentage, a panel of
probe spectrograms (noisy mixture and each separated source), and a bar
chart over the ablation grid. Spectrogram panels are also exported as PGM
and CSV next to the PNG.
"""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .signal import spectrogram, write_csv_matrix, write_pgm  # noqa: E402


def _figures_dir(out_dir):
    path = os.path.join(out_dir, "figures")
    os.makedirs(path, exist_ok=True)
    return path


def training_figures(result, out_dir):
    """Loss/validation curves and the conflict-percentage curve."""
    fig_dir = _figures_dir(out_dir)
    epochs = [m.epoch for m in result.metrics]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(epochs, [m.train_l_total for m in result.metrics], label="total")
    ax1.plot(epochs, [m.train_l_ss for m in result.metrics], label="separation", ls="--")
    if result.metrics and result.metrics[0].train_l_se is not None:
        ax1.plot(epochs, [m.train_l_se for m in result.metrics], label="enhancement", ls=":")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training loss")
    ax1.legend(fontsize=8)
    ax2.plot(epochs, [m.valid_si_snri_db for m in result.metrics], label="SI-SNRi")
    ax2.plot(epochs, [m.valid_sdri_db for m in result.metrics], label="SDRi", ls="--")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation improvement (dB)")
    ax2.legend(fontsize=8)
    fig.suptitle(f"mode={result.config.mode}")
    fig.tight_layout()
    fig.savefig(os.path.join(fig_dir, "training_curves.png"), dpi=120)
    plt.close(fig)

    means = result.epoch_conflict_means()
    if means:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(list(means.keys()), [100 * v for v in means.values()], marker="o", ms=3)
        ax.set_xlabel("epoch")
        ax.set_ylabel("conflicting layers (%)")
        ax.set_ylim(bottom=0)
        fig.tight_layout()
        fig.savefig(os.path.join(fig_dir, "conflict.png"), dpi=120)
        plt.close(fig)


def probe_spectrograms(system, sample, out_dir, frame_len=None, hop=None):
    """Spectrogram panel for one probe: noisy mixture plus each estimate.

    Writes one PGM and one CSV per panel and a combined PNG.
    """
    length = len(sample.x_n)
    if frame_len is None:
        frame_len = min(128, max(16, length // 8))
    if hop is None:
        hop = max(1, frame_len // 4)
    spec_dir = os.path.join(out_dir, "spectrograms")
    os.makedirs(spec_dir, exist_ok=True)
    estimates = system.estimate_sources(sample.x_n)
    panels = [("noisy_mixture", sample.x_n)]
    panels += [(f"estimate{k + 1}", est) for k, est in enumerate(estimates)]
    images = []
    for name, wave in panels:
        img = spectrogram(wave, frame_len, hop)
        write_pgm(img, os.path.join(spec_dir, f"probe_{name}.pgm"))
        write_csv_matrix(img, os.path.join(spec_dir, f"probe_{name}.csv"))
        images.append((name, img))
    fig, axes = plt.subplots(1, len(images), figsize=(3.0 * len(images), 3.0))
    if len(images) == 1:
        axes = [axes]
    for ax, (name, img) in zip(axes, images):
        ax.imshow(img, origin="lower", aspect="auto", cmap="magma")
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("frame")
        ax.set_ylabel("bin")
    fig.tight_layout()
    fig.savefig(os.path.join(_figures_dir(out_dir), "probe_spectrograms.png"), dpi=120)
    plt.close(fig)


def ablation_figure(rows, out_dir):
    """Bar chart of test SI-SNRi per mode."""
    ok = [r for r in rows if r["test_si_snri_db"] is not None]
    if not ok:
        return
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar([r["mode"] for r in ok], [r["test_si_snri_db"] for r in ok], color="#4878b0")
    ax.set_ylabel("test SI-SNRi (dB)")
    ax.tick_params(axis="x", labelrotation=15)
    fig.tight_layout()
    fig.savefig(os.path.join(_figures_dir(out_dir), "ablation.png"), dpi=120)
    plt.close(fig)


def conflict_comparison_figure(results, out_dir):
    """Overlay of per-epoch conflict percentages across modes that track them."""
    curves = {m: r.epoch_conflict_means() for m, r in results.items()
              if r.epoch_conflict_means()}
    if not curves:
        return
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for mode, means in curves.items():
        ax.plot(list(means.keys()), [100 * v for v in means.values()],
                marker="o", ms=3, label=mode)
    ax.set_xlabel("epoch")
    ax.set_ylabel("conflicting layers (%)")
    ax.set_ylim(bottom=-2)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(_figures_dir(out_dir), "conflict_comparison.png"), dpi=120)
    plt.close(fig)
