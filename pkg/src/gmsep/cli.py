"""Command-line interface.

Subcommands:
    train        train one mode; writes metrics.csv, conflict.csv, the
                 best-validation checkpoint, probe spectrograms and figures
    eval         evaluate a run directory's best checkpoint on a split
    ablate       train the four-mode grid (optionally over several seeds)
    synth-data   materialize the synthetic corpus to sample containers/WAVs
    spectrogram  export a magnitude spectrogram (PGM + CSV + PNG)

Options mirror the config keys; a key=value config file supplies defaults
and explicit command-line flags override it.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .checkpoint import load_params
from .data import DatasetSpec, load_wav, make_sample, make_split, save_sample, write_wav
from .signal import spectrogram, write_csv_matrix, write_pgm
from .train import (
    ABLATION_HEADER,
    CONFIG_KEYS,
    MODES,
    SeparationSystem,
    TrainConfig,
    config_from_mapping,
    dump_config,
    evaluate,
    run_ablation,
    run_training,
)


def parse_config_file(path) -> dict:
    """key=value lines; blank lines and #-comments are ignored."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _add_config_flags(parser):
    parser.add_argument("--config", help="key=value config file (overridden by flags)")
    for key in CONFIG_KEYS:
        flag = "--" + key.replace("_", "-")
        if key == "mode":
            parser.add_argument(flag, choices=MODES + ("unified+gm",))
        else:
            parser.add_argument(flag, type=str)


def resolve_config(args) -> TrainConfig:
    """defaults <- config file <- command-line flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for key in CONFIG_KEYS:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            values[key] = flag_value
    return config_from_mapping(values)


def _load_run(run_dir):
    cfg = config_from_mapping(parse_config_file(os.path.join(run_dir, "config.txt")))
    system = SeparationSystem(cfg.model, include_se=cfg.mode != "baseline-ss",
                              dtype=cfg.dtype, seed=cfg.seed)
    load_params(system.store, os.path.join(run_dir, "checkpoint_best.bin"))
    return cfg, system


def cmd_train(args):
    cfg = resolve_config(args)
    result = run_training(cfg, out_dir=args.out, eval_test=True, log=print)
    print(f"done: best valid SI-SNRi {result.best_valid_si_snri:.2f} dB at epoch "
          f"{result.best_epoch}; test SI-SNRi {result.test_si_snri:.2f} dB, "
          f"SDRi {result.test_sdri:.2f} dB; outputs in {args.out}")
    return 0


def cmd_eval(args):
    cfg, system = _load_run(args.run_dir)
    samples = make_split(cfg.data, args.split)
    si, sdr = evaluate(system, samples)
    print(f"{args.split}: SI-SNRi {si:.3f} dB  SDRi {sdr:.3f} dB  "
          f"({len(samples)} samples, mode {cfg.mode})")
    return 0


def cmd_ablate(args):
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    base = resolve_config(args)
    all_rows = []
    if seeds is None:
        all_rows = run_ablation(base, out_dir=args.out, log=print if args.verbose else None)
        _print_ablation(all_rows)
    else:
        from dataclasses import replace

        summary_lines = ["seed," + ABLATION_HEADER]
        for seed in seeds:
            cfg = replace(base, seed=seed)
            rows = run_ablation(cfg, out_dir=os.path.join(args.out, f"seed{seed}"),
                                log=print if args.verbose else None)
            print(f"--- seed {seed} ---")
            _print_ablation(rows)
            for r in rows:
                summary_lines.append(f"{seed}," + _ablation_row_csv(r))
            all_rows.extend(rows)
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ablation_all_seeds.csv"), "w", encoding="ascii") as fh:
            fh.write("\n".join(summary_lines) + "\n")
    return 0


def _ablation_row_csv(r):
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, str):
            return v
        if isinstance(v, int):
            return str(v)
        return f"{v:.10g}"

    keys = ("mode", "test_si_snri_db", "test_sdri_db", "param_count",
            "mean_conflict_fraction", "max_post_mod_fraction", "error")
    return ",".join(fmt(r[k]) for k in keys)


def _print_ablation(rows):
    print(f"{'mode':<20}{'SI-SNRi (dB)':>14}{'SDRi (dB)':>12}{'params':>10}{'conflict':>10}")
    for r in rows:
        if r["error"]:
            print(f"{r['mode']:<20}  failed: {r['error']}")
            continue
        conflict = ("-" if r["mean_conflict_fraction"] is None
                    else f"{100 * r['mean_conflict_fraction']:.1f}%")
        print(f"{r['mode']:<20}{r['test_si_snri_db']:>14.2f}{r['test_sdri_db']:>12.2f}"
              f"{r['param_count']:>10}{conflict:>10}")


def cmd_synth_data(args):
    cfg = resolve_config(args)
    spec = cfg.data
    os.makedirs(args.out, exist_ok=True)
    splits = ("train", "valid", "test") if args.split == "all" else (args.split,)
    for split in splits:
        split_dir = os.path.join(args.out, split)
        os.makedirs(split_dir, exist_ok=True)
        samples = make_split(spec, split)
        for i, sample in enumerate(samples):
            save_sample(os.path.join(split_dir, f"sample{i:05d}.bin"), sample)
            if args.wav:
                write_wav(os.path.join(split_dir, f"sample{i:05d}_noisy.wav"),
                          sample.x_n / max(1.0, np.max(np.abs(sample.x_n))), spec.sample_rate)
        print(f"{split}: wrote {len(samples)} samples to {split_dir}")
    return 0


def cmd_spectrogram(args):
    if args.wav:
        x, rate = load_wav(args.wav)
        label = os.path.splitext(os.path.basename(args.wav))[0]
    else:
        cfg = resolve_config(args)
        sample = make_sample(cfg.data, np.random.SeedSequence(cfg.seed, spawn_key=(2, args.index)))
        x, rate = sample.x_n, cfg.data.sample_rate
        label = f"synthetic_test_{args.index}"
    img = spectrogram(x, args.frame, args.hop)
    os.makedirs(os.path.dirname(os.path.abspath(args.out_prefix)) or ".", exist_ok=True)
    write_pgm(img, args.out_prefix + ".pgm")
    write_csv_matrix(img, args.out_prefix + ".csv")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.imshow(img, origin="lower", aspect="auto", cmap="magma")
    ax.set_title(label, fontsize=9)
    ax.set_xlabel("frame")
    ax.set_ylabel("bin")
    fig.tight_layout()
    fig.savefig(args.out_prefix + ".png", dpi=120)
    plt.close(fig)
    print(f"wrote {args.out_prefix}.pgm/.csv/.png  ({img.shape[0]}x{img.shape[1]}, {rate} Hz)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="gmsep",
                                     description="unified enhancement + separation trainer "
                                                 "with gradient modulation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one mode")
    _add_config_flags(p_train)
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a finished run")
    p_eval.add_argument("--run-dir", required=True, help="directory written by train")
    p_eval.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="train the four-mode grid")
    _add_config_flags(p_abl)
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    p_abl.add_argument("--verbose", action="store_true")
    p_abl.set_defaults(func=cmd_ablate)

    p_synth = sub.add_parser("synth-data", help="write the synthetic corpus to disk")
    _add_config_flags(p_synth)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--split", default="all", choices=("all", "train", "valid", "test"))
    p_synth.add_argument("--wav", action="store_true", help="also write noisy-mixture WAVs")
    p_synth.set_defaults(func=cmd_synth_data)

    p_spec = sub.add_parser("spectrogram", help="export a magnitude spectrogram")
    _add_config_flags(p_spec)
    p_spec.add_argument("--wav", help="input WAV file (default: a synthetic test mixture)")
    p_spec.add_argument("--index", type=int, default=0, help="synthetic probe index")
    p_spec.add_argument("--frame", type=int, default=128)
    p_spec.add_argument("--hop", type=int, default=32)
    p_spec.add_argument("--out-prefix", required=True)
    p_spec.set_defaults(func=cmd_spectrogram)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
