"""End-to-end training and evaluation harness.

One optimization step runs the shared forward (encode the noisy input,
mask-enhance it, mask-separate the result, decode per source), computes the
weighted enhancement loss and the permutation-invariant separation loss,
then takes two backward passes over the same tape: the enhancement-task
gradient covers the encoder and enhancement network, the separation-task
gradient covers everything. Depending on the mode the enhancement gradient
is projected off per-layer conflicts before the two are summed, globally
clipped, and applied with Adam.

Modes:
    baseline-ss         separation network only, single backward pass
    unified-no-se-loss  full unified network, enhancement weight forced to 0
    unified             full unified network, weighted multi-task objective
    unified-gm          unified plus per-layer gradient modulation
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import GraphTape, ParamStore, Tensor, no_grad
from .checkpoint import save_params
from .data import DatasetSpec, make_split
from .gradmod import POST_MODULATION_TOL, clip_global_norm, combine, conflict_stats, modulate
from .losses import se_loss, separation_metrics, total_loss, upit_ss_loss
from .model import MaskNet, MaskNetConfig, se_apply, separate
from .signal import Decoder, Encoder

MODES = ("baseline-ss", "unified-no-se-loss", "unified", "unified-gm")
SE_SCOPE_PREFIXES = ("encoder.", "se_net.")


class NonFiniteLossError(RuntimeError):
    """Training produced NaN/Inf; message names the offending quantity."""


def normalize_mode(mode: str) -> str:
    alias = {"unified+gm": "unified-gm", "baseline": "baseline-ss"}
    mode = alias.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass
class ModelConfig:
    """Architecture sizes (desk-scale defaults; see README for the rationale)."""

    filters: int = 32
    kernel: int = 16
    stride: int = 8
    chunk: int = 16
    se_blocks: int = 1
    ss_blocks: int = 2
    hidden: int = 16
    sources: int = 2
    backbone: str = "gru"   # reserved; only "gru" is implemented

    def __post_init__(self):
        if self.backbone != "gru":
            raise ValueError(f"unsupported backbone {self.backbone!r} (only 'gru' is implemented)")


@dataclass
class TrainConfig:
    mode: str = "unified-gm"
    lr: float = 1e-3
    epochs: int = 30
    clip_norm: float = 5.0
    lambda_se: float = 0.1
    patience: int = 5
    halve_after_epoch: int = 10
    seed: int = 0
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)

    def __post_init__(self):
        self.mode = normalize_mode(self.mode)
        if self.lr <= 0 or self.clip_norm <= 0 or self.patience < 1:
            raise ValueError("lr and clip_norm must be positive, patience >= 1")
        # one seed knob per run; the source count must agree between the
        # separation head and the synthesized mixtures
        self.data = replace(self.data, seed=self.seed, sources=self.model.sources)

    def effective_lambda(self) -> float:
        return 0.0 if self.mode in ("baseline-ss", "unified-no-se-loss") else self.lambda_se


@dataclass
class EpochMetrics:
    epoch: int
    train_l_se: float | None
    train_l_ss: float
    train_l_total: float
    valid_si_snri_db: float
    valid_sdri_db: float
    conflict_fraction: float | None
    lr: float


METRICS_HEADER = ("epoch,train_l_se,train_l_ss,train_l_total,"
                  "valid_si_snri_db,valid_sdri_db,conflict_fraction,lr")


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return f"{value:.10g}"


class SeparationSystem:
    """Encoder, optional enhancement network, separation network, decoder."""

    def __init__(self, model_cfg: ModelConfig, include_se: bool, dtype, seed: int):
        self.cfg = model_cfg
        self.dtype = np.dtype(dtype)
        self.store = ParamStore(dtype=self.dtype, seed=seed)
        m = model_cfg
        self.encoder = Encoder(self.store, m.filters, m.kernel, m.stride)
        self.se_net = None
        if include_se:
            self.se_net = MaskNet(
                self.store,
                MaskNetConfig(filters=m.filters, chunk=m.chunk, num_blocks=m.se_blocks,
                              hidden=m.hidden, sources=1),
                prefix="se_net")
        self.ss_net = MaskNet(
            self.store,
            MaskNetConfig(filters=m.filters, chunk=m.chunk, num_blocks=m.ss_blocks,
                          hidden=m.hidden, sources=m.sources),
            prefix="ss_net")
        self.decoder = Decoder(self.store, m.filters, m.kernel, m.stride)
        self.se_scope = self.store.subset(*SE_SCOPE_PREFIXES)

    def n_parameters(self):
        return self.store.n_parameters()

    def _forward(self, x_n: Tensor):
        """Shared forward path; returns (estimates, enhanced representation)."""
        h_n = self.encoder.encode(x_n)
        if self.se_net is not None:
            h_e = se_apply(h_n, self.se_net.forward(h_n))
        else:
            h_e = h_n
        masks = self.ss_net.forward(h_e)
        return separate(h_e, masks, self.decoder, x_n.shape[0]), h_e

    def estimate_sources(self, x_n: np.ndarray):
        """Inference: separated waveforms as plain arrays (nothing recorded)."""
        with no_grad():
            est, _ = self._forward(Tensor(x_n.astype(self.dtype)))
        return [w.data for w in est]


class Adam:
    """Adam with bias correction; moment slots live in the ParamStore."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self, store: ParamStore, grads, lr: float):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in store.items():
            g = grads[name].reshape(p.shape).astype(p.tensor.data.dtype, copy=False)
            p.m *= self.beta1
            p.m += (1.0 - self.beta1) * g
            p.v *= self.beta2
            p.v += (1.0 - self.beta2) * g * g
            p.tensor.data -= lr * (p.m / b1c) / (np.sqrt(p.v / b2c) + self.eps)


class PlateauHalving:
    """Halve the rate once validation stops improving for `patience` epochs.

    The rule only activates after `activate_after` epochs; the stall counter
    resets on every improvement of the best metric and on every halving.
    """

    def __init__(self, lr: float, patience: int = 5, activate_after: int = 10):
        self.lr = lr
        self.patience = patience
        self.activate_after = activate_after
        self.best = -math.inf
        self.stall = 0

    def observe(self, epoch: int, metric: float) -> float:
        """Record the metric of `epoch` (1-based); returns the rate to use next."""
        improved = metric > self.best
        if improved:
            self.best = metric
        if epoch <= self.activate_after:
            return self.lr
        if improved:
            self.stall = 0
        else:
            self.stall += 1
            if self.stall >= self.patience:
                self.lr *= 0.5
                self.stall = 0
        return self.lr


def _check_finite(bundle, store, epoch, step):
    if math.isfinite(bundle.l_total.item()):
        return
    offender = "l_total"
    if bundle.l_se is not None and not math.isfinite(bundle.l_se.item()):
        offender = "l_se"
    elif not math.isfinite(bundle.l_ss.item()):
        offender = "l_ss"
    bad_layers = [name for name, p in store.items() if not np.all(np.isfinite(p.tensor.data))]
    raise NonFiniteLossError(
        f"non-finite {offender} at epoch {epoch}, step {step}; "
        f"non-finite parameter layers: {bad_layers or 'none'}")


def train_step(system: SeparationSystem, sample, opt: Adam, cfg: TrainConfig, lr: float,
               epoch: int = 0, step: int = 0):
    """One optimization step. Returns (loss values, pre-modulation conflict
    stats or None, post-modulation conflict fraction or None)."""
    lam = cfg.effective_lambda()
    x_n = Tensor(sample.x_n.astype(system.dtype))
    with GraphTape() as tape:
        h_n = system.encoder.encode(x_n)
        l_se = None
        if system.se_net is not None:
            with no_grad():
                h_c = system.encoder.encode(Tensor(sample.x_c.astype(system.dtype)))
            h_e = se_apply(h_n, system.se_net.forward(h_n))
            l_se = se_loss(h_e, h_c)
        else:
            h_e = h_n
        masks = system.ss_net.forward(h_e)
        estimates = separate(h_e, masks, system.decoder, x_n.shape[0])
        l_ss, _perm = upit_ss_loss(estimates, sample.sources)
        bundle = total_loss(l_se, l_ss, lam)
    _check_finite(bundle, system.store, epoch, step)
    stats = None
    post_fraction = None
    if system.se_net is not None:
        g_se = tape.backward(bundle.l_se_scaled, system.se_scope, retain=True, task="SE")
        g_ss = tape.backward(bundle.l_ss, system.store, task="SS")
        stats = conflict_stats(g_se, g_ss)
        if cfg.mode == "unified-gm":
            g_se = modulate(g_se, g_ss)
            post_fraction = conflict_stats(g_se, g_ss, rounding_tol=POST_MODULATION_TOL).fraction
        grad = combine(g_se, g_ss)
    else:
        grad = tape.backward(bundle.l_ss, system.store, task="SS")
    grad, _pre_norm = clip_global_norm(grad, cfg.clip_norm)
    opt.step(system.store, grad, lr)
    return bundle.values(), stats, post_fraction


def evaluate(system: SeparationSystem, samples):
    """Mean (SI-SNR improvement, SDR improvement) in dB over a split."""
    if not samples:
        raise ValueError("evaluate: empty split")
    tot_si = 0.0
    tot_sdr = 0.0
    for s in samples:
        estimates = system.estimate_sources(s.x_n)
        si, sdr = separation_metrics(estimates, s.sources, s.x_n)
        tot_si += si
        tot_sdr += sdr
    return tot_si / len(samples), tot_sdr / len(samples)


@dataclass
class TrainResult:
    config: TrainConfig
    metrics: list
    conflict_rows: list           # (epoch, batch, fraction) per training step
    post_fractions: list          # per-step post-modulation fractions (gm mode)
    best_valid_si_snri: float
    best_epoch: int
    checkpoint_path: str | None
    param_count: int
    test_si_snri: float | None = None
    test_sdri: float | None = None

    def epoch_conflict_means(self):
        by_epoch = {}
        for epoch, _batch, fraction in self.conflict_rows:
            by_epoch.setdefault(epoch, []).append(fraction)
        return {e: sum(v) / len(v) for e, v in sorted(by_epoch.items())}


def write_metrics_csv(path, metrics):
    lines = [METRICS_HEADER]
    for m in metrics:
        lines.append(",".join(_fmt(v) for v in (
            m.epoch, m.train_l_se, m.train_l_ss, m.train_l_total,
            m.valid_si_snri_db, m.valid_sdri_db, m.conflict_fraction, m.lr)))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def write_conflict_csv(path, rows):
    lines = ["epoch,batch,fraction"]
    for epoch, batch, fraction in rows:
        lines.append(f"{epoch},{batch},{_fmt(fraction)}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def run_training(cfg: TrainConfig, out_dir=None, eval_test=True, log=None) -> TrainResult:
    """Train one mode end to end; optionally write the full report to out_dir.

    Reports: metrics.csv (one row per epoch), conflict.csv (one row per
    training step), checkpoint_best.bin at the best validation epoch, probe
    spectrograms (PGM + CSV) and matplotlib figures.
    """
    import os

    say = log if log is not None else (lambda *_: None)
    system = SeparationSystem(cfg.model, include_se=cfg.mode != "baseline-ss",
                              dtype=cfg.dtype, seed=cfg.seed)
    train_set = make_split(cfg.data, "train")
    valid_set = make_split(cfg.data, "valid")
    opt = Adam()
    sched = PlateauHalving(cfg.lr, patience=cfg.patience, activate_after=cfg.halve_after_epoch)
    order_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(9, 0)))

    metrics = []
    conflict_rows = []
    post_fractions = []
    best_si = -math.inf
    best_epoch = 0
    ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "checkpoint_best.bin")

    lr = sched.lr
    step_index = 0
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(train_set))
        sum_se = 0.0
        sum_ss = 0.0
        sum_total = 0.0
        epoch_fractions = []
        for batch, idx in enumerate(order):
            values, stats, post = train_step(
                system, train_set[idx], opt, cfg, lr, epoch, step_index)
            step_index += 1
            if values["l_se"] is not None:
                sum_se += values["l_se"]
            sum_ss += values["l_ss"]
            sum_total += values["l_total"]
            if stats is not None:
                conflict_rows.append((epoch, batch, stats.fraction))
                epoch_fractions.append(stats.fraction)
            if post is not None:
                post_fractions.append(post)
        n = len(train_set)
        valid_si, valid_sdr = evaluate(system, valid_set)
        has_se = system.se_net is not None
        metrics.append(EpochMetrics(
            epoch=epoch,
            train_l_se=(sum_se / n) if has_se else None,
            train_l_ss=sum_ss / n,
            train_l_total=sum_total / n,
            valid_si_snri_db=valid_si,
            valid_sdri_db=valid_sdr,
            conflict_fraction=(sum(epoch_fractions) / len(epoch_fractions)) if epoch_fractions else None,
            lr=lr,
        ))
        say(f"[{cfg.mode}] epoch {epoch}/{cfg.epochs}  l_total={sum_total / n:.4f}  "
            f"valid SI-SNRi={valid_si:.2f} dB  lr={lr:.2e}")
        if valid_si > best_si:
            best_si = valid_si
            best_epoch = epoch
            if ckpt_path is not None:
                save_params(system.store, ckpt_path)
        lr = sched.observe(epoch, valid_si)

    result = TrainResult(
        config=cfg, metrics=metrics, conflict_rows=conflict_rows,
        post_fractions=post_fractions, best_valid_si_snri=best_si,
        best_epoch=best_epoch, checkpoint_path=ckpt_path,
        param_count=system.n_parameters())

    if out_dir is not None:
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics)
        write_conflict_csv(os.path.join(out_dir, "conflict.csv"), conflict_rows)
        with open(os.path.join(out_dir, "config.txt"), "w", encoding="ascii") as fh:
            fh.write(dump_config(cfg))

    # restore the best-validation parameters before final evaluation/probes
    if ckpt_path is not None and best_epoch > 0:
        from .checkpoint import load_params
        load_params(system.store, ckpt_path)

    test_set = None
    if eval_test:
        test_set = make_split(cfg.data, "test")
        result.test_si_snri, result.test_sdri = evaluate(system, test_set)
        say(f"[{cfg.mode}] test SI-SNRi={result.test_si_snri:.2f} dB  "
            f"SDRi={result.test_sdri:.2f} dB")

    if out_dir is not None:
        from . import report
        report.training_figures(result, out_dir)
        probe = test_set[0] if test_set else make_split(cfg.data, "test")[0]
        report.probe_spectrograms(system, probe, out_dir)

    return result


ABLATION_HEADER = "mode,test_si_snri_db,test_sdri_db,param_count,mean_conflict_fraction,max_post_mod_fraction,error"


def run_ablation(cfg: TrainConfig, out_dir=None, log=None):
    """Train all four modes with the same seed and data; returns report rows.

    A failing mode is recorded with its error message and the remaining
    modes still run.
    """
    import os

    rows = []
    results = {}
    for mode in MODES:
        sub_cfg = replace(cfg, mode=mode)
        sub_dir = os.path.join(out_dir, mode) if out_dir is not None else None
        try:
            res = run_training(sub_cfg, out_dir=sub_dir, eval_test=True, log=log)
            conflict_means = list(res.epoch_conflict_means().values())
            rows.append({
                "mode": mode,
                "test_si_snri_db": res.test_si_snri,
                "test_sdri_db": res.test_sdri,
                "param_count": res.param_count,
                "mean_conflict_fraction": (sum(conflict_means) / len(conflict_means)) if conflict_means else None,
                "max_post_mod_fraction": max(res.post_fractions) if res.post_fractions else None,
                "error": "",
            })
            results[mode] = res
        except Exception as exc:  # keep the other rows alive
            rows.append({
                "mode": mode, "test_si_snri_db": None, "test_sdri_db": None,
                "param_count": None, "mean_conflict_fraction": None,
                "max_post_mod_fraction": None, "error": str(exc),
            })
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        lines = [ABLATION_HEADER]
        for r in rows:
            lines.append(",".join(_fmt(r[k]) if not isinstance(r[k], str) else r[k]
                                  for k in ("mode", "test_si_snri_db", "test_sdri_db",
                                            "param_count", "mean_conflict_fraction",
                                            "max_post_mod_fraction", "error")))
        with open(os.path.join(out_dir, "ablation.csv"), "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")
        from . import report
        report.ablation_figure(rows, out_dir)
        report.conflict_comparison_figure(results, out_dir)
    return rows


# ---------------------------------------------------------------------------
# config (de)serialization: flat key=value, CLI-friendly
# ---------------------------------------------------------------------------

CONFIG_KEYS = {
    "mode": str, "lr": float, "epochs": int, "clip_norm": float, "lambda_se": float,
    "patience": int, "halve_after_epoch": int, "seed": int, "dtype": str,
    "filters": int, "kernel": int, "stride": int, "chunk": int, "se_blocks": int,
    "ss_blocks": int, "hidden": int, "sources": int, "backbone": str,
    "num_train": int, "num_valid": int, "num_test": int, "length": int,
    "snr_mean_db": float, "snr_std_db": float, "sample_rate": int, "noise_kind": str,
}

_MODEL_KEYS = ("filters", "kernel", "stride", "chunk", "se_blocks", "ss_blocks",
               "hidden", "sources", "backbone")
_DATA_KEYS = ("num_train", "num_valid", "num_test", "length", "snr_mean_db",
              "snr_std_db", "sample_rate", "noise_kind")


def config_from_mapping(values: dict) -> TrainConfig:
    """Build a TrainConfig from flat key=value strings or typed values."""
    typed = {}
    for key, raw in values.items():
        if key not in CONFIG_KEYS:
            raise KeyError(f"unknown config key {key!r}")
        typed[key] = CONFIG_KEYS[key](raw)
    model = ModelConfig(**{k: typed[k] for k in _MODEL_KEYS if k in typed})
    data = DatasetSpec(**{k: typed[k] for k in _DATA_KEYS if k in typed})
    train_kwargs = {k: v for k, v in typed.items() if k not in _MODEL_KEYS + _DATA_KEYS}
    return TrainConfig(model=model, data=data, **train_kwargs)


def dump_config(cfg: TrainConfig) -> str:
    """Flat key=value text; round-trips through config_from_mapping."""
    pairs = [
        ("mode", cfg.mode), ("lr", cfg.lr), ("epochs", cfg.epochs),
        ("clip_norm", cfg.clip_norm), ("lambda_se", cfg.lambda_se),
        ("patience", cfg.patience), ("halve_after_epoch", cfg.halve_after_epoch),
        ("seed", cfg.seed), ("dtype", cfg.dtype),
        ("filters", cfg.model.filters), ("kernel", cfg.model.kernel),
        ("stride", cfg.model.stride), ("chunk", cfg.model.chunk),
        ("se_blocks", cfg.model.se_blocks), ("ss_blocks", cfg.model.ss_blocks),
        ("hidden", cfg.model.hidden), ("sources", cfg.model.sources),
        ("backbone", cfg.model.backbone),
        ("num_train", cfg.data.num_train), ("num_valid", cfg.data.num_valid),
        ("num_test", cfg.data.num_test), ("length", cfg.data.length),
        ("snr_mean_db", cfg.data.snr_mean_db), ("snr_std_db", cfg.data.snr_std_db),
        ("sample_rate", cfg.data.sample_rate), ("noise_kind", cfg.data.noise_kind),
    ]
    return "\n".join(f"{k}={_fmt(v) if not isinstance(v, str) else v}" for k, v in pairs) + "\n"
