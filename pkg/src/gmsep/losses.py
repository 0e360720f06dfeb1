"""Training objectives and separation quality metrics.

The enhancement loss is the mean squared error between the enhanced and
clean-mixture representations; the clean side is treated as a supervision
target, so no gradient flows into it. The separation loss is negative
SI-SNR under the utterance-level permutation-invariant assignment, and the
total objective is the weighted sum of the two.

SI-SNR here zero-means both signals and floors the error energy at eps,
which caps the value for perfect reconstruction at 10*log10(|s|^2 / eps)
instead of diverging. SDR improvement reported by the metrics uses a plain
(non-scale-invariant) SNR in the same improvement form; this is a
simplification of full BSS-eval SDR and is documented as such.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .autodiff import (
    ShapeMismatch,
    Tensor,
    add,
    amean,
    asum,
    div,
    log,
    maximum_scalar,
    mul,
    neg,
    no_grad,
    square,
    sub,
)

EPS = 1e-8
_LOG10 = float(np.log(10.0))


@dataclass
class LossBundle:
    """The two task losses, their weight, and the combined objective.

    l_total is computed as lambda_se * l_se + l_ss with exactly that
    grouping; l_se_scaled keeps the weighted enhancement term so the
    enhancement-task gradient can be taken from the same graph.
    """

    l_se: Tensor | None
    l_ss: Tensor
    lambda_se: float
    l_total: Tensor
    l_se_scaled: Tensor | None = None

    def values(self):
        return {
            "l_se": None if self.l_se is None else self.l_se.item(),
            "l_ss": self.l_ss.item(),
            "l_total": self.l_total.item(),
        }


def se_loss(h_e: Tensor, h_c: Tensor) -> Tensor:
    """Mean squared error between enhanced and clean representations.

    h_c is detached: it supervises the enhancement output and receives no
    gradient.
    """
    if h_e.shape != h_c.shape:
        raise ShapeMismatch(f"se_loss: {tuple(h_e.shape)} vs {tuple(h_c.shape)}")
    return amean(square(sub(h_e, h_c.detach())))


def si_snr(est, ref, eps=EPS) -> Tensor:
    """Scale-invariant signal-to-noise ratio in dB.

    Both signals are zero-meaned; the estimate is projected onto the
    reference and the residual energy is floored at eps.
    """
    est = est if isinstance(est, Tensor) else Tensor(np.asarray(est, dtype=np.float64))
    ref = ref if isinstance(ref, Tensor) else Tensor(np.asarray(ref, dtype=np.float64))
    if est.shape != ref.shape or est.ndim != 1:
        raise ShapeMismatch(f"si_snr: {tuple(est.shape)} vs {tuple(ref.shape)}")
    ref0 = sub(ref, amean(ref))
    ref_energy = asum(square(ref0))
    if ref_energy.item() == 0.0:
        raise ValueError("si_snr: reference has zero energy (invalid supervision)")
    est0 = sub(est, amean(est))
    dot = asum(mul(est0, ref0))
    target = mul(div(dot, ref_energy), ref0)
    err = sub(est0, target)
    ratio = div(asum(square(target)), maximum_scalar(asum(square(err)), eps))
    return mul(log(ratio), 10.0 / _LOG10)


def upit_ss_loss(estimates, targets, eps=EPS):
    """Utterance-level permutation-invariant separation loss.

    Returns (loss, permutation): the loss is the negative mean SI-SNR over
    the best assignment of estimates to targets, searched exhaustively over
    all C! permutations (estimate k is scored against target perm[k]).
    Ties pick the lexicographically smallest permutation.
    """
    n = len(estimates)
    if n != len(targets) or n < 1:
        raise ValueError(f"upit_ss_loss: {len(estimates)} estimates vs {len(targets)} targets")
    table = [[si_snr(est, tgt, eps) for tgt in targets] for est in estimates]
    best_perm = tuple(range(n))  # stays identity when scores are non-finite
    best_val = -np.inf
    for perm in permutations(range(n)):
        val = sum(table[i][perm[i]].item() for i in range(n)) / n
        if val > best_val:
            best_val = val
            best_perm = perm
    total = table[0][best_perm[0]]
    for i in range(1, n):
        total = add(total, table[i][best_perm[i]])
    return mul(total, -1.0 / n), best_perm


def total_loss(l_se, l_ss, lambda_se) -> LossBundle:
    """Weighted multi-task objective lambda_se * l_se + l_ss."""
    lambda_se = float(lambda_se)
    if l_se is None:
        return LossBundle(l_se=None, l_ss=l_ss, lambda_se=lambda_se, l_total=l_ss)
    scaled = mul(l_se, lambda_se)
    return LossBundle(l_se=l_se, l_ss=l_ss, lambda_se=lambda_se,
                      l_total=add(scaled, l_ss), l_se_scaled=scaled)


def _snr_db(est, ref, eps=EPS):
    """Plain (scale-variant) SNR in dB of zero-meaned signals."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    est = est - est.mean()
    ref = ref - ref.mean()
    err = est - ref
    return 10.0 * np.log10(np.dot(ref, ref) / max(np.dot(err, err), eps))


def separation_metrics(estimates, targets, mixture, eps=EPS):
    """(SI-SNR improvement, SDR improvement) in dB for one sample.

    The estimate/target assignment is the permutation-invariant one; each
    improvement is measured against the unprocessed mixture scored on the
    same reference, averaged over sources.
    """
    with no_grad():
        _, perm = upit_ss_loss(estimates, targets, eps)
        si_snri = 0.0
        sdri = 0.0
        n = len(estimates)
        for i in range(n):
            est = estimates[i].data if isinstance(estimates[i], Tensor) else np.asarray(estimates[i])
            tgt = targets[perm[i]]
            tgt_arr = tgt.data if isinstance(tgt, Tensor) else np.asarray(tgt)
            si_snri += si_snr(est, tgt_arr, eps).item() - si_snr(mixture, tgt_arr, eps).item()
            sdri += _snr_db(est, tgt_arr, eps) - _snr_db(mixture, tgt_arr, eps)
    return si_snri / n, sdri / n
