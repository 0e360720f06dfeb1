"""Per-layer gradient surgery between the enhancement and separation tasks.

A layer conflicts when the dot product of its two task gradients (as flat
vectors) is negative, i.e. the angle between them exceeds 90 degrees.
Modulation replaces a conflicting enhancement gradient with its projection
onto the plane orthogonal to the separation gradient of the same layer:

    g_se' = g_se - (<g_se, g_ss> / |g_ss|^2) * g_ss    if <g_se, g_ss> < 0
    g_se' = g_se                                        otherwise

applied independently per layer. Afterwards no layer conflicts, the
modulated vector is never longer than the original, and applying the
operation again changes nothing. Layers whose separation gradient is
numerically zero are left untouched (the projection would divide by ~0).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import GradientSet

ZERO_NORM_FLOOR = 1e-20


@dataclass
class ConflictStats:
    """Conflicting vs total shared layers for one optimization step."""

    conflicting: int
    total: int

    @property
    def fraction(self) -> float:
        return self.conflicting / self.total


def _check_shared(name, a, b):
    if a.shape != b.shape:
        raise ValueError(
            f"gradient length mismatch for layer {name!r}: {a.shape[0]} vs {b.shape[0]}")


def modulate(g_se: GradientSet, g_ss: GradientSet) -> GradientSet:
    """Project conflicting per-layer enhancement gradients off the separation ones."""
    out = {}
    for name, se in g_se.items():
        if name not in g_ss:
            raise KeyError(f"modulate: layer {name!r} missing from the separation gradient scope")
        ss = g_ss[name]
        _check_shared(name, se, ss)
        dot = float(se @ ss)
        ss_sq = float(ss @ ss)
        if dot < 0.0 and ss_sq >= ZERO_NORM_FLOOR:
            proj = se - (dot / ss_sq) * ss
            # one refinement pass: the first subtraction leaves a dot at the
            # rounding level of the *input* scale, which near anti-parallel
            # pairs can dominate the (tiny) projected output; re-projecting
            # the residual pins it to the output scale, and shortens proj
            resid = float(proj @ ss)
            if resid < 0.0:
                proj = proj - (resid / ss_sq) * ss
            # anti-parallel conflicts project to exactly zero in real
            # arithmetic; anything left below the rounding floor is noise
            if float(proj @ proj) <= 1e-24 * float(se @ se):
                proj = np.zeros_like(se)
            out[name] = proj
        else:
            out[name] = se.copy()
    return GradientSet(out, task=g_se.task)


def combine(g_se: GradientSet, g_ss: GradientSet) -> GradientSet:
    """Total update gradient: per-layer sum where both tasks have a gradient,
    the separation gradient alone elsewhere."""
    out = {}
    for name, ss in g_ss.items():
        if name in g_se:
            se = g_se[name]
            _check_shared(name, se, ss)
            out[name] = se + ss
        else:
            out[name] = ss.copy()
    for name in g_se:
        if name not in g_ss:
            raise KeyError(f"combine: layer {name!r} outside the separation gradient scope")
    return GradientSet(out, task="combined")


POST_MODULATION_TOL = 1e-12


def conflict_stats(g_se: GradientSet, g_ss: GradientSet, rounding_tol: float = 0.0) -> ConflictStats:
    """Count shared layers whose task gradients point more than 90° apart.

    With the default rounding_tol of 0 a layer conflicts iff its dot
    product is strictly negative. Verifying gradients that have already
    been modulated needs rounding_tol=POST_MODULATION_TOL: the projection
    is exact in real arithmetic but leaves dot products at the float
    rounding floor (|dot| ~ 1e-16 * |a| * |b|), so the non-conflict
    guarantee holds up to that scaled tolerance.
    """
    shared = [n for n in g_se if n in g_ss]
    if not shared:
        raise ValueError("conflict_stats: no shared layers between the two gradient sets")
    conflicting = 0
    for name in shared:
        a, b = g_se[name], g_ss[name]
        _check_shared(name, a, b)
        threshold = -rounding_tol * float(np.linalg.norm(a)) * float(np.linalg.norm(b))
        if float(a @ b) < threshold:
            conflicting += 1
    return ConflictStats(conflicting=conflicting, total=len(shared))


def clip_global_norm(g: GradientSet, max_norm: float):
    """Scale the whole gradient set so its global L2 norm is at most max_norm.

    Returns (clipped set, pre-clip norm).
    """
    norm = g.global_norm()
    if norm <= max_norm or norm == 0.0:
        return g.copy(), norm
    scale = max_norm / norm
    return GradientSet({k: v * scale for k, v in g.items()}, task=g.task), norm
