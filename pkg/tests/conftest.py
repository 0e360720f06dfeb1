"""Shared test oracles, kept independent of the library code paths they check."""
import numpy as np
import pytest

from gmsep.autodiff import GraphTape, ParamStore, Tensor, no_grad


def finite_difference(f, arrays, h=1e-5):
    """Central finite-difference gradients of scalar f w.r.t. each array.

    Perturbs entries in place, so ``arrays`` must be the exact buffers the
    closure reads. Returns one gradient array per input.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(approx, exact, floor=1e-6):
    """Worst-case relative error with a floor against tiny denominators."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(approx), np.abs(exact)), floor)
    return float(np.max(np.abs(approx - exact) / denom))


def tape_grad(build_loss, params):
    """Autodiff gradients of ``build_loss()`` for every param in ``params``."""
    with GraphTape() as tape:
        loss = build_loss()
    gs = tape.backward(loss, params)
    return {name: gs[name].reshape(params.param(name).shape) for name in params.names()}


def loop_conv1d(x, kernel, stride, padding=0):
    """Direct-summation convolution oracle."""
    if padding:
        x = np.concatenate([np.zeros(padding), x, np.zeros(padding)])
    f, k = kernel.shape
    t_out = (len(x) - k) // stride + 1
    out = np.zeros((f, t_out))
    for j in range(t_out):
        for p in range(k):
            out[:, j] += kernel[:, p] * x[j * stride + p]
    return out


def loop_transposed_conv1d(y, kernel, stride):
    """Direct-summation transposed-convolution oracle."""
    f, t_in = y.shape
    k = kernel.shape[1]
    out = np.zeros((t_in - 1) * stride + k)
    for j in range(t_in):
        for p in range(k):
            out[j * stride + p] += np.dot(kernel[:, p], y[:, j])
    return out


def overlap_counts(t_prime, k, hop):
    """How many chunks cover each frame of the padded sequence."""
    m = 0 if t_prime <= k else -(-(t_prime - k) // hop)
    padded = k + m * hop
    counts = np.zeros(padded, dtype=int)
    for s in range(m + 1):
        counts[s * hop:s * hop + k] += 1
    return counts, padded


def np_si_snr(est, ref, eps=1e-8):
    """Independent SI-SNR oracle (zero-mean, projection, eps-floored ratio)."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    est = est - est.mean()
    ref = ref - ref.mean()
    s = (np.dot(est, ref) / np.dot(ref, ref)) * ref
    e = est - s
    return 10.0 * np.log10(np.dot(s, s) / max(np.dot(e, e), eps))


@pytest.fixture
def store64():
    return ParamStore(dtype=np.float64, seed=1234)
