"""Finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .tensor import pin_relu_masks, record_relu_masks


class NonFiniteError(FloatingPointError):
    pass


def _eval(fn):
    with record_relu_masks() as masks:
        value = float(fn().data)
    if not np.isfinite(value):
        raise NonFiniteError("non-finite loss during finite differences")
    return value, masks


def _same_masks(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _central(fn, t, idx, h):
    """Central difference at step h, plus whether +h/-h kept every ReLU on the
    same side of its kink."""
    base = t.data[idx]
    t.data[idx] = base + h
    fp, mp = _eval(fn)
    t.data[idx] = base - h
    fm, mm = _eval(fn)
    t.data[idx] = base
    return (fp - fm) / (2 * h), _same_masks(mp, mm)


def numeric_derivative(fn, t, idx, step=1e-3, min_step=1e-7):
    """Richardson-extrapolated central difference of ``fn()`` w.r.t. ``t[idx]``.

    The step starts at ``step`` and is divided by 10 while the probe interval
    straddles a ReLU kink, down to ``min_step``.
    """
    h = step
    while True:
        d1, smooth1 = _central(fn, t, idx, h)
        d2, smooth2 = _central(fn, t, idx, h / 2)
        if (smooth1 and smooth2) or h / 10 < min_step:
            return (4 * d2 - d1) / 3
        h /= 10


def gradient_check(fn, tensors, wrt=None, probes=100, step=1e-3, analytic_dtype=np.float32,
                   seed=0, floor=None, pin_masks=True):
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` takes no arguments and returns a scalar Tensor computed from
    ``tensors`` (every leaf the graph reads, inputs included). Gradients are
    checked for the tensors in ``wrt`` (default: those with ``requires_grad``).
    The analytic pass runs with every leaf cast to ``analytic_dtype``; finite
    differences are always evaluated in float64. ``probes`` coordinates are drawn
    at random across ``wrt``.

    With ``pin_masks`` the ReLUs keep the activity pattern of the analytic pass
    while differencing, so deep networks whose many kinks lie within one step of
    the probe are compared on the same smooth piece the gradient describes.
    Single-ReLU checks should turn it off and keep probes away from 0.

    Returns the max relative error ``|a - n| / max(|a|, |n|, floor)``. The
    default floor is 1e-6 for a 64-bit analytic pass and 1e-4 for 32-bit, whose
    accumulated roundoff on unit-scale losses is around 1e-7..1e-6 absolute. Frozen
    tensors in ``wrt`` carry no gradient and are compared as zero.
    """
    if floor is None:
        floor = 1e-6 if np.dtype(analytic_dtype) == np.float64 else 1e-4
    tensors = list(tensors)
    wrt = [t for t in tensors if t.requires_grad] if wrt is None else list(wrt)
    originals = [t.data for t in tensors]
    rng = np.random.default_rng(seed)
    try:
        for t in tensors:
            t.data = t.data.astype(analytic_dtype)
            t.grad = None
        with record_relu_masks() as masks:
            out = fn()
        _check_finite(out.data, "forward output")
        out.backward()
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in wrt]
        for a in analytic:
            _check_finite(a, "analytic gradient")

        for t, orig in zip(tensors, originals):
            t.data = np.array(orig, dtype=np.float64)
        sizes = np.array([t.data.size for t in wrt])
        picks = rng.choice(sizes.sum(), size=min(probes, int(sizes.sum())), replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        worst = 0.0
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = np.unravel_index(int(flat - offsets[k]), wrt[k].shape)
            pinned = _Pinned(fn, masks) if pin_masks else fn
            numeric = numeric_derivative(pinned, wrt[k], idx, step)
            a = analytic[k][idx]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
        return worst
    finally:
        for t, orig in zip(tensors, originals):
            t.data = orig
            t.grad = None


class _Pinned:
    def __init__(self, fn, masks):
        self.fn, self.masks = fn, masks

    def __call__(self):
        with pin_relu_masks(self.masks):
            return self.fn()


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite {what}")
