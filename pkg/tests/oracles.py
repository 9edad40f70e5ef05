"""Slow, independent reference implementations used as test oracles.

Everything here is float64 and written with explicit loops or closed forms, so
it shares no code path with the vectorized library.
"""
import math

import numpy as np


def naive_conv2d(x, k, b, stride=(1, 1), padding=(0, 0)):
    """NHWC input, (Kh, Kw, Ci, Co) kernel."""
    n, h, w, ci = x.shape
    kh, kw, _, co = k.shape
    sh, sw = stride
    ph, pw = padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((n, ho, wo, co))
    for a in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(co):
                    acc = b[o]
                    for di in range(kh):
                        for dj in range(kw):
                            y, z = i * sh + di - ph, j * sw + dj - pw
                            if 0 <= y < h and 0 <= z < w:
                                for c in range(ci):
                                    acc += x[a, y, z, c] * k[di, dj, c, o]
                    out[a, i, j, o] = acc
    return out


def naive_depthwise(x, k, b, stride=(1, 1), padding=(0, 0)):
    """NHWC input, (Kh, Kw, C) kernel; channel c only sees channel c."""
    n, h, w, c = x.shape
    kh, kw, _ = k.shape
    sh, sw = stride
    ph, pw = padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((n, ho, wo, c))
    for a in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    acc = b[ch]
                    for di in range(kh):
                        for dj in range(kw):
                            y, z = i * sh + di - ph, j * sw + dj - pw
                            if 0 <= y < h and 0 <= z < w:
                                acc += x[a, y, z, ch] * k[di, dj, ch]
                    out[a, i, j, ch] = acc
    return out


def cross_entropy(logits, labels):
    """Mean -log softmax via math.fsum per row."""
    total = []
    for row, y in zip(np.asarray(logits, np.float64), labels):
        m = max(row)
        lse = m + math.log(math.fsum(math.exp(v - m) for v in row))
        total.append(lse - row[y])
    return math.fsum(total) / len(total)


def adam_trajectory(x0, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook bias-corrected Adam on a scalar."""
    x, m, v, out = float(x0), 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(x)
    return out


# MFCC -----------------------------------------------------------------------
def _mel(f):
    return 2595.0 * math.log10(1.0 + f / 700.0)


def reference_mfcc(samples, sr=16000, frame=640, stride=320, nfft=1024, nmel=40, ncoef=10,
                   low=20.0, high=4000.0, floor=1e-6):
    """Per-frame: periodic Hann, explicit DFT matrix, loop-built HTK-mel
    triangles, log, explicit orthonormal DCT-II sum."""
    x = np.asarray(samples, np.float64)
    nframes = 1 + (len(x) - frame) // stride
    window = np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / frame) for i in range(frame)])
    nbins = nfft // 2 + 1
    kk = np.arange(nbins)[:, None]
    nn = np.arange(frame)[None, :]
    dft = np.exp(-2j * math.pi * kk * nn / nfft)  # zero padding folded in

    mlo, mhi = _mel(low), _mel(high)
    edges = [mlo + (mhi - mlo) * i / (nmel + 1) for i in range(nmel + 2)]
    bank = np.zeros((nbins, nmel))
    for b in range(nbins):
        m = _mel(b * sr / nfft)
        for j in range(nmel):
            lo, c, hi = edges[j], edges[j + 1], edges[j + 2]
            if lo < m <= c:
                bank[b, j] = (m - lo) / (c - lo)
            elif c < m < hi:
                bank[b, j] = (hi - m) / (hi - c)

    out = np.zeros((nframes, ncoef))
    for t in range(nframes):
        seg = x[t * stride : t * stride + frame] * window
        mag = np.abs(dft @ seg)
        logmel = [math.log(float(mag @ bank[:, j]) + floor) for j in range(nmel)]
        for q in range(ncoef):
            scale = math.sqrt(1.0 / nmel) if q == 0 else math.sqrt(2.0 / nmel)
            out[t, q] = scale * math.fsum(logmel[j] * math.cos(math.pi * q * (2 * j + 1) / (2 * nmel))
                                          for j in range(nmel))
    return out


# parameter counting --------------------------------------------------------
TOPOLOGY = {"S": (64, 4), "M": (172, 4), "L": (276, 5)}


def hand_count(size, fusion="mul", classes=10, rows=0, cc_width=None):
    """Per-layer parameter count: weights + bias + batchnorm gamma/beta for
    every conv, then the classifier, then the embedding rows."""
    c, blocks = TOPOLOGY[size]
    n = {"none": 0, "add": c, "mul": c, "concat-bc": c}.get(fusion)
    if fusion == "concat-cc":
        n = cc_width or c // 4
    total = 10 * 4 * 1 * c + c + 2 * c  # first conv
    for blk in range(blocks):
        total += 3 * 3 * c + c + 2 * c  # depthwise
        out = c - n if (fusion == "concat-cc" and blk == blocks - 1) else c
        total += c * out + out + 2 * out  # pointwise
    feat = 2 * c if fusion == "concat-bc" else c
    total += feat * classes + classes
    return total + rows * n
