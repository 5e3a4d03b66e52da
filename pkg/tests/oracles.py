"""Shared independent oracles for the test suite.

Everything here is deliberately naive (loops, quadrature, finite
differences) and never calls into the code paths it checks.
"""

import numpy as np


def numeric_grad(f, x, h=1e-4):
    """Central finite differences of scalar-valued f at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return g


def rel_err(got, want):
    """Max absolute error normalized by max(1, magnitude of the oracle)."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(1.0, float(np.max(np.abs(want))) if want.size else 1.0)
    return float(np.max(np.abs(got - want))) / denom if got.size else 0.0


def conv2d_loops(x, w, stride, padding):
    """Direct quadruple-loop cross-correlation, the conv oracle."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    N, C, H, W = x.shape
    K, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((N, K, Ho, Wo))
    for n in range(N):
        for k in range(K):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for a in range(kh):
                            for b in range(kw):
                                acc += w[k, c, a, b] * xp[n, c, i * stride + a, j * stride + b]
                    out[n, k, i, j] = acc
    return out


def psnr_two_pass(a, b, peak):
    """Straightforward two-pass MSE then dB conversion."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a - b
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def gram_loops(f):
    """Triple-loop Gram matrix of CxHxW features, normalized by C*H*W."""
    f = np.asarray(f, dtype=np.float64)
    C, H, W = f.shape
    flat = f.reshape(C, H * W)
    g = np.zeros((C, C))
    for i in range(C):
        for j in range(C):
            s = 0.0
            for t in range(H * W):
                s += flat[i, t] * flat[j, t]
            g[i, j] = s / (C * H * W)
    return g
