"""Independent oracles shared by the tests."""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

import sparseseg.tensor as T


def loop_conv(x, weight, bias, stride=1, dilation=1, groups=1, pad=0):
    """Nested-loop grouped, dilated cross-correlation.  Returns (out, multiplies)."""
    n, c, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    og = cout // groups
    out = np.zeros((n, cout, ho, wo))
    mults = 0
    for b in range(n):
        for o in range(cout):
            g = o // og
            for i in range(ho):
                for j in range(wo):
                    acc = bias[o] if bias is not None else 0.0
                    for ci in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += weight[o, ci, u, v] * xp[b, g * cg + ci, i * stride + u * dilation,
                                                                j * stride + v * dilation]
                                mults += 1
                    out[b, o, i, j] = acc
    return out, mults


def numeric_grad(f, x, step=1e-5):
    """Central differences of scalar ``f`` with respect to every entry of ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        up = f()
        x[idx] = orig - step
        down = f()
        x[idx] = orig
        g[idx] = (up - down) / (2 * step)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


class _CountingNumpy:
    """Proxy for the numpy module that counts multiplies done by ``matmul``."""

    def __init__(self, real):
        self._real = real
        self.active = False
        self.count = 0

    def __getattr__(self, name):
        return getattr(self._real, name)

    def matmul(self, a, b, *args, **kw):
        if self.active:
            a, b = self._real.asarray(a), self._real.asarray(b)
            batch = self._real.broadcast_shapes(a.shape[:-2], b.shape[:-2])
            self.count += int(np.prod(batch)) * a.shape[-2] * a.shape[-1] * b.shape[-1]
        return self._real.matmul(a, b, *args, **kw)


@contextmanager
def count_conv_multiplies(monkeypatch):
    """Count every scalar multiply executed inside ``conv2d``.

    Yields the counter; ``counter.count`` is the running total.
    """
    proxy = _CountingNumpy(np)
    real_conv = T.conv2d

    def counting_conv(x, p):
        proxy.active = True
        try:
            return real_conv(x, p)
        finally:
            proxy.active = False

    monkeypatch.setattr(T, "np", proxy)
    monkeypatch.setattr(T, "conv2d", counting_conv)
    try:
        yield proxy
    finally:
        monkeypatch.undo()
