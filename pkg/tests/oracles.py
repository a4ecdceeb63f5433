"""Independent oracles shared by the test suite.

These deliberately avoid the library's fast paths: matmul by triple loop,
convolution by six nested loops, gradients by central finite differences.
"""

import numpy as np

FD_H = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-7


def matmul_loops(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d_loops(x, w, stride, pad):
    n, c, h, wd = x.shape
    f, _, r, _ = w.shape
    oh = (h + 2 * pad - r) // stride + 1
    ow = (wd + 2 * pad - r) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, f, oh, ow))
    for bi in range(n):
        for fi in range(f):
            for yi in range(oh):
                for xi in range(ow):
                    s = 0.0
                    for ci in range(c):
                        for dy in range(r):
                            for dx in range(r):
                                s += (xp[bi, ci, yi * stride + dy, xi * stride + dx]
                                      * w[fi, ci, dy, dx])
                    out[bi, fi, yi, xi] = s
    return out


def dwconv2d_loops(x, w, stride, pad):
    n, c, h, wd = x.shape
    r = w.shape[-1]
    oh = (h + 2 * pad - r) // stride + 1
    ow = (wd + 2 * pad - r) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, c, oh, ow))
    for bi in range(n):
        for ci in range(c):
            for yi in range(oh):
                for xi in range(ow):
                    s = 0.0
                    for dy in range(r):
                        for dx in range(r):
                            s += (xp[bi, ci, yi * stride + dy, xi * stride + dx]
                                  * w[ci, dy, dx])
                    out[bi, ci, yi, xi] = s
    return out


def logsumexp_loss(logits, labels):
    n = logits.shape[0]
    total = 0.0
    for i in range(n):
        total += np.log(np.exp(logits[i]).sum()) - logits[i, labels[i]]
    return total / n


def fd_grad(fn, x, h=FD_H):
    """Central finite differences of scalar fn at array x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        xp = x.copy()
        xp.ravel()[i] = orig + h
        xm = x.copy()
        xm.ravel()[i] = orig - h
        gflat[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def assert_fd_close(analytic, numeric, rtol=FD_RTOL, atol=FD_ATOL, what=""):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol,
                               err_msg=f"finite differences disagree {what}")


def rel_err(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-30)
    return np.abs(a - b).max(initial=0.0) / denom
