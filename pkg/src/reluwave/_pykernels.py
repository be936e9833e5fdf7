"""Pure numpy versions of the compiled wavelet kernels.

Same signatures and arithmetic as ``_kernels.pyx``; used when the extension
is not built or when ``RELUWAVE_PURE_PYTHON`` is set.
"""

import numpy as np

# points x terms evaluated per block; bounds peak memory at ~100 MB per array
_BLOCK = 2_000_000


def _trap(x):
    return (np.maximum(x + 3.0, 0.0) - np.maximum(x + 1.0, 0.0)
            - np.maximum(x - 1.0, 0.0) + np.maximum(x - 3.0, 0.0))


def _block(u, w, ks, bs, cd):
    """Dense (n, T) values for one block of points and terms."""
    d = u.shape[1]
    sf = 2.0 ** (ks / d)
    sc = 2.0 ** ((ks - 1) / d)
    amp = cd * 2.0 ** (ks / 2.0)
    diff = u[:, None, :] - bs[None, :, :]
    zc = sc[None, :, None] * diff
    inside = np.all(np.abs(zc) < 3.0, axis=2)
    tf = _trap(sf[None, :, None] * diff).sum(axis=2)
    tc = _trap(zc).sum(axis=2)
    shift = -2.0 * (d - 1) + w[:, None]
    val = amp[None, :] * (np.maximum(tf + shift, 0.0) - 0.5 * np.maximum(tc + shift, 0.0))
    val[~inside] = 0.0
    val[w <= -2.0, :] = 0.0
    return val


def _chunks(n, T):
    step = max(1, _BLOCK // max(1, T))
    for start in range(0, n, step):
        yield start, min(n, start + step)


def psi_eval(u, w, ks, bs, cd):
    n, T = u.shape[0], ks.shape[0]
    out = np.zeros((n, T))
    for lo, hi in _chunks(n, T):
        out[lo:hi] = _block(u[lo:hi], w[lo:hi], ks, bs, cd)
    return out


def psi_combine(u, w, ks, bs, coeffs, cd):
    n = u.shape[0]
    keep = coeffs != 0.0
    ks, bs, coeffs = ks[keep], bs[keep], coeffs[keep]
    out = np.zeros(n)
    if ks.size == 0:
        return out
    for lo, hi in _chunks(n, ks.shape[0]):
        out[lo:hi] = _block(u[lo:hi], w[lo:hi], ks, bs, cd) @ coeffs
    return out


def psi_triplets(u, w, ks, bs, cd):
    rows, cols, vals = [], [], []
    for lo, hi in _chunks(u.shape[0], ks.shape[0]):
        block = _block(u[lo:hi], w[lo:hi], ks, bs, cd)
        r, c = np.nonzero(block)
        rows.append(r + lo)
        cols.append(c)
        vals.append(block[r, c])
    if not rows:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    return (np.concatenate(rows).astype(np.int64), np.concatenate(cols).astype(np.int64),
            np.concatenate(vals))
