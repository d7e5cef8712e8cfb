"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``EGOMATCH_BACKEND=numpy``
to force the pure-numpy implementations (e.g. on machines without numba);
``EGOMATCH_BACKEND=numba`` requires numba and fails loudly if it is missing.
The default is numba when importable, numpy otherwise.

Both paths compute the same quantities; floating-point summation order may
differ between them at the last few ulps, so cross-backend results agree to
~1e-13 rather than bit-exactly. Within one backend everything is
deterministic.

``benchmarks/bench_kernels.py`` times the two paths side by side.
"""

import os

import numpy as np

from .errors import ConfigError

_ENV_VAR = "EGOMATCH_BACKEND"


def _pick_backend() -> str:
    choice = os.environ.get(_ENV_VAR, "").strip().lower()
    if choice not in ("", "numpy", "numba"):
        raise ConfigError(f"{_ENV_VAR} must be 'numpy' or 'numba', got {choice!r}")
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise ConfigError(f"{_ENV_VAR}=numba but numba is not importable")
        return "numpy"
    return "numba"


BACKEND = _pick_backend()


# ---------------------------------------------------------------------------
# pure-numpy implementations (always available; the reference semantics)
# ---------------------------------------------------------------------------

def layer_norm_fwd_np(x, gain, bias, eps):
    """Row-wise layer norm. Returns (out, xhat, inv_std) for the backward pass."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gain + bias, xhat, inv_std


def layer_norm_bwd_np(gy, xhat, inv_std, gain):
    """Gradients of layer_norm_fwd w.r.t. (x, gain, bias)."""
    n_cols = xhat.shape[1]
    gxhat = gy * gain
    s1 = gxhat.sum(axis=1, keepdims=True)
    s2 = (gxhat * xhat).sum(axis=1, keepdims=True)
    gx = inv_std * (gxhat - (s1 + xhat * s2) / n_cols)
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    return gx, ggain, gbias


def softmax_rows_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def masked_softmax_rows_np(x, mask):
    """Row softmax over entries where mask != 0; masked entries get 0.

    Rows with no unmasked entry come back all-zero.
    """
    neg = np.where(mask != 0, x, -np.inf)
    mx = neg.max(axis=1, keepdims=True)
    safe_mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(np.where(mask != 0, x - safe_mx, -np.inf), where=mask != 0,
               out=np.zeros_like(x))
    denom = e.sum(axis=1, keepdims=True)
    return np.divide(e, denom, where=denom > 0, out=np.zeros_like(e))


def softmax_rows_bwd_np(gy, p):
    """Backward of a row softmax given its output p (works for masked rows too)."""
    dot = (gy * p).sum(axis=1, keepdims=True)
    return p * (gy - dot)


def lsap_min_np(cost):
    """Square linear sum assignment (minimization), shortest augmenting path.

    Returns row_to_col, an int64 array with the assigned column of each row.
    Plain-python loops; the numba twin below is the fast path.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    col_to_row = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        col_to_row[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = col_to_row[j0]
            delta = np.inf
            j1 = -1
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[col_to_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if col_to_row[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            col_to_row[j0] = col_to_row[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[col_to_row[j] - 1] = j - 1
    return row_to_col


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if BACKEND == "numba":
    from numba import njit

    @njit(cache=True)
    def _layer_norm_fwd_nb(x, gain, bias, eps):
        nr, nc = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        inv_std = np.empty((nr, 1))
        for i in range(nr):
            mu = 0.0
            for j in range(nc):
                mu += x[i, j]
            mu /= nc
            var = 0.0
            for j in range(nc):
                t = x[i, j] - mu
                var += t * t
            var /= nc
            inv = 1.0 / np.sqrt(var + eps)
            inv_std[i, 0] = inv
            for j in range(nc):
                h = (x[i, j] - mu) * inv
                xhat[i, j] = h
                out[i, j] = h * gain[j] + bias[j]
        return out, xhat, inv_std

    @njit(cache=True)
    def _layer_norm_bwd_nb(gy, xhat, inv_std, gain):
        nr, nc = xhat.shape
        gx = np.empty_like(xhat)
        ggain = np.zeros(nc)
        gbias = np.zeros(nc)
        for i in range(nr):
            s1 = 0.0
            s2 = 0.0
            for j in range(nc):
                g = gy[i, j] * gain[j]
                s1 += g
                s2 += g * xhat[i, j]
            inv = inv_std[i, 0]
            for j in range(nc):
                g = gy[i, j] * gain[j]
                gx[i, j] = inv * (g - (s1 + xhat[i, j] * s2) / nc)
                ggain[j] += gy[i, j] * xhat[i, j]
                gbias[j] += gy[i, j]
        return gx, ggain, gbias

    @njit(cache=True)
    def _softmax_rows_nb(x):
        nr, nc = x.shape
        out = np.empty_like(x)
        for i in range(nr):
            mx = x[i, 0]
            for j in range(1, nc):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(nc):
                e = np.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            for j in range(nc):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def _masked_softmax_rows_nb(x, mask):
        nr, nc = x.shape
        out = np.zeros_like(x)
        for i in range(nr):
            mx = -np.inf
            for j in range(nc):
                if mask[i, j] != 0 and x[i, j] > mx:
                    mx = x[i, j]
            if mx == -np.inf:
                continue
            s = 0.0
            for j in range(nc):
                if mask[i, j] != 0:
                    e = np.exp(x[i, j] - mx)
                    out[i, j] = e
                    s += e
            for j in range(nc):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def _softmax_rows_bwd_nb(gy, p):
        nr, nc = p.shape
        gx = np.empty_like(p)
        for i in range(nr):
            dot = 0.0
            for j in range(nc):
                dot += gy[i, j] * p[i, j]
            for j in range(nc):
                gx[i, j] = p[i, j] * (gy[i, j] - dot)
        return gx

    _lsap_min_nb = njit(cache=True)(lsap_min_np)

    layer_norm_fwd = _layer_norm_fwd_nb
    layer_norm_bwd = _layer_norm_bwd_nb
    softmax_rows = _softmax_rows_nb
    masked_softmax_rows = _masked_softmax_rows_nb
    softmax_rows_bwd = _softmax_rows_bwd_nb
    lsap_min = _lsap_min_nb
else:
    layer_norm_fwd = layer_norm_fwd_np
    layer_norm_bwd = layer_norm_bwd_np
    softmax_rows = softmax_rows_np
    masked_softmax_rows = masked_softmax_rows_np
    softmax_rows_bwd = softmax_rows_bwd_np
    lsap_min = lsap_min_np


IMPLEMENTATIONS = {
    "numpy": {
        "layer_norm_fwd": layer_norm_fwd_np,
        "layer_norm_bwd": layer_norm_bwd_np,
        "softmax_rows": softmax_rows_np,
        "masked_softmax_rows": masked_softmax_rows_np,
        "softmax_rows_bwd": softmax_rows_bwd_np,
        "lsap_min": lsap_min_np,
    }
}
if BACKEND == "numba":
    IMPLEMENTATIONS["numba"] = {
        "layer_norm_fwd": layer_norm_fwd,
        "layer_norm_bwd": layer_norm_bwd,
        "softmax_rows": softmax_rows,
        "masked_softmax_rows": masked_softmax_rows,
        "softmax_rows_bwd": softmax_rows_bwd,
        "lsap_min": lsap_min,
    }
