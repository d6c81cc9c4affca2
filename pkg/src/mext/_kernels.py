"""Row-wise numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``MEXT_DISABLE_NUMBA`` is unset
(or ``0``). Both paths take 2-D row-major arrays and return fresh arrays; the
tensor layer reshapes around them. ``IMPLS`` exposes both variants by name so
benchmarks and parity tests can call either directly.
"""
from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf as _erf

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# numpy
# ---------------------------------------------------------------------------

def np_layernorm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def np_layernorm_bwd(gy, xhat, rstd, gain):
    dxhat = gy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def np_gelu_fwd(x):
    return 0.5 * x * (1.0 + _erf(x * _SQRT_HALF))


def np_gelu_bwd(g, x):
    cdf = 0.5 * (1.0 + _erf(x * _SQRT_HALF))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return g * (cdf + x * pdf)


def np_softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_bwd(g, p):
    return p * (g - (g * p).sum(axis=1, keepdims=True))


def np_log_softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def np_log_softmax_bwd(g, logp):
    return g - np.exp(logp) * g.sum(axis=1, keepdims=True)


def np_embedding_bwd(g, ids, vocab):
    out = np.zeros((vocab, g.shape[1]), dtype=g.dtype)
    np.add.at(out, ids, g)
    return out


def np_first_exit(entropies, threshold):
    below = entropies < threshold
    below[-1, :] = True
    return below.argmax(axis=0).astype(np.int64) + 1


# ---------------------------------------------------------------------------
# numba
# ---------------------------------------------------------------------------

try:
    import numba as _nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    _nb = None

if _nb is not None:
    _jit = _nb.njit(cache=True, fastmath=False)

    @_jit
    def nb_layernorm_fwd(x, gain, bias, eps):
        n, h = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for r in range(n):
            mu = 0.0
            for c in range(h):
                mu += x[r, c]
            mu /= h
            var = 0.0
            for c in range(h):
                d = x[r, c] - mu
                var += d * d
            var /= h
            s = 1.0 / math.sqrt(var + eps)
            rstd[r] = s
            for c in range(h):
                xh = (x[r, c] - mu) * s
                xhat[r, c] = xh
                y[r, c] = xh * gain[c] + bias[c]
        return y, xhat, rstd

    @_jit
    def nb_layernorm_bwd(gy, xhat, rstd, gain):
        n, h = gy.shape
        dx = np.empty_like(gy)
        dgain = np.zeros(h, dtype=gy.dtype)
        dbias = np.zeros(h, dtype=gy.dtype)
        for r in range(n):
            m1 = 0.0
            m2 = 0.0
            for c in range(h):
                d = gy[r, c] * gain[c]
                m1 += d
                m2 += d * xhat[r, c]
                dgain[c] += gy[r, c] * xhat[r, c]
                dbias[c] += gy[r, c]
            m1 /= h
            m2 /= h
            s = rstd[r]
            for c in range(h):
                dx[r, c] = s * (gy[r, c] * gain[c] - m1 - xhat[r, c] * m2)
        return dx, dgain, dbias

    @_jit
    def nb_gelu_fwd(x):
        out = np.empty_like(x)
        fx = x.ravel()
        fo = out.ravel()
        for i in range(fx.size):
            v = fx[i]
            fo[i] = 0.5 * v * (1.0 + math.erf(v * _SQRT_HALF))
        return out

    @_jit
    def nb_gelu_bwd(g, x):
        out = np.empty_like(x)
        fx = x.ravel()
        fg = g.ravel()
        fo = out.ravel()
        for i in range(fx.size):
            v = fx[i]
            cdf = 0.5 * (1.0 + math.erf(v * _SQRT_HALF))
            pdf = math.exp(-0.5 * v * v) * _INV_SQRT_2PI
            fo[i] = fg[i] * (cdf + v * pdf)
        return out

    @_jit
    def nb_softmax_fwd(x):
        n, m = x.shape
        out = np.empty_like(x)
        for r in range(n):
            mx = x[r, 0]
            for c in range(1, m):
                if x[r, c] > mx:
                    mx = x[r, c]
            s = 0.0
            for c in range(m):
                e = math.exp(x[r, c] - mx)
                out[r, c] = e
                s += e
            for c in range(m):
                out[r, c] /= s
        return out

    @_jit
    def nb_softmax_bwd(g, p):
        n, m = g.shape
        out = np.empty_like(g)
        for r in range(n):
            dot = 0.0
            for c in range(m):
                dot += g[r, c] * p[r, c]
            for c in range(m):
                out[r, c] = p[r, c] * (g[r, c] - dot)
        return out

    @_jit
    def nb_log_softmax_fwd(x):
        n, m = x.shape
        out = np.empty_like(x)
        for r in range(n):
            mx = x[r, 0]
            for c in range(1, m):
                if x[r, c] > mx:
                    mx = x[r, c]
            s = 0.0
            for c in range(m):
                s += math.exp(x[r, c] - mx)
            ls = math.log(s)
            for c in range(m):
                out[r, c] = x[r, c] - mx - ls
        return out

    @_jit
    def nb_log_softmax_bwd(g, logp):
        n, m = g.shape
        out = np.empty_like(g)
        for r in range(n):
            s = 0.0
            for c in range(m):
                s += g[r, c]
            for c in range(m):
                out[r, c] = g[r, c] - math.exp(logp[r, c]) * s
        return out

    @_jit
    def nb_embedding_bwd(g, ids, vocab):
        n, h = g.shape
        out = np.zeros((vocab, h), dtype=g.dtype)
        for r in range(n):
            t = ids[r]
            for c in range(h):
                out[t, c] += g[r, c]
        return out

    @_jit
    def nb_first_exit(entropies, threshold):
        k, n = entropies.shape
        out = np.empty(n, dtype=np.int64)
        for j in range(n):
            layer = k
            for i in range(k - 1):
                if entropies[i, j] < threshold:
                    layer = i + 1
                    break
            out[j] = layer
        return out


_NAMES = (
    "layernorm_fwd", "layernorm_bwd", "gelu_fwd", "gelu_bwd",
    "softmax_fwd", "softmax_bwd", "log_softmax_fwd", "log_softmax_bwd",
    "embedding_bwd", "first_exit",
)

IMPLS = {"numpy": {name: globals()["np_" + name] for name in _NAMES}}
if _nb is not None:
    IMPLS["numba"] = {name: globals()["nb_" + name] for name in _NAMES}


def _numba_disabled() -> bool:
    return os.environ.get("MEXT_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


BACKEND = "numpy" if (_nb is None or _numba_disabled()) else "numba"

layernorm_fwd = IMPLS[BACKEND]["layernorm_fwd"]
layernorm_bwd = IMPLS[BACKEND]["layernorm_bwd"]
gelu_fwd = IMPLS[BACKEND]["gelu_fwd"]
gelu_bwd = IMPLS[BACKEND]["gelu_bwd"]
softmax_fwd = IMPLS[BACKEND]["softmax_fwd"]
softmax_bwd = IMPLS[BACKEND]["softmax_bwd"]
log_softmax_fwd = IMPLS[BACKEND]["log_softmax_fwd"]
log_softmax_bwd = IMPLS[BACKEND]["log_softmax_bwd"]
embedding_bwd = IMPLS[BACKEND]["embedding_bwd"]
first_exit = IMPLS[BACKEND]["first_exit"]
