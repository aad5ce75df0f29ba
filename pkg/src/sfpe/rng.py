"""Counter-based Gaussian increments.

Every normal variate is a pure function of ``(seed, stream, path, index)``,
so any subset of paths or steps can be regenerated in any order and on any
number of workers.  Bits come from the SplitMix64 output function applied to
a counter; normals are produced with a 1024-layer ziggurat whose layer index
and abscissa are taken from disjoint bits of one 64-bit word.

The compiled kernels in :mod:`sfpe._kernels` implement the same construction
and read the ziggurat tables from this module, so both backends draw the same
numbers.
"""
import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
PATH_GAMMA = 0xD1B54A32D192ED03
RETRY_SALT = 0xA0761D6478BD642F
STREAM_SALT = 0x632BE59BD9B4E019
RETRY_SHIFT = 20

ZIG_LAYERS = 1024
ZIG_MASK = ZIG_LAYERS - 1
# rightmost layer edge and common layer area for 1024 layers
ZIG_R = 4.0388498461095045
ZIG_V = 1.2263246463530881e-3
INV_2_53 = 1.0 / 9007199254740992.0


def _ziggurat_tables():
    x = [0.0] * (ZIG_LAYERS + 1)
    f = math.exp(-0.5 * ZIG_R * ZIG_R)
    x[0] = ZIG_V / f
    x[1] = ZIG_R
    for i in range(2, ZIG_LAYERS):
        x[i] = math.sqrt(-2.0 * math.log(ZIG_V / x[i - 1] + f))
        f = math.exp(-0.5 * x[i] * x[i])
    x[ZIG_LAYERS] = 0.0
    ratio = [x[i + 1] / x[i] for i in range(ZIG_LAYERS)]
    dens = [math.exp(-0.5 * v * v) for v in x]
    return np.array(x), np.array(ratio), np.array(dens)


ZIG_X, ZIG_RATIO, ZIG_F = _ziggurat_tables()
_ZX = ZIG_X.tolist()
_ZR = ZIG_RATIO.tolist()
_ZF = ZIG_F.tolist()


def mix64(z):
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def mix64_array(z):
    """Vectorized :func:`mix64` over a ``uint64`` array (wraps modulo 2**64)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def stream_key(seed, stream=0):
    """64-bit key identifying one independent stream of a seed."""
    k = mix64((seed & MASK64) + GOLDEN)
    return mix64(k ^ mix64(((stream & MASK64) + STREAM_SALT) & MASK64))


def path_key(key, path):
    return mix64(key + (path + 1) * PATH_GAMMA)


def path_keys(key, paths):
    paths = np.asarray(paths, dtype=np.uint64)
    return mix64_array(np.uint64(key) + (paths + np.uint64(1)) * np.uint64(PATH_GAMMA))


def child_stream(stream, index):
    """Derive a sub-stream id, used for nested recursive estimators."""
    return mix64(mix64(stream ^ RETRY_SALT) + (index + 1) * GOLDEN)


def child_streams(streams, indices):
    """Vectorized :func:`child_stream`; broadcasts ``streams`` against ``indices``."""
    base = mix64_array(np.asarray(streams, dtype=np.uint64) ^ np.uint64(RETRY_SALT))
    idx = np.asarray(indices, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64_array(base + (idx + np.uint64(1)) * np.uint64(GOLDEN))


def stream_keys(seed, streams):
    """Vectorized :func:`stream_key` over an array of stream ids."""
    k = np.uint64(mix64((seed & MASK64) + GOLDEN))
    with np.errstate(over="ignore"):
        salted = np.asarray(streams, dtype=np.uint64) + np.uint64(STREAM_SALT)
    return mix64_array(k ^ mix64_array(salted))


def _uniform(h):
    return ((h >> 11) + 0.5) * INV_2_53


def _retry_bits(pk, index, k):
    rk = mix64(pk ^ RETRY_SALT)
    return mix64(rk + (((index << RETRY_SHIFT) + k + 1) * GOLDEN))


def _slow_normal(pk, index, h):
    """Finish a ziggurat draw whose first word was rejected by the fast test.

    Scalar and written with :mod:`math` so that it rounds exactly like the C
    implementation.
    """
    k = 0
    while True:
        i = h & ZIG_MASK
        u = 2.0 * ((h >> 11) * INV_2_53) - 1.0
        if abs(u) < _ZR[i]:
            return u * _ZX[i]
        if i == 0:
            while True:
                a = math.log(_uniform(_retry_bits(pk, index, k))) / ZIG_R
                b = math.log(_uniform(_retry_bits(pk, index, k + 1)))
                k += 2
                if -2.0 * b >= a * a:
                    return a - ZIG_R if u < 0.0 else ZIG_R - a
        xx = u * _ZX[i]
        w = _uniform(_retry_bits(pk, index, k))
        k += 1
        if _ZF[i] + w * (_ZF[i + 1] - _ZF[i]) < math.exp(-0.5 * xx * xx):
            return xx
        h = _retry_bits(pk, index, k)
        k += 1


def normals_from_keys(pk, index):
    """Normals for draw ``index`` of every path key in ``pk`` (any shape)."""
    pk = np.asarray(pk, dtype=np.uint64)
    inc = np.uint64(((int(index) + 1) * GOLDEN) & MASK64)
    h = mix64_array(pk + inc)
    layer = (h & np.uint64(ZIG_MASK)).astype(np.intp)
    u = 2.0 * ((h >> np.uint64(11)).astype(np.float64) * INV_2_53) - 1.0
    out = u * ZIG_X[layer]
    slow = ~(np.abs(u) < ZIG_RATIO[layer])
    if slow.any():
        for pos in zip(*np.nonzero(slow)):
            out[pos] = _slow_normal(int(pk[pos]), int(index), int(h[pos]))
    return out


def normals(key, paths, indices):
    """Standard normals for every ``(path, index)`` pair.

    Parameters
    ----------
    key : int
        Stream key from :func:`stream_key`.
    paths : array_like of int, shape (n,)
    indices : array_like of int, shape (k,)
        Draw indices within a path; Euler step ``s`` with Brownian dimension
        ``m`` uses indices ``s*m .. s*m + m - 1``.

    Returns
    -------
    ndarray, shape (n, k)
    """
    paths = np.asarray(paths, dtype=np.uint64).reshape(-1)
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    pk = path_keys(key, paths)
    out = np.empty((paths.size, indices.size))
    for c, idx in enumerate(indices):
        out[:, c] = normals_from_keys(pk, int(idx))
    return out


def uniforms(key, paths, indices):
    """Uniforms on (0, 1) from the same counter layout, salted apart from normals."""
    paths = np.asarray(paths, dtype=np.uint64).reshape(-1)
    indices = np.asarray(indices, dtype=np.uint64).reshape(-1)
    pk = mix64_array(path_keys(key, paths) ^ np.uint64(STREAM_SALT))
    h = mix64_array(pk[:, None] + (indices[None, :] + np.uint64(1)) * np.uint64(GOLDEN))
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * INV_2_53
