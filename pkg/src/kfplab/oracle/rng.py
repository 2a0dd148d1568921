"""Philox4x64-10 counter-based generator, compiled with numba.

The stream of a path is keyed by ``(seed, path_index)``; block ``b`` of four
64-bit words is the Philox bijection of the counter ``(b + 1, 0, 0, 0)``,
which reproduces ``numpy.random.Philox(key=[seed, path_index]).random_raw()``
word for word.  Uniforms use the top 53 bits; normals come from a 256-layer
ziggurat (Marsaglia and Tsang) that consumes one word on the fast path.
"""
from __future__ import annotations

import math

import numba as nb
import numpy as np
from llvmlite import ir
from numba import types
from numba.extending import intrinsic

M0 = np.uint64(0xD2E7470EE14C6C93)
M1 = np.uint64(0xCA5A826395121157)
W0 = np.uint64(0x9E3779B97F4A7C15)
W1 = np.uint64(0xBB67AE8584CAA73B)
_S11 = np.uint64(11)
_ROUNDS = 10
_TWO_M53 = 1.0 / 9007199254740992.0


@intrinsic
def _mulhi(typingctx, a, b):
    """High word of the full 128-bit product of two ``uint64``."""
    sig = types.uint64(types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        wide = ir.IntType(128)
        prod = builder.mul(builder.zext(args[0], wide), builder.zext(args[1], wide))
        return builder.trunc(builder.lshr(prod, ir.Constant(wide, 64)), ir.IntType(64))

    return sig, codegen


@nb.njit(cache=True, inline="always")
def _round(c0, c1, c2, c3, k0, k1):
    return _mulhi(M1, c2) ^ c1 ^ k0, M1 * c2, _mulhi(M0, c0) ^ c3 ^ k1, M0 * c0


@nb.njit(cache=True, inline="always")
def philox4x64(c0, c1, c2, c3, k0, k1):
    """The four words of ``Philox4x64-10(counter, key)``."""
    c0, c1, c2, c3 = _round(c0, c1, c2, c3, k0, k1)
    for _ in range(_ROUNDS - 1):
        k0 = k0 + W0
        k1 = k1 + W1
        c0, c1, c2, c3 = _round(c0, c1, c2, c3, k0, k1)
    return c0, c1, c2, c3


@nb.njit(cache=True)
def raw_words(seed, index, n_blocks):
    """First ``4 * n_blocks`` words of the stream keyed by ``(seed, index)``."""
    out = np.empty(4 * n_blocks, dtype=np.uint64)
    zero = np.uint64(0)
    for b in range(n_blocks):
        w = philox4x64(np.uint64(b + 1), zero, zero, zero, np.uint64(seed), np.uint64(index))
        for k in range(4):
            out[4 * b + k] = w[k]
    return out


@nb.njit(cache=True, inline="always")
def to_unit(word):
    """Uniform on ``[0, 1)`` from the top 53 bits."""
    return float(word >> _S11) * _TWO_M53


def _ziggurat_tables(layers: int = 256, r: float = 3.6541528853610088, area: float = 0.00492867323399):
    f = lambda t: np.exp(-0.5 * t * t)  # noqa: E731
    x = np.empty(layers + 1)
    x[0] = area / f(r)
    x[1] = r
    for i in range(1, layers - 1):
        x[i + 1] = np.sqrt(-2.0 * np.log(area / x[i] + f(x[i])))
    x[layers] = 0.0
    return x, f(x)


ZIG_X, ZIG_F = _ziggurat_tables()
ZIG_R = float(ZIG_X[1])
_MASK8 = np.uint64(0xFF)
_BIT8 = np.uint64(0x100)


@nb.njit(cache=True, inline="always")
def next_word(buf, state, seed, index):
    """Next word of the stream; ``state = [blocks used, position in buf]``."""
    if state[1] >= 4:
        zero = np.uint64(0)
        buf[0], buf[1], buf[2], buf[3] = philox4x64(np.uint64(state[0] + 1), zero, zero, zero, seed, index)
        state[0] += 1
        state[1] = 0
    w = buf[state[1]]
    state[1] += 1
    return w


@nb.njit(cache=True, inline="always")
def _ziggurat_slow(i, z, buf, state, seed, index):
    if i == 0:
        while True:
            a = -math.log(1.0 - to_unit(next_word(buf, state, seed, index))) / ZIG_R
            b = -math.log(1.0 - to_unit(next_word(buf, state, seed, index)))
            if 2.0 * b > a * a:
                return ZIG_R + a if z > 0 else -(ZIG_R + a)
    y = ZIG_F[i] + to_unit(next_word(buf, state, seed, index)) * (ZIG_F[i + 1] - ZIG_F[i])
    if y < math.exp(-0.5 * z * z):
        return z
    return np.nan  # rejected: draw again


@nb.njit(cache=True, inline="always")
def next_normal(buf, state, seed, index):
    """Standard normal from the stream by the ziggurat."""
    while True:
        w = next_word(buf, state, seed, index)
        i = np.int64(w & _MASK8)
        u = to_unit(w)
        z = u * ZIG_X[i] if (w & _BIT8) == 0 else -u * ZIG_X[i]
        if u * ZIG_X[i] < ZIG_X[i + 1]:
            return z
        z = _ziggurat_slow(i, z, buf, state, seed, index)
        if z == z:
            return z


@nb.njit(cache=True)
def _normals(seed, index, count):
    buf = np.empty(4, dtype=np.uint64)
    state = np.array([0, 4], dtype=np.int64)
    out = np.empty(count)
    for k in range(count):
        out[k] = next_normal(buf, state, seed, index)
    return out


def normals(seed: int, index: int, count: int) -> np.ndarray:
    """The first ``count`` normals of a path stream (for inspection and tests)."""
    return _normals(np.uint64(seed), np.uint64(index), int(count))
