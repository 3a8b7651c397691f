"""Independent reference implementations used only by the tests."""
import hashlib
import math
import struct

import numpy as np

MASK = 0xFFFFFFFF


def _rotl(v, c):
    return ((v << c) & MASK) | (v >> (32 - c))


def _quarter(s, a, b, c, d):
    s[a] = (s[a] + s[b]) & MASK; s[d] = _rotl(s[d] ^ s[a], 16)
    s[c] = (s[c] + s[d]) & MASK; s[b] = _rotl(s[b] ^ s[c], 12)
    s[a] = (s[a] + s[b]) & MASK; s[d] = _rotl(s[d] ^ s[a], 8)
    s[c] = (s[c] + s[d]) & MASK; s[b] = _rotl(s[b] ^ s[c], 7)


def chacha20_block(key: bytes, counter: int, nonce: bytes) -> bytes:
    const = [0x61707865, 0x3320646E, 0x79622D32, 0x6B206574]
    state = const + list(struct.unpack("<8I", key)) + [counter] + list(struct.unpack("<3I", nonce))
    w = state[:]
    for _ in range(10):
        _quarter(w, 0, 4, 8, 12); _quarter(w, 1, 5, 9, 13)
        _quarter(w, 2, 6, 10, 14); _quarter(w, 3, 7, 11, 15)
        _quarter(w, 0, 5, 10, 15); _quarter(w, 1, 6, 11, 12)
        _quarter(w, 2, 7, 8, 13); _quarter(w, 3, 4, 9, 14)
    return struct.pack("<16I", *[(a + b) & MASK for a, b in zip(w, state)])


def keystream(secret: bytes, nbytes: int) -> bytes:
    key = hashlib.sha256(secret).digest()
    out = b""
    block = 0
    while len(out) < nbytes:
        out += chacha20_block(key, block, bytes(12))
        block += 1
    return out[:nbytes]


def derive(secret: bytes, n: int, m: int):
    """Indices, labels and label offset, straight from the stated procedure."""
    ks = keystream(secret, 64 * 1024)
    idx, pos = [], 0
    while len(idx) < n:
        v = int.from_bytes(ks[pos:pos + 4], "little") % (2 ** m)
        pos += 4
        if v not in idx:
            idx.append(v)
    labels = [ks[pos + i] % 2 for i in range(n)]
    return idx, labels, pos


def straight_line_forward(layers, x):
    """Row-vector forward pass written out without the engine."""
    a = np.array(x, dtype=float)
    for W, b, act in layers:
        z = np.array([sum(W[r][c] * a[c] for c in range(len(a))) + b[r] for r in range(len(b))])
        a = {"relu": np.maximum(z, 0), "tanh": np.tanh(z), "identity": z}[act]
    return a


def binomial_tail_fraction(p, k0, n):
    from fractions import Fraction
    pf = Fraction(p).limit_denominator(10**9)
    return float(sum(math.comb(n, k) * pf**k * (1 - pf) ** (n - k) for k in range(k0, n + 1)))
