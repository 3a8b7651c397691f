"""Key-derived watermark datasets.

The secret seeds a ChaCha20 keystream (key = SHA-256(secret), zero nonce,
counter 0).  Indices are read as 4-byte little-endian words masked to the
low ``m`` bits, duplicates skipped in encounter order; label bits are the
least-significant bits of the ``n`` bytes that follow the last index word.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

from .errors import ConfigError, DomainError

WORD_BYTES = 4
_CHUNK = 256


def default_bits(n: int) -> int:
    """Domain bit-width ``3 * ceil(log2 n)``, floored at 1."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    return max(1, 3 * math.ceil(math.log2(n)))


@dataclass(frozen=True)
class WatermarkKey:
    secret: bytes
    n: int
    m: int | None = None

    def __post_init__(self):
        if isinstance(self.secret, str):
            object.__setattr__(self, "secret", self.secret.encode())
        if self.m is None:
            object.__setattr__(self, "m", default_bits(self.n))
        _check_params(self.n, self.m, allow_empty=False)

    @property
    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.secret).digest()

    def to_bytes(self) -> bytes:
        """Canonical revealed-key encoding, used by Publish messages."""
        doc = {"m": self.m, "n": self.n, "secret": self.secret.hex()}
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "WatermarkKey":
        try:
            doc = json.loads(data)
            return cls(bytes.fromhex(doc["secret"]), int(doc["n"]), int(doc["m"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"malformed key encoding: {exc}") from exc


def _check_params(n, m, allow_empty):
    if not 1 <= m <= 32:
        raise ConfigError(f"m must lie in [1, 32], got {m}")
    if n < (0 if allow_empty else 1):
        raise ConfigError(f"n must be >= 1, got {n}")
    if n > 2 ** (m - 1):
        raise ConfigError(f"n={n} exceeds 2^(m-1)={2 ** (m - 1)}")


class Keystream:
    """Sequential reader over the ChaCha20 keystream of a secret."""

    def __init__(self, secret: bytes):
        key = hashlib.sha256(secret).digest()
        # 16-byte nonce field = 4-byte LE block counter (0) + 12-byte zero nonce
        self._enc = Cipher(algorithms.ChaCha20(key, bytes(16)), mode=None).encryptor()
        self._buf = bytearray()
        self.offset = 0

    def read(self, k: int) -> bytes:
        while len(self._buf) < k:
            self._buf += self._enc.update(bytes(max(_CHUNK, k)))
        out = bytes(self._buf[:k])
        del self._buf[:k]
        self.offset += k
        return out


def _indices(stream: Keystream, n: int, m: int) -> list[int]:
    mask = (1 << m) - 1
    seen: set[int] = set()
    out: list[int] = []
    while len(out) < n:
        word = int.from_bytes(stream.read(WORD_BYTES), "little") & mask
        if word not in seen:
            seen.add(word)
            out.append(word)
    return out


def derive_stream(secret: bytes, n: int, m: int) -> tuple[list[int], list[int], int]:
    """Return ``(indices, labels, label_offset)`` for raw parameters.

    Accepts ``n = 0``, which ``WatermarkKey`` forbids.
    """
    if isinstance(secret, str):
        secret = secret.encode()
    _check_params(n, m, allow_empty=True)
    stream = Keystream(secret)
    idx = _indices(stream, n, m)
    label_offset = stream.offset
    labels = [b & 1 for b in stream.read(n)]
    return idx, labels, label_offset


def derive_indices(key: WatermarkKey) -> list[int]:
    return derive_stream(key.secret, key.n, key.m)[0]


def derive_labels(key: WatermarkKey) -> str:
    return "".join(str(b) for b in derive_stream(key.secret, key.n, key.m)[1])


@dataclass(frozen=True)
class DomainEncoder:
    """Injective map from ``[0, 2^m)`` to model inputs.

    ``kind`` is ``"vector"`` (bit-sign vector of length ``shape[0]``) or
    ``"grid"`` (row-major bit grid of ``shape = (height, width)``).
    """

    kind: str
    shape: tuple[int, ...]
    m: int

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.kind == "vector":
            if len(self.shape) != 1 or self.shape[0] < self.m:
                raise ConfigError(f"bit-sign vector needs d >= m, got {self.shape} for m={self.m}")
        elif self.kind == "grid":
            if len(self.shape) != 2 or self.shape[0] * self.shape[1] < self.m:
                raise ConfigError(f"bit grid needs height*width >= m, got {self.shape} for m={self.m}")
        else:
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if not 1 <= self.m <= 32:
            raise ConfigError(f"m must lie in [1, 32], got {self.m}")

    @classmethod
    def vector(cls, d: int, m: int) -> "DomainEncoder":
        return cls("vector", (d,), m)

    @classmethod
    def grid(cls, height: int, width: int, m: int) -> "DomainEncoder":
        return cls("grid", (height, width), m)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def encode_integer(n: int, enc: DomainEncoder) -> np.ndarray:
    if not 0 <= n < 2 ** enc.m:
        raise DomainError(f"{n} outside [0, 2^{enc.m})")
    return encode_many([n], enc)[0]


def encode_many(values, enc: DomainEncoder) -> np.ndarray:
    """Encode a sequence of integers; rows are flattened model inputs."""
    vals = np.asarray(list(values), dtype=np.int64).reshape(-1)
    if vals.size and (vals.min() < 0 or vals.max() >= 2 ** enc.m):
        raise DomainError(f"values outside [0, 2^{enc.m})")
    bits = (vals[:, None] >> np.arange(enc.m)) & 1
    out = np.zeros((vals.size, enc.size))
    out[:, : enc.m] = np.where(bits == 1, 1.0, -1.0)
    return out


@dataclass(frozen=True)
class WatermarkPoint:
    index: int
    label: int


@dataclass(frozen=True)
class WatermarkDataset:
    points: tuple[WatermarkPoint, ...]
    key_fingerprint: bytes
    m: int
    inputs: np.ndarray = field(compare=False, repr=False)

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.points], dtype=np.int64)

    def to_json(self) -> bytes:
        doc = {"version": 1, "n": self.n, "m": self.m,
               "points": [[p.index, p.label] for p in self.points]}
        return json.dumps(doc, separators=(",", ":")).encode()


def build_wm_dataset(key: WatermarkKey, enc: DomainEncoder) -> WatermarkDataset:
    if enc.m != key.m:
        raise ConfigError(f"encoder m={enc.m} differs from key m={key.m}")
    idx, labels, _ = derive_stream(key.secret, key.n, key.m)
    points = tuple(WatermarkPoint(i, l) for i, l in zip(idx, labels))
    return WatermarkDataset(points, key.fingerprint, key.m, encode_many(idx, enc))


def min_domain_bits(n: int, tau: float) -> int:
    """Smallest ``m`` with ``m >= log2(2n(2 + (1 - tau) n))``."""
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    if not 0 < tau < 1:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    return math.ceil(math.log2(2 * n * (2 + (1 - tau) * n)))


def collision_bound(n: int, m: int, q: float) -> float:
    """Upper bound on two keys sharing ``q*n`` labelled points."""
    if not 0 <= q <= 1:
        raise DomainError(f"q must lie in [0, 1], got {q}")
    k = q * n
    if abs(k - round(k)) > 1e-9:
        raise DomainError(f"q*n = {k} is not integral")
    k = int(round(k))
    r = n / 2 ** (m + 1)
    if r >= 1:
        return 1.0
    log_b = math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
    log_b += (k * math.log(r) if k else 0.0) + ((n - k) * math.log1p(-r) if n - k else 0.0)
    return min(1.0, math.exp(log_b))


def count_matches(a: WatermarkDataset, b: WatermarkDataset) -> int:
    """Points of ``a`` whose (index, label) pair also occurs in ``b``."""
    other = {(p.index, p.label) for p in b.points}
    return sum((p.index, p.label) in other for p in a.points)
