"""Signed protocol records and the content-addressed blob store.

Canonical bytes: version byte, type byte, then each field as a 4-byte
big-endian length followed by its bytes.  Integers are 8-byte big-endian
signed.  Signatures (Ed25519) cover the canonical body, which includes the
sender's public key; the signature is appended as one more field.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from ..errors import ConfigError, ParseError

VERSION = 1
T_PUBLISH, T_CLAIM, T_ATTEST = 1, 2, 3


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# ---- keys and signatures -------------------------------------------------------

@dataclass(frozen=True)
class NodeIdentity:
    node_id: int
    private: Ed25519PrivateKey
    public: bytes

    @classmethod
    def derive(cls, node_id: int, seed) -> "NodeIdentity":
        """Deterministic keypair for simulations."""
        sk = Ed25519PrivateKey.from_private_bytes(sha256(f"node-key/{seed}/{node_id}".encode()))
        return cls(node_id, sk, public_bytes(sk))


def public_bytes(sk: Ed25519PrivateKey) -> bytes:
    return sk.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def sign(msg: bytes, private: Ed25519PrivateKey) -> bytes:
    if not isinstance(private, Ed25519PrivateKey):
        raise ConfigError("malformed private key")
    return private.sign(msg)


def verify_sig(msg: bytes, sig: bytes, public: bytes) -> bool:
    try:
        pk = Ed25519PublicKey.from_public_bytes(public)
    except ValueError as exc:
        raise ConfigError(f"malformed public key: {exc}") from exc
    try:
        pk.verify(sig, msg)
        return True
    except InvalidSignature:
        return False


# ---- canonical encoding ------------------------------------------------------

def _int(v: int) -> bytes:
    return struct.pack(">q", v)


def encode(kind: int, fields) -> bytes:
    out = bytearray([VERSION, kind])
    for f in fields:
        out += struct.pack(">I", len(f)) + f
    return bytes(out)


def decode(data: bytes) -> tuple[int, list[bytes]]:
    if len(data) < 2:
        raise ParseError("truncated header", 0)
    if data[0] != VERSION:
        raise ParseError(f"unsupported version {data[0]}", 0)
    kind, pos, fields = data[1], 2, []
    while pos < len(data):
        if pos + 4 > len(data):
            raise ParseError("truncated length prefix", pos)
        (n,) = struct.unpack(">I", data[pos:pos + 4])
        pos += 4
        if pos + n > len(data):
            raise ParseError("truncated field", pos)
        fields.append(data[pos:pos + n])
        pos += n
    return kind, fields


def _as_int(b: bytes) -> int:
    return struct.unpack(">q", b)[0]


@dataclass(frozen=True)
class PublishMsg:
    key: bytes
    time: int
    cwm_hash: bytes
    sender: bytes
    signature: bytes = b""

    kind = "publish"

    def body(self) -> bytes:
        return encode(T_PUBLISH, [self.key, _int(self.time), self.cwm_hash, self.sender])

    def to_bytes(self) -> bytes:
        return encode(T_PUBLISH, [self.key, _int(self.time), self.cwm_hash, self.sender, self.signature])

    @classmethod
    def create(cls, key: bytes, time: int, cwm_hash: bytes, ident: NodeIdentity) -> "PublishMsg":
        unsigned = cls(key, time, cwm_hash, ident.public)
        return cls(key, time, cwm_hash, ident.public, sign(unsigned.body(), ident.private))


@dataclass(frozen=True)
class ClaimMsg:
    model_ref: bytes
    model_hash: bytes
    cwm_ref: bytes
    sender: bytes
    signature: bytes = b""

    kind = "claim"

    def body(self) -> bytes:
        return encode(T_CLAIM, [self.model_ref, self.model_hash, self.cwm_ref, self.sender])

    def to_bytes(self) -> bytes:
        return encode(T_CLAIM, [self.model_ref, self.model_hash, self.cwm_ref, self.sender, self.signature])

    @classmethod
    def create(cls, model_ref, model_hash, cwm_ref, ident: NodeIdentity) -> "ClaimMsg":
        unsigned = cls(model_ref, model_hash, cwm_ref, ident.public)
        return cls(model_ref, model_hash, cwm_ref, ident.public, sign(unsigned.body(), ident.private))


@dataclass(frozen=True)
class Attestation:
    claim_digest: bytes
    verifier: int
    outcome: bool
    reason: str
    report_digest: bytes
    publish_term: int
    publish_index: int
    sender: bytes
    signature: bytes = b""

    kind = "attestation"

    def _fields(self):
        return [self.claim_digest, _int(self.verifier), _int(int(self.outcome)), self.reason.encode(),
                self.report_digest, _int(self.publish_term), _int(self.publish_index), self.sender]

    def body(self) -> bytes:
        return encode(T_ATTEST, self._fields())

    def to_bytes(self) -> bytes:
        return encode(T_ATTEST, self._fields() + [self.signature])

    @classmethod
    def create(cls, ident: NodeIdentity, **fields) -> "Attestation":
        unsigned = cls(verifier=ident.node_id, sender=ident.public, **fields)
        return cls(verifier=ident.node_id, sender=ident.public, **fields,
                   signature=sign(unsigned.body(), ident.private))


def from_bytes(data: bytes):
    kind, f = decode(data)
    try:
        if kind == T_PUBLISH:
            return PublishMsg(f[0], _as_int(f[1]), f[2], f[3], f[4])
        if kind == T_CLAIM:
            return ClaimMsg(*f[:5])
        if kind == T_ATTEST:
            return Attestation(f[0], _as_int(f[1]), bool(_as_int(f[2])), f[3].decode(), f[4],
                               _as_int(f[5]), _as_int(f[6]), f[7], f[8])
    except (IndexError, struct.error, UnicodeDecodeError) as exc:
        raise ParseError(f"malformed message body: {exc}", 2) from exc
    raise ParseError(f"unknown message type {kind}", 1)


def check_signature(msg) -> bool:
    return verify_sig(msg.body(), msg.signature, msg.sender)


def digest(msg) -> bytes:
    return sha256(msg.to_bytes())


# ---- blob store -----------------------------------------------------------------

class BlobNotFound(KeyError):
    pass


class BlobStore:
    """Immutable content-addressed store; the address is SHA-256 of the bytes."""

    def __init__(self):
        self._blobs: dict[bytes, bytes] = {}

    def put(self, data: bytes) -> bytes:
        addr = sha256(data)
        self._blobs.setdefault(addr, bytes(data))
        return addr

    def get(self, addr: bytes) -> bytes:
        try:
            return self._blobs[addr]
        except KeyError:
            raise BlobNotFound(addr.hex()) from None

    def __contains__(self, addr):
        return addr in self._blobs

    def __len__(self):
        return len(self._blobs)

    def _force(self, addr: bytes, data: bytes):
        """Bind arbitrary bytes to an address (tamper simulations only)."""
        self._blobs[addr] = data
