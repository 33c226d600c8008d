"""A deterministic software TPM: PCR bank, storage keys, sealing and quotes.

State file layout (``TPM1``), all integers big-endian::

    b"TPM1" | u8 version | seed[32] | pcr[24][32]
    u16 n_persistent | n * (u32 handle | u32 len | wrapped key)
    u16 n_transient  | n * (u16 len | token | u32 len | wrapped key)
    u8 has_quote_key | [u32 len | wrapped key]

A wrapped key is ``nonce[12] | AES-256-GCM(seed, PKCS#8 DER)``, so private
key material never appears in the clear in the file.
"""

from __future__ import annotations

import copy
import os
import secrets
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import _codec
from .errors import DecryptionError, NotFoundError, UnsealError, ValidationError

PCR_COUNT = 24
DIGEST_SIZE = 32
HANDLE_MIN = 0x81000000
HANDLE_MAX = 0x810000FF
MAX_SEAL_SIZE = 128
STATE_MAGIC = b"TPM1"
STATE_VERSION = 1
SUPPORTED_ALGORITHMS = ("rsa2048",)


class UnsupportedAlgorithm(ValidationError):
    pass


def oaep_padding() -> padding.OAEP:
    return padding.OAEP(mgf=padding.MGF1(hashes.SHA256()), algorithm=hashes.SHA256(), label=None)


def max_plaintext(key: rsa.RSAPublicKey) -> int:
    """Largest OAEP-SHA256 plaintext for ``key`` (k - 2*hLen - 2)."""
    return key.key_size // 8 - 2 * DIGEST_SIZE - 2


def rsa_encrypt(public_key: rsa.RSAPublicKey | str | bytes, plaintext: bytes) -> bytes:
    """Encrypt to a public key; usable without access to the TPM itself."""
    if not isinstance(public_key, rsa.RSAPublicKey):
        public_key = _codec.load_public_pem(public_key)
    limit = max_plaintext(public_key)
    if len(plaintext) > limit:
        raise ValidationError(f"plaintext is {len(plaintext)} bytes; at most {limit} fit")
    return public_key.encrypt(plaintext, oaep_padding())


def check_handle(handle: int) -> int:
    if not HANDLE_MIN <= handle <= HANDLE_MAX:
        raise ValidationError(
            f"handle {handle:#010x} outside the storage range {HANDLE_MIN:#010x}-{HANDLE_MAX:#010x}"
        )
    return handle


def _check_pcr_index(index: int) -> None:
    if not 0 <= index < PCR_COUNT:
        raise ValidationError(f"PCR index {index} out of range 0..{PCR_COUNT - 1}")


def selection_digest(values: Mapping[int, bytes]) -> bytes:
    """Digest over selected PCR values in ascending index order."""
    out = b"PCRS"
    for index in sorted(values):
        out += bytes([index]) + values[index]
    return _codec.sha256(out)


@dataclass(frozen=True)
class PcrPolicy:
    expected: tuple[tuple[int, bytes], ...]

    def __post_init__(self) -> None:
        if not self.expected:
            raise ValidationError("policy selection must not be empty")
        indices = [i for i, _ in self.expected]
        if len(set(indices)) != len(indices):
            raise ValidationError("policy lists a PCR twice")
        for index, value in self.expected:
            _check_pcr_index(index)
            if len(value) != DIGEST_SIZE:
                raise ValidationError(f"expected value for PCR {index} must be {DIGEST_SIZE} bytes")

    @classmethod
    def of(cls, expected: Mapping[int, bytes]) -> PcrPolicy:
        return cls(tuple(sorted(expected.items())))

    @property
    def selection(self) -> frozenset[int]:
        return frozenset(i for i, _ in self.expected)

    @property
    def digest(self) -> bytes:
        return selection_digest(dict(self.expected))

    def to_bytes(self) -> bytes:
        return bytes([len(self.expected)]) + b"".join(bytes([i]) + v for i, v in self.expected)

    @classmethod
    def read_from(cls, reader: _codec.Reader) -> PcrPolicy:
        return cls(tuple((reader.u8(), reader.read(DIGEST_SIZE)) for _ in range(reader.u8())))


@dataclass(frozen=True)
class SealedBlob:
    policy: PcrPolicy
    nonce: bytes
    ciphertext: bytes
    integrity_tag: bytes

    def to_bytes(self) -> bytes:
        return b"SEA1" + self.policy.to_bytes() + self.nonce + _codec.pack_bytes(self.ciphertext, 2) + self.integrity_tag

    @classmethod
    def from_bytes(cls, data: bytes) -> SealedBlob:
        reader = _codec.Reader(data)
        if reader.read(4) != b"SEA1":
            raise ValidationError("not a sealed blob")
        blob = cls(PcrPolicy.read_from(reader), reader.read(12), reader.lbytes(2), reader.read(16))
        reader.expect_end()
        return blob


@dataclass(frozen=True)
class Quote:
    selection: tuple[int, ...]
    pcr_digest: bytes
    nonce: bytes
    signature: bytes

    def message(self) -> bytes:
        return (
            b"QUO1"
            + bytes([len(self.selection)])
            + bytes(self.selection)
            + self.pcr_digest
            + _codec.pack_bytes(self.nonce, 2)
        )

    def to_bytes(self) -> bytes:
        return self.message() + _codec.pack_bytes(self.signature, 2)

    @classmethod
    def from_bytes(cls, data: bytes) -> Quote:
        reader = _codec.Reader(data)
        if reader.read(4) != b"QUO1":
            raise ValidationError("not a quote")
        selection = tuple(reader.read(reader.u8()))
        quote = cls(selection, reader.read(DIGEST_SIZE), reader.lbytes(2), reader.lbytes(2))
        reader.expect_end()
        return quote


def verify_quote(
    quote: Quote,
    quote_public: rsa.RSAPublicKey | str,
    nonce: bytes,
    pcr_values: Mapping[int, bytes] | None = None,
) -> bool:
    """Check signature, nonce binding and (optionally) the reported PCR values."""
    if not isinstance(quote_public, rsa.RSAPublicKey):
        quote_public = _codec.load_public_pem(quote_public)
    if quote.nonce != nonce:
        return False
    if pcr_values is not None:
        if set(pcr_values) != set(quote.selection):
            return False
        if selection_digest(pcr_values) != quote.pcr_digest:
            return False
    return _codec.rsa_verify(quote_public, quote.signature, quote.message())


class TpmState:
    """One logical TPM. Commands on an instance must not run concurrently."""

    def __init__(self, seed: bytes | None = None) -> None:
        self._seed = seed if seed is not None else os.urandom(32)
        self.pcrs: list[bytes] = [bytes(DIGEST_SIZE)] * PCR_COUNT
        self.persistent: dict[int, rsa.RSAPrivateKey] = {}
        self.transient: dict[str, rsa.RSAPrivateKey] = {}
        self._quote_key: rsa.RSAPrivateKey | None = None

    def clone(self) -> TpmState:
        """Independent copy sharing immutable key objects."""
        other = copy.copy(self)
        other.pcrs = list(self.pcrs)
        other.persistent = dict(self.persistent)
        other.transient = dict(self.transient)
        return other

    # -- keys --

    def create_primary(self, algorithm: str = "rsa2048") -> str:
        if algorithm not in SUPPORTED_ALGORITHMS:
            raise UnsupportedAlgorithm(f"unsupported key algorithm {algorithm!r}")
        token = "ctx-" + secrets.token_hex(8)
        self.transient[token] = _codec.new_rsa_key()
        return token

    def evict_control(self, token: str, handle: int) -> None:
        check_handle(handle)
        if token not in self.transient:
            raise NotFoundError(f"unknown context {token!r}")
        if handle in self.persistent:
            raise ValidationError(f"handle {handle:#010x} is occupied")
        self.persistent[handle] = self.transient.pop(token)

    def _key(self, handle: int) -> rsa.RSAPrivateKey:
        try:
            return self.persistent[handle]
        except KeyError:
            raise NotFoundError(f"no key at handle {handle:#010x}") from None

    def public_key(self, handle: int) -> rsa.RSAPublicKey:
        return self._key(handle).public_key()

    def read_public(self, handle: int) -> str:
        return _codec.public_pem(self.public_key(handle))

    def rsa_encrypt(self, handle: int, plaintext: bytes) -> bytes:
        return rsa_encrypt(self.public_key(handle), plaintext)

    def rsa_decrypt(self, handle: int, ciphertext: bytes) -> bytes:
        key = self._key(handle)
        try:
            return key.decrypt(ciphertext, oaep_padding())
        except ValueError:
            raise DecryptionError() from None

    # -- PCRs --

    def pcr_extend(self, index: int, measurement: bytes) -> bytes:
        _check_pcr_index(index)
        if len(measurement) != DIGEST_SIZE:
            raise ValidationError(f"measurement must be a {DIGEST_SIZE}-byte digest")
        self.pcrs[index] = _codec.sha256(self.pcrs[index] + measurement)
        return self.pcrs[index]

    def pcr_read(self, index: int) -> bytes:
        _check_pcr_index(index)
        return self.pcrs[index]

    def pcr_values(self, selection: Iterable[int]) -> dict[int, bytes]:
        return {i: self.pcr_read(i) for i in selection}

    # -- sealing --

    def _storage_key(self) -> AESGCM:
        return AESGCM(_codec.sha256(b"storage" + self._seed))

    def seal(self, secret: bytes, policy: PcrPolicy) -> SealedBlob:
        if len(secret) > MAX_SEAL_SIZE:
            raise ValidationError(f"sealed secrets are limited to {MAX_SEAL_SIZE} bytes")
        nonce = os.urandom(12)
        sealed = self._storage_key().encrypt(nonce, secret, policy.digest)
        return SealedBlob(policy, nonce, sealed[:-16], sealed[-16:])

    def unseal(self, blob: SealedBlob) -> bytes:
        current = selection_digest(self.pcr_values(blob.policy.selection))
        if current != blob.policy.digest:
            raise UnsealError("PCR state does not satisfy the policy")
        try:
            return self._storage_key().decrypt(blob.nonce, blob.ciphertext + blob.integrity_tag, current)
        except InvalidTag:
            raise UnsealError("sealed blob failed its integrity check") from None

    # -- attestation --

    def quote_public(self) -> str:
        return _codec.public_pem(self._quote_signer().public_key())

    def _quote_signer(self) -> rsa.RSAPrivateKey:
        if self._quote_key is None:
            self._quote_key = _codec.new_rsa_key()
        return self._quote_key

    def quote(self, selection: Iterable[int], nonce: bytes) -> Quote:
        chosen = tuple(sorted(set(selection)))
        if not chosen:
            raise ValidationError("quote selection must not be empty")
        unsigned = Quote(chosen, selection_digest(self.pcr_values(chosen)), nonce, b"")
        signature = _codec.rsa_sign(self._quote_signer(), unsigned.message())
        return Quote(chosen, unsigned.pcr_digest, nonce, signature)

    attest_quote = quote

    # -- persistence --

    def _wrap(self, key: rsa.RSAPrivateKey) -> bytes:
        der = key.private_bytes(
            serialization.Encoding.DER,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
        nonce = os.urandom(12)
        return nonce + AESGCM(self._seed).encrypt(nonce, der, b"wrap")

    def _unwrap(self, blob: bytes) -> rsa.RSAPrivateKey:
        try:
            der = AESGCM(self._seed).decrypt(blob[:12], blob[12:], b"wrap")
        except InvalidTag:
            raise ValidationError("corrupt key object in state file") from None
        key = serialization.load_der_private_key(der, password=None)
        assert isinstance(key, rsa.RSAPrivateKey)
        return key

    def to_bytes(self) -> bytes:
        out = [STATE_MAGIC, bytes([STATE_VERSION]), self._seed, *self.pcrs]
        out.append(len(self.persistent).to_bytes(2, "big"))
        for handle in sorted(self.persistent):
            out.append(handle.to_bytes(4, "big") + _codec.pack_bytes(self._wrap(self.persistent[handle])))
        out.append(len(self.transient).to_bytes(2, "big"))
        for token, key in sorted(self.transient.items()):
            out.append(_codec.pack_bytes(token.encode("ascii"), 2) + _codec.pack_bytes(self._wrap(key)))
        if self._quote_key is None:
            out.append(b"\0")
        else:
            out.append(b"\1" + _codec.pack_bytes(self._wrap(self._quote_key)))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> TpmState:
        reader = _codec.Reader(data)
        if reader.read(4) != STATE_MAGIC:
            raise ValidationError("not a TPM state file")
        if reader.u8() != STATE_VERSION:
            raise ValidationError("unsupported TPM state version")
        tpm = cls(reader.read(32))
        tpm.pcrs = [reader.read(DIGEST_SIZE) for _ in range(PCR_COUNT)]
        for _ in range(reader.u16()):
            handle = check_handle(reader.u32())
            tpm.persistent[handle] = tpm._unwrap(reader.lbytes())
        for _ in range(reader.u16()):
            token = reader.lbytes(2).decode("ascii")
            tpm.transient[token] = tpm._unwrap(reader.lbytes())
        if reader.u8():
            tpm._quote_key = tpm._unwrap(reader.lbytes())
        reader.expect_end()
        return tpm

    def save(self, path: Path) -> None:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.chmod(0o600)
        tmp.replace(path)

    @classmethod
    def load(cls, path: Path) -> TpmState:
        return cls.from_bytes(path.read_bytes())
