"""Low-level helpers: length-prefixed binary fields, ASCII armor and RSA glue."""

from __future__ import annotations

import base64
import hashlib
import struct
import textwrap

from cryptography.exceptions import InvalidSignature, UnsupportedAlgorithm
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa, utils

from .errors import ValidationError

RSA_BITS = 2048
RSA_EXPONENT = 65537


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def pack_bytes(data: bytes, width: int = 4) -> bytes:
    fmt = {1: ">B", 2: ">H", 4: ">I"}[width]
    return struct.pack(fmt, len(data)) + data


class Reader:
    """Cursor over a bytes object; raises ``ValidationError`` on truncation."""

    def __init__(self, data: bytes, offset: int = 0) -> None:
        self.data = data
        self.pos = offset

    def read(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ValidationError("truncated input")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def _unpack(self, fmt: str) -> int:
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))[0]

    def u8(self) -> int:
        return self._unpack(">B")

    def u16(self) -> int:
        return self._unpack(">H")

    def u32(self) -> int:
        return self._unpack(">I")

    def u64(self) -> int:
        return self._unpack(">Q")

    def lbytes(self, width: int = 4) -> bytes:
        n = {1: self.u8, 2: self.u16, 4: self.u32}[width]()
        return self.read(n)

    def rest(self) -> bytes:
        out = self.data[self.pos :]
        self.pos = len(self.data)
        return out

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def expect_end(self) -> None:
        if self.remaining:
            raise ValidationError(f"{self.remaining} trailing bytes")


def armor(label: str, data: bytes) -> str:
    body = "\n".join(textwrap.wrap(base64.b64encode(data).decode("ascii"), 64))
    return f"-----BEGIN {label}-----\n{body}\n-----END {label}-----\n"


def dearmor(text: str, label: str) -> bytes:
    begin, end = f"-----BEGIN {label}-----", f"-----END {label}-----"
    try:
        start = text.index(begin) + len(begin)
        stop = text.index(end, start)
    except ValueError:
        raise ValidationError(f"no armored {label} block found") from None
    try:
        return base64.b64decode("".join(text[start:stop].split()), validate=True)
    except ValueError as exc:
        raise ValidationError(f"bad base64 in {label} block") from exc


def new_rsa_key() -> rsa.RSAPrivateKey:
    return rsa.generate_private_key(public_exponent=RSA_EXPONENT, key_size=RSA_BITS)


def private_key_pem(key: rsa.RSAPrivateKey) -> str:
    return key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    ).decode("ascii")


def load_private_key(pem: str | bytes) -> rsa.RSAPrivateKey:
    if isinstance(pem, str):
        pem = pem.encode("ascii")
    try:
        key = serialization.load_pem_private_key(pem, password=None)
    except (ValueError, TypeError, UnsupportedAlgorithm) as exc:
        raise ValidationError("malformed private key") from exc
    if not isinstance(key, rsa.RSAPrivateKey):
        raise ValidationError("expected an RSA private key")
    return key


def public_der(key: rsa.RSAPublicKey) -> bytes:
    return key.public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )


def public_pem(key: rsa.RSAPublicKey) -> str:
    return key.public_bytes(
        serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo
    ).decode("ascii")


def load_public_der(der: bytes) -> rsa.RSAPublicKey:
    try:
        key = serialization.load_der_public_key(der)
    except (ValueError, UnsupportedAlgorithm) as exc:
        raise ValidationError("malformed public key") from exc
    if not isinstance(key, rsa.RSAPublicKey):
        raise ValidationError("expected an RSA public key")
    return key


def load_public_pem(pem: str | bytes) -> rsa.RSAPublicKey:
    if isinstance(pem, str):
        pem = pem.encode("ascii")
    try:
        key = serialization.load_pem_public_key(pem)
    except (ValueError, UnsupportedAlgorithm) as exc:
        raise ValidationError("malformed public key") from exc
    if not isinstance(key, rsa.RSAPublicKey):
        raise ValidationError("expected an RSA public key")
    return key


def rsa_sign(key: rsa.RSAPrivateKey, data: bytes) -> bytes:
    # PKCS#1 v1.5 is deterministic, which keeps fixtures reproducible.
    return key.sign(data, padding.PKCS1v15(), hashes.SHA256())


def rsa_verify(key: rsa.RSAPublicKey, signature: bytes, data: bytes) -> bool:
    try:
        key.verify(signature, data, padding.PKCS1v15(), hashes.SHA256())
    except (InvalidSignature, ValueError):
        return False
    return True


def rsa_sign_digest(key: rsa.RSAPrivateKey, digest: bytes) -> bytes:
    """Sign a precomputed SHA-256 digest (same bytes as signing the content)."""
    return key.sign(digest, padding.PKCS1v15(), utils.Prehashed(hashes.SHA256()))


def rsa_verify_digest(key: rsa.RSAPublicKey, signature: bytes, digest: bytes) -> bool:
    try:
        key.verify(signature, digest, padding.PKCS1v15(), utils.Prehashed(hashes.SHA256()))
    except (InvalidSignature, ValueError):
        return False
    return True
