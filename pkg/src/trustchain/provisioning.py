"""Client key provisioning, per-session key grants and the asset-tag key store.

The registry file is append-only and line oriented::

    client <id> <channel> <first_seen> <base64 public key PEM>
    epoch  <id> <epoch> <issued_at>

Session keys themselves are never written to the registry file.
"""

from __future__ import annotations

import base64
import enum
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric import rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import _codec
from .errors import (
    AccessDenied,
    DecryptionError,
    NotFoundError,
    PinningViolation,
    ValidationError,
)
from .tpm import TpmState, oaep_padding, rsa_encrypt

SESSION_KEY_SIZE = 32
ASSET_TAG_CAPACITY = 63
ASSET_TAG_CHUNK = 16
_CLIENT_ID = re.compile(r"[A-Za-z0-9._:@-]{1,128}")


class Channel(str, enum.Enum):
    TRUSTED_MEDIUM = "usb"
    PROVISIONING_NETWORK = "provnet"
    TOFU = "net-tofu"

    @property
    def networked(self) -> bool:
        return self is not Channel.TRUSTED_MEDIUM


def _normalize_pem(public_key: rsa.RSAPublicKey | str | bytes) -> str:
    if not isinstance(public_key, rsa.RSAPublicKey):
        public_key = _codec.load_public_pem(public_key)
    return _codec.public_pem(public_key)


@dataclass(frozen=True)
class ClientRecord:
    client_id: str
    public_key: str
    channel: Channel
    first_seen: int
    pinned: bool = True

    def key(self) -> rsa.RSAPublicKey:
        return _codec.load_public_pem(self.public_key)


@dataclass(frozen=True)
class SessionGrant:
    client_id: str
    encrypted_session_key: bytes
    epoch: int
    issued_at: int

    def to_bytes(self) -> bytes:
        return (
            b"GRT1"
            + _codec.pack_bytes(self.client_id.encode("utf-8"), 2)
            + self.epoch.to_bytes(8, "big")
            + self.issued_at.to_bytes(8, "big")
            + _codec.pack_bytes(self.encrypted_session_key, 2)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> SessionGrant:
        reader = _codec.Reader(data)
        if reader.read(4) != b"GRT1":
            raise ValidationError("not a session grant")
        client = reader.lbytes(2).decode("utf-8", "replace")
        epoch, issued = reader.u64(), reader.u64()
        grant = cls(client, reader.lbytes(2), epoch, issued)
        reader.expect_end()
        return grant


class ClientRegistry:
    """Server-side table of pinned client keys and the active session per client."""

    def __init__(self, path: Path | None = None) -> None:
        self.path = path
        self._lock = threading.RLock()
        self._records: dict[str, ClientRecord] = {}
        self._epochs: dict[str, int] = {}
        self._active: dict[str, tuple[int, bytes]] = {}
        if path is not None and path.exists():
            self._replay(path.read_text())

    def _replay(self, text: str) -> None:
        for lineno, line in enumerate(text.splitlines(), 1):
            fields = line.split()
            if not fields:
                continue
            if fields[0] == "client" and len(fields) == 5:
                pem = base64.b64decode(fields[4]).decode("ascii")
                self._records[fields[1]] = ClientRecord(fields[1], pem, Channel(fields[2]), int(fields[3]))
            elif fields[0] == "epoch" and len(fields) == 4:
                self._epochs[fields[1]] = int(fields[2])
            else:
                raise ValidationError(f"registry line {lineno} is malformed")

    def _append(self, line: str) -> None:
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(line + "\n")

    def get(self, client_id: str) -> ClientRecord:
        with self._lock:
            try:
                return self._records[client_id]
            except KeyError:
                raise NotFoundError(f"unknown client {client_id!r}") from None

    def clients(self) -> list[str]:
        with self._lock:
            return sorted(self._records)

    def last_epoch(self, client_id: str) -> int:
        with self._lock:
            return self._epochs.get(client_id, 0)

    def active_session(self, client_id: str) -> tuple[int, bytes]:
        with self._lock:
            try:
                return self._active[client_id]
            except KeyError:
                raise NotFoundError(f"no active session for {client_id!r}") from None

    def _register(self, record: ClientRecord) -> ClientRecord:
        with self._lock:
            existing = self._records.get(record.client_id)
            if existing is not None:
                if existing.public_key != record.public_key:
                    raise PinningViolation(f"client {record.client_id!r} is pinned to a different key")
                return existing
            self._records[record.client_id] = record
            pem64 = base64.b64encode(record.public_key.encode("ascii")).decode("ascii")
            self._append(f"client {record.client_id} {record.channel.value} {record.first_seen} {pem64}")
            return record

    def _begin_session(self, client_id: str, epoch: int | None, issued_at: int) -> tuple[int, bytes]:
        with self._lock:
            self.get(client_id)
            last = self._epochs.get(client_id, 0)
            if epoch is None:
                epoch = last + 1
            if epoch <= last:
                raise ValidationError(f"epoch {epoch} is not newer than {last} for {client_id!r}")
            key = os.urandom(SESSION_KEY_SIZE)
            self._epochs[client_id] = epoch
            self._active[client_id] = (epoch, key)
            self._append(f"epoch {client_id} {epoch} {issued_at}")
            return epoch, key


def provision_client(
    registry: ClientRegistry,
    client_id: str,
    public_key: rsa.RSAPublicKey | str | bytes,
    channel: Channel | str,
    first_seen: int | None = None,
) -> ClientRecord:
    """Register and pin a client's TPM public key; same key again is a no-op."""
    if not _CLIENT_ID.fullmatch(client_id):
        raise ValidationError(f"invalid client id {client_id!r}")
    record = ClientRecord(
        client_id,
        _normalize_pem(public_key),
        Channel(channel),
        int(time.time()) if first_seen is None else first_seen,
    )
    return registry._register(record)


# Optional protection of the network return path: the client encrypts its
# public key to the server's key before sending it.


def envelope_for_server(server_public: rsa.RSAPublicKey | str, client_pem: str) -> bytes:
    wrap_key = AESGCM.generate_key(bit_length=256)
    nonce = os.urandom(12)
    body = AESGCM(wrap_key).encrypt(nonce, client_pem.encode("ascii"), b"provision")
    return b"ENV1" + _codec.pack_bytes(rsa_encrypt(server_public, wrap_key), 2) + nonce + body


def open_envelope(server_key: rsa.RSAPrivateKey, envelope: bytes) -> str:
    reader = _codec.Reader(envelope)
    if reader.read(4) != b"ENV1":
        raise ValidationError("not a provisioning envelope")
    wrapped, nonce, body = reader.lbytes(2), reader.read(12), reader.rest()
    try:
        wrap_key = server_key.decrypt(wrapped, oaep_padding())
        return AESGCM(wrap_key).decrypt(nonce, body, b"provision").decode("ascii")
    except (ValueError, InvalidTag):
        raise DecryptionError() from None


def provision_from_envelope(
    registry: ClientRegistry,
    client_id: str,
    envelope: bytes,
    server_key: rsa.RSAPrivateKey,
    channel: Channel | str = Channel.PROVISIONING_NETWORK,
) -> ClientRecord:
    channel = Channel(channel)
    if not channel.networked:
        raise ValidationError("envelopes only apply to network channels")
    return provision_client(registry, client_id, open_envelope(server_key, envelope), channel)


def issue_session_key(
    registry: ClientRegistry, client_id: str, epoch: int | None = None
) -> tuple[SessionGrant, bytes]:
    """Fresh 32-byte key encrypted to the client's pinned key; supersedes older epochs."""
    issued_at = int(time.time())
    record = registry.get(client_id)
    epoch, key = registry._begin_session(client_id, epoch, issued_at)
    grant = SessionGrant(client_id, rsa_encrypt(record.key(), key), epoch, issued_at)
    return grant, key


def redeem_session_key(tpm: TpmState, handle: int, grant: SessionGrant) -> bytes:
    key = tpm.rsa_decrypt(handle, grant.encrypted_session_key)
    if len(key) != SESSION_KEY_SIZE:
        raise DecryptionError()
    return key


class AssetTagStore:
    """A small BMC inventory field that can be read back 16 bytes at a time."""

    def __init__(self) -> None:
        self._tag = b""

    def __len__(self) -> int:
        return len(self._tag)

    def write(self, data: bytes) -> None:
        if len(data) > ASSET_TAG_CAPACITY:
            raise ValidationError(f"asset tag holds at most {ASSET_TAG_CAPACITY} bytes, got {len(data)}")
        self._tag = bytes(data)

    def read(self, offset: int, root_on_host: bool = True) -> bytes:
        if not root_on_host:
            raise AccessDenied("reading the asset tag requires root on the host")
        if not 0 <= offset < len(self._tag):
            raise ValidationError(f"offset {offset} outside tag of {len(self._tag)} bytes")
        return self._tag[offset : offset + ASSET_TAG_CHUNK]

    def read_all(self, root_on_host: bool = True) -> bytes:
        return b"".join(
            self.read(off, root_on_host) for off in range(0, len(self._tag), ASSET_TAG_CHUNK)
        )

    def key_bits(self, reads: int | None = None) -> int:
        """Key material obtainable with ``reads`` chunk reads (all of it by default)."""
        if reads is None:
            return len(self._tag) * 8
        return min(len(self._tag), reads * ASSET_TAG_CHUNK) * 8


def max_key_bits(reads: int | None = None) -> int:
    if reads is None:
        return ASSET_TAG_CAPACITY * 8
    return min(ASSET_TAG_CAPACITY, reads * ASSET_TAG_CHUNK) * 8
