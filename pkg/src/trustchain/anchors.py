"""Secure Boot key hierarchy, enrollment bundles and a simulated UEFI key store.

The hierarchy mirrors the usual ``mkkeys.sh`` layout: three self-signed
RSA-2048/SHA-256 certificates (PK, KEK, DB) sharing one owner GUID, and four
signed signature lists (``PK``, ``noPK``, ``KEK``, ``DB``) ready for enrollment.
"""

from __future__ import annotations

import base64
import enum
import json
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Union

from cryptography.hazmat.primitives.asymmetric import rsa

from . import _codec
from .errors import EnrollmentError, ValidationError

if TYPE_CHECKING:
    from .image import SignedBootImage

DEFAULT_VALIDITY_DAYS = 3650
AUTH_MAGIC = b"SSL1"
CERT_MAGIC = b"SBC1"
CERT_ARMOR = "SECURE BOOT CERTIFICATE"


class Role(str, enum.Enum):
    PK = "PK"
    KEK = "KEK"
    DB = "DB"
    DBX = "DBX"

    @property
    def code(self) -> int:
        return _ROLE_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> Role:
        for role, value in _ROLE_CODES.items():
            if value == code:
                return role
        raise ValidationError(f"unknown role code {code}")


_ROLE_CODES = {Role.PK: 1, Role.KEK: 2, Role.DB: 3, Role.DBX: 4}


class Verdict(str, enum.Enum):
    ALLOWED = "Allowed"
    DENIED_UNSIGNED = "DeniedUnsigned"
    DENIED_UNTRUSTED = "DeniedUntrusted"
    DENIED_FORBIDDEN = "DeniedForbidden"

    @property
    def allowed(self) -> bool:
        return self is Verdict.ALLOWED


@dataclass(frozen=True)
class Certificate:
    """A minimal self-signed certificate bound to one Secure Boot role."""

    subject_cn: str
    role: Role
    public_der: bytes
    validity_days: int
    self_signature: bytes = b""

    def __post_init__(self) -> None:
        if not self.subject_cn.endswith(self.role.value):
            raise ValidationError(
                f"subject {self.subject_cn!r} does not end with role {self.role.value}"
            )
        if self.validity_days <= 0:
            raise ValidationError("validity_days must be positive")

    @classmethod
    def issue(
        cls,
        subject_cn: str,
        role: Role,
        key: rsa.RSAPrivateKey,
        validity_days: int = DEFAULT_VALIDITY_DAYS,
    ) -> Certificate:
        unsigned = cls(subject_cn, role, _codec.public_der(key.public_key()), validity_days)
        return replace(unsigned, self_signature=_codec.rsa_sign(key, unsigned.tbs()))

    @property
    def public_key(self) -> rsa.RSAPublicKey:
        return _codec.load_public_der(self.public_der)

    def tbs(self) -> bytes:
        """The to-be-signed encoding: everything except the signature."""
        return (
            CERT_MAGIC
            + _codec.pack_bytes(self.subject_cn.encode("utf-8"), 2)
            + bytes([self.role.code])
            + _codec.pack_bytes(self.public_der, 2)
            + self.validity_days.to_bytes(4, "big")
        )

    def to_bytes(self) -> bytes:
        return self.tbs() + _codec.pack_bytes(self.self_signature, 2)

    @classmethod
    def read_from(cls, reader: _codec.Reader) -> Certificate:
        if reader.read(4) != CERT_MAGIC:
            raise ValidationError("not a certificate")
        try:
            cn = reader.lbytes(2).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ValidationError("subject is not UTF-8") from exc
        role = Role.from_code(reader.u8())
        der = reader.lbytes(2)
        days = reader.u32()
        sig = reader.lbytes(2)
        return cls(cn, role, der, days, sig)

    @classmethod
    def from_bytes(cls, data: bytes) -> Certificate:
        reader = _codec.Reader(data)
        cert = cls.read_from(reader)
        reader.expect_end()
        return cert

    @property
    def fingerprint(self) -> bytes:
        return _codec.sha256(self.to_bytes())

    def verify_self(self) -> bool:
        try:
            key = self.public_key
        except ValidationError:
            return False
        return _codec.rsa_verify(key, self.self_signature, self.tbs())

    def to_armor(self) -> str:
        return _codec.armor(CERT_ARMOR, self.to_bytes())

    @classmethod
    def from_armor(cls, text: str) -> Certificate:
        return cls.from_bytes(_codec.dearmor(text, CERT_ARMOR))


Entry = Union[Certificate, bytes]
_ENTRY_CERT, _ENTRY_HASH = 1, 2


@dataclass(frozen=True)
class SignatureList:
    """An EFI-style signature list: owner GUID plus certificates or SHA-256 hashes."""

    owner_guid: uuid.UUID
    entries: tuple[Entry, ...] = ()

    def __post_init__(self) -> None:
        for entry in self.entries:
            if isinstance(entry, bytes) and len(entry) != 32:
                raise ValidationError("hash entries must be 32 bytes")

    def certificates(self) -> list[Certificate]:
        return [e for e in self.entries if isinstance(e, Certificate)]

    def hashes(self) -> set[bytes]:
        return {e for e in self.entries if isinstance(e, bytes)}

    def to_bytes(self) -> bytes:
        out = [self.owner_guid.bytes, len(self.entries).to_bytes(4, "big")]
        for entry in self.entries:
            if isinstance(entry, Certificate):
                out.append(bytes([_ENTRY_CERT]) + _codec.pack_bytes(entry.to_bytes()))
            else:
                out.append(bytes([_ENTRY_HASH]) + _codec.pack_bytes(entry))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> SignatureList:
        reader = _codec.Reader(data)
        guid = uuid.UUID(bytes=reader.read(16))
        entries: list[Entry] = []
        for _ in range(reader.u32()):
            kind = reader.u8()
            body = reader.lbytes()
            if kind == _ENTRY_CERT:
                entries.append(Certificate.from_bytes(body))
            elif kind == _ENTRY_HASH:
                entries.append(body)
            else:
                raise ValidationError(f"unknown signature list entry type {kind}")
        reader.expect_end()
        return cls(guid, tuple(entries))


def authorizer_for(slot: Role) -> Role:
    return Role.PK if slot in (Role.PK, Role.KEK) else Role.KEK


@dataclass(frozen=True)
class SignedSignatureList:
    """A signature list with its time-based authorizing signature (a ``.auth`` file)."""

    sig_list: SignatureList
    target_slot: Role
    timestamp: int
    authorizing_signature: bytes

    @property
    def authorizer_role(self) -> Role:
        return authorizer_for(self.target_slot)

    @property
    def is_pk_removal(self) -> bool:
        return self.target_slot is Role.PK and not self.sig_list.entries

    def signed_message(self) -> bytes:
        return _auth_header(self.target_slot, self.timestamp, self.sig_list.owner_guid) + (
            _codec.pack_bytes(self.sig_list.to_bytes())
        )

    def to_bytes(self) -> bytes:
        return self.signed_message() + self.authorizing_signature

    @classmethod
    def from_bytes(cls, data: bytes) -> SignedSignatureList:
        reader = _codec.Reader(data)
        if reader.read(4) != AUTH_MAGIC:
            raise ValidationError("not a signed signature list")
        slot = Role.from_code(reader.u8())
        stamp = reader.u64()
        guid = uuid.UUID(bytes=reader.read(16))
        sig_list = SignatureList.from_bytes(reader.lbytes())
        if sig_list.owner_guid != guid:
            raise ValidationError("header GUID does not match list owner")
        return cls(sig_list, slot, stamp, reader.rest())


def _auth_header(slot: Role, timestamp: int, guid: uuid.UUID) -> bytes:
    return AUTH_MAGIC + bytes([slot.code]) + timestamp.to_bytes(8, "big") + guid.bytes


def sign_signature_list(
    sig_list: SignatureList, slot: Role, key: rsa.RSAPrivateKey, timestamp: int
) -> SignedSignatureList:
    """Sign ``sig_list`` for ``slot``; ``key`` must belong to the slot's authorizer."""
    unsigned = SignedSignatureList(sig_list, slot, timestamp, b"")
    return replace(unsigned, authorizing_signature=_codec.rsa_sign(key, unsigned.signed_message()))


@dataclass(frozen=True)
class KeyPair:
    cert: Certificate
    key: rsa.RSAPrivateKey = field(repr=False, compare=False)


@dataclass(frozen=True)
class KeyHierarchy:
    pk: KeyPair
    kek: KeyPair
    db: KeyPair
    guid: uuid.UUID

    def __post_init__(self) -> None:
        for pair, role in ((self.pk, Role.PK), (self.kek, Role.KEK), (self.db, Role.DB)):
            if pair.cert.role is not role:
                raise ValidationError(f"{role.value} slot holds a {pair.cert.role.value} cert")
        numbers = {p.key.private_numbers().d for p in (self.pk, self.kek, self.db)}
        if len(numbers) != 3:
            raise ValidationError("hierarchy private keys must be distinct")

    def pair(self, role: Role) -> KeyPair:
        return {Role.PK: self.pk, Role.KEK: self.kek, Role.DB: self.db}[role]


def generate_hierarchy(common_name: str) -> KeyHierarchy:
    """Create fresh PK/KEK/DB certificates named ``"<common_name> <ROLE>"``."""
    if not common_name or not common_name.strip():
        raise ValidationError("common name must not be empty")
    if not common_name.isprintable():
        raise ValidationError("common name must be printable")
    pairs = []
    for role in (Role.PK, Role.KEK, Role.DB):
        key = _codec.new_rsa_key()
        pairs.append(KeyPair(Certificate.issue(f"{common_name} {role.value}", role, key), key))
    return KeyHierarchy(*pairs, guid=uuid.uuid4())


# Per-GUID high-water mark so regenerated bundles always carry newer timestamps.
_stamp_lock = threading.Lock()
_last_stamp: dict[uuid.UUID, int] = {}


def _next_stamps(guid: uuid.UUID, count: int, start: int | None) -> list[int]:
    with _stamp_lock:
        base = int(time.time()) if start is None else start
        base = max(base, _last_stamp.get(guid, -1) + 1)
        _last_stamp[guid] = base + count - 1
    return list(range(base, base + count))


BUNDLE_ORDER = ("PK", "noPK", "KEK", "DB")


def build_enrollment_bundle(
    h: KeyHierarchy, timestamp: int | None = None
) -> dict[str, SignedSignatureList]:
    """Return the four signed lists keyed by file stem (``PK``, ``noPK``, ``KEK``, ``DB``).

    Timestamps are one second apart and strictly above those of any earlier
    bundle built in this process for the same hierarchy.
    """
    stamps = _next_stamps(h.guid, len(BUNDLE_ORDER), timestamp)
    lists = {
        "PK": (SignatureList(h.guid, (h.pk.cert,)), Role.PK, h.pk.key),
        "noPK": (SignatureList(h.guid), Role.PK, h.pk.key),
        "KEK": (SignatureList(h.guid, (h.kek.cert,)), Role.KEK, h.pk.key),
        "DB": (SignatureList(h.guid, (h.db.cert,)), Role.DB, h.kek.key),
    }
    return {
        name: sign_signature_list(*lists[name], timestamp=stamp)
        for name, stamp in zip(BUNDLE_ORDER, stamps)
    }


@dataclass(frozen=True)
class UefiKeyStore:
    """Immutable view of the firmware's PK/KEK/db/dbx variables."""

    pk_slot: SignatureList | None = None
    kek_slot: SignatureList = SignatureList(uuid.UUID(int=0))
    db_slot: SignatureList = SignatureList(uuid.UUID(int=0))
    dbx_slot: SignatureList = SignatureList(uuid.UUID(int=0))
    timestamps: tuple[int, int, int, int] = (0, 0, 0, 0)

    @property
    def setup_mode(self) -> bool:
        return self.pk_slot is None

    def slot(self, role: Role) -> SignatureList | None:
        return {
            Role.PK: self.pk_slot,
            Role.KEK: self.kek_slot,
            Role.DB: self.db_slot,
            Role.DBX: self.dbx_slot,
        }[role]

    def _with(self, role: Role, value: SignatureList | None, stamp: int) -> UefiKeyStore:
        stamps = list(self.timestamps)
        stamps[role.code - 1] = stamp
        name = {Role.PK: "pk_slot", Role.KEK: "kek_slot", Role.DB: "db_slot", Role.DBX: "dbx_slot"}
        return replace(self, **{name[role]: value}, timestamps=tuple(stamps))

    def to_json(self) -> str:
        def enc(sl: SignatureList | None) -> str | None:
            return None if sl is None else base64.b64encode(sl.to_bytes()).decode("ascii")

        return json.dumps(
            {
                "version": 1,
                "pk": enc(self.pk_slot),
                "kek": enc(self.kek_slot),
                "db": enc(self.db_slot),
                "dbx": enc(self.dbx_slot),
                "timestamps": list(self.timestamps),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> UefiKeyStore:
        doc = json.loads(text)

        def dec(value: str | None) -> SignatureList | None:
            return None if value is None else SignatureList.from_bytes(base64.b64decode(value))

        return cls(
            pk_slot=dec(doc["pk"]),
            kek_slot=dec(doc["kek"]),
            db_slot=dec(doc["db"]),
            dbx_slot=dec(doc["dbx"]),
            timestamps=tuple(doc["timestamps"]),
        )


_SLOT_ROLES = {
    Role.PK: {Role.PK},
    Role.KEK: {Role.KEK},
    Role.DB: {Role.DB},
    Role.DBX: set(Role),
}


def _signed_by_any(item: SignedSignatureList, certs: Iterable[Certificate]) -> bool:
    message = item.signed_message()
    for cert in certs:
        try:
            key = cert.public_key
        except ValidationError:
            continue
        if _codec.rsa_verify(key, item.authorizing_signature, message):
            return True
    return False


def enroll(store: UefiKeyStore, item: SignedSignatureList) -> UefiKeyStore:
    """Apply a signed list to ``store`` and return the new store.

    Raises ``EnrollmentError`` when the authorizing signature does not verify,
    the timestamp is older than the slot's last update, or the list content
    does not fit the slot.
    """
    slot = item.target_slot
    for entry in item.sig_list.certificates():
        if entry.role not in _SLOT_ROLES[slot]:
            raise EnrollmentError(f"{entry.role.value} certificate cannot go into {slot.value}")
    if slot in (Role.PK, Role.KEK) and item.sig_list.hashes():
        raise EnrollmentError(f"{slot.value} cannot hold hash entries")

    if store.setup_mode:
        if slot is not Role.PK:
            raise EnrollmentError(f"setup mode: enroll a PK before {slot.value}")
        if item.is_pk_removal:
            raise EnrollmentError("setup mode: no PK to remove")
        # A fresh PK must at least be self-consistent (signed by the key it carries).
        if not _signed_by_any(item, item.sig_list.certificates()):
            raise EnrollmentError("PK list is not signed by its own key")
        return store._with(Role.PK, item.sig_list, item.timestamp)

    authorizer = store.slot(item.authorizer_role)
    if authorizer is None or not _signed_by_any(item, authorizer.certificates()):
        raise EnrollmentError(
            f"{slot.value} update not signed by an enrolled {item.authorizer_role.value}"
        )
    if item.timestamp < store.timestamps[slot.code - 1]:
        raise EnrollmentError(f"{slot.value} update is older than the enrolled one")
    if item.is_pk_removal:
        return store._with(Role.PK, None, 0)
    return store._with(slot, item.sig_list, item.timestamp)


def check_allowed(store: UefiKeyStore, image: SignedBootImage) -> Verdict:
    """Decide whether firmware would execute ``image`` under ``store``."""
    if store.setup_mode:
        raise ValidationError("Secure Boot is not enforced while the store is in setup mode")
    if image.content_hash in store.dbx_slot.hashes():
        return Verdict.DENIED_FORBIDDEN
    checks = image.signature_checks()
    if not checks:
        return Verdict.DENIED_UNSIGNED
    db = {c.fingerprint for c in store.db_slot.certificates()}
    forbidden_keys = {c.public_der for c in store.dbx_slot.certificates()}
    valid = [cert for cert, ok in checks if ok and cert is not None]
    if any(cert.public_der in forbidden_keys for cert in valid):
        return Verdict.DENIED_FORBIDDEN
    if any(cert.fingerprint in db for cert in valid):
        return Verdict.ALLOWED
    return Verdict.DENIED_UNTRUSTED


def enrolled_store(bundle: dict[str, SignedSignatureList]) -> UefiKeyStore:
    """Enroll PK, KEK and DB from ``bundle`` into a fresh setup-mode store."""
    store = UefiKeyStore()
    for name in ("PK", "KEK", "DB"):
        store = enroll(store, bundle[name])
    return store


# -- on-disk layout -----------------------------------------------------------


def save_hierarchy(h: KeyHierarchy, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for role in (Role.PK, Role.KEK, Role.DB):
        pair = h.pair(role)
        key_path = directory / f"{role.value}.key"
        key_path.write_text(_codec.private_key_pem(pair.key))
        key_path.chmod(0o600)
        (directory / f"{role.value}.crt").write_text(pair.cert.to_armor())
    (directory / "myGUID.txt").write_text(f"{h.guid}\n")


def load_hierarchy(directory: Path) -> KeyHierarchy:
    pairs = []
    for role in (Role.PK, Role.KEK, Role.DB):
        cert = Certificate.from_armor((directory / f"{role.value}.crt").read_text())
        key = _codec.load_private_key((directory / f"{role.value}.key").read_text())
        pairs.append(KeyPair(cert, key))
    guid = uuid.UUID((directory / "myGUID.txt").read_text().strip())
    return KeyHierarchy(*pairs, guid=guid)


def save_bundle(bundle: dict[str, SignedSignatureList], directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, item in bundle.items():
        (directory / f"{name}.auth").write_bytes(item.to_bytes())
        (directory / f"{name}.esl").write_bytes(item.sig_list.to_bytes())
