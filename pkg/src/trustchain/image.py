"""Boot images with appended Secure Boot signatures, and Unified Kernel Images.

Signed image layout (``payload`` followed by zero or more signature blocks)::

    payload | block_1 | block_2 | ...
    block   = u32 len(cert) | cert | u16 len(sig) | sig | u32 len(body) | b"SIGB"

Block *i* signs ``payload ++ block_1 .. block_{i-1}``, so appending never
touches the payload and earlier signatures stay valid. Parsing walks the
trailers backwards from the end of the file.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from cryptography.hazmat.primitives.asymmetric import rsa

from . import _codec
from .anchors import Certificate, Role, UefiKeyStore, Verdict, check_allowed
from .errors import NotFoundError, RoleError, ValidationError

BLOCK_MAGIC = b"SIGB"
UKI_MAGIC = b"UKI1"


class ImageKind(str, enum.Enum):
    IPXE = "IpxeBinary"
    KERNEL = "Kernel"
    INITRAMFS = "Initramfs"
    UKI = "Uki"
    STUB = "Stub"


@dataclass(frozen=True)
class BootImage:
    payload: bytes
    kind: ImageKind = ImageKind.KERNEL

    def __post_init__(self) -> None:
        if not self.payload:
            raise ValidationError("boot image payload must not be empty")


@dataclass(frozen=True)
class SignatureBlock:
    signer_cert: Certificate | None
    signature: bytes
    # Verbatim bytes for blocks whose body did not parse; re-serialized as-is.
    raw: bytes | None = field(default=None, repr=False)

    def to_bytes(self) -> bytes:
        if self.raw is not None:
            return self.raw
        assert self.signer_cert is not None
        body = _codec.pack_bytes(self.signer_cert.to_bytes()) + _codec.pack_bytes(
            self.signature, 2
        )
        return body + len(body).to_bytes(4, "big") + BLOCK_MAGIC


@dataclass(frozen=True)
class SignedBootImage:
    image: BootImage
    signatures: tuple[SignatureBlock, ...] = ()

    @property
    def content_hash(self) -> bytes:
        return _codec.sha256(self.image.payload)

    def to_bytes(self) -> bytes:
        return self.image.payload + b"".join(b.to_bytes() for b in self.signatures)

    def signature_checks(self) -> list[tuple[Certificate | None, bool]]:
        """(signer, valid) for every appended block, in order."""
        results = []
        prefix = self.image.payload
        for block in self.signatures:
            ok = False
            if block.signer_cert is not None:
                try:
                    key = block.signer_cert.public_key
                except ValidationError:
                    key = None
                ok = key is not None and _codec.rsa_verify(key, block.signature, prefix)
            results.append((block.signer_cert, ok))
            prefix += block.to_bytes()
        return results

    @classmethod
    def from_bytes(cls, data: bytes, kind: ImageKind = ImageKind.KERNEL) -> SignedBootImage:
        """Split ``data`` into payload and signature blocks.

        Never raises on corrupt signature areas: an unreadable trailer ends the
        block list and an unreadable body becomes an opaque, invalid block.
        """
        blocks: list[SignatureBlock] = []
        end = len(data)
        while end >= 8 and data[end - 4 : end] == BLOCK_MAGIC:
            body_len = int.from_bytes(data[end - 8 : end - 4], "big")
            start = end - 8 - body_len
            if start < 1:
                break
            blocks.append(_parse_block(data[start:end], data[start : end - 8]))
            end = start
        blocks.reverse()
        return cls(BootImage(data[:end], kind), tuple(blocks))


def _parse_block(raw: bytes, body: bytes) -> SignatureBlock:
    try:
        reader = _codec.Reader(body)
        cert = Certificate.from_bytes(reader.lbytes())
        sig = reader.lbytes(2)
        reader.expect_end()
    except ValidationError:
        return SignatureBlock(None, b"", raw=raw)
    block = SignatureBlock(cert, sig)
    return block if block.to_bytes() == raw else SignatureBlock(None, b"", raw=raw)


def sign_image(
    img: BootImage | SignedBootImage, db_key: rsa.RSAPrivateKey, db_cert: Certificate
) -> SignedBootImage:
    """Append a signature block made with a signature-database key."""
    if db_cert.role is not Role.DB:
        raise RoleError(f"images are signed with a DB certificate, not {db_cert.role.value}")
    if _codec.public_der(db_key.public_key()) != db_cert.public_der:
        raise ValidationError("signing key does not match the certificate")
    signed = img if isinstance(img, SignedBootImage) else SignedBootImage(img)
    signature = _codec.rsa_sign(db_key, signed.to_bytes())
    return SignedBootImage(signed.image, signed.signatures + (SignatureBlock(db_cert, signature),))


def verify_image(s: SignedBootImage, store: UefiKeyStore) -> Verdict:
    return check_allowed(store, s)


def verify_image_bytes(
    data: bytes, store: UefiKeyStore, kind: ImageKind = ImageKind.KERNEL
) -> Verdict:
    return check_allowed(store, SignedBootImage.from_bytes(data, kind))


# -- OS release metadata ------------------------------------------------------

_SAFE_VALUE = re.compile(r"[A-Za-z0-9_.,:/+@=-]+")
_KEY = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_ESCAPES = {'"': '"', "\\": "\\", "$": "$", "`": "`"}


@dataclass(frozen=True)
class OsRelease:
    """Ordered ``KEY=value`` pairs, remembering which values were quoted."""

    entries: tuple[tuple[str, str, bool], ...]

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> OsRelease:
        return cls(
            tuple((k, v, not _SAFE_VALUE.fullmatch(v)) for k, v in values.items())
        )

    @classmethod
    def parse(cls, text: str) -> OsRelease:
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep or not _KEY.fullmatch(key):
                raise ValidationError(f"line {lineno}: expected KEY=value")
            quoted = len(value) >= 2 and value[0] == value[-1] == '"'
            entries.append((key, _unquote(value[1:-1]) if quoted else value, quoted))
        return cls(tuple(entries))

    def serialize(self) -> str:
        lines = []
        for key, value, quoted in self.entries:
            if quoted:
                value = '"' + "".join("\\" + c if c in _ESCAPES else c for c in value) + '"'
            lines.append(f"{key}={value}\n")
        return "".join(lines)

    def get(self, key: str, default: str | None = None) -> str | None:
        for k, v, _ in self.entries:
            if k == key:
                return v
        return default

    def as_dict(self) -> dict[str, str]:
        return {k: v for k, v, _ in self.entries}


def _unquote(value: str) -> str:
    out, i = [], 0
    while i < len(value):
        c = value[i]
        if c == "\\" and i + 1 < len(value) and value[i + 1] in _ESCAPES:
            out.append(value[i + 1])
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


# -- Unified Kernel Image container -------------------------------------------

SECTION_ORDER = (".osrel", ".cmdline", ".linux", ".initrd")
DEFAULT_VMAS = {".osrel": 0x20000, ".cmdline": 0x30000, ".linux": 0x40000, ".initrd": 0x3000000}
_NAME_FIELD = 8
_ENTRY_SIZE = _NAME_FIELD + 8 + 4 + 4


@dataclass(frozen=True)
class UkiSection:
    name: str
    vma: int
    data: bytes


@dataclass(frozen=True)
class UkiContainer:
    """A stub plus named sections; serialized as ``UKI1`` (see docs/formats.md)."""

    sections: tuple[UkiSection, ...]
    stub: bytes = b""

    def __post_init__(self) -> None:
        names = [s.name for s in self.sections]
        unknown = set(names) - set(SECTION_ORDER)
        if unknown:
            raise ValidationError(f"unknown UKI sections: {sorted(unknown)}")
        if len(set(names)) != len(names):
            raise ValidationError("duplicate UKI section")
        if ".linux" not in names:
            raise ValidationError("a UKI needs a .linux section")
        if names != sorted(names, key=SECTION_ORDER.index):
            raise ValidationError("UKI sections out of order")
        vmas = [s.vma for s in self.sections]
        if any(b <= a for a, b in zip(vmas, vmas[1:])):
            raise ValidationError("UKI section addresses must strictly increase")

    def section_names(self) -> list[str]:
        return [s.name for s in self.sections]

    def serialize(self) -> bytes:
        header = UKI_MAGIC + len(self.sections).to_bytes(2, "big") + len(self.stub).to_bytes(4, "big")
        offset = len(header) + _ENTRY_SIZE * len(self.sections) + len(self.stub)
        table = []
        for s in self.sections:
            table.append(
                s.name.encode("ascii").ljust(_NAME_FIELD, b"\0")
                + s.vma.to_bytes(8, "big")
                + offset.to_bytes(4, "big")
                + len(s.data).to_bytes(4, "big")
            )
            offset += len(s.data)
        return header + b"".join(table) + self.stub + b"".join(s.data for s in self.sections)

    @classmethod
    def parse(cls, data: bytes) -> UkiContainer:
        reader = _codec.Reader(data)
        if reader.read(4) != UKI_MAGIC:
            raise ValidationError("not a UKI container")
        count = reader.u16()
        stub_len = reader.u32()
        expected = 4 + 2 + 4 + _ENTRY_SIZE * count + stub_len
        table = []
        for _ in range(count):
            raw_name = reader.read(_NAME_FIELD)
            try:
                name = raw_name.rstrip(b"\0").decode("ascii")
            except UnicodeDecodeError:
                raise ValidationError("section name is not ASCII") from None
            vma, offset, length = reader.u64(), reader.u32(), reader.u32()
            if offset != expected:
                raise ValidationError(f"section {name} is not laid out contiguously")
            table.append((name, vma, length))
            expected += length
        stub = reader.read(stub_len)
        sections = tuple(UkiSection(name, vma, reader.read(length)) for name, vma, length in table)
        reader.expect_end()
        return cls(sections, stub)

    def describe(self) -> list[dict[str, object]]:
        return [{"name": s.name, "vma": f"{s.vma:#x}", "size": len(s.data)} for s in self.sections]


def build_uki(
    stub: bytes,
    osrel: OsRelease | None,
    cmdline: str | None,
    kernel: bytes,
    initrd: bytes | None = None,
) -> UkiContainer:
    """Assemble a UKI with the fixed section addresses used by the objcopy flow."""
    if not kernel:
        raise ValidationError("kernel must not be empty")
    parts: list[tuple[str, bytes]] = []
    if osrel is not None:
        parts.append((".osrel", osrel.serialize().encode("utf-8")))
    if cmdline is not None:
        parts.append((".cmdline", cmdline.encode("utf-8")))
    parts.append((".linux", kernel))
    if initrd is not None:
        parts.append((".initrd", initrd))
    return UkiContainer(tuple(UkiSection(n, DEFAULT_VMAS[n], d) for n, d in parts), stub)


def uki_from_sections(stub: bytes, sections: Iterable[tuple[str, bytes]]) -> UkiContainer:
    """Build from explicit ``(name, data)`` pairs; rejects duplicates and unknown names."""
    items = list(sections)
    for name, _ in items:
        if name not in DEFAULT_VMAS:
            raise ValidationError(f"unknown UKI section {name!r}")
    items.sort(key=lambda item: SECTION_ORDER.index(item[0]))
    return UkiContainer(tuple(UkiSection(n, DEFAULT_VMAS[n], d) for n, d in items), stub)


def extract_section(uki: UkiContainer, name: str) -> bytes:
    for section in uki.sections:
        if section.name == name:
            return section.data
    raise NotFoundError(f"section {name!r} not present")


def effective_cmdline(uki: UkiContainer, external: str) -> str:
    """The kernel command line actually used: an embedded one always wins."""
    try:
        return extract_section(uki, ".cmdline").decode("utf-8")
    except NotFoundError:
        return external
