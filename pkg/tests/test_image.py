from __future__ import annotations

import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustchain.anchors import Verdict, generate_hierarchy
from trustchain.errors import NotFoundError, RoleError, ValidationError
from trustchain.image import (
    BootImage,
    ImageKind,
    OsRelease,
    SignedBootImage,
    UkiContainer,
    UkiSection,
    build_uki,
    effective_cmdline,
    extract_section,
    sign_image,
    uki_from_sections,
    verify_image,
    verify_image_bytes,
)
from trustchain.samples import BOOKWORM_OS_RELEASE, SLX_KERNEL_CMDLINE

STUB = b"MZstub" * 50
KERNEL = bytes(range(256)) * 40
INITRD = b"070701" + bytes(3000)


def _oracle_sections(blob: bytes) -> list[tuple[str, int, bytes]]:
    """Independent reader for the UKI1 layout."""
    magic, count, stub_len = struct.unpack_from(">4sHI", blob, 0)
    assert magic == b"UKI1"
    out = []
    for i in range(count):
        name, vma, offset, length = struct.unpack_from(">8sQII", blob, 10 + 24 * i)
        out.append((name.rstrip(b"\0").decode(), vma, blob[offset : offset + length]))
    return out


@pytest.fixture(scope="module")
def osrel():
    return OsRelease.parse(BOOKWORM_OS_RELEASE)


@pytest.fixture(scope="module")
def uki(osrel):
    return build_uki(STUB, osrel, SLX_KERNEL_CMDLINE, KERNEL, INITRD)


class TestSignImage:
    def test_append_arithmetic(self, hierarchy):
        payload = bytes(1024)
        signed = sign_image(BootImage(payload), hierarchy.db.key, hierarchy.db.cert)
        raw = signed.to_bytes()
        assert raw[:1024] == payload
        assert len(raw) == 1024 + len(signed.signatures[0].to_bytes())
        assert raw.endswith(b"SIGB")

    def test_allowed(self, hierarchy, store):
        signed = sign_image(BootImage(KERNEL), hierarchy.db.key, hierarchy.db.cert)
        assert verify_image(signed, store) is Verdict.ALLOWED
        assert verify_image_bytes(signed.to_bytes(), store) is Verdict.ALLOWED

    def test_kek_cert_is_a_role_error(self, hierarchy):
        with pytest.raises(RoleError):
            sign_image(BootImage(KERNEL), hierarchy.kek.key, hierarchy.kek.cert)

    def test_mismatched_key(self, hierarchy):
        with pytest.raises(ValidationError):
            sign_image(BootImage(KERNEL), hierarchy.kek.key, hierarchy.db.cert)

    def test_empty_payload(self):
        with pytest.raises(ValidationError):
            BootImage(b"")

    def test_payload_flip_untrusted(self, hierarchy, store):
        raw = bytearray(sign_image(BootImage(KERNEL), hierarchy.db.key, hierarchy.db.cert).to_bytes())
        raw[10] ^= 0x80
        assert verify_image_bytes(bytes(raw), store) is Verdict.DENIED_UNTRUSTED

    def test_second_signature_by_enrolled_key_suffices(self, hierarchy, store):
        other = generate_hierarchy("Vendor")
        first = sign_image(BootImage(KERNEL), other.db.key, other.db.cert)
        both = sign_image(first, hierarchy.db.key, hierarchy.db.cert)
        assert len(both.signatures) == 2
        assert both.image.payload == KERNEL
        assert verify_image(first, store) is Verdict.DENIED_UNTRUSTED
        assert verify_image_bytes(both.to_bytes(), store) is Verdict.ALLOWED

    def test_each_signature_covers_preceding_blocks(self, hierarchy):
        one = sign_image(BootImage(KERNEL), hierarchy.db.key, hierarchy.db.cert)
        two = sign_image(one, hierarchy.db.key, hierarchy.db.cert)
        parsed = SignedBootImage.from_bytes(two.to_bytes())
        assert [ok for _, ok in parsed.signature_checks()] == [True, True]
        assert parsed.signatures[0].signature != parsed.signatures[1].signature

    def test_unsigned_round_trip(self):
        parsed = SignedBootImage.from_bytes(KERNEL)
        assert parsed.signatures == ()
        assert parsed.image.payload == KERNEL


class TestOsRelease:
    def test_sample_round_trips_byte_for_byte(self):
        assert OsRelease.parse(BOOKWORM_OS_RELEASE).serialize() == BOOKWORM_OS_RELEASE

    def test_values(self, osrel):
        assert osrel.get("PRETTY_NAME") == "Debian GNU/Linux 12 (bookworm)"
        assert osrel.get("VERSION_ID") == "12"
        assert osrel.get("ID") == "debian"

    def test_spaces_are_quoted(self):
        text = OsRelease.from_mapping({"NAME": "Debian GNU/Linux", "ID": "debian"}).serialize()
        assert text == 'NAME="Debian GNU/Linux"\nID=debian\n'

    @given(
        st.dictionaries(
            st.from_regex(r"[A-Z][A-Z0-9_]{0,10}", fullmatch=True),
            st.text(alphabet=st.characters(blacklist_categories=("Cc", "Cs")), max_size=30),
            max_size=8,
        )
    )
    def test_round_trip_property(self, values):
        rel = OsRelease.from_mapping(values)
        assert OsRelease.parse(rel.serialize()) == rel
        assert OsRelease.parse(rel.serialize()).as_dict() == values


class TestBuildUki:
    def test_vmas(self, uki):
        assert [(s.name, s.vma) for s in uki.sections] == [
            (".osrel", 0x20000),
            (".cmdline", 0x30000),
            (".linux", 0x40000),
            (".initrd", 0x3000000),
        ]

    def test_layout_matches_independent_reader(self, uki, osrel):
        assert _oracle_sections(uki.serialize()) == [
            (".osrel", 0x20000, osrel.serialize().encode()),
            (".cmdline", 0x30000, SLX_KERNEL_CMDLINE.encode()),
            (".linux", 0x40000, KERNEL),
            (".initrd", 0x3000000, INITRD),
        ]

    def test_without_initrd(self, osrel):
        container = build_uki(STUB, osrel, "quiet", KERNEL)
        assert container.section_names() == [".osrel", ".cmdline", ".linux"]
        with pytest.raises(NotFoundError):
            extract_section(container, ".initrd")

    def test_extract(self, uki, osrel):
        assert extract_section(uki, ".linux") == KERNEL
        assert extract_section(uki, ".osrel") == osrel.serialize().encode()
        assert extract_section(build_uki(STUB, None, "quiet", KERNEL), ".cmdline") == b"quiet"

    def test_empty_kernel(self, osrel):
        with pytest.raises(ValidationError):
            build_uki(STUB, osrel, "quiet", b"")

    def test_duplicate_section(self):
        with pytest.raises(ValidationError):
            uki_from_sections(STUB, [(".linux", b"a"), (".linux", b"b")])
        with pytest.raises(ValidationError):
            UkiContainer((UkiSection(".linux", 0x40000, b"a"), UkiSection(".linux", 0x50000, b"b")))

    def test_missing_linux(self):
        with pytest.raises(ValidationError):
            UkiContainer((UkiSection(".osrel", 0x20000, b"ID=x\n"),))

    def test_serialization_round_trip(self, uki):
        blob = uki.serialize()
        assert UkiContainer.parse(blob) == uki
        assert UkiContainer.parse(blob).serialize() == blob

    @settings(max_examples=50)
    @given(
        st.binary(max_size=64),
        st.one_of(st.none(), st.text(max_size=40)),
        st.binary(min_size=1, max_size=200),
        st.one_of(st.none(), st.binary(max_size=200)),
    )
    def test_round_trip_property(self, stub, cmdline, kernel, initrd):
        container = build_uki(stub, None, cmdline, kernel, initrd)
        blob = container.serialize()
        assert UkiContainer.parse(blob).serialize() == blob

    def test_signed_uki(self, hierarchy, store, uki):
        signed = sign_image(BootImage(uki.serialize(), ImageKind.UKI), hierarchy.db.key, hierarchy.db.cert)
        assert verify_image(signed, store) is Verdict.ALLOWED
        tampered = uki_from_sections(STUB, [(".cmdline", b"init=/bin/sh"), (".linux", KERNEL), (".initrd", INITRD)])
        forged = SignedBootImage(BootImage(tampered.serialize(), ImageKind.UKI), signed.signatures)
        assert verify_image(forged, store) is Verdict.DENIED_UNTRUSTED


class TestEffectiveCmdline:
    def test_embedded_wins(self, uki):
        assert effective_cmdline(uki, "init=/bin/sh") == SLX_KERNEL_CMDLINE

    def test_external_without_cmdline(self):
        assert effective_cmdline(build_uki(STUB, None, None, KERNEL), "quiet") == "quiet"

    def test_empty_embedded_still_wins(self):
        assert effective_cmdline(build_uki(STUB, None, "", KERNEL), "x") == ""

    def test_cmdline_is_opaque(self, uki):
        assert extract_section(uki, ".cmdline").decode() == SLX_KERNEL_CMDLINE
