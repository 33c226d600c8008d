from __future__ import annotations

import hashlib
import time

import pytest
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import padding
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from trustchain.anchors import (
    Certificate,
    Role,
    SignatureList,
    SignedSignatureList,
    UefiKeyStore,
    Verdict,
    build_enrollment_bundle,
    check_allowed,
    enroll,
    enrolled_store,
    generate_hierarchy,
    load_hierarchy,
    save_bundle,
    save_hierarchy,
    sign_signature_list,
)
from trustchain.errors import EnrollmentError, ValidationError
from trustchain.image import BootImage, SignedBootImage, sign_image


def _oracle_verify(cert: Certificate, signature: bytes, message: bytes) -> bool:
    try:
        cert.public_key.verify(signature, message, padding.PKCS1v15(), hashes.SHA256())
    except Exception:
        return False
    return True


class TestGenerateHierarchy:
    def test_subjects_follow_common_name(self, hierarchy):
        assert [hierarchy.pk.cert.subject_cn, hierarchy.kek.cert.subject_cn, hierarchy.db.cert.subject_cn] == [
            "Lab PK",
            "Lab KEK",
            "Lab DB",
        ]

    def test_validity_is_ten_years(self, hierarchy):
        assert {p.cert.validity_days for p in (hierarchy.pk, hierarchy.kek, hierarchy.db)} == {3650}

    def test_rsa_2048_and_self_signed(self, hierarchy):
        for pair in (hierarchy.pk, hierarchy.kek, hierarchy.db):
            assert pair.key.key_size == 2048
            assert pair.cert.verify_self()
            assert _oracle_verify(pair.cert, pair.cert.self_signature, pair.cert.tbs())

    @pytest.mark.parametrize("name", ["", "   ", "bad\x00name"])
    def test_rejects_empty_or_unprintable(self, name):
        with pytest.raises(ValidationError):
            generate_hierarchy(name)

    def test_certificate_requires_role_suffix(self, hierarchy):
        with pytest.raises(ValidationError):
            Certificate.issue("Lab Root", Role.PK, hierarchy.pk.key)

    def test_armor_round_trip(self, hierarchy):
        cert = hierarchy.kek.cert
        text = cert.to_armor()
        assert text.startswith("-----BEGIN SECURE BOOT CERTIFICATE-----")
        assert Certificate.from_armor(text) == cert

    def test_disk_layout(self, hierarchy, tmp_path):
        save_hierarchy(hierarchy, tmp_path)
        names = {p.name for p in tmp_path.iterdir()}
        assert {"PK.key", "PK.crt", "KEK.key", "KEK.crt", "DB.key", "DB.crt", "myGUID.txt"} <= names
        assert (tmp_path / "DB.key").stat().st_mode & 0o077 == 0
        loaded = load_hierarchy(tmp_path)
        assert loaded.guid == hierarchy.guid
        assert loaded.db.cert == hierarchy.db.cert


class TestBundle:
    def test_four_lists(self, bundle):
        assert sorted(bundle) == ["DB", "KEK", "PK", "noPK"]

    def test_no_pk_is_empty(self, bundle):
        assert bundle["noPK"].sig_list.entries == ()
        assert bundle["noPK"].target_slot is Role.PK

    def test_authorizers(self, hierarchy, bundle):
        signer = {"PK": hierarchy.pk, "noPK": hierarchy.pk, "KEK": hierarchy.pk, "DB": hierarchy.kek}
        for name, item in bundle.items():
            assert _oracle_verify(signer[name].cert, item.authorizing_signature, item.signed_message()), name

    def test_shared_guid(self, hierarchy, bundle):
        assert {item.sig_list.owner_guid for item in bundle.values()} == {hierarchy.guid}

    def test_timestamps_strictly_increase_across_regenerations(self, hierarchy):
        first = build_enrollment_bundle(hierarchy)
        second = build_enrollment_bundle(hierarchy)
        assert max(i.timestamp for i in first.values()) < min(i.timestamp for i in second.values())

    def test_auth_header_layout(self, hierarchy, bundle, tmp_path):
        save_bundle(bundle, tmp_path)
        raw = (tmp_path / "KEK.auth").read_bytes()
        assert raw[:4] == b"SSL1"
        assert raw[4] == 2
        assert int.from_bytes(raw[5:13], "big") == bundle["KEK"].timestamp
        assert raw[13:29] == hierarchy.guid.bytes
        assert SignedSignatureList.from_bytes(raw) == bundle["KEK"]


class TestEnroll:
    def test_setup_mode_accepts_pk(self, bundle):
        store = enroll(UefiKeyStore(), bundle["PK"])
        assert not store.setup_mode

    def test_chain_order(self, bundle):
        store = enrolled_store(bundle)
        assert store.db_slot.certificates()[0].role is Role.DB

    def test_db_before_kek_fails(self, bundle):
        store = enroll(UefiKeyStore(), bundle["PK"])
        with pytest.raises(EnrollmentError):
            enroll(store, bundle["DB"])

    def test_setup_mode_rejects_kek(self, bundle):
        with pytest.raises(EnrollmentError):
            enroll(UefiKeyStore(), bundle["KEK"])

    def test_db_signed_by_foreign_kek(self, bundle):
        other = generate_hierarchy("Evil")
        forged = sign_signature_list(SignatureList(other.guid, (other.db.cert,)), Role.DB, other.kek.key, 2**40)
        store = enroll(enroll(UefiKeyStore(), bundle["PK"]), bundle["KEK"])
        with pytest.raises(EnrollmentError):
            enroll(store, forged)

    def test_no_pk_returns_to_setup_mode(self, bundle):
        store = enroll(enroll(UefiKeyStore(), bundle["PK"]), bundle["noPK"])
        assert store.setup_mode and store.pk_slot is None

    def test_idempotent(self, bundle, store):
        assert enroll(store, bundle["DB"]) == store

    def test_stale_timestamp_rejected(self, hierarchy, store):
        old = sign_signature_list(SignatureList(hierarchy.guid, (hierarchy.db.cert,)), Role.DB, hierarchy.kek.key, 1)
        with pytest.raises(EnrollmentError):
            enroll(store, old)

    def test_json_round_trip(self, store):
        assert UefiKeyStore.from_json(store.to_json()) == store

    @settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(data=st.data())
    def test_any_payload_flip_is_rejected(self, bundle, data):
        store = enroll(enroll(UefiKeyStore(), bundle["PK"]), bundle["KEK"])
        raw = bytearray(bundle["DB"].to_bytes())
        pos = data.draw(st.integers(0, len(raw) - 1))
        raw[pos] ^= data.draw(st.integers(1, 255))
        with pytest.raises((EnrollmentError, ValidationError)):
            enroll(store, SignedSignatureList.from_bytes(bytes(raw)))


class TestCheckAllowed:
    def _signed(self, hierarchy, payload=b"kernel" * 100):
        return sign_image(BootImage(payload), hierarchy.db.key, hierarchy.db.cert)

    def test_allowed(self, hierarchy, store):
        assert check_allowed(store, self._signed(hierarchy)) is Verdict.ALLOWED

    def test_unsigned(self, store):
        assert check_allowed(store, SignedBootImage(BootImage(b"x" * 64))) is Verdict.DENIED_UNSIGNED

    def test_untrusted_signer(self, store):
        other = generate_hierarchy("Other")
        assert check_allowed(store, self._signed(other)) is Verdict.DENIED_UNTRUSTED

    def test_hash_in_dbx(self, hierarchy, store):
        image = self._signed(hierarchy)
        digest = hashlib.sha256(image.image.payload).digest()
        dbx = sign_signature_list(SignatureList(hierarchy.guid, (digest,)), Role.DBX, hierarchy.kek.key, int(time.time()) + 10)
        assert check_allowed(enroll(store, dbx), image) is Verdict.DENIED_FORBIDDEN

    def test_signer_in_dbx(self, hierarchy, store):
        dbx = sign_signature_list(
            SignatureList(hierarchy.guid, (hierarchy.db.cert,)), Role.DBX, hierarchy.kek.key, int(time.time()) + 10
        )
        assert check_allowed(enroll(store, dbx), self._signed(hierarchy)) is Verdict.DENIED_FORBIDDEN

    def test_setup_mode_is_an_error(self, hierarchy):
        with pytest.raises(ValidationError):
            check_allowed(UefiKeyStore(), self._signed(hierarchy))
