from __future__ import annotations

import hashlib
from functools import reduce

import pytest
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import padding
from hypothesis import given, settings
from hypothesis import strategies as st

from trustchain import _codec
from trustchain.errors import DecryptionError, NotFoundError, UnsealError, ValidationError
from trustchain.tpm import (
    PcrPolicy,
    Quote,
    SealedBlob,
    TpmState,
    UnsupportedAlgorithm,
    rsa_encrypt,
    verify_quote,
)

from conftest import HANDLE

ZERO = bytes(32)


def fold(seq: list[bytes]) -> bytes:
    return reduce(lambda acc, m: hashlib.sha256(acc + m).digest(), seq, ZERO)


def _private_exponent(tpm: TpmState) -> bytes:
    d = tpm._key(HANDLE).private_numbers().d
    return d.to_bytes((d.bit_length() + 7) // 8, "big")


class TestKeys:
    def test_rsa2048(self):
        tpm = TpmState()
        token = tpm.create_primary("rsa2048")
        assert tpm.transient[token].key_size == 2048

    def test_rsa1024_unsupported(self):
        with pytest.raises(UnsupportedAlgorithm):
            TpmState().create_primary("rsa1024")

    def test_distinct_keys(self):
        tpm = TpmState()
        a, b = tpm.create_primary(), tpm.create_primary()
        assert tpm.transient[a].public_key().public_numbers() != tpm.transient[b].public_key().public_numbers()

    @pytest.mark.parametrize("handle", [0x80FFFFFF, 0x81000100])
    def test_handle_out_of_range(self, handle):
        tpm = TpmState()
        with pytest.raises(ValidationError):
            tpm.evict_control(tpm.create_primary(), handle)

    @pytest.mark.parametrize("handle", [0x81000000, 0x810000FF])
    def test_handle_bounds_inclusive(self, handle):
        tpm = TpmState()
        tpm.evict_control(tpm.create_primary(), handle)
        assert handle in tpm.persistent

    def test_occupied_handle(self, tpm_with_key):
        tpm = tpm_with_key.clone()
        with pytest.raises(ValidationError):
            tpm.evict_control(tpm.create_primary(), HANDLE)

    def test_unknown_token(self):
        with pytest.raises(NotFoundError):
            TpmState().evict_control("ctx-nope", HANDLE)

    def test_state_round_trip(self, tpm_with_key, tmp_path):
        path = tmp_path / "tpm.bin"
        tpm_with_key.save(path)
        assert path.read_bytes()[:4] == b"TPM1"
        assert path.stat().st_mode & 0o077 == 0
        loaded = TpmState.load(path)
        assert loaded.read_public(HANDLE) == tpm_with_key.read_public(HANDLE)
        assert loaded.pcrs == tpm_with_key.pcrs

    def test_read_public(self, tpm_with_key):
        pem = tpm_with_key.read_public(HANDLE)
        assert pem.startswith("-----BEGIN PUBLIC KEY-----")
        assert "PRIVATE" not in pem
        assert _codec.load_public_pem(pem).public_numbers() == tpm_with_key.public_key(HANDLE).public_numbers()

    def test_unknown_handle(self, tpm_with_key):
        with pytest.raises(NotFoundError):
            tpm_with_key.read_public(0x81000002)

    def test_no_private_exponent_in_outputs(self, tpm_with_key):
        tpm = tpm_with_key.clone()
        d = _private_exponent(tpm)
        outputs = [
            tpm.to_bytes(),
            tpm.read_public(HANDLE).encode(),
            tpm.rsa_encrypt(HANDLE, b"secret\n"),
            tpm.quote([4], b"n").to_bytes(),
            tpm.seal(b"s", PcrPolicy.of({4: tpm.pcr_read(4)})).to_bytes(),
        ]
        for window in (d[:16], d[-16:], d[100:116]):
            assert not any(window in blob for blob in outputs)

    def test_corrupt_state(self, tpm_with_key):
        raw = bytearray(tpm_with_key.to_bytes())
        raw[-40] ^= 1
        with pytest.raises(ValidationError):
            TpmState.from_bytes(bytes(raw))


class TestEncryption:
    def test_ciphertext_length(self, tpm_with_key):
        assert len(tpm_with_key.rsa_encrypt(HANDLE, bytes(32))) == 256

    def test_oaep_bound(self, tpm_with_key):
        tpm_with_key.rsa_encrypt(HANDLE, bytes(190))
        with pytest.raises(ValidationError):
            tpm_with_key.rsa_encrypt(HANDLE, bytes(191))

    def test_oaep_bound_matches_library(self, tpm_with_key):
        key = tpm_with_key.public_key(HANDLE)
        oaep = padding.OAEP(mgf=padding.MGF1(hashes.SHA256()), algorithm=hashes.SHA256(), label=None)
        largest = 0
        for n in range(180, 200):
            try:
                key.encrypt(bytes(n), oaep)
            except ValueError:
                break
            largest = n
        assert largest == 190

    def test_both_paths(self, tpm_with_key):
        via_handle = tpm_with_key.rsa_encrypt(HANDLE, b"secret\n")
        via_pem = rsa_encrypt(tpm_with_key.read_public(HANDLE), b"secret\n")
        assert via_handle != via_pem
        assert tpm_with_key.rsa_decrypt(HANDLE, via_handle) == b"secret\n"
        assert tpm_with_key.rsa_decrypt(HANDLE, via_pem) == b"secret\n"

    def test_wrong_key(self, tpm_with_key):
        tpm = tpm_with_key.clone()
        tpm.evict_control(tpm.create_primary(), 0x81000002)
        with pytest.raises(DecryptionError):
            tpm.rsa_decrypt(0x81000002, tpm.rsa_encrypt(HANDLE, b"secret"))

    def test_flipped_ciphertext(self, tpm_with_key):
        ct = bytearray(tpm_with_key.rsa_encrypt(HANDLE, b"secret"))
        ct[17] ^= 4
        with pytest.raises(DecryptionError):
            tpm_with_key.rsa_decrypt(HANDLE, bytes(ct))

    @settings(max_examples=30, deadline=None)
    @given(st.binary(max_size=190))
    def test_round_trip_property(self, tpm_with_key, plaintext):
        assert tpm_with_key.rsa_decrypt(HANDLE, tpm_with_key.rsa_encrypt(HANDLE, plaintext)) == plaintext


class TestPcrs:
    def test_reset_value(self):
        assert TpmState().pcr_read(4) == ZERO

    def test_single_extend(self):
        m = hashlib.sha256(b"kernel").digest()
        tpm = TpmState()
        assert tpm.pcr_extend(4, m) == hashlib.sha256(ZERO + m).digest()

    def test_order_matters(self):
        m1, m2 = hashlib.sha256(b"1").digest(), hashlib.sha256(b"2").digest()
        a, b = TpmState(), TpmState()
        a.pcr_extend(4, m1), a.pcr_extend(4, m2)
        b.pcr_extend(4, m2), b.pcr_extend(4, m1)
        assert a.pcr_read(4) == fold([m1, m2]) != b.pcr_read(4)

    @pytest.mark.parametrize("index", [-1, 24])
    def test_index_range(self, index):
        with pytest.raises(ValidationError):
            TpmState().pcr_extend(index, ZERO)

    def test_measurement_must_be_digest(self):
        with pytest.raises(ValidationError):
            TpmState().pcr_extend(4, b"short")

    @settings(max_examples=200)
    @given(st.lists(st.binary(min_size=32, max_size=32), max_size=8), st.integers(0, 23))
    def test_fold_property(self, seq, index):
        tpm = TpmState(seed=bytes(32))
        for m in seq:
            tpm.pcr_extend(index, m)
        assert tpm.pcr_read(index) == fold(seq)
        assert all(tpm.pcr_read(i) == ZERO for i in range(24) if i != index)


class TestSealing:
    def _sealed(self, selection=(4, 8, 9)):
        tpm = TpmState()
        for i in selection:
            tpm.pcr_extend(i, hashlib.sha256(bytes([i])).digest())
        return tpm, tpm.seal(b"luks-key", PcrPolicy.of(tpm.pcr_values(selection)))

    def test_round_trip(self):
        tpm, blob = self._sealed()
        assert tpm.unseal(SealedBlob.from_bytes(blob.to_bytes())) == b"luks-key"

    def test_extra_extend_breaks_unseal(self):
        tpm, blob = self._sealed()
        tpm.pcr_extend(8, ZERO)
        with pytest.raises(UnsealError):
            tpm.unseal(blob)

    def test_unselected_pcr_is_ignored(self):
        tpm, blob = self._sealed((7,))
        tpm.pcr_extend(8, ZERO)
        assert tpm.unseal(blob) == b"luks-key"

    def test_empty_secret(self):
        tpm = TpmState()
        assert tpm.unseal(tpm.seal(b"", PcrPolicy.of({4: ZERO}))) == b""

    def test_size_limit(self):
        tpm = TpmState()
        tpm.seal(bytes(128), PcrPolicy.of({4: ZERO}))
        with pytest.raises(ValidationError):
            tpm.seal(bytes(129), PcrPolicy.of({4: ZERO}))

    def test_tampered_tag(self):
        tpm, blob = self._sealed()
        raw = bytearray(blob.to_bytes())
        raw[-1] ^= 1
        with pytest.raises(UnsealError):
            tpm.unseal(SealedBlob.from_bytes(bytes(raw)))

    def test_other_tpm_cannot_unseal(self):
        tpm, blob = self._sealed()
        other = TpmState()
        other.pcrs = list(tpm.pcrs)
        with pytest.raises(UnsealError):
            other.unseal(blob)

    def test_policy_validation(self):
        with pytest.raises(ValidationError):
            PcrPolicy(())
        with pytest.raises(ValidationError):
            PcrPolicy(((4, ZERO), (4, ZERO)))
        with pytest.raises(ValidationError):
            PcrPolicy(((4, b"x"),))

    @settings(max_examples=100, deadline=None)
    @given(
        st.sets(st.integers(0, 23), min_size=1, max_size=4),
        st.integers(0, 23),
        st.integers(0, 255),
        st.booleans(),
    )
    def test_sensitivity_property(self, selection, target, bit, perturb):
        tpm = TpmState(seed=bytes(32))
        blob = tpm.seal(b"k", PcrPolicy.of(tpm.pcr_values(selection)))
        if perturb:
            value = bytearray(tpm.pcrs[target])
            value[bit // 8] ^= 1 << (bit % 8)
            tpm.pcrs[target] = bytes(value)
        if perturb and target in selection:
            with pytest.raises(UnsealError):
                tpm.unseal(blob)
        else:
            assert tpm.unseal(blob) == b"k"


class TestQuote:
    def _oracle_digest(self, values: dict[int, bytes]) -> bytes:
        h = hashlib.sha256(b"PCRS")
        for i in sorted(values):
            h.update(bytes([i]) + values[i])
        return h.digest()

    def test_verifies(self, tpm_with_key):
        tpm = tpm_with_key.clone()
        tpm.pcr_extend(4, hashlib.sha256(b"k").digest())
        quote = tpm.quote({4, 8}, b"nonce-1")
        values = {i: tpm.pcr_read(i) for i in (4, 8)}
        assert quote.pcr_digest == self._oracle_digest(values)
        assert verify_quote(Quote.from_bytes(quote.to_bytes()), tpm.quote_public(), b"nonce-1", values)

    def test_stale_quote_new_nonce(self, tpm_with_key):
        tpm = tpm_with_key.clone()
        quote = tpm.quote({4}, b"old")
        assert not verify_quote(quote, tpm.quote_public(), b"new")

    def test_changed_pcrs(self, tpm_with_key):
        tpm = tpm_with_key.clone()
        quote = tpm.quote({4}, b"n")
        tpm.pcr_extend(4, ZERO)
        assert not verify_quote(quote, tpm.quote_public(), b"n", tpm.pcr_values([4]))

    def test_forged_signature(self, tpm_with_key):
        tpm = tpm_with_key.clone()
        quote = tpm.quote({4}, b"n")
        forged = Quote(quote.selection, self._oracle_digest({4: b"\x01" * 32}), b"n", quote.signature)
        assert not verify_quote(forged, tpm.quote_public(), b"n")

    def test_quote_key_survives_state_round_trip(self, tpm_with_key):
        tpm = tpm_with_key.clone()
        quote = tpm.quote({0}, b"n")
        assert verify_quote(quote, TpmState.from_bytes(tpm.to_bytes()).quote_public(), b"n")
