"""End-to-end acceptance checks, one test per criterion.

Each test is tagged with ``@pytest.mark.criterion(n, title)``; the hook in
``conftest.py`` prints a PASS/FAIL line per criterion after the run.
"""

from __future__ import annotations

import hashlib
import os
import random
import struct
import time
from functools import reduce

import pytest
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCMSIV

from trustchain.anchors import UefiKeyStore, Verdict, build_enrollment_bundle, enroll, generate_hierarchy
from trustchain.blocks import (
    AttackKind,
    BlockClient,
    BlockServer,
    ImageStore,
    LocalChannel,
    SessionContext,
    decrypt_block,
    inject_attack,
    recorded_replies,
)
from trustchain.bootsim import LEVELS, emit_report, full_matrix, level_report, run_scenario
from trustchain.errors import BlockIntegrityError, UnsealError, ValidationError
from trustchain.image import (
    BootImage,
    ImageKind,
    OsRelease,
    SignedBootImage,
    build_uki,
    effective_cmdline,
    extract_section,
    sign_image,
    verify_image,
)
from trustchain.ipxe import DetachedSignature, sign_detached, sign_order_check, verify_detached
from trustchain.provisioning import (
    AssetTagStore,
    Channel,
    ClientRegistry,
    issue_session_key,
    max_key_bits,
    provision_client,
    redeem_session_key,
)
from trustchain.samples import BOOKWORM_OS_RELEASE, SLX_KERNEL_CMDLINE
from trustchain.tpm import PcrPolicy, TpmState

from conftest import ANCHORED_CELLS, HANDLE

SEED = 20240601


def _fold(measurements):
    return reduce(lambda acc, m: hashlib.sha256(acc + m).digest(), measurements, bytes(32))


@pytest.mark.criterion(1, "defense-matrix soundness")
def test_matrix_soundness(boot_fixtures):
    start = time.perf_counter()
    report = full_matrix(boot_fixtures)
    elapsed = time.perf_counter() - start
    assert report.summary()["mismatches"] == 0, [
        (r.config.key, r.attack.name, r.expected.label, r.actual) for r in report.mismatches
    ]
    assert report.summary()["cells"] == 576
    for config, attack, label in ANCHORED_CELLS:
        assert run_scenario(config, attack, boot_fixtures).label == label, (config.key, attack.name)
    assert elapsed < 60


@pytest.mark.criterion(2, "chain-of-trust round trip")
def test_chain_of_trust_round_trip():
    h = generate_hierarchy("Acceptance")
    bundle = build_enrollment_bundle(h)
    store = UefiKeyStore()
    for slot in ("PK", "KEK", "DB"):
        store = enroll(store, bundle[slot])
    signed = sign_image(BootImage(os.urandom(2048), ImageKind.KERNEL), h.db.key, h.db.cert)
    raw = signed.to_bytes()
    assert verify_image(SignedBootImage.from_bytes(raw), store) is Verdict.ALLOWED

    rng = random.Random(SEED)
    accepted = []
    for _ in range(1000):
        data = bytearray(raw)
        pos = rng.randrange(len(data))
        data[pos] ^= rng.randrange(1, 256)
        verdict = verify_image(SignedBootImage.from_bytes(bytes(data)), store)
        if not verdict.value.startswith("Denied"):
            accepted.append(pos)
    assert accepted == []


@pytest.mark.criterion(3, "UKI fidelity")
def test_uki_fidelity():
    kernel, initrd = os.urandom(4096), os.urandom(1024)
    osrel = OsRelease.parse(BOOKWORM_OS_RELEASE)
    uki = build_uki(b"stub", osrel, SLX_KERNEL_CMDLINE, kernel, initrd)
    assert [(s.name, s.vma) for s in uki.sections] == [
        (".osrel", 0x20000), (".cmdline", 0x30000), (".linux", 0x40000), (".initrd", 0x3000000),
    ]
    parsed = type(uki).parse(uki.serialize())
    assert extract_section(parsed, ".linux") == kernel
    assert extract_section(parsed, ".initrd") == initrd
    assert extract_section(parsed, ".cmdline") == SLX_KERNEL_CMDLINE.encode()
    assert extract_section(parsed, ".osrel") == osrel.serialize().encode()

    rng = random.Random(SEED)
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789=/._- "
    for _ in range(500):
        embedded = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 80)))
        external = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 80)))
        container = build_uki(b"stub", None, embedded, kernel)
        assert effective_cmdline(container, external) == embedded


@pytest.mark.criterion(4, "PCR oracle equivalence")
def test_pcr_oracle_and_sealing():
    rng = random.Random(SEED)
    for _ in range(1000):
        tpm = TpmState()
        history: dict[int, list[bytes]] = {}
        for _ in range(rng.randrange(0, 9)):
            index, measurement = rng.randrange(24), rng.randbytes(32)
            tpm.pcr_extend(index, measurement)
            history.setdefault(index, []).append(measurement)
        for index in range(24):
            assert tpm.pcr_read(index) == _fold(history.get(index, []))

    tpm = TpmState()
    for index in range(24):
        tpm.pcr_extend(index, rng.randbytes(32))
    false_accepts = false_rejects = 0
    for _ in range(1000):
        trial = tpm.clone()
        selection = rng.sample(range(24), rng.randrange(1, 6))
        blob = trial.seal(b"disk key", PcrPolicy.of(trial.pcr_values(selection)))
        perturbed = rng.random() < 0.5
        target = rng.choice(selection) if perturbed else rng.choice([i for i in range(24) if i not in selection])
        if perturbed or rng.random() < 0.5:
            trial.pcr_extend(target, rng.randbytes(32))
        try:
            released = trial.unseal(blob) == b"disk key"
        except UnsealError:
            released = False
        false_accepts += perturbed and released
        false_rejects += not perturbed and not released
    assert (false_accepts, false_rejects) == (0, 0)


@pytest.mark.criterion(5, "session-key exchange")
def test_session_key_exchange():
    tpm = TpmState()
    tpm.evict_control(tpm.create_primary(), HANDLE)
    registry = ClientRegistry()
    provision_client(registry, "client-1", tpm.read_public(HANDLE), Channel.TRUSTED_MEDIUM)
    grant, key = issue_session_key(registry, "client-1")
    assert len(key) == 32
    assert redeem_session_key(tpm, HANDLE, grant) == key

    image = os.urandom(1 << 20)
    store = ImageStore(image)
    sessions = {"client-1": (grant.epoch, key)}
    server = BlockServer(store, sessions)
    client = BlockClient(LocalChannel(server), "client-1", key)
    assert client.read_image() == image

    reply = client.fetch(0)
    binding = store.image_id + struct.pack(">QQ", 0, grant.epoch)
    nonce = hashlib.sha256(binding).digest()[:12]
    assert AESGCMSIV(key).decrypt(nonce, reply.ciphertext + reply.auth_tag, binding) == store.block(0)
    for _ in range(100):
        wrong = os.urandom(32)
        with pytest.raises(InvalidTag):
            AESGCMSIV(wrong).decrypt(nonce, reply.ciphertext + reply.auth_tag, binding)
        with pytest.raises(BlockIntegrityError):
            decrypt_block(SessionContext(wrong, store.image_id, grant.epoch), reply)

    rng = random.Random(SEED)
    detected = injected = 0
    for i in range(100):
        channel = inject_attack(LocalChannel(server), AttackKind.TAMPER_BYTE, seed=rng.randrange(2**32))
        index = rng.randrange(store.block_count)
        injected += 1
        try:
            BlockClient(channel, "client-1", key).read_block(index)
        except BlockIntegrityError:
            detected += 1
    for i in range(100):
        a, b = rng.sample(range(store.block_count), 2)
        channel = inject_attack(LocalChannel(server), AttackKind.SWAP_INDEX, swap=(a, b))
        injected += 1
        try:
            BlockClient(channel, "client-1", key).read_block(a)
        except BlockIntegrityError:
            detected += 1

    tap = inject_attack(LocalChannel(server), AttackKind.EAVESDROP)
    old = BlockClient(tap, "client-1", key)
    indices = rng.sample(range(store.block_count), 100)
    for index in indices:
        old.read_block(index)
    recorded = recorded_replies(tap.transcript)
    grant2, key2 = issue_session_key(registry, "client-1")
    sessions["client-1"] = (grant2.epoch, redeem_session_key(tpm, HANDLE, grant2))
    for index in indices:
        channel = inject_attack(LocalChannel(server), AttackKind.REPLAY_EPOCH, recorded=recorded)
        injected += 1
        try:
            BlockClient(channel, "client-1", key2).read_block(index)
        except BlockIntegrityError:
            detected += 1
    assert (detected, injected) == (300, 300)


@pytest.mark.criterion(6, "asset-tag bounds")
def test_asset_tag_bounds():
    tag = AssetTagStore()
    data = os.urandom(63)
    tag.write(data)
    with pytest.raises(ValidationError):
        tag.write(os.urandom(64))
    assert tag.read_all() == data
    assert b"".join(tag.read(off) for off in range(0, 63, 16)) == data
    assert (max_key_bits(1), max_key_bits()) == (128, 504)


@pytest.mark.criterion(7, "operation-count timing analog")
def test_report_counts(boot_fixtures):
    outcomes = [run_scenario(config, None, boot_fixtures) for config in LEVELS.values()]
    rows = emit_report(outcomes, {config: name for name, config in LEVELS.items()}).by_config()
    off, basic, uki = rows["Off"], rows["Basic"], rows["Uki"]
    assert off.verifications < basic.verifications <= uki.verifications
    assert uki.payload_fetches == basic.payload_fetches - 1
    assert level_report(boot_fixtures).by_config() == rows


@pytest.mark.criterion(8, "signature ordering")
def test_signature_ordering(codesign, hierarchy):
    ca, cert, key = codesign
    image = BootImage(os.urandom(4096), ImageKind.KERNEL)

    signed = sign_image(image, hierarchy.db.key, hierarchy.db.cert)
    after = sign_order_check(signed, cert, key, ca)
    assert verify_detached(signed.to_bytes(), DetachedSignature.from_bytes(after.to_bytes()), [ca.ca_cert])

    before = sign_detached(image.payload, cert, key, ca)
    resigned = sign_image(image, hierarchy.db.key, hierarchy.db.cert)
    assert verify_detached(image.payload, before, [ca.ca_cert])
    assert verify_detached(resigned.to_bytes(), before, [ca.ca_cert]) is False
