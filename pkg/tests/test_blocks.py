from __future__ import annotations

import hashlib
import os
import random
import struct

import pytest
from cryptography.hazmat.primitives.ciphers.aead import AESGCMSIV
from hypothesis import given, settings
from hypothesis import strategies as st

from trustchain.blocks import (
    AttackKind,
    BlockClient,
    BlockReply,
    BlockRequest,
    BlockServer,
    ImageStore,
    LocalChannel,
    SessionContext,
    SocketChannel,
    block_nonce,
    decode_reply,
    decrypt_block,
    encode_reply,
    encrypt_block,
    inject_attack,
    recorded_replies,
    serve,
)
from trustchain.errors import BlockIntegrityError, NotFoundError, ProtocolError, ValidationError

KEY = bytes(range(32))


def _ctx(store: ImageStore, epoch: int = 1, key: bytes = KEY) -> SessionContext:
    return SessionContext(key, store.image_id, epoch, store.block_size)


@pytest.fixture(scope="module")
def image():
    return os.urandom(64 * 4096 + 123)


@pytest.fixture()
def setup(image):
    store = ImageStore(image)
    sessions = {"c": (1, KEY)}
    return store, sessions, BlockServer(store, sessions)


class TestImageStore:
    def test_blocks(self, image):
        store = ImageStore(image)
        assert store.block_count == 65
        assert store.block(3) == image[3 * 4096 : 4 * 4096]
        assert store.block(64) == image[64 * 4096 :].ljust(4096, b"\0")
        assert store.image_id == hashlib.sha256(image).digest()[:16]
        with pytest.raises(NotFoundError):
            store.block(65)

    def test_empty(self):
        with pytest.raises(ValidationError):
            ImageStore(b"")


class TestCrypto:
    def test_nonce_oracle(self):
        image_id = bytes(range(16))
        expected = hashlib.sha256(image_id + struct.pack(">QQ", 7, 3)).digest()[:12]
        assert block_nonce(image_id, 7, 3) == expected

    def test_matches_library_directly(self):
        store = ImageStore(bytes(4096))
        reply = encrypt_block(_ctx(store), 0, store.block(0))
        ad = store.image_id + struct.pack(">QQ", 0, 1)
        nonce = hashlib.sha256(ad).digest()[:12]
        assert AESGCMSIV(KEY).decrypt(nonce, reply.ciphertext + reply.auth_tag, ad) == bytes(4096)

    def test_length_arithmetic(self):
        store = ImageStore(bytes(4096))
        reply = encrypt_block(_ctx(store), 0, bytes(4096))
        assert (len(reply.ciphertext), len(reply.auth_tag)) == (4096, 16)

    def test_index_changes_ciphertext(self):
        store = ImageStore(bytes(8192))
        assert encrypt_block(_ctx(store), 0, bytes(4096)) != encrypt_block(_ctx(store), 1, bytes(4096))
        assert encrypt_block(_ctx(store), 0, bytes(4096)).ciphertext != encrypt_block(_ctx(store), 1, bytes(4096)).ciphertext

    def test_deterministic(self):
        store = ImageStore(bytes(4096))
        assert encrypt_block(_ctx(store), 0, bytes(4096)) == encrypt_block(_ctx(store), 0, bytes(4096))

    def test_swap_detected(self, image):
        store = ImageStore(image)
        reply = encrypt_block(_ctx(store), 5, store.block(5))
        with pytest.raises(BlockIntegrityError):
            decrypt_block(_ctx(store), reply, expected_index=3)
        relabelled = BlockReply(3, reply.epoch, reply.ciphertext, reply.auth_tag)
        with pytest.raises(BlockIntegrityError):
            decrypt_block(_ctx(store), relabelled)

    def test_epoch_binding(self, image):
        store = ImageStore(image)
        reply = encrypt_block(_ctx(store, 1), 0, store.block(0))
        with pytest.raises(BlockIntegrityError):
            decrypt_block(_ctx(store, 2), reply)

    def test_wrong_block_size(self):
        store = ImageStore(bytes(4096))
        with pytest.raises(ValidationError):
            encrypt_block(_ctx(store), 0, bytes(10))

    def test_context_validation(self):
        with pytest.raises(ValidationError):
            SessionContext(bytes(16), bytes(16), 1)
        with pytest.raises(ValidationError):
            SessionContext(bytes(32), bytes(8), 1)

    @settings(max_examples=50)
    @given(st.binary(min_size=64, max_size=64), st.integers(0, 2**32), st.integers(0, 2**32))
    def test_round_trip_property(self, block, index, epoch):
        store = ImageStore(b"x")
        ctx = SessionContext(KEY, store.image_id, epoch, 64)
        assert decrypt_block(ctx, encrypt_block(ctx, index, block)) == block


class TestWire:
    def test_request_layout(self):
        req = BlockRequest(bytes(range(16)), 5, 2)
        raw = req.to_bytes()
        assert raw == b"DNB1" + bytes(range(16)) + struct.pack(">QQ", 5, 2)
        assert BlockRequest.from_bytes(raw) == req

    def test_reply_round_trip(self):
        reply = BlockReply(1, 2, b"c" * 40, b"t" * 16)
        raw = encode_reply(bytes(16), reply)
        assert raw[:4] == b"DNBR"
        assert decode_reply(raw) == (bytes(16), reply)
        with pytest.raises(ProtocolError):
            decode_reply(raw[:-1])

    def test_server_errors(self, setup):
        store, _, server = setup
        conn: dict = {}
        assert server.handle(BlockRequest(store.image_id, 0, 1).to_bytes(), conn)[:4] == b"DNBE"
        assert server.handle(b"junk", conn)[:4] == b"DNBE"
        with pytest.raises(ProtocolError):
            BlockClient(LocalChannel(server), "stranger", KEY)

    def test_out_of_range_index(self, setup):
        _, _, server = setup
        client = BlockClient(LocalChannel(server), "c", KEY)
        with pytest.raises(ProtocolError):
            client.read_block(10_000)


class TestClient:
    def test_local_round_trip(self, setup, image):
        _, _, server = setup
        assert BlockClient(LocalChannel(server), "c", KEY).read_image() == image

    def test_wrong_key(self, setup):
        _, _, server = setup
        with pytest.raises(BlockIntegrityError):
            BlockClient(LocalChannel(server), "c", os.urandom(32)).read_block(0)

    def test_tcp_round_trip(self, setup, image):
        store, sessions, _ = setup
        server = serve(store, sessions, "127.0.0.1", 0)
        server.start_background()
        try:
            host, port = server.server_address
            with SocketChannel(host, port) as channel:
                assert BlockClient(channel, "c", KEY).read_image() == image
        finally:
            server.shutdown()
            server.server_close()

    def test_no_plaintext_on_wire(self, setup, image):
        _, _, server = setup
        tap = inject_attack(LocalChannel(server), AttackKind.EAVESDROP)
        assert BlockClient(tap, "c", KEY).read_image() == image
        wire = b"".join(m + r for m, r in tap.transcript)
        # any shared 64-byte window contains a 32-aligned 32-byte chunk of the image
        windows = {wire[i : i + 32] for i in range(len(wire) - 31)}
        chunks = [image[i : i + 32] for i in range(0, len(image) - 31, 32)]
        assert not any(c in windows for c in chunks)


class TestAttacks:
    def test_eavesdrop_is_passive(self, setup, image):
        _, _, server = setup
        tap = inject_attack(LocalChannel(server), "Eavesdrop")
        client = BlockClient(tap, "c", KEY)
        for i in range(100):
            client.read_block(i % 65)
        assert len(tap.transcript) == 101
        assert tap.injections == 0
        for _, reply in tap.transcript[1:]:
            _, parsed = decode_reply(reply)
            with pytest.raises(BlockIntegrityError):
                decrypt_block(_ctx(ImageStore(image), key=os.urandom(32)), parsed)

    def test_tamper(self, setup):
        _, _, server = setup
        client = BlockClient(inject_attack(LocalChannel(server), AttackKind.TAMPER_BYTE, seed=3), "c", KEY)
        for i in range(10):
            with pytest.raises(BlockIntegrityError):
                client.read_block(i)

    def test_swap_3_5(self, setup):
        _, _, server = setup
        channel = inject_attack(LocalChannel(server), AttackKind.SWAP_INDEX, swap=(3, 5))
        client = BlockClient(channel, "c", KEY)
        for index in (3, 5):
            with pytest.raises(BlockIntegrityError):
                client.read_block(index)
        client.read_block(4)
        assert channel.injections == 2

    def test_swap_needs_two_indices(self, setup):
        _, _, server = setup
        with pytest.raises(ValidationError):
            inject_attack(LocalChannel(server), AttackKind.SWAP_INDEX, swap=(3, 3))

    def test_replay_old_epoch(self, setup):
        _, sessions, server = setup
        tap = inject_attack(LocalChannel(server), AttackKind.EAVESDROP)
        old = BlockClient(tap, "c", KEY)
        for i in range(4):
            old.read_block(i)
        recorded = recorded_replies(tap.transcript)
        assert sorted(recorded) == [0, 1, 2, 3]
        sessions["c"] = (2, os.urandom(32))
        channel = inject_attack(LocalChannel(server), AttackKind.REPLAY_EPOCH, recorded=recorded)
        fresh = BlockClient(channel, "c", sessions["c"][1])
        assert fresh.ctx.epoch == 2
        for i in range(6):
            with pytest.raises(BlockIntegrityError):
                fresh.read_block(i)

    def test_replay_needs_recording(self, setup):
        _, _, server = setup
        with pytest.raises(ValidationError):
            inject_attack(LocalChannel(server), AttackKind.REPLAY_EPOCH)

    def test_every_mutation_detected(self, setup):
        rng = random.Random(1)
        _, _, server = setup
        for _ in range(30):
            channel = inject_attack(LocalChannel(server), AttackKind.TAMPER_BYTE, seed=rng.randrange(2**32))
            with pytest.raises(BlockIntegrityError):
                BlockClient(channel, "c", KEY).read_block(rng.randrange(65))
