"""Read-only block service with per-block authenticated encryption.

Every block is sealed with AES-256-GCM-SIV under the session key. The nonce
and associated data are both derived from ``image_id | index | epoch``, so a
block re-encrypted in the same epoch is byte-identical, while a reply moved to
another index or replayed into another epoch fails authentication.

Wire messages are framed with a 4-byte big-endian length; see docs/wire.md.
"""

from __future__ import annotations

import enum
import logging
import random
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCMSIV

from . import _codec
from .errors import BlockIntegrityError, NotFoundError, ProtocolError, ValidationError

log = logging.getLogger(__name__)

BLOCK_SIZE = 4096
TAG_SIZE = 16
MAX_FRAME = 16 * 1024 * 1024

REQUEST_MAGIC = b"DNB1"
REPLY_MAGIC = b"DNBR"
ERROR_MAGIC = b"DNBE"
HELLO_MAGIC = b"DNBH"
HELLO_ACK_MAGIC = b"DNBA"

_REQUEST = struct.Struct(">4s16sQQ")
_REPLY_HEAD = struct.Struct(">4s16sQQI")
_HELLO_ACK = struct.Struct(">4s16sQQIQ")


class ImageStore:
    """An immutable image cut into fixed-size blocks; the last one is zero padded."""

    def __init__(self, data: bytes, block_size: int = BLOCK_SIZE) -> None:
        if not data:
            raise ValidationError("image must not be empty")
        if block_size <= 0:
            raise ValidationError("block size must be positive")
        self._data = bytes(data)
        self.block_size = block_size
        self.image_id = _codec.sha256(self._data)[:16]

    @property
    def length(self) -> int:
        return len(self._data)

    @property
    def block_count(self) -> int:
        return -(-len(self._data) // self.block_size)

    def block(self, index: int) -> bytes:
        if not 0 <= index < self.block_count:
            raise NotFoundError(f"block {index} out of range")
        chunk = self._data[index * self.block_size : (index + 1) * self.block_size]
        return chunk.ljust(self.block_size, b"\0")


@dataclass(frozen=True)
class SessionContext:
    session_key: bytes = field(repr=False)
    image_id: bytes
    epoch: int
    block_size: int = BLOCK_SIZE

    def __post_init__(self) -> None:
        if len(self.session_key) != 32:
            raise ValidationError("session key must be 32 bytes")
        if len(self.image_id) != 16:
            raise ValidationError("image id must be 16 bytes")


@dataclass(frozen=True)
class BlockReply:
    index: int
    epoch: int
    ciphertext: bytes
    auth_tag: bytes


def block_binding(image_id: bytes, index: int, epoch: int) -> bytes:
    """Associated data for one block: ``image_id | u64 index | u64 epoch``."""
    return image_id + index.to_bytes(8, "big") + epoch.to_bytes(8, "big")


def block_nonce(image_id: bytes, index: int, epoch: int) -> bytes:
    return _codec.sha256(block_binding(image_id, index, epoch))[:12]


def encrypt_block(ctx: SessionContext, index: int, plaintext: bytes) -> BlockReply:
    if len(plaintext) != ctx.block_size:
        raise ValidationError(f"block must be {ctx.block_size} bytes, got {len(plaintext)}")
    ad = block_binding(ctx.image_id, index, ctx.epoch)
    sealed = AESGCMSIV(ctx.session_key).encrypt(block_nonce(ctx.image_id, index, ctx.epoch), plaintext, ad)
    return BlockReply(index, ctx.epoch, sealed[:-TAG_SIZE], sealed[-TAG_SIZE:])


def decrypt_block(ctx: SessionContext, reply: BlockReply, expected_index: int | None = None) -> bytes:
    """Open ``reply``; the index the client asked for wins over the reply header."""
    index = reply.index if expected_index is None else expected_index
    ad = block_binding(ctx.image_id, index, ctx.epoch)
    try:
        return AESGCMSIV(ctx.session_key).decrypt(
            block_nonce(ctx.image_id, index, ctx.epoch), reply.ciphertext + reply.auth_tag, ad
        )
    except InvalidTag:
        raise BlockIntegrityError(index) from None


# -- wire messages ------------------------------------------------------------


@dataclass(frozen=True)
class BlockRequest:
    image_id: bytes
    index: int
    epoch: int

    def to_bytes(self) -> bytes:
        return _REQUEST.pack(REQUEST_MAGIC, self.image_id, self.index, self.epoch)

    @classmethod
    def from_bytes(cls, data: bytes) -> BlockRequest:
        if len(data) != _REQUEST.size:
            raise ProtocolError("bad request length")
        magic, image_id, index, epoch = _REQUEST.unpack(data)
        if magic != REQUEST_MAGIC:
            raise ProtocolError("bad request magic")
        return cls(image_id, index, epoch)


@dataclass(frozen=True)
class ImageInfo:
    image_id: bytes
    epoch: int
    block_count: int
    block_size: int
    length: int


def encode_reply(image_id: bytes, reply: BlockReply) -> bytes:
    head = _REPLY_HEAD.pack(REPLY_MAGIC, image_id, reply.index, reply.epoch, len(reply.ciphertext))
    return head + reply.ciphertext + reply.auth_tag


def decode_reply(data: bytes) -> tuple[bytes, BlockReply]:
    if data[:4] == ERROR_MAGIC:
        raise ProtocolError(decode_error(data))
    if len(data) < _REPLY_HEAD.size + TAG_SIZE:
        raise ProtocolError("short reply")
    magic, image_id, index, epoch, n = _REPLY_HEAD.unpack_from(data)
    if magic != REPLY_MAGIC or len(data) != _REPLY_HEAD.size + n + TAG_SIZE:
        raise ProtocolError("malformed reply")
    body = data[_REPLY_HEAD.size :]
    return image_id, BlockReply(index, epoch, body[:n], body[n:])


def encode_error(message: str) -> bytes:
    return ERROR_MAGIC + _codec.pack_bytes(message.encode("utf-8"), 2)


def decode_error(data: bytes) -> str:
    reader = _codec.Reader(data, 4)
    return reader.lbytes(2).decode("utf-8", "replace")


def encode_hello(client_id: str) -> bytes:
    return HELLO_MAGIC + _codec.pack_bytes(client_id.encode("utf-8"), 2)


def decode_hello_ack(data: bytes) -> ImageInfo:
    if data[:4] == ERROR_MAGIC:
        raise ProtocolError(decode_error(data))
    if len(data) != _HELLO_ACK.size or data[:4] != HELLO_ACK_MAGIC:
        raise ProtocolError("malformed hello acknowledgement")
    _, image_id, epoch, count, size, length = _HELLO_ACK.unpack(data)
    return ImageInfo(image_id, epoch, count, size, length)


# -- server -------------------------------------------------------------------

SessionLookup = Callable[[str], "tuple[int, bytes]"]


class BlockServer:
    """Protocol logic, independent of the transport.

    ``sessions`` maps a client id to its active ``(epoch, key)``. Per-connection
    state is a plain dict owned by the caller.
    """

    def __init__(self, store: ImageStore, sessions: SessionLookup | Mapping[str, tuple[int, bytes]]) -> None:
        self.store = store
        if isinstance(sessions, Mapping):
            table = sessions

            def lookup(client_id: str) -> tuple[int, bytes]:
                try:
                    return table[client_id]
                except KeyError:
                    raise NotFoundError(client_id) from None

            self._lookup: SessionLookup = lookup
        else:
            self._lookup = sessions

    def handle(self, message: bytes, conn: dict) -> bytes:
        try:
            if message[:4] == HELLO_MAGIC:
                return self._hello(message, conn)
            if message[:4] == REQUEST_MAGIC:
                return self._block(BlockRequest.from_bytes(message), conn)
            raise ProtocolError("unknown message")
        except (ProtocolError, ValidationError) as exc:
            return encode_error(str(exc))

    def _hello(self, message: bytes, conn: dict) -> bytes:
        reader = _codec.Reader(message, 4)
        client_id = reader.lbytes(2).decode("utf-8", "replace")
        try:
            epoch, key = self._lookup(client_id)
        except LookupError:
            return encode_error("unknown client")
        store = self.store
        conn["ctx"] = SessionContext(key, store.image_id, epoch, store.block_size)
        return _HELLO_ACK.pack(
            HELLO_ACK_MAGIC, store.image_id, epoch, store.block_count, store.block_size, store.length
        )

    def _block(self, request: BlockRequest, conn: dict) -> bytes:
        ctx: SessionContext | None = conn.get("ctx")
        if ctx is None:
            return encode_error("no session; send hello first")
        if request.image_id != self.store.image_id:
            return encode_error("unknown image")
        if request.epoch != ctx.epoch:
            return encode_error("unknown epoch")
        try:
            plain = self.store.block(request.index)
        except NotFoundError as exc:
            return encode_error(str(exc))
        return encode_reply(ctx.image_id, encrypt_block(ctx, request.index, plain))


def send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(len(payload).to_bytes(4, "big") + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket) -> bytes | None:
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    size = int.from_bytes(head, "big")
    if size > MAX_FRAME:
        raise ProtocolError(f"frame of {size} bytes exceeds limit")
    body = _recv_exact(sock, size)
    if body is None:
        raise ProtocolError("connection closed mid-frame")
    return body


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        logic: BlockServer = self.server.logic  # type: ignore[attr-defined]
        conn: dict = {}
        while True:
            try:
                message = recv_frame(self.request)
            except (ProtocolError, OSError) as exc:
                log.debug("closing connection: %s", exc)
                return
            if message is None:
                return
            send_frame(self.request, logic.handle(message, conn))


class TcpBlockServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], logic: BlockServer) -> None:
        super().__init__(address, _Handler)
        self.logic = logic

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


def serve(store: ImageStore, sessions: SessionLookup | Mapping[str, tuple[int, bytes]], host: str, port: int) -> TcpBlockServer:
    """Bind a threaded server; the caller runs ``serve_forever`` or ``start_background``."""
    return TcpBlockServer((host, port), BlockServer(store, sessions))


# -- channels -----------------------------------------------------------------


class Channel(Protocol):
    def exchange(self, message: bytes) -> bytes: ...


class LocalChannel:
    """In-process channel: one simulated connection to a ``BlockServer``."""

    def __init__(self, server: BlockServer) -> None:
        self.server = server
        self._conn: dict = {}

    def exchange(self, message: bytes) -> bytes:
        return self.server.handle(message, self._conn)


class SocketChannel:
    def __init__(self, host: str, port: int, timeout: float = 10.0) -> None:
        self.sock = socket.create_connection((host, port), timeout=timeout)

    def exchange(self, message: bytes) -> bytes:
        send_frame(self.sock, message)
        reply = recv_frame(self.sock)
        if reply is None:
            raise ProtocolError("server closed the connection")
        return reply

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> SocketChannel:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


class BlockClient:
    def __init__(self, channel: Channel, client_id: str, session_key: bytes) -> None:
        self.channel = channel
        self.info = decode_hello_ack(channel.exchange(encode_hello(client_id)))
        self.ctx = SessionContext(session_key, self.info.image_id, self.info.epoch, self.info.block_size)

    def fetch(self, index: int) -> BlockReply:
        request = BlockRequest(self.ctx.image_id, index, self.ctx.epoch)
        _, reply = decode_reply(self.channel.exchange(request.to_bytes()))
        return reply

    def read_block(self, index: int) -> bytes:
        return decrypt_block(self.ctx, self.fetch(index), expected_index=index)

    def read_image(self) -> bytes:
        data = b"".join(self.read_block(i) for i in range(self.info.block_count))
        return data[: self.info.length]


# -- attack injection ---------------------------------------------------------


class AttackKind(str, enum.Enum):
    TAMPER_BYTE = "TamperByte"
    SWAP_INDEX = "SwapIndex"
    REPLAY_EPOCH = "ReplayEpoch"
    EAVESDROP = "Eavesdrop"

    @property
    def mutating(self) -> bool:
        return self is not AttackKind.EAVESDROP


class AttackChannel:
    """Man in the middle between a client and the real channel.

    Every kind records the transcript. Mutating kinds touch block replies only:

    * ``TamperByte`` flips one ciphertext or tag byte;
    * ``SwapIndex`` forwards a request for ``a`` as one for ``b`` (and back),
      relabelling the reply so its header looks right;
    * ``ReplayEpoch`` answers with a recorded reply from an earlier epoch,
      relabelled with the current epoch and requested index.
    """

    def __init__(
        self,
        inner: Channel,
        kind: AttackKind | str,
        *,
        swap: tuple[int, int] | None = None,
        recorded: Mapping[int, bytes] | None = None,
        seed: int = 0,
    ) -> None:
        self.inner = inner
        self.kind = AttackKind(kind)
        self.swap = swap
        self.recorded = dict(recorded or {})
        self.rng = random.Random(seed)
        self.transcript: list[tuple[bytes, bytes]] = []
        self.injections = 0
        if self.kind is AttackKind.SWAP_INDEX and (swap is None or swap[0] == swap[1]):
            raise ValidationError("SwapIndex needs two distinct indices")
        if self.kind is AttackKind.REPLAY_EPOCH and not self.recorded:
            raise ValidationError("ReplayEpoch needs recorded replies from an earlier epoch")

    def exchange(self, message: bytes) -> bytes:
        if self.kind.mutating and message[:4] == REQUEST_MAGIC:
            reply = self._mutate(BlockRequest.from_bytes(message))
        else:
            reply = self.inner.exchange(message)
        self.transcript.append((message, reply))
        return reply

    def _mutate(self, request: BlockRequest) -> bytes:
        if self.kind is AttackKind.TAMPER_BYTE:
            raw = self.inner.exchange(request.to_bytes())
            if raw[:4] != REPLY_MAGIC:
                return raw
            data = bytearray(raw)
            pos = self.rng.randrange(_REPLY_HEAD.size, len(data))
            data[pos] ^= 1 << self.rng.randrange(8)
            self.injections += 1
            return bytes(data)
        if self.kind is AttackKind.SWAP_INDEX:
            a, b = self.swap  # type: ignore[misc]
            if request.index not in (a, b):
                return self.inner.exchange(request.to_bytes())
            other = b if request.index == a else a
            forged = BlockRequest(request.image_id, other, request.epoch)
            raw = self.inner.exchange(forged.to_bytes())
            if raw[:4] != REPLY_MAGIC:
                return raw
            image_id, reply = decode_reply(raw)
            self.injections += 1
            return encode_reply(image_id, BlockReply(request.index, reply.epoch, reply.ciphertext, reply.auth_tag))
        # ReplayEpoch
        old = self.recorded.get(request.index)
        if old is None:
            old = self.recorded[sorted(self.recorded)[request.index % len(self.recorded)]]
        image_id, reply = decode_reply(old)
        self.injections += 1
        relabelled = BlockReply(request.index, request.epoch, reply.ciphertext, reply.auth_tag)
        return encode_reply(image_id, relabelled)


def inject_attack(channel: Channel, kind: AttackKind | str, **params: object) -> AttackChannel:
    return AttackChannel(channel, kind, **params)  # type: ignore[arg-type]


def recorded_replies(transcript: list[tuple[bytes, bytes]]) -> dict[int, bytes]:
    """Block replies seen on the wire, keyed by the index in their header."""
    out = {}
    for _, reply in transcript:
        if reply[:4] == REPLY_MAGIC:
            _, parsed = decode_reply(reply)
            out[parsed.index] = reply
    return out
