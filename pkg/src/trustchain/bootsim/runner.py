"""The boot chain as a deterministic state machine.

Each step calls the real module for its check: the enrolled key store for
Secure Boot, the iPXE interpreter for scripts and detached signatures,
``effective_cmdline`` for UKI parameters, the software TPM for measurement,
unsealing and key redemption, and the block transport for the root file
system. Whether an attack *succeeded* is decided separately, by comparing what
the client ended up running with what the legitimate server served.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable
from urllib.parse import urlsplit

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .. import _codec
from ..anchors import Verdict as SbVerdict
from ..blocks import (
    AttackKind,
    BlockClient,
    BlockServer,
    LocalChannel,
    inject_attack,
)
from ..errors import (
    BlockIntegrityError,
    DecryptionError,
    NotFoundError,
    ProtocolError,
    TrustchainError,
    UnsealError,
    ValidationError,
)
from ..image import (
    ImageKind,
    SignedBootImage,
    UkiContainer,
    effective_cmdline,
    extract_section,
    verify_image_bytes,
)
from ..ipxe import DynamicScriptServer, FetchError, LoadedImage, interpret_script
from ..ipxe import Verdict as IpxeVerdict
from ..provisioning import (
    AssetTagStore,
    Channel,
    ClientRegistry,
    issue_session_key,
    provision_client,
    redeem_session_key,
)
from ..samples import CLIENT_ENV, SLX_KERNEL_CMDLINE
from ..tpm import SealedBlob
from .fixtures import (
    ATTACKER,
    BASE_URL,
    CLIENT_ID,
    EVIL_PARAMS,
    IPXE_FILE,
    PCR_IPXE,
    PCR_KERNEL,
    PCR_PARAMS,
    SERVER,
    TPM_HANDLE,
    Fixtures,
    menu_script,
    parse_ipxe_binary,
)
from .model import (
    LEAK_LONG_TERM_KEY,
    LEAK_PAYLOAD,
    LEAK_SESSION_KEY,
    Attack,
    AttackVector,
    BootConfig,
    BootStep,
    Expected,
    InitrdProtection,
    KeyStore,
    OpCounts,
    Outcome,
    OutcomeKind,
    SecureBoot,
    TraceEvent,
    clean,
    compromised,
    config_lattice,
    expected_outcome,
    leaked,
    matrix_attacks,
    rejected,
)

S = BootStep
V = AttackVector


class _Halt(Exception):
    def __init__(self, result: Expected) -> None:
        super().__init__(result.label)
        self.result = result


def _tamper_script(text: str) -> str:
    """Append attacker kernel parameters to the line that starts the kernel."""
    pattern = re.compile(r"^((?:boot http\S+|imgload kernel)[^|\n]*?)( \|\||$)", re.M)
    return pattern.sub(lambda m: f"{m.group(1)} {EVIL_PARAMS}{m.group(2)}", text, count=1)


def _is_payload(url: str) -> bool:
    return url.startswith(BASE_URL + "/") and not url.endswith(".sig")


class _Run:
    def __init__(self, config: BootConfig, attack: Attack, fx: Fixtures) -> None:
        self.config = config
        self.attack = attack
        self.fx = fx
        self.vector = attack.vector
        self.tpm = fx.tpm.clone() if config.key_store is KeyStore.TPM else None
        self.trace: list[TraceEvent] = []
        self.current = S.DHCP
        self.fetches = 0
        self.payload_fetches = 0
        self.verifications = 0
        self.assembly = 0
        self.pcr_extends = 0
        self.leak: str | None = None
        self.scripts = DynamicScriptServer(
            lambda params: menu_script(config), fx.codesign_cert, fx.codesign_key, fx.ca
        )

    # -- bookkeeping --

    def event(self, step: BootStep, action: str, verdict: str, **detail: object) -> None:
        self.current = max(self.current, step)
        items = tuple((k.replace("_", "-"), str(v).replace(" ", "_")) for k, v in detail.items())
        self.trace.append(TraceEvent(self.current, action, verdict, items))

    def measure(self, step: BootStep, pcr: int, data: bytes) -> None:
        if self.tpm is None:
            return
        digest = _codec.sha256(data)
        value = self.tpm.pcr_extend(pcr, digest)
        self.pcr_extends += 1
        self.event(step, "pcr-extend", "ok", pcr=pcr, measurement=digest.hex(), value=value.hex())

    def compromise(self, what: str) -> None:
        origin = self.vector.origin if self.vector is not None else None
        step = origin or self.current
        self.event(self.current, "execute-forged", "tainted", what=what)
        raise _Halt(compromised(step))

    def reject(self, step: BootStep) -> None:
        raise _Halt(rejected(step))

    # -- network --

    def fetch(self, url: str) -> bytes:
        parts = urlsplit(url)
        self.fetches += 1
        if _is_payload(url):
            self.payload_fetches += 1
        if parts.hostname == ATTACKER:
            return self.fx.payloads["evil_ipxe"]
        if parts.hostname != SERVER:
            raise FetchError(f"no route to {parts.hostname}")
        if parts.path == "/boot/ipxe":
            data = self.scripts(url)
            if self.vector is V.TAMPER_SCRIPT_PARAMS and "sig=true" not in parts.query:
                data = _tamper_script(data.decode("utf-8")).encode("utf-8")
            return data
        try:
            data = self.fx.served(self.config, url)
        except KeyError:
            raise FetchError(f"404 {url}") from None
        return self._intercept(url, data)

    def _intercept(self, url: str, data: bytes) -> bytes:
        v, name = self.vector, url.rsplit("/", 1)[-1]
        if v is V.MALICIOUS_TFTP and url.startswith("tftp://"):
            return self.fx.payloads["evil_ipxe"]
        if v is V.TAMPER_KERNEL and name in ("kernel", "kernel.efi"):
            return self.fx.payloads["evil_kernel"]
        if v is V.TAMPER_INITRD:
            if name == "initramfs-stage31":
                return self.fx.payloads["evil_initrd"]
            if name == "initramfs-stage31.enc":
                return data[:12] + self.fx.payloads["evil_initrd"]
            if name == "kernel.efi" and self.config.initrd_protection is InitrdProtection.IN_UKI:
                return _swap_uki_initrd(data, self.fx.payloads["evil_initrd"])
        return data

    def served(self, url: str) -> bytes:
        return self.fx.served(self.config, url)

    # -- steps --

    def run(self) -> Expected:
        try:
            self.step_dhcp()
            loaded = self.step_ipxe_load()
            action, extras = self.step_script(loaded)
            self.step_host_load(action, extras)
            session = self.step_rootfs()
            self.step_vm_launch(session)
        except _Halt as halt:
            return halt.result
        if self.leak is not None:
            return leaked(self.leak)
        return clean()

    def step_dhcp(self) -> None:
        next_server = ATTACKER if self.vector is V.MALICIOUS_DHCP else SERVER
        self.next_server = next_server
        self.event(S.DHCP, "dhcp-offer", "ok", next_server=next_server, filename=IPXE_FILE)

    def step_ipxe_load(self) -> bytes:
        url = f"tftp://{self.next_server}/{IPXE_FILE}"
        data = self.fetch(url)
        self.event(S.IPXE_LOAD, "tftp-fetch", "ok", target=url, bytes=len(data))
        if self.config.secure_boot is not SecureBoot.OFF:
            self.verifications += 1
            verdict = verify_image_bytes(data, self.fx.store, ImageKind.IPXE)
            self.event(S.IPXE_LOAD, "secure-boot-verify", verdict.value, target=IPXE_FILE)
            if not verdict.allowed:
                self.reject(S.IPXE_LOAD)
        self.measure(S.IPXE_LOAD, PCR_IPXE, data)
        if data != self.served(f"tftp://{SERVER}/{IPXE_FILE}"):
            self.compromise("ipxe")
        self.event(S.IPXE_LOAD, "ipxe-start", "ok")
        return data

    def step_script(self, ipxe_file: bytes) -> tuple[LoadedImage, dict[str, LoadedImage]]:
        trust, embedded = parse_ipxe_binary(SignedBootImage.from_bytes(ipxe_file).image.payload)
        result = interpret_script(embedded, self.fetch, [trust] if trust else [], False, CLIENT_ENV)
        last_failure = None
        for ev in result.trace:
            step = self._script_step(ev.verb, ev.target)
            if ev.verb == "imgverify":
                self.verifications += 1
            detail = {"target": ev.target} if ev.target else {}
            self.event(step, ev.verb, ev.verdict.value, **detail)
            if ev.verdict is not IpxeVerdict.OK:
                last_failure = self.current
        if result.action is None:
            self.reject(last_failure or self.current)
        action = result.action
        self.event(S.BOOT_DECISION, "boot-selected", "ok", image=action.name)
        extras = {img.name: img for img in action.extra_images}
        return LoadedImage(action.name, action.url, action.data, True, action.args), extras

    @staticmethod
    def _script_step(verb: str, target: str) -> BootStep:
        if verb in ("goto", "prompt", "imgtrust"):
            return S.BOOT_DECISION if verb != "imgtrust" else S.IPXE_SCRIPT
        if target.startswith(f"http://{SERVER}/boot/ipxe") or target == "ipxe":
            return S.IPXE_SCRIPT
        return S.HOST_SYSTEM_LOAD

    def step_host_load(self, kernel: LoadedImage, extras: dict[str, LoadedImage]) -> None:
        config, H = self.config, S.HOST_SYSTEM_LOAD
        uki = config.secure_boot is SecureBoot.UKI
        kind = ImageKind.UKI if uki else ImageKind.KERNEL
        if config.secure_boot is not SecureBoot.OFF:
            self.verifications += 1
            verdict = verify_image_bytes(kernel.data, self.fx.store, kind)
            self.event(H, "secure-boot-verify", verdict.value, target=kernel.name)
            if verdict is not SbVerdict.ALLOWED:
                self.reject(H)
        self.measure(H, PCR_KERNEL, kernel.data)
        if kernel.data != self.served(kernel.url):
            self.compromise("kernel")

        external = " ".join(kernel.args)
        container = None
        if uki:
            self.assembly += 1
            try:
                container = UkiContainer.parse(SignedBootImage.from_bytes(kernel.data).image.payload)
            except ValidationError:
                self.event(H, "uki-parse", "failed")
                self.reject(H)
            self.event(H, "uki-parse", "ok", sections=",".join(container.section_names()))
            self.assembly += 1
            cmdline = effective_cmdline(container, external)
            embedded = ".cmdline" in container.section_names()
            verdict = "embedded" if embedded else "external"
            if embedded and external and external != cmdline:
                verdict = "ignored-external"
            self.event(H, "cmdline", verdict)
        else:
            cmdline = external
            self.event(H, "cmdline", "external")
        self.measure(H, PCR_PARAMS, cmdline.encode("utf-8"))

        initrd = self._initrd(container, extras)
        self.measure(H, PCR_PARAMS, initrd)
        if cmdline != SLX_KERNEL_CMDLINE:
            self.compromise("kernel-params")
        if initrd != self.fx.payloads["initrd"]:
            self.compromise("initrd")
        self.event(H, "kernel-start", "ok")

    def _initrd(self, container: UkiContainer | None, extras: dict[str, LoadedImage]) -> bytes:
        ip, H = self.config.initrd_protection, S.HOST_SYSTEM_LOAD
        if ip is InitrdProtection.IN_UKI:
            assert container is not None
            self.assembly += 1
            try:
                data = extract_section(container, ".initrd")
            except NotFoundError:
                self.event(H, "uki-extract", "missing", section=".initrd")
                self.reject(H)
            self.event(H, "uki-extract", "ok", section=".initrd")
            return data
        if "initrd" not in extras:
            self.event(H, "initrd", "missing")
            self.reject(H)
        blob = extras["initrd"].data
        if ip is InitrdProtection.NONE:
            self.event(H, "initrd", "loaded")
            return blob
        assert self.tpm is not None
        key_image = extras.get("initrd-key")
        if key_image is None:
            self.event(H, "initrd-key", "missing")
            self.reject(H)
        try:
            if ip is InitrdProtection.TPM_SEALED:
                key = self.tpm.unseal(SealedBlob.from_bytes(key_image.data))
                self.event(H, "tpm-unseal", "ok")
            else:
                key = self.tpm.rsa_decrypt(TPM_HANDLE, key_image.data)
                self.event(H, "tpm-decrypt", "ok")
        except (UnsealError, DecryptionError, ValidationError) as exc:
            action = "tpm-unseal" if ip is InitrdProtection.TPM_SEALED else "tpm-decrypt"
            self.event(H, action, "refused", reason=type(exc).__name__)
            self.reject(H)
        try:
            data = AESGCM(key).decrypt(blob[:12], blob[12:], b"initrd")
        except (InvalidTag, ValueError):
            self.event(H, "initrd-decrypt", "failed")
            self.reject(H)
        self.event(H, "initrd-decrypt", "ok")
        return data

    def step_rootfs(self) -> dict[str, object]:
        R, ks = S.ROOTFS_ACCESS, self.config.key_store
        session: dict[str, object] = {}
        if ks is KeyStore.TPM:
            assert self.tpm is not None
            registry = ClientRegistry()
            provision_client(registry, CLIENT_ID, self.tpm.read_public(TPM_HANDLE), Channel.TRUSTED_MEDIUM, 0)
            grant, server_key = issue_session_key(registry, CLIENT_ID)
            client_key = redeem_session_key(self.tpm, TPM_HANDLE, grant)
            session.update(grant=grant, key=server_key, epoch=grant.epoch)
            self.event(R, "session-grant", "redeemed", epoch=grant.epoch)
        elif ks is KeyStore.ASSET_TAG:
            tag = AssetTagStore()
            tag.write(self.fx.asset_tag_key)
            server_key = _codec.sha256(self.fx.asset_tag_key + b"session 1")
            nonce = bytes(12)
            wrapped = AESGCM(self.fx.asset_tag_key).encrypt(nonce, server_key, b"session")
            client_key = AESGCM(tag.read_all()).decrypt(nonce, wrapped, b"session")
            session.update(tag=tag, key=server_key, epoch=1)
            self.event(R, "asset-tag-unwrap", "ok", epoch=1)
        else:
            client_key = b""
        store = self.fx.rootfs
        if self.config.session_encryption:
            data, wire = self._encrypted_read(client_key, int(session["epoch"]))  # type: ignore[arg-type]
        else:
            data, wire = self._plain_read()
        if self.vector is V.PASSIVE_EAVESDROP:
            exposed = any(store.block(i) in wire for i in range(store.block_count))
            self.event(R, "eavesdrop", "plaintext-seen" if exposed else "ciphertext-only", bytes=len(wire))
            if exposed:
                self.leak = LEAK_PAYLOAD
        if data != self.fx.payloads["rootfs"]:
            self.compromise("rootfs-blocks")
        return session

    def _encrypted_read(self, key: bytes, epoch: int) -> tuple[bytes, bytes]:
        R, store = S.ROOTFS_ACCESS, self.fx.rootfs
        server = BlockServer(store, {CLIENT_ID: (epoch, key)})
        channel = LocalChannel(server)
        if self.vector is V.DNBD_BLOCK_SWAP:
            channel = inject_attack(channel, AttackKind.SWAP_INDEX, swap=(0, 1))
        elif self.vector is V.PASSIVE_EAVESDROP:
            channel = inject_attack(channel, AttackKind.EAVESDROP)
        try:
            client = BlockClient(channel, CLIENT_ID, key)
            data = client.read_image()
        except BlockIntegrityError as exc:
            self.event(R, "dnbd-read", "integrity-error", index=exc.index)
            self.reject(R)
        except ProtocolError as exc:
            self.event(R, "dnbd-read", "protocol-error", reason=str(exc))
            self.reject(R)
        self.event(R, "dnbd-read", "ok", blocks=store.block_count, encrypted="yes")
        wire = b"".join(req + rep for req, rep in getattr(channel, "transcript", []))
        return data, wire

    def _plain_read(self) -> tuple[bytes, bytes]:
        store = self.fx.rootfs
        out, wire = [], []
        for index in range(store.block_count):
            served = index
            if self.vector is V.DNBD_BLOCK_SWAP and index in (0, 1):
                served = 1 - index
            block = store.block(served)
            wire.append(block)
            out.append(block)
        self.event(S.ROOTFS_ACCESS, "dnbd-read", "ok", blocks=store.block_count, encrypted="no")
        return b"".join(out)[: store.length], b"".join(wire)

    def step_vm_launch(self, session: dict[str, object]) -> None:
        VM = S.VM_LAUNCH
        self.event(VM, "vm-launch", "ok")
        if self.vector is not V.ROOT_KEY_EXFILTRATION:
            return
        if not (self.attack.root_on_host or self.attack.physical_access):
            self.event(VM, "exfiltrate", "no-access")
            return
        ks = self.config.key_store
        if ks is KeyStore.ASSET_TAG:
            tag = session["tag"]
            stolen = tag.read_all(root_on_host=True)  # type: ignore[attr-defined]
            if stolen == self.fx.asset_tag_key:
                self.event(VM, "exfiltrate", "leaked", what=LEAK_LONG_TERM_KEY)
                self.leak = LEAK_LONG_TERM_KEY
        elif ks is KeyStore.TPM:
            assert self.tpm is not None
            # No command exports private key material; the attacker can only
            # use the TPM as an oracle while present.
            exported = self.tpm.to_bytes()
            private = self.tpm._key(TPM_HANDLE).private_numbers().d
            if private.to_bytes(256, "big") in exported:
                self.event(VM, "exfiltrate", "leaked", what=LEAK_LONG_TERM_KEY)
                self.leak = LEAK_LONG_TERM_KEY
                return
            grant = session["grant"]
            stolen = self.tpm.rsa_decrypt(TPM_HANDLE, grant.encrypted_session_key)  # type: ignore[attr-defined]
            if stolen == session["key"]:
                self.event(VM, "exfiltrate", "leaked", what=LEAK_SESSION_KEY)
                self.leak = LEAK_SESSION_KEY
        else:
            self.event(VM, "exfiltrate", "nothing-stored")

    def ops(self) -> OpCounts:
        return OpCounts(self.fetches, self.payload_fetches, self.verifications, self.assembly, self.pcr_extends)


def _swap_uki_initrd(data: bytes, evil: bytes) -> bytes:
    """Replace the .initrd section of a signed UKI, keeping its signature blocks."""
    signed = SignedBootImage.from_bytes(data, ImageKind.UKI)
    uki = UkiContainer.parse(signed.image.payload)
    sections = tuple(
        type(s)(s.name, s.vma, evil) if s.name == ".initrd" else s for s in uki.sections
    )
    forged = UkiContainer(sections, uki.stub).serialize()
    return forged + b"".join(b.to_bytes() for b in signed.signatures)


def run_scenario(config: BootConfig, attack: Attack | AttackVector | str | None, fixtures: Fixtures) -> Outcome:
    """Boot once under ``config`` with ``attack`` active and report what happened."""
    config.validate()
    if not isinstance(attack, Attack):
        attack = Attack.of(attack)
    run = _Run(config, attack, fixtures)
    result = run.run()
    return Outcome(config, attack, result, tuple(run.trace), run.ops())


@dataclass(frozen=True)
class MatrixRow:
    config: BootConfig
    attack: Attack
    expected: Expected
    actual: str
    outcome: Outcome | None = field(default=None, compare=False, repr=False)

    @property
    def match(self) -> bool:
        return self.actual == self.expected.label


@dataclass(frozen=True)
class MatrixReport:
    rows: tuple[MatrixRow, ...]
    skipped: int

    @property
    def mismatches(self) -> list[MatrixRow]:
        return [r for r in self.rows if not r.match]

    def to_csv(self) -> str:
        lines = ["config,attack,expected,actual,match"]
        for r in self.rows:
            lines.append(f'"{r.config.key}",{r.attack.name},"{r.expected.label}","{r.actual}",{int(r.match)}')
        return "\n".join(lines) + "\n"

    def summary(self) -> dict[str, int]:
        return {"cells": len(self.rows), "mismatches": len(self.mismatches), "skipped_configs": self.skipped}


def _cell(args: tuple[BootConfig, Attack, Fixtures]) -> MatrixRow:
    config, attack, fx = args
    expected = expected_outcome(config, attack)
    try:
        outcome = run_scenario(config, attack, fx)
    except TrustchainError as exc:
        return MatrixRow(config, attack, expected, f"Error({type(exc).__name__}: {exc})")
    return MatrixRow(config, attack, expected, outcome.label, outcome)


def full_matrix(
    fixtures: Fixtures,
    attacks: Iterable[Attack] | None = None,
    workers: int = 1,
) -> MatrixReport:
    """Run every valid config against every attack; invalid configs are counted, not run."""
    attack_list = list(attacks) if attacks is not None else matrix_attacks()
    configs, skipped = [], 0
    for config in config_lattice():
        if config.valid:
            configs.append(config)
        else:
            skipped += 1
    cells = [(c, a, fixtures) for c in sorted(configs, key=lambda c: c.key) for a in attack_list]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_cell, cells))
    else:
        rows = [_cell(cell) for cell in cells]
    rows.sort(key=lambda r: (r.config.key, r.attack.name))
    return MatrixReport(tuple(rows), skipped)


__all__ = [
    "MatrixReport",
    "MatrixRow",
    "OutcomeKind",
    "full_matrix",
    "run_scenario",
]
