"""Scenario fixtures: keys, payloads and everything the simulated servers hand out.

Only the base material (keys, TPM state, asset-tag key, payload seed) is
stored on disk. Signed images, UKIs, detached signatures, scripts and sealed
blobs are derived from it on demand; the signing schemes are deterministic, so
a reloaded fixture directory reproduces identical bytes.
"""

from __future__ import annotations

import json
import random
import threading
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.asymmetric import rsa

from .. import _codec
from ..anchors import (
    KeyHierarchy,
    UefiKeyStore,
    build_enrollment_bundle,
    enrolled_store,
    generate_hierarchy,
    load_hierarchy,
    save_hierarchy,
)
from ..blocks import ImageStore
from ..errors import ValidationError
from ..image import BootImage, ImageKind, OsRelease, build_uki, sign_image
from ..ipxe import CodeCert, CodeSignCa, ca_init, issue_codesign, sign_detached
from ..samples import (
    BOOKWORM_OS_RELEASE,
    PLAIN_CHAIN_SCRIPT,
    SLX_KERNEL_CMDLINE,
    VERIFIED_CHAIN_SCRIPT,
)
from ..tpm import PcrPolicy, TpmState
from .model import BootConfig, InitrdProtection, SecureBoot

SERVER = "10.0.2.3"
ATTACKER = "10.6.6.6"
BASE_URL = f"http://{SERVER}/boot/default"
IPXE_FILE = "ipxe.efi"
TPM_HANDLE = 0x81000001
CLIENT_ID = "client-a8a1590bfe87"
EVIL_PARAMS = "init=/bin/sh rd.shell=1"
ROOTFS_BLOCKS = 4
MANIFEST = "fixtures.json"

PCR_IPXE = 4
PCR_KERNEL = 8
PCR_PARAMS = 9

_IPXE_MAGIC = b"IPXEBIN1"


def build_ipxe_binary(code: bytes, trust: CodeCert | None, embedded_script: str) -> bytes:
    """An iPXE build: code, optional embedded trust root and embedded script."""
    cert = trust.to_bytes() if trust is not None else b""
    return _IPXE_MAGIC + _codec.pack_bytes(cert) + _codec.pack_bytes(embedded_script.encode("utf-8")) + code


def parse_ipxe_binary(payload: bytes) -> tuple[CodeCert | None, str]:
    reader = _codec.Reader(payload)
    if reader.read(len(_IPXE_MAGIC)) != _IPXE_MAGIC:
        raise ValidationError("not an iPXE build")
    cert_raw = reader.lbytes()
    script = reader.lbytes().decode("utf-8")
    return (CodeCert.from_bytes(cert_raw) if cert_raw else None), script


def pcr_fold(measurements: list[bytes]) -> bytes:
    value = bytes(32)
    for m in measurements:
        value = _codec.sha256(value + m)
    return value


def initrd_files(config: BootConfig) -> list[tuple[str, str]]:
    """(image name, file name) of initrd-related downloads for ``config``."""
    ip = config.initrd_protection
    if ip is InitrdProtection.IN_UKI:
        return []
    if ip is InitrdProtection.TPM_SEALED:
        return [("initrd", "initramfs-stage31.enc"), ("initrd-key", "initramfs-stage31.sealed")]
    if ip is InitrdProtection.TPM_ENCRYPTED:
        return [("initrd", "initramfs-stage31.enc"), ("initrd-key", "initramfs-stage31.key")]
    return [("initrd", "initramfs-stage31")]


def kernel_file(config: BootConfig) -> str:
    return "kernel.efi" if config.secure_boot is SecureBoot.UKI else "kernel"


def menu_script(config: BootConfig) -> str:
    """The per-entry script the boot server generates for ``config``."""
    uki = config.secure_boot is SecureBoot.UKI
    args = "" if uki else " " + SLX_KERNEL_CMDLINE
    lines = [
        "#!ipxe",
        f"set serverip {SERVER} ||",
        "iseq ${idx} ${} && set idx:string X ||",
        "set menuentryid 1 ||",
        "imgfree ||",
    ]
    kernel = kernel_file(config)
    if config.ipxe_signing:
        for name, fname in [("kernel", kernel)] + initrd_files(config):
            lines.append(f"imgfetch --name {name} {BASE_URL}/{fname} || goto fail")
            lines.append(f"imgverify {name} {BASE_URL}/{fname}.sig || goto fail")
        lines.append(f"imgload kernel{args} || goto fail")
        lines.append("boot || goto fail")
    else:
        for name, fname in initrd_files(config):
            lines.append(f"imgfetch --name {name} {BASE_URL}/{fname} || goto fail")
        lines.append(f"boot {BASE_URL}/{kernel}{args} || goto fail")
    lines += [
        "goto fail",
        ":fail",
        "prompt --timeout 5000 Error launching selected boot entry ||",
    ]
    return "\n".join(lines) + "\n"


def sample_payloads(seed: int) -> dict[str, bytes]:
    rng = random.Random(seed)
    root = bytearray(rng.randbytes(ROOTFS_BLOCKS * 4096 - 700))
    secret = b"root:$6$stateless$shadow-entry-that-must-not-cross-the-wire:19500:0:99999:7:::\n"
    root[100 : 100 + len(secret)] = secret
    return {
        "ipxe_code": b"\x7fIPXE" + rng.randbytes(8 * 1024),
        "kernel": b"MZ\x90\0linux-6.1.33" + rng.randbytes(24 * 1024),
        "initrd": b"070701initramfs-stage31" + rng.randbytes(16 * 1024),
        "stub": b"MZ\x90\0linuxx64.efi.stub" + rng.randbytes(4 * 1024),
        "rootfs": bytes(root),
        "evil_ipxe": b"\x7fIPXE-evil" + rng.randbytes(8 * 1024),
        "evil_kernel": b"MZ\x90\0evil-kernel" + rng.randbytes(24 * 1024),
        "evil_initrd": b"070701evil-initrd" + rng.randbytes(16 * 1024),
    }


@dataclass
class Fixtures:
    hierarchy: KeyHierarchy
    ca: CodeSignCa
    codesign_cert: CodeCert
    codesign_key: rsa.RSAPrivateKey = field(repr=False)
    tpm: TpmState = field(repr=False)
    asset_tag_key: bytes = field(repr=False)
    seed: int = 0
    # Served file name -> replacement bytes, for deliberately broken fixtures.
    overrides: dict[str, bytes] = field(default_factory=dict)

    def with_override(self, name: str, data: bytes) -> Fixtures:
        return replace(self, overrides={**self.overrides, name: data})

    # -- base material --

    @cached_property
    def payloads(self) -> dict[str, bytes]:
        return sample_payloads(self.seed)

    @cached_property
    def store(self) -> UefiKeyStore:
        return enrolled_store(build_enrollment_bundle(self.hierarchy))

    @cached_property
    def rootfs(self) -> ImageStore:
        return ImageStore(self.payloads["rootfs"])

    @cached_property
    def osrel(self) -> OsRelease:
        return OsRelease.parse(BOOKWORM_OS_RELEASE)

    @cached_property
    def initrd_key(self) -> bytes:
        return _codec.sha256(self.seed.to_bytes(8, "big") + b"initrd data key")

    def _sb_sign(self, payload: bytes, kind: ImageKind) -> bytes:
        db = self.hierarchy.db
        return sign_image(BootImage(payload, kind), db.key, db.cert).to_bytes()

    # -- derived artifacts (cached) --

    @cached_property
    def _cache(self) -> dict[object, bytes]:
        return {}

    @cached_property
    def _lock(self) -> threading.RLock:
        return threading.RLock()

    def _memo(self, key: object, build) -> bytes:  # type: ignore[no-untyped-def]
        with self._lock:
            if key not in self._cache:
                self._cache[key] = build()
            return self._cache[key]

    def ipxe_binary(self, signing: bool) -> bytes:
        def build() -> bytes:
            if signing:
                payload = build_ipxe_binary(self.payloads["ipxe_code"], self.ca.ca_cert, VERIFIED_CHAIN_SCRIPT)
            else:
                payload = build_ipxe_binary(self.payloads["ipxe_code"], None, PLAIN_CHAIN_SCRIPT)
            return self._sb_sign(payload, ImageKind.IPXE)

        return self._memo(("ipxe", signing), build)

    def kernel_image(self) -> bytes:
        return self._memo("kernel", lambda: self._sb_sign(self.payloads["kernel"], ImageKind.KERNEL))

    def uki_image(self, with_initrd: bool) -> bytes:
        def build() -> bytes:
            uki = build_uki(
                self.payloads["stub"],
                self.osrel,
                SLX_KERNEL_CMDLINE,
                self.payloads["kernel"],
                self.payloads["initrd"] if with_initrd else None,
            )
            return self._sb_sign(uki.serialize(), ImageKind.UKI)

        return self._memo(("uki", with_initrd), build)

    def encrypted_initrd(self) -> bytes:
        def build() -> bytes:
            nonce = _codec.sha256(self.initrd_key + b"nonce")[:12]
            return nonce + AESGCM(self.initrd_key).encrypt(nonce, self.payloads["initrd"], b"initrd")

        return self._memo("initrd.enc", build)

    def kernel_bytes(self, config: BootConfig) -> bytes:
        if config.secure_boot is SecureBoot.UKI:
            return self.uki_image(config.initrd_protection is InitrdProtection.IN_UKI)
        return self.kernel_image()

    def clean_measurements(self, config: BootConfig) -> dict[int, bytes]:
        """PCR values after an untampered boot has measured iPXE, kernel and params."""
        return {
            PCR_IPXE: pcr_fold([_codec.sha256(self.served(config, f"tftp://{SERVER}/{IPXE_FILE}"))]),
            PCR_KERNEL: pcr_fold([_codec.sha256(self.served(config, f"{BASE_URL}/{kernel_file(config)}"))]),
            PCR_PARAMS: pcr_fold([_codec.sha256(SLX_KERNEL_CMDLINE.encode("utf-8"))]),
        }

    def sealed_initrd_key(self, config: BootConfig) -> bytes:
        key = ("sealed", config.secure_boot, config.initrd_protection, config.ipxe_signing)
        return self._memo(
            key, lambda: self.tpm.seal(self.initrd_key, PcrPolicy.of(self.clean_measurements(config))).to_bytes()
        )

    def tpm_wrapped_initrd_key(self) -> bytes:
        return self._memo("initrd.key", lambda: self.tpm.rsa_encrypt(TPM_HANDLE, self.initrd_key))

    def detached(self, data: bytes) -> bytes:
        return self._memo(
            ("sig", _codec.sha256(data)),
            lambda: sign_detached(data, self.codesign_cert, self.codesign_key, self.ca).to_bytes(),
        )

    def _file(self, config: BootConfig, name: str) -> bytes:
        if name in self.overrides:
            return self.overrides[name]
        if name == IPXE_FILE:
            return self.ipxe_binary(config.ipxe_signing)
        if name in ("kernel", "kernel.efi"):
            return self.kernel_bytes(config)
        if name == "initramfs-stage31":
            return self.payloads["initrd"]
        if name == "initramfs-stage31.enc":
            return self.encrypted_initrd()
        if name == "initramfs-stage31.sealed":
            return self.sealed_initrd_key(config)
        if name == "initramfs-stage31.key":
            return self.tpm_wrapped_initrd_key()
        raise KeyError(name)

    def static_files(self, config: BootConfig) -> list[str]:
        return [kernel_file(config)] + [f for _, f in initrd_files(config)]

    def served(self, config: BootConfig, url: str) -> bytes:
        """Bytes the legitimate server returns for a static ``url``."""
        if url == f"tftp://{SERVER}/{IPXE_FILE}":
            return self._file(config, IPXE_FILE)
        prefix = BASE_URL + "/"
        if not url.startswith(prefix):
            raise KeyError(url)
        name = url[len(prefix) :]
        if name.endswith(".sig"):
            target = name[:-4]
            if target not in self.static_files(config):
                raise KeyError(url)
            return self.detached(self._file(config, target))
        if name not in self.static_files(config):
            raise KeyError(url)
        return self._file(config, name)

    # -- persistence --

    def save(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        save_hierarchy(self.hierarchy, directory / "sbkeys")
        self.ca.save(directory / "ipxe-ca")
        (directory / "codesign.crt").write_text(self.codesign_cert.to_armor())
        key_path = directory / "codesign.key"
        key_path.write_text(_codec.private_key_pem(self.codesign_key))
        key_path.chmod(0o600)
        self.tpm.save(directory / "tpm.bin")
        (directory / "asset-tag.bin").write_bytes(self.asset_tag_key)
        manifest = {"version": 1, "seed": self.seed, "client_id": CLIENT_ID, "tpm_handle": f"{TPM_HANDLE:#010x}"}
        (directory / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
        if self.overrides:
            (directory / "overrides").mkdir(exist_ok=True)
            for name, data in self.overrides.items():
                (directory / "overrides" / name).write_bytes(data)

    @classmethod
    def load(cls, directory: Path) -> Fixtures:
        manifest = json.loads((directory / MANIFEST).read_text())
        if manifest.get("version") != 1:
            raise ValidationError("unsupported fixture manifest version")
        overrides = {}
        if (directory / "overrides").is_dir():
            overrides = {p.name: p.read_bytes() for p in sorted((directory / "overrides").iterdir())}
        return cls(
            hierarchy=load_hierarchy(directory / "sbkeys"),
            ca=CodeSignCa.load(directory / "ipxe-ca"),
            codesign_cert=CodeCert.from_armor((directory / "codesign.crt").read_text()),
            codesign_key=_codec.load_private_key((directory / "codesign.key").read_text()),
            tpm=TpmState.load(directory / "tpm.bin"),
            asset_tag_key=(directory / "asset-tag.bin").read_bytes(),
            seed=int(manifest["seed"]),
            overrides=overrides,
        )


def generate_fixtures(seed: int = 0) -> Fixtures:
    """Fresh keys (random) plus seed-determined payloads."""
    hierarchy = generate_hierarchy("Stateless Lab")
    ca = ca_init("ipxe.ca")
    codesign_key = _codec.new_rsa_key()
    cert = issue_codesign(ca, "slx-server codesign", codesign_key.public_key())
    tpm = TpmState()
    tpm.evict_control(tpm.create_primary("rsa2048"), TPM_HANDLE)
    tag_key = _codec.sha256(seed.to_bytes(8, "big") + b"asset tag long-term key")
    return Fixtures(hierarchy, ca, cert, codesign_key, tpm, tag_key, seed)
