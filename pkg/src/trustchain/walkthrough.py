"""Scripted end-to-end flows over a work directory.

Each flow reproduces one administrator procedure from key generation to a
verified artifact, using the same module operations the CLI exposes one by
one. Flows are idempotent: existing keys, CAs and TPM state are reused, and
inputs are always taken from the ``.bak`` originals, so a rerun rewrites the
same bytes. The OAEP ciphertexts under ``usb/`` are the exception, since the
padding is randomized.

Layout under the work directory::

    sbkeys/            Secure Boot hierarchy and enrollment bundle
    tftp/ipxe.efi      signed iPXE build (ipxe.efi.bak is the original)
    www/kernel         signed kernel (kernel.bak is the original)
    www/kernel.efi     signed UKI (kernel.efi.bak is the unsigned container)
    srv/cmd, srv/osrel UKI inputs
    ipxe-ca/           code-signing CA; codesign.key/.crt beside it
    usb/               TPM state, key.pem, msg.enc, msg2.enc
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import _codec
from .anchors import build_enrollment_bundle, generate_hierarchy, load_hierarchy, save_bundle, save_hierarchy
from .bootsim.fixtures import IPXE_FILE, TPM_HANDLE, build_ipxe_binary, sample_payloads
from .errors import NotFoundError, PrerequisiteError
from .image import BootImage, ImageKind, OsRelease, SignedBootImage, build_uki, sign_image
from .ipxe import CodeCert, CodeSignCa, DetachedSignature, ca_init, issue_codesign, sign_order_check, verify_detached
from .samples import BOOKWORM_OS_RELEASE, SLX_KERNEL_CMDLINE, VERIFIED_CHAIN_SCRIPT
from .tpm import TpmState, rsa_encrypt

log = logging.getLogger(__name__)

SECRET = b"secret\n"


@dataclass(frozen=True)
class Flow:
    name: str
    alias: str
    summary: str
    run: Callable[[Path], dict[str, object]]


def _sbkeys(work: Path, create: bool = True):  # type: ignore[no-untyped-def]
    keys = work / "sbkeys"
    if (keys / "DB.key").exists():
        return load_hierarchy(keys)
    if not create:
        raise PrerequisiteError(f"no Secure Boot keys in {keys}; run the 'mkkeys' (listing-1) flow first")
    log.info("generating PK/KEK/DB in %s", keys)
    h = generate_hierarchy("Lab")
    save_hierarchy(h, keys)
    return h


def _keep_original(target: Path, data: bytes) -> bytes:
    """Return the unsigned original for ``target``, creating ``target.bak`` once."""
    bak = target.with_name(target.name + ".bak")
    if not bak.exists():
        target.parent.mkdir(parents=True, exist_ok=True)
        bak.write_bytes(target.read_bytes() if target.exists() else data)
    return bak.read_bytes()


def _sign_to(target: Path, payload: bytes, kind: ImageKind, h) -> None:  # type: ignore[no-untyped-def]
    signed = sign_image(BootImage(payload, kind), h.db.key, h.db.cert)
    target.write_bytes(signed.to_bytes())
    log.info("signed %s", target)


def mkkeys(work: Path) -> dict[str, object]:
    """Create the Secure Boot key hierarchy and its enrollment bundle."""
    h = _sbkeys(work)
    keys = work / "sbkeys"
    if not (keys / "DB.auth").exists():
        save_bundle(build_enrollment_bundle(h), keys)
    return {"keys": sorted(p.name for p in keys.iterdir())}


def sign_binaries(work: Path) -> dict[str, object]:
    """Sign the iPXE build and the kernel with the DB key."""
    h = _sbkeys(work)
    mkkeys(work)
    payloads = sample_payloads(0)
    ipxe = work / "tftp" / IPXE_FILE
    kernel = work / "www" / "kernel"
    ipxe_code = build_ipxe_binary(payloads["ipxe_code"], None, VERIFIED_CHAIN_SCRIPT)
    _sign_to(ipxe, _keep_original(ipxe, ipxe_code), ImageKind.IPXE, h)
    _sign_to(kernel, _keep_original(kernel, payloads["kernel"]), ImageKind.KERNEL, h)
    initrd = work / "www" / "initramfs-stage31"
    if not initrd.exists():
        initrd.write_bytes(payloads["initrd"])
    return {"signed": [str(ipxe), str(kernel)]}


def uki(work: Path) -> dict[str, object]:
    """Write the UKI inputs, assemble kernel.efi.bak and sign it as kernel.efi."""
    kernel_bak = work / "www" / "kernel.bak"
    if not kernel_bak.exists():
        raise PrerequisiteError(f"{kernel_bak} missing; run the 'sign-binaries' (listing-2) flow first")
    h = _sbkeys(work, create=False)
    srv = work / "srv"
    srv.mkdir(exist_ok=True)
    (srv / "cmd").write_text(SLX_KERNEL_CMDLINE + "\n")
    (srv / "osrel").write_text(BOOKWORM_OS_RELEASE)
    payloads = sample_payloads(0)
    container = build_uki(
        payloads["stub"],
        OsRelease.parse((srv / "osrel").read_text()),
        (srv / "cmd").read_text().strip(),
        kernel_bak.read_bytes(),
        (work / "www" / "initramfs-stage31").read_bytes(),
    )
    unsigned = work / "www" / "kernel.efi.bak"
    unsigned.write_bytes(container.serialize())
    _sign_to(work / "www" / "kernel.efi", unsigned.read_bytes(), ImageKind.UKI, h)
    return {"sections": container.describe()}


def ipxe_codesign(work: Path) -> dict[str, object]:
    """Set up the code-signing CA, embed it in an iPXE build and sign the boot files."""
    www = work / "www"
    targets = [p for p in (www / "kernel", www / "kernel.efi") if p.exists()]
    if not targets:
        raise PrerequisiteError(
            f"no Secure Boot signed kernel in {www}; run the 'sign-binaries' (listing-2) flow first "
            "(detached signatures must be made after the Secure Boot signature)"
        )
    for target in targets:
        if not SignedBootImage.from_bytes(target.read_bytes()).signatures:
            raise PrerequisiteError(f"{target} carries no Secure Boot signature; run the 'sign-binaries' (listing-2) flow first")

    ca_dir = work / "ipxe-ca"
    if (ca_dir / "ca.crt").exists():
        ca = CodeSignCa.load(ca_dir)
    else:
        ca = ca_init("ipxe.ca")
    key_path, cert_path = work / "codesign.key", work / "codesign.crt"
    if key_path.exists() and cert_path.exists():
        key = _codec.load_private_key(key_path.read_text())
        cert = CodeCert.from_armor(cert_path.read_text())
    else:
        key = _codec.new_rsa_key()
        cert = issue_codesign(ca, "codesign", key.public_key())
        key_path.write_text(_codec.private_key_pem(key))
        key_path.chmod(0o600)
        cert_path.write_text(cert.to_armor())
    ca.save(ca_dir)

    payloads = sample_payloads(0)
    build = work / "tftp" / "undionly.kkpxe"
    build.parent.mkdir(parents=True, exist_ok=True)
    build.write_bytes(build_ipxe_binary(payloads["ipxe_code"], ca.ca_cert, VERIFIED_CHAIN_SCRIPT))

    signatures = []
    for target in targets:
        image = SignedBootImage.from_bytes(target.read_bytes())
        sig = sign_order_check(image, cert, key, ca)
        sig_path = target.with_name(target.name + ".sig")
        sig_path.write_bytes(sig.to_bytes())
        if not verify_detached(target.read_bytes(), DetachedSignature.from_bytes(sig_path.read_bytes()), [ca.ca_cert]):
            raise PrerequisiteError(f"fresh signature for {target} does not verify")
        signatures.append(str(sig_path))
        log.info("signed %s", sig_path)
    return {"ca": str(ca_dir), "signatures": signatures}


def tpm_keys(work: Path) -> dict[str, object]:
    """Create and persist a TPM key, export it, and round-trip a secret both ways."""
    usb = work / "usb"
    usb.mkdir(parents=True, exist_ok=True)
    state_path = usb / "tpm.bin"
    tpm = TpmState.load(state_path) if state_path.exists() else TpmState()
    try:
        tpm.public_key(TPM_HANDLE)
    except NotFoundError:
        token = tpm.create_primary("rsa2048")
        (usb / "key.ctx").write_text(token + "\n")
        tpm.evict_control(token, TPM_HANDLE)
    (usb / "key.pem").write_text(tpm.read_public(TPM_HANDLE))
    (usb / "msg.enc").write_bytes(tpm.rsa_encrypt(TPM_HANDLE, SECRET))
    (usb / "msg2.enc").write_bytes(rsa_encrypt((usb / "key.pem").read_text(), SECRET))
    tpm.save(state_path)

    reloaded = TpmState.load(state_path)
    plain = [reloaded.rsa_decrypt(TPM_HANDLE, (usb / n).read_bytes()) for n in ("msg.enc", "msg2.enc")]
    return {"handle": f"{TPM_HANDLE:#010x}", "decrypted": [p.decode() for p in plain]}


FLOWS = {
    f.name: f
    for f in (
        Flow("mkkeys", "listing-1", "Secure Boot key hierarchy and enrollment bundle", mkkeys),
        Flow("sign-binaries", "listing-2", "keys plus signed iPXE build and kernel", sign_binaries),
        Flow("uki", "listing-6", "assemble and sign a unified kernel image", uki),
        Flow("ipxe-codesign", "listing-9-11", "code-signing CA, trusted iPXE build, detached signatures", ipxe_codesign),
        Flow("tpm-keys", "listing-12-13", "persistent TPM key and RSA round trip", tpm_keys),
    )
}
ALIASES = {f.alias: f.name for f in FLOWS.values()}


def resolve(name: str) -> Flow:
    try:
        return FLOWS[ALIASES.get(name, name)]
    except KeyError:
        known = ", ".join(sorted(FLOWS) + sorted(ALIASES))
        raise NotFoundError(f"unknown flow {name!r}; known: {known}") from None


def walkthrough(name: str, workdir: Path) -> dict[str, object]:
    flow = resolve(name)
    workdir.mkdir(parents=True, exist_ok=True)
    log.info("flow %s in %s", flow.name, workdir)
    return flow.run(workdir)
