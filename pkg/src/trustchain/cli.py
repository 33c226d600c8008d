"""``trustchain`` command-line entry point.

Exit codes: 0 success, 1 verification or security failure, 2 usage or
invalid input, 3 I/O or network failure, 4 missing prerequisite.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import _codec, __version__
from .anchors import (
    Certificate,
    SignedSignatureList,
    UefiKeyStore,
    build_enrollment_bundle,
    enroll,
    generate_hierarchy,
    load_hierarchy,
    save_bundle,
    save_hierarchy,
)
from .blocks import (
    AttackKind,
    BlockClient,
    ImageStore,
    SocketChannel,
    decrypt_block,
    encode_reply,
    inject_attack,
    serve,
)
from .bootsim import (
    Attack,
    BootConfig,
    expected_outcome,
    full_matrix,
    generate_fixtures,
    level_report,
    run_scenario,
)
from .bootsim.fixtures import Fixtures
from .errors import (
    BlockIntegrityError,
    NotFoundError,
    PrerequisiteError,
    ProtocolError,
    TrustchainError,
    ValidationError,
    VerificationError,
)
from .image import (
    BootImage,
    ImageKind,
    OsRelease,
    SignedBootImage,
    UkiContainer,
    build_uki,
    effective_cmdline,
    extract_section,
    sign_image,
    verify_image,
)
from .ipxe import (
    CodeCert,
    CodeSignCa,
    DetachedSignature,
    FetchError,
    ca_init,
    interpret_script,
    issue_codesign,
    sign_detached,
    sign_order_check,
    verify_detached,
)
from .provisioning import (
    AssetTagStore,
    Channel,
    ClientRegistry,
    SessionGrant,
    issue_session_key,
    max_key_bits,
    provision_client,
    provision_from_envelope,
    redeem_session_key,
)
from .tpm import PcrPolicy, Quote, SealedBlob, TpmState, rsa_encrypt, verify_quote
from .walkthrough import FLOWS, walkthrough

log = logging.getLogger("trustchain")

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PREREQ = 4

# Module operation -> the one subcommand that exposes it.
OPERATION_COMMANDS = {
    "trust-anchors.generate_hierarchy": "keygen",
    "trust-anchors.build_enrollment_bundle": "bundle",
    "trust-anchors.enroll": "enroll",
    "trust-anchors.check_allowed": "verify",
    "image-forge.build_uki": "uki build",
    "image-forge.inspect": "uki inspect",
    "image-forge.extract_section": "uki extract",
    "image-forge.effective_cmdline": "uki cmdline",
    "image-forge.sign_image": "sign",
    "image-forge.verify_image": "verify",
    "script-signing.ca_init": "ipxe-ca init",
    "script-signing.issue_codesign": "ipxe-ca issue",
    "script-signing.sign_detached": "ipxe-sign",
    "script-signing.verify_detached": "ipxe-verify",
    "script-signing.interpret_script": "ipxe-run",
    "script-signing.sign_order_check": "ipxe-sign-final",
    "soft-tpm.create_primary": "tpm create-primary",
    "soft-tpm.evict_control": "tpm evict",
    "soft-tpm.read_public": "tpm read-public",
    "soft-tpm.rsa_encrypt": "tpm encrypt",
    "soft-tpm.rsa_decrypt": "tpm decrypt",
    "soft-tpm.pcr_extend": "tpm pcr-extend",
    "soft-tpm.pcr_read": "tpm pcr-read",
    "soft-tpm.seal": "tpm seal",
    "soft-tpm.unseal": "tpm unseal",
    "soft-tpm.attest_quote": "tpm quote",
    "soft-tpm.verify_quote": "tpm verify-quote",
    "provisioning.provision_client": "provision",
    "provisioning.issue_session_key": "grant",
    "provisioning.redeem_session_key": "redeem",
    "provisioning.asset_tag_write": "tag write",
    "provisioning.asset_tag_read": "tag read",
    "block-transport.serve": "serve-blocks",
    "block-transport.encrypt_block": "serve-blocks",
    "block-transport.fetch": "fetch-block",
    "block-transport.decrypt_block": "fetch-block",
    "block-transport.inject_attack": "fetch-block",
    "boot-sim.generate_fixtures": "fixtures",
    "boot-sim.run_scenario": "simulate",
    "boot-sim.expected_outcome": "expect",
    "boot-sim.full_matrix": "matrix",
    "boot-sim.emit_report": "report",
    "cli.walkthrough": "walkthrough",
}


def home() -> Path:
    return Path(os.environ.get("TRUSTCHAIN_HOME") or Path.home() / ".trustchain")


def _path(value: Path | None, fallback: str) -> Path:
    return value if value is not None else home() / fallback


def _handle(text: str) -> int:
    try:
        return int(text, 16) if text.lower().startswith("0x") else int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a handle: {text!r}") from None


def _pcr_list(text: str) -> list[int]:
    try:
        return sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a PCR list: {text!r}") from None


def _write_secret(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    path.chmod(0o600)


def _write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        path.write_text(data)
    else:
        path.write_bytes(data)


class Output:
    def __init__(self, fmt: str) -> None:
        self.json = fmt == "json"

    def emit(self, doc: dict[str, Any], text: str | None = None) -> None:
        if self.json:
            print(json.dumps(doc, indent=2, sort_keys=True))
        elif text is not None:
            print(text)
        else:
            for key, value in doc.items():
                print(f"{key}: {value}")


# -- trust anchors ------------------------------------------------------------


def _load_store(path: Path) -> UefiKeyStore:
    return UefiKeyStore.from_json(path.read_text()) if path.exists() else UefiKeyStore()


def cmd_keygen(args: argparse.Namespace, out: Output) -> int:
    h = generate_hierarchy(args.cn)
    save_hierarchy(h, args.out)
    out.emit({"dir": str(args.out), "guid": str(h.guid), "cn": args.cn})
    return EXIT_OK


def cmd_bundle(args: argparse.Namespace, out: Output) -> int:
    h = load_hierarchy(args.keys)
    bundle = build_enrollment_bundle(h, args.timestamp)
    save_bundle(bundle, args.out)
    out.emit({"dir": str(args.out), "files": sorted(f"{n}.auth" for n in bundle)})
    return EXIT_OK


def cmd_enroll(args: argparse.Namespace, out: Output) -> int:
    store = _load_store(args.store)
    for auth in args.auth:
        store = enroll(store, SignedSignatureList.from_bytes(auth.read_bytes()))
    _write(args.store, store.to_json())
    out.emit({"store": str(args.store), "setup_mode": store.setup_mode, "timestamps": list(store.timestamps)})
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, out: Output) -> int:
    store = _load_store(args.store)
    image = SignedBootImage.from_bytes(args.input.read_bytes(), ImageKind(args.kind))
    verdict = verify_image(image, store)
    out.emit({"file": str(args.input), "verdict": verdict.value, "signatures": len(image.signatures)}, verdict.value)
    return EXIT_OK if verdict.allowed else EXIT_VERIFY


# -- image forge --------------------------------------------------------------


def cmd_uki_build(args: argparse.Namespace, out: Output) -> int:
    container = build_uki(
        args.stub.read_bytes(),
        OsRelease.parse(args.osrel.read_text()),
        args.cmdline.read_text().strip(),
        args.linux.read_bytes(),
        args.initrd.read_bytes() if args.initrd else None,
    )
    _write(args.out, container.serialize())
    out.emit({"out": str(args.out), "sections": container.describe()}, _section_table(container))
    return EXIT_OK


def _load_uki(path: Path) -> UkiContainer:
    # Appended Secure Boot signatures are stripped first.
    return UkiContainer.parse(SignedBootImage.from_bytes(path.read_bytes(), ImageKind.UKI).image.payload)


def _section_table(container: UkiContainer) -> str:
    lines = [f"{'section':<10} {'vma':>10} {'size':>10}"]
    for row in container.describe():
        lines.append(f"{row['name']:<10} {row['vma']:>10} {row['size']:>10}")
    return "\n".join(lines)


def cmd_uki_inspect(args: argparse.Namespace, out: Output) -> int:
    container = _load_uki(args.file)
    out.emit({"file": str(args.file), "sections": container.describe()}, _section_table(container))
    return EXIT_OK


def cmd_uki_extract(args: argparse.Namespace, out: Output) -> int:
    data = extract_section(_load_uki(args.file), args.section)
    if args.out:
        _write(args.out, data)
        out.emit({"section": args.section, "out": str(args.out), "size": len(data)})
    else:
        sys.stdout.buffer.write(data)
    return EXIT_OK


def cmd_uki_cmdline(args: argparse.Namespace, out: Output) -> int:
    line = effective_cmdline(_load_uki(args.file), args.external)
    out.emit({"cmdline": line}, line)
    return EXIT_OK


def cmd_sign(args: argparse.Namespace, out: Output) -> int:
    key = _codec.load_private_key(args.key.read_text())
    cert = Certificate.from_armor(args.cert.read_text())
    existing = SignedBootImage.from_bytes(args.input.read_bytes(), ImageKind(args.kind))
    base = existing if existing.signatures else BootImage(existing.image.payload, ImageKind(args.kind))
    signed = sign_image(base, key, cert)
    _write(args.out, signed.to_bytes())
    out.emit({"out": str(args.out), "signatures": len(signed.signatures)})
    return EXIT_OK


# -- script signing -----------------------------------------------------------


def _trust_certs(path: Path) -> list[CodeCert]:
    files = sorted(path.glob("*.crt")) if path.is_dir() else [path]
    certs = []
    for f in files:
        try:
            cert = CodeCert.from_armor(f.read_text())
        except ValidationError:
            continue
        if cert.is_ca:
            certs.append(cert)
    return certs


def cmd_ca_init(args: argparse.Namespace, out: Output) -> int:
    if (args.dir / "ca.crt").exists() and not args.force:
        raise ValidationError(f"{args.dir} already holds a CA; pass --force to replace it")
    ca = ca_init(args.subject)
    ca.save(args.dir)
    out.emit({"dir": str(args.dir), "subject": ca.ca_cert.subject, "fingerprint": ca.ca_cert.fingerprint.hex()})
    return EXIT_OK


def cmd_ca_issue(args: argparse.Namespace, out: Output) -> int:
    ca = CodeSignCa.load(args.dir)
    if args.pubkey:
        public = _codec.load_public_pem(args.pubkey.read_text())
    else:
        key = _codec.new_rsa_key()
        _write_secret(args.key_out, _codec.private_key_pem(key).encode())
        public = key.public_key()
    cert = issue_codesign(ca, args.subject, public)
    ca.save(args.dir)
    _write(args.cert_out, cert.to_armor())
    out.emit({"cert": str(args.cert_out), "serial": cert.serial, "validity_days": cert.validity_days})
    return EXIT_OK


def _signer(args: argparse.Namespace) -> tuple[CodeCert, Any, list[CodeCert]]:
    cert = CodeCert.from_armor(args.cert.read_text())
    key = _codec.load_private_key(args.key.read_text())
    chain = _trust_certs(args.ca) if args.ca else []
    return cert, key, chain


def cmd_ipxe_sign(args: argparse.Namespace, out: Output) -> int:
    cert, key, chain = _signer(args)
    data = args.input.read_bytes()
    if args.require_sb and not SignedBootImage.from_bytes(data).signatures:
        raise PrerequisiteError(f"{args.input} has no Secure Boot signature yet; run `trustchain sign` first")
    sig = sign_detached(data, cert, key, chain)
    target = args.out or args.input.with_name(args.input.name + ".sig")
    _write(target, sig.to_bytes())
    out.emit({"sig": str(target), "digest": sig.digest.hex()})
    return EXIT_OK


def cmd_ipxe_sign_final(args: argparse.Namespace, out: Output) -> int:
    cert, key, chain = _signer(args)
    image = SignedBootImage.from_bytes(args.input.read_bytes())
    if not image.signatures:
        raise PrerequisiteError(f"{args.input} has no Secure Boot signature yet; run `trustchain sign` first")
    sig = sign_order_check(image, cert, key, chain)
    target = args.out or args.input.with_name(args.input.name + ".sig")
    _write(target, sig.to_bytes())
    out.emit({"sig": str(target), "digest": sig.digest.hex(), "secure_boot_signatures": len(image.signatures)})
    return EXIT_OK


def cmd_ipxe_verify(args: argparse.Namespace, out: Output) -> int:
    sig_path = args.sig or args.input.with_name(args.input.name + ".sig")
    sig = DetachedSignature.from_bytes(sig_path.read_bytes())
    ok = verify_detached(args.input.read_bytes(), sig, _trust_certs(args.trust))
    out.emit({"file": str(args.input), "verified": ok, "signer": sig.signer_cert.subject}, "OK" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


def _file_fetcher(root: Path) -> Callable[[str], bytes]:
    from urllib.parse import unquote, urlsplit

    def fetch(url: str) -> bytes:
        parts = urlsplit(url)
        rel = unquote(parts.path).lstrip("/")
        if parts.query:
            rel += "?" + parts.query
        for candidate in (root / rel, root / Path(rel).name):
            if candidate.is_file():
                return candidate.read_bytes()
        raise FetchError(f"not found: {url}")

    return fetch


def cmd_ipxe_run(args: argparse.Namespace, out: Output) -> int:
    env = {}
    for item in args.env:
        name, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--env expects name=value, got {item!r}")
        env[name] = value
    trust = _trust_certs(args.trust) if args.trust else []
    result = interpret_script(
        args.script.read_bytes(), _file_fetcher(args.root), trust, args.embedded_trust, env
    )
    doc = {
        "trace": [
            {"verb": e.verb, "target": e.target, "verdict": e.verdict.value, "detail": e.detail}
            for e in result.trace
        ],
        "error": result.error,
        "boot": None
        if result.action is None
        else {"name": result.action.name, "url": result.action.url, "cmdline": result.action.cmdline,
              "verified": result.action.verified},
    }
    lines = [f"{e.verb} {e.target} -> {e.verdict.value}{' ' + e.detail if e.detail else ''}" for e in result.trace]
    if result.action is not None:
        lines.append(f"boot {result.action.name} cmdline={result.action.cmdline!r}")
    if result.error:
        lines.append(f"error: {result.error}")
    out.emit(doc, "\n".join(lines))
    if any(e.verdict.value == "rejected" for e in result.trace):
        return EXIT_VERIFY
    return EXIT_OK if result.action is not None else EXIT_VERIFY


# -- soft TPM -----------------------------------------------------------------


def _tpm(args: argparse.Namespace, create: bool = False) -> TpmState:
    path = _path(args.state, "tpm.bin")
    if path.exists():
        return TpmState.load(path)
    if not create:
        raise PrerequisiteError(f"no TPM state at {path}; run `trustchain tpm create-primary` first")
    return TpmState()


def _save_tpm(args: argparse.Namespace, tpm: TpmState) -> None:
    path = _path(args.state, "tpm.bin")
    path.parent.mkdir(parents=True, exist_ok=True)
    tpm.save(path)


def _read_input(path: Path | None) -> bytes:
    return sys.stdin.buffer.read() if path is None or str(path) == "-" else path.read_bytes()


def _write_output(path: Path | None, data: bytes) -> None:
    if path is None:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    else:
        _write(path, data)


def cmd_tpm_create_primary(args: argparse.Namespace, out: Output) -> int:
    tpm = _tpm(args, create=True)
    token = tpm.create_primary(args.key_algorithm)
    _save_tpm(args, tpm)
    if args.key_context:
        _write(args.key_context, token + "\n")
    out.emit({"context": token}, token)
    return EXIT_OK


def cmd_tpm_evict(args: argparse.Namespace, out: Output) -> int:
    tpm = _tpm(args)
    token = args.object_context
    if Path(token).is_file():
        token = Path(token).read_text().strip()
    tpm.evict_control(token, args.handle)
    _save_tpm(args, tpm)
    out.emit({"handle": f"{args.handle:#010x}"})
    return EXIT_OK


def cmd_tpm_read_public(args: argparse.Namespace, out: Output) -> int:
    pem = _tpm(args).read_public(args.handle)
    if args.output:
        _write(args.output, pem)
        out.emit({"handle": f"{args.handle:#010x}", "out": str(args.output)})
    else:
        out.emit({"handle": f"{args.handle:#010x}", "pem": pem}, pem.rstrip())
    return EXIT_OK


def cmd_tpm_encrypt(args: argparse.Namespace, out: Output) -> int:
    data = _read_input(args.input)
    if args.pubkey:
        ct = rsa_encrypt(args.pubkey.read_text(), data)
    elif args.handle is not None:
        ct = _tpm(args).rsa_encrypt(args.handle, data)
    else:
        raise ValidationError("pass --handle or --pubkey")
    _write_output(args.output, ct)
    return EXIT_OK


def cmd_tpm_decrypt(args: argparse.Namespace, out: Output) -> int:
    _write_output(args.output, _tpm(args).rsa_decrypt(args.handle, _read_input(args.input)))
    return EXIT_OK


def cmd_tpm_pcr_extend(args: argparse.Namespace, out: Output) -> int:
    tpm = _tpm(args, create=True)
    if args.digest:
        measurement = bytes.fromhex(args.digest)
    elif args.data:
        measurement = _codec.sha256(args.data.read_bytes())
    else:
        raise ValidationError("pass --digest or --data")
    value = tpm.pcr_extend(args.index, measurement)
    _save_tpm(args, tpm)
    out.emit({"pcr": args.index, "value": value.hex()}, value.hex())
    return EXIT_OK


def cmd_tpm_pcr_read(args: argparse.Namespace, out: Output) -> int:
    tpm = _tpm(args, create=True)
    indices = args.pcrs if args.pcrs is not None else list(range(24))
    values = {str(i): tpm.pcr_read(i).hex() for i in indices}
    out.emit({"pcrs": values}, "\n".join(f"{i:>2}: {v}" for i, v in values.items()))
    return EXIT_OK


def cmd_tpm_seal(args: argparse.Namespace, out: Output) -> int:
    tpm = _tpm(args)
    policy = PcrPolicy.of(tpm.pcr_values(args.pcrs))
    blob = tpm.seal(_read_input(args.input), policy)
    _write(args.output, blob.to_bytes())
    out.emit({"out": str(args.output), "pcrs": args.pcrs, "policy": policy.digest.hex()})
    return EXIT_OK


def cmd_tpm_unseal(args: argparse.Namespace, out: Output) -> int:
    blob = SealedBlob.from_bytes(args.input.read_bytes())
    _write_output(args.output, _tpm(args).unseal(blob))
    return EXIT_OK


def cmd_tpm_quote(args: argparse.Namespace, out: Output) -> int:
    tpm = _tpm(args)
    quote = tpm.quote(args.pcrs, bytes.fromhex(args.nonce))
    _save_tpm(args, tpm)
    _write(args.output, quote.to_bytes())
    if args.pubkey_out:
        _write(args.pubkey_out, tpm.quote_public())
    out.emit({"out": str(args.output), "pcr_digest": quote.pcr_digest.hex()})
    return EXIT_OK


def cmd_tpm_verify_quote(args: argparse.Namespace, out: Output) -> int:
    quote = Quote.from_bytes(args.quote.read_bytes())
    ok = verify_quote(quote, args.pubkey.read_text(), bytes.fromhex(args.nonce))
    out.emit({"verified": ok, "pcrs": list(quote.selection)}, "OK" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


# -- provisioning -------------------------------------------------------------


def _registry(args: argparse.Namespace) -> ClientRegistry:
    path = _path(args.registry, "registry.txt")
    path.parent.mkdir(parents=True, exist_ok=True)
    return ClientRegistry(path)


def _sessions_path(args: argparse.Namespace) -> Path:
    return _path(args.sessions, "sessions.json")


def _load_sessions(path: Path) -> dict[str, tuple[int, bytes]]:
    if not path.exists():
        return {}
    doc = json.loads(path.read_text())
    return {cid: (int(v["epoch"]), bytes.fromhex(v["key"])) for cid, v in doc.items()}


def cmd_provision(args: argparse.Namespace, out: Output) -> int:
    registry = _registry(args)
    if args.envelope:
        server_key = _codec.load_private_key(args.server_key.read_text())
        record = provision_from_envelope(registry, args.id, args.envelope.read_bytes(), server_key, args.channel)
    else:
        record = provision_client(registry, args.id, args.pubkey.read_text(), args.channel)
    out.emit({"client": record.client_id, "channel": record.channel.value, "first_seen": record.first_seen})
    return EXIT_OK


def cmd_grant(args: argparse.Namespace, out: Output) -> int:
    registry = _registry(args)
    grant, key = issue_session_key(registry, args.id, args.epoch)
    _write(args.out, grant.to_bytes())
    sessions_path = _sessions_path(args)
    sessions = _load_sessions(sessions_path)
    sessions[args.id] = (grant.epoch, key)
    _write_secret(
        sessions_path,
        json.dumps({c: {"epoch": e, "key": k.hex()} for c, (e, k) in sorted(sessions.items())}, indent=2).encode(),
    )
    out.emit({"client": args.id, "epoch": grant.epoch, "grant": str(args.out)})
    return EXIT_OK


def cmd_redeem(args: argparse.Namespace, out: Output) -> int:
    grant = SessionGrant.from_bytes(args.grant.read_bytes())
    key = redeem_session_key(_tpm(args), args.handle, grant)
    if args.out:
        _write_secret(args.out, key)
        out.emit({"client": grant.client_id, "epoch": grant.epoch, "key": str(args.out)})
    else:
        out.emit({"client": grant.client_id, "epoch": grant.epoch, "key": key.hex()}, key.hex())
    return EXIT_OK


def _tag_store(path: Path) -> AssetTagStore:
    store = AssetTagStore()
    if path.exists():
        store.write(path.read_bytes())
    return store


def cmd_tag_write(args: argparse.Namespace, out: Output) -> int:
    data = bytes.fromhex(args.hex) if args.hex is not None else _read_input(args.input)
    path = _path(args.tag, "asset-tag.bin")
    store = AssetTagStore()
    store.write(data)
    _write_secret(path, data)
    out.emit({"tag": str(path), "bytes": len(data), "key_bits": store.key_bits(), "max_bits": max_key_bits()})
    return EXIT_OK


def cmd_tag_read(args: argparse.Namespace, out: Output) -> int:
    store = _tag_store(_path(args.tag, "asset-tag.bin"))
    root = not args.unprivileged
    data = store.read_all(root) if args.offset is None else store.read(args.offset, root)
    out.emit({"offset": args.offset, "data": data.hex(), "bits": len(data) * 8}, data.hex())
    return EXIT_OK


# -- block transport ----------------------------------------------------------


def _endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def cmd_serve_blocks(args: argparse.Namespace, out: Output) -> int:
    store = ImageStore(args.image.read_bytes())
    sessions_path = _sessions_path(args)

    def lookup(client_id: str) -> tuple[int, bytes]:
        # Re-read on every hello so freshly issued grants take effect.
        try:
            return _load_sessions(sessions_path)[client_id]
        except KeyError:
            raise NotFoundError(client_id) from None

    host, port = args.listen
    server = serve(store, lookup, host, port)
    bound = server.server_address
    print(f"serving image {store.image_id.hex()} ({store.block_count} blocks) on {bound[0]}:{bound[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_fetch_block(args: argparse.Namespace, out: Output) -> int:
    grant = SessionGrant.from_bytes(args.grant.read_bytes())
    tpm = TpmState.load(args.tpm)
    key = redeem_session_key(tpm, args.handle, grant)
    host, port = args.connect
    with SocketChannel(host, port) as sock:
        channel: Any = sock
        if args.attack:
            params: dict[str, Any] = {}
            kind = AttackKind(args.attack)
            if kind is AttackKind.SWAP_INDEX:
                params["swap"] = (args.index, args.index + 1)
            if kind is AttackKind.REPLAY_EPOCH:
                if not args.replay:
                    raise ValidationError("ReplayEpoch needs --replay with a reply recorded earlier")
                params["recorded"] = {args.index: args.replay.read_bytes()}
            channel = inject_attack(sock, kind, **params)
        client = BlockClient(channel, grant.client_id, key)
        reply = client.fetch(args.index)
        if args.record:
            _write(args.record, encode_reply(client.ctx.image_id, reply))
        try:
            data = decrypt_block(client.ctx, reply, expected_index=args.index)
        except BlockIntegrityError as exc:
            out.emit({"index": args.index, "ok": False, "error": str(exc)}, f"rejected: {exc}")
            return EXIT_VERIFY
    if args.out:
        _write(args.out, data)
    out.emit({"index": args.index, "ok": True, "bytes": len(data), "sha256": _codec.sha256(data).hex()},
             f"block {args.index}: {len(data)} bytes sha256={_codec.sha256(data).hex()}")
    return EXIT_OK


# -- boot simulation ----------------------------------------------------------


def _fixtures(path: Path | None) -> Fixtures:
    directory = _path(path, "fixtures")
    if not (directory / "fixtures.json").exists():
        raise PrerequisiteError(f"no fixtures in {directory}; run `trustchain fixtures --out {directory}` first")
    return Fixtures.load(directory)


def _config(args: argparse.Namespace) -> BootConfig:
    values: dict[str, Any] = {}
    if args.config:
        with args.config.open("rb") as fh:
            values.update(tomllib.load(fh))
    for item in args.set or []:
        name, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects name=value, got {item!r}")
        values[name] = value
    return BootConfig.from_mapping(values)


def cmd_fixtures(args: argparse.Namespace, out: Output) -> int:
    directory = _path(args.out, "fixtures")
    fixtures = generate_fixtures(args.seed)
    fixtures.save(directory)
    out.emit({"dir": str(directory), "seed": args.seed})
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, out: Output) -> int:
    config = _config(args)
    outcome = run_scenario(config, Attack.of(args.attack), _fixtures(args.fixtures))
    doc = {
        "config": config.as_dict(),
        "attack": outcome.attack.name,
        "outcome": outcome.label,
        "trace": [e.line() for e in outcome.trace],
        "ops": outcome.ops.__dict__,
    }
    if args.trace_out:
        _write(args.trace_out, outcome.trace_text())
    out.emit(doc, outcome.trace_text().rstrip())
    return EXIT_OK


def cmd_expect(args: argparse.Namespace, out: Output) -> int:
    config = _config(args)
    expected = expected_outcome(config, Attack.of(args.attack))
    out.emit({"config": config.as_dict(), "attack": args.attack, "expected": expected.label}, expected.label)
    return EXIT_OK


def cmd_matrix(args: argparse.Namespace, out: Output) -> int:
    report = full_matrix(_fixtures(args.fixtures), workers=args.workers)
    if args.out:
        _write(args.out, report.to_csv())
    summary = report.summary()
    doc = {
        **summary,
        "mismatch_cells": [
            {"config": r.config.key, "attack": r.attack.name, "expected": r.expected.label, "actual": r.actual}
            for r in report.mismatches
        ],
    }
    text = [f"{summary['cells']} cells, {summary['mismatches']} mismatches, {summary['skipped_configs']} invalid configs skipped"]
    text += [f"MISMATCH {c['config']} {c['attack']}: expected {c['expected']}, got {c['actual']}" for c in doc["mismatch_cells"]]
    out.emit(doc, "\n".join(text))
    return EXIT_OK if not report.mismatches else EXIT_VERIFY


def cmd_report(args: argparse.Namespace, out: Output) -> int:
    report = level_report(_fixtures(args.fixtures))
    if args.out:
        _write(args.out, report.to_csv())
    out.emit({"rows": [r.as_dict() for r in report.rows]}, report.to_text().rstrip())
    return EXIT_OK


def cmd_walkthrough(args: argparse.Namespace, out: Output) -> int:
    if args.list or not args.name:
        rows = [{"name": f.name, "alias": f.alias, "summary": f.summary} for f in FLOWS.values()]
        out.emit({"flows": rows}, "\n".join(f"{r['name']:<14} {r['alias']:<14} {r['summary']}" for r in rows))
        return EXIT_OK if args.list else EXIT_USAGE
    result = walkthrough(args.name, _path(args.dir, "work"))
    out.emit({"flow": args.name, **result}, json.dumps(result, indent=2))
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("text", "json"), default=argparse.SUPPRESS, help="output format")

    parser = argparse.ArgumentParser(
        prog="trustchain",
        description="Chain-of-trust tooling for network-booted stateless clients.",
        parents=[common],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(parent: Any, name: str, func: Callable[..., int], help_text: str) -> argparse.ArgumentParser:
        p = parent.add_parser(name, help=help_text, description=help_text, parents=[common])
        p.set_defaults(func=func)
        return p

    def group(name: str, help_text: str) -> Any:
        p = sub.add_parser(name, help=help_text, description=help_text, parents=[common])
        p.set_defaults(func=None, parser=p)
        return p.add_subparsers(dest=f"{name}_command", metavar="ACTION")

    # trust anchors
    p = add(sub, "keygen", cmd_keygen, "generate a PK/KEK/DB key hierarchy")
    p.add_argument("--cn", required=True, help="common name prefix")
    p.add_argument("--out", type=Path, required=True, help="key directory")
    p = add(sub, "bundle", cmd_bundle, "build signed enrollment lists (.auth) from a key directory")
    p.add_argument("--keys", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--timestamp", type=int, help="first timestamp (default: now)")
    p = add(sub, "enroll", cmd_enroll, "apply .auth files to a key store file")
    p.add_argument("--store", type=Path, required=True, help="store file, created in setup mode if missing")
    p.add_argument("--auth", type=Path, action="append", required=True, help="repeatable, applied in order")
    p = add(sub, "verify", cmd_verify, "check a signed boot image against a key store")
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--kind", choices=[k.value for k in ImageKind], default=ImageKind.KERNEL.value)

    # image forge
    uki = group("uki", "unified kernel image operations")
    p = add(uki, "build", cmd_uki_build, "assemble a UKI from its parts")
    for name in ("stub", "osrel", "cmdline", "linux"):
        p.add_argument(f"--{name}", type=Path, required=True)
    p.add_argument("--initrd", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p = add(uki, "inspect", cmd_uki_inspect, "print the section table")
    p.add_argument("file", type=Path)
    p = add(uki, "extract", cmd_uki_extract, "write one section's bytes")
    p.add_argument("file", type=Path)
    p.add_argument("--section", required=True)
    p.add_argument("--out", type=Path)
    p = add(uki, "cmdline", cmd_uki_cmdline, "print the command line the kernel would use")
    p.add_argument("file", type=Path)
    p.add_argument("--external", default="", help="parameters supplied by the boot loader")
    p = add(sub, "sign", cmd_sign, "append a Secure Boot signature with a DB key")
    p.add_argument("--key", type=Path, required=True)
    p.add_argument("--cert", type=Path, required=True)
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--kind", choices=[k.value for k in ImageKind], default=ImageKind.KERNEL.value)

    # script signing
    ca = group("ipxe-ca", "code-signing certificate authority")
    p = add(ca, "init", cmd_ca_init, "create ca.crt/ca.key/ca.srl/ca.idx")
    p.add_argument("--dir", type=Path, required=True)
    p.add_argument("--subject", default="ipxe.ca")
    p.add_argument("--force", action="store_true")
    p = add(ca, "issue", cmd_ca_issue, "issue a code-signing certificate")
    p.add_argument("--dir", type=Path, required=True)
    p.add_argument("--subject", default="codesign")
    p.add_argument("--pubkey", type=Path, help="PEM public key; a new key is generated if omitted")
    p.add_argument("--key-out", type=Path, default=Path("codesign.key"))
    p.add_argument("--cert-out", type=Path, default=Path("codesign.crt"))
    for name, func, text in (
        ("ipxe-sign", cmd_ipxe_sign, "write a detached signature for a file"),
        ("ipxe-sign-final", cmd_ipxe_sign_final, "sign a Secure Boot signed image in its final form"),
    ):
        p = add(sub, name, func, text)
        p.add_argument("--in", dest="input", type=Path, required=True)
        p.add_argument("--out", type=Path, help="default: <in>.sig")
        p.add_argument("--cert", type=Path, default=Path("codesign.crt"))
        p.add_argument("--key", type=Path, default=Path("codesign.key"))
        p.add_argument("--ca", type=Path, help="CA certificate or directory to include in the chain")
        if name == "ipxe-sign":
            p.add_argument("--require-sb", action="store_true", help="refuse files without a Secure Boot signature")
    p = add(sub, "ipxe-verify", cmd_ipxe_verify, "verify a detached signature")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--sig", type=Path, help="default: <in>.sig")
    p.add_argument("--trust", type=Path, required=True, help="CA certificate or directory of *.crt")
    p = add(sub, "ipxe-run", cmd_ipxe_run, "interpret an iPXE script against local files")
    p.add_argument("--script", type=Path, required=True)
    p.add_argument("--env", action="append", default=[], metavar="NAME=VALUE")
    p.add_argument("--root", type=Path, default=Path("."), help="directory URLs are resolved against")
    p.add_argument("--trust", type=Path)
    p.add_argument("--embedded-trust", action="store_true", help="behave as if built with imgtrust --permanent")

    # soft TPM
    tpm = group("tpm", "software TPM operations on a state file")

    def tpm_cmd(name: str, func: Callable[..., int], text: str) -> argparse.ArgumentParser:
        p = add(tpm, name, func, text)
        p.add_argument("--state", type=Path, help="state file (default: $TRUSTCHAIN_HOME/tpm.bin)")
        return p

    p = tpm_cmd("create-primary", cmd_tpm_create_primary, "create a transient RSA key")
    p.add_argument("--key-algorithm", default="rsa2048")
    p.add_argument("--key-context", type=Path, help="write the context token here")
    p = tpm_cmd("evict", cmd_tpm_evict, "make a transient key persistent")
    p.add_argument("--object-context", required=True, help="context token or file holding it")
    p.add_argument("handle", type=_handle)
    p = tpm_cmd("read-public", cmd_tpm_read_public, "export a persistent key as PEM")
    p.add_argument("--handle", type=_handle, required=True)
    p.add_argument("--output", type=Path)
    p = tpm_cmd("encrypt", cmd_tpm_encrypt, "RSA-OAEP encrypt to a TPM key")
    p.add_argument("--handle", type=_handle)
    p.add_argument("--pubkey", type=Path, help="encrypt with an exported PEM instead of the TPM")
    p.add_argument("input", type=Path, nargs="?")
    p.add_argument("--output", type=Path)
    p = tpm_cmd("decrypt", cmd_tpm_decrypt, "RSA-OAEP decrypt with a TPM key")
    p.add_argument("--handle", type=_handle, required=True)
    p.add_argument("input", type=Path, nargs="?")
    p.add_argument("--output", type=Path)
    p = tpm_cmd("pcr-extend", cmd_tpm_pcr_extend, "extend a PCR with a measurement")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--digest", help="32-byte measurement in hex")
    p.add_argument("--data", type=Path, help="measure the SHA-256 of this file")
    p = tpm_cmd("pcr-read", cmd_tpm_pcr_read, "print PCR values")
    p.add_argument("--pcrs", type=_pcr_list)
    p = tpm_cmd("seal", cmd_tpm_seal, "seal a secret to the current PCR values")
    p.add_argument("--pcrs", type=_pcr_list, required=True)
    p.add_argument("input", type=Path, nargs="?")
    p.add_argument("--output", type=Path, required=True)
    p = tpm_cmd("unseal", cmd_tpm_unseal, "release a sealed secret")
    p.add_argument("input", type=Path)
    p.add_argument("--output", type=Path)
    p = tpm_cmd("quote", cmd_tpm_quote, "sign selected PCR values with a verifier nonce")
    p.add_argument("--pcrs", type=_pcr_list, required=True)
    p.add_argument("--nonce", required=True, help="hex")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--pubkey-out", type=Path, help="also export the quote key")
    p = add(tpm, "verify-quote", cmd_tpm_verify_quote, "check a quote against the quote key and nonce")
    p.add_argument("--quote", type=Path, required=True)
    p.add_argument("--pubkey", type=Path, required=True)
    p.add_argument("--nonce", required=True)

    # provisioning
    p = add(sub, "provision", cmd_provision, "register and pin a client's TPM public key")
    p.add_argument("--id", required=True)
    p.add_argument("--pubkey", type=Path)
    p.add_argument("--channel", choices=[c.value for c in Channel], required=True)
    p.add_argument("--envelope", type=Path, help="public key wrapped to the server key")
    p.add_argument("--server-key", type=Path)
    p.add_argument("--registry", type=Path)
    p = add(sub, "grant", cmd_grant, "issue a session key encrypted to a client's TPM key")
    p.add_argument("--id", required=True)
    p.add_argument("--epoch", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--registry", type=Path)
    p.add_argument("--sessions", type=Path, help="server-side session table (default: $TRUSTCHAIN_HOME/sessions.json)")
    p = add(sub, "redeem", cmd_redeem, "recover a session key with the client's TPM")
    p.add_argument("--state", type=Path, required=True)
    p.add_argument("--handle", type=_handle, required=True)
    p.add_argument("--grant", type=Path, required=True)
    p.add_argument("--out", type=Path)
    tag = group("tag", "DCMI asset tag used as a key store")
    p = add(tag, "write", cmd_tag_write, "store up to 63 bytes")
    p.add_argument("--tag", type=Path)
    p.add_argument("--hex")
    p.add_argument("input", type=Path, nargs="?")
    p = add(tag, "read", cmd_tag_read, "read a 16-byte chunk (or everything)")
    p.add_argument("--tag", type=Path)
    p.add_argument("--offset", type=int)
    p.add_argument("--unprivileged", action="store_true", help="simulate a caller without root")

    # block transport
    p = add(sub, "serve-blocks", cmd_serve_blocks, "serve an image over the encrypted block protocol")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--listen", type=_endpoint, default=("127.0.0.1", 5003))
    p.add_argument("--sessions", type=Path)
    p = add(sub, "fetch-block", cmd_fetch_block, "fetch and authenticate one block")
    p.add_argument("--connect", type=_endpoint, required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--grant", type=Path, required=True)
    p.add_argument("--tpm", type=Path, required=True)
    p.add_argument("--handle", type=_handle, required=True)
    p.add_argument("--attack", choices=[k.value for k in AttackKind])
    p.add_argument("--replay", type=Path, help="recorded reply for ReplayEpoch")
    p.add_argument("--record", type=Path, help="save the raw reply")
    p.add_argument("--out", type=Path)

    # boot simulation
    p = add(sub, "fixtures", cmd_fixtures, "generate simulation fixtures")
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int, default=0)
    for name, func, text in (
        ("simulate", cmd_simulate, "run one boot scenario and print its trace"),
        ("expect", cmd_expect, "print the expected outcome for a config and attack"),
    ):
        p = add(sub, name, func, text)
        p.add_argument("--config", type=Path, help="flat TOML document with BootConfig fields")
        p.add_argument("--set", action="append", metavar="FIELD=VALUE", help="override one config field")
        p.add_argument("--attack", default="none")
        if name == "simulate":
            p.add_argument("--fixtures", type=Path)
            p.add_argument("--trace-out", type=Path)
    p = add(sub, "matrix", cmd_matrix, "run every valid config against every attack")
    p.add_argument("--fixtures", type=Path)
    p.add_argument("--out", type=Path, help="CSV report")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p = add(sub, "report", cmd_report, "operation counts for Off, Basic and Uki boots")
    p.add_argument("--fixtures", type=Path)
    p.add_argument("--out", type=Path, help="CSV report")

    p = add(sub, "walkthrough", cmd_walkthrough, "run a scripted end-to-end flow")
    p.add_argument("name", nargs="?", help="flow name or alias")
    p.add_argument("--dir", type=Path, help="work directory (default: $TRUSTCHAIN_HOME/work)")
    p.add_argument("--list", action="store_true")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, PrerequisiteError):
        return EXIT_PREREQ
    if isinstance(exc, VerificationError):
        return EXIT_VERIFY
    if isinstance(exc, (FetchError, ProtocolError, OSError)):
        return EXIT_IO
    return EXIT_USAGE


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    func = getattr(args, "func", None)
    if func is None:
        (getattr(args, "parser", None) or parser).print_usage(sys.stderr)
        return EXIT_USAGE
    out = Output(getattr(args, "format", "text"))
    try:
        return func(args, out)
    except (TrustchainError, OSError, ValueError, KeyError) as exc:
        code = _exit_code(exc)
        print(f"trustchain: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
