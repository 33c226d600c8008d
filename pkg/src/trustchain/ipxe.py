"""iPXE-style code signing: a small CA, detached ``.sig`` files and a script interpreter.

Only the verification-relevant subset of iPXE scripting is understood:
``set``, ``iseq``, ``goto``, ``prompt``, ``imgtrust``, ``imgfetch``,
``imgverify``, ``imgload``, ``imgexec``/``chain``, ``boot`` and ``imgfree``.
Any other verb is rejected when the script is parsed.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable
from urllib.parse import parse_qsl, quote, urlencode, urlsplit, urlunsplit

from cryptography.hazmat.primitives.asymmetric import rsa

from . import _codec
from .errors import RoleError, TrustchainError, ValidationError
from .image import SignedBootImage

CERT_ARMOR = "IPXE CERTIFICATE"
SIG_MAGIC = b"DSG1"
CA_KEY_USAGE = frozenset({"cRLSign", "keyCertSign"})
CODESIGN_KEY_USAGE = frozenset({"digitalSignature"})
CODESIGN_EKU = frozenset({"codeSigning"})
CA_VALIDITY_DAYS = 1000
DEFAULT_DAYS = 90


@dataclass(frozen=True)
class CodeCert:
    """Issuer-signed certificate carrying key usage and extended key usage."""

    subject: str
    issuer: str
    serial: int
    public_der: bytes
    key_usage: frozenset[str]
    extended_key_usage: frozenset[str]
    is_ca: bool
    validity_days: int
    issuer_signature: bytes = b""

    @property
    def public_key(self) -> rsa.RSAPublicKey:
        return _codec.load_public_der(self.public_der)

    def tbs(self) -> bytes:
        def words(items: frozenset[str]) -> bytes:
            return _codec.pack_bytes(",".join(sorted(items)).encode("ascii"), 2)

        return (
            b"IPC1"
            + _codec.pack_bytes(self.subject.encode("utf-8"), 2)
            + _codec.pack_bytes(self.issuer.encode("utf-8"), 2)
            + self.serial.to_bytes(8, "big")
            + _codec.pack_bytes(self.public_der, 2)
            + words(self.key_usage)
            + words(self.extended_key_usage)
            + bytes([self.is_ca])
            + self.validity_days.to_bytes(4, "big")
        )

    def to_bytes(self) -> bytes:
        return self.tbs() + _codec.pack_bytes(self.issuer_signature, 2)

    @classmethod
    def read_from(cls, reader: _codec.Reader) -> CodeCert:
        if reader.read(4) != b"IPC1":
            raise ValidationError("not a code-signing certificate")

        def text() -> str:
            try:
                return reader.lbytes(2).decode("utf-8")
            except UnicodeDecodeError:
                raise ValidationError("certificate text is not UTF-8") from None

        def words() -> frozenset[str]:
            raw = text()
            return frozenset(raw.split(",")) if raw else frozenset()

        subject, issuer = text(), text()
        serial = reader.u64()
        der = reader.lbytes(2)
        ku, eku = words(), words()
        is_ca = bool(reader.u8())
        days = reader.u32()
        return cls(subject, issuer, serial, der, ku, eku, is_ca, days, reader.lbytes(2))

    @classmethod
    def from_bytes(cls, data: bytes) -> CodeCert:
        reader = _codec.Reader(data)
        cert = cls.read_from(reader)
        reader.expect_end()
        return cert

    @property
    def fingerprint(self) -> bytes:
        return _codec.sha256(self.to_bytes())

    def issued_by(self, issuer: CodeCert) -> bool:
        if not issuer.is_ca or "keyCertSign" not in issuer.key_usage:
            return False
        if issuer.subject != self.issuer:
            return False
        try:
            key = issuer.public_key
        except ValidationError:
            return False
        return _codec.rsa_verify(key, self.issuer_signature, self.tbs())

    def to_armor(self) -> str:
        return _codec.armor(CERT_ARMOR, self.to_bytes())

    @classmethod
    def from_armor(cls, text: str) -> CodeCert:
        return cls.from_bytes(_codec.dearmor(text, CERT_ARMOR))


CodeSignCert = CodeCert


@dataclass
class CodeSignCa:
    """Certificate authority state: the ``ca.crt``/``ca.key``/``ca.srl``/``ca.idx`` quartet.

    Issuance bumps ``serial``; callers sharing one instance across threads
    must serialize calls to :func:`issue_codesign`.
    """

    ca_cert: CodeCert
    ca_key: rsa.RSAPrivateKey = field(repr=False)
    serial: int = 1
    issued_index: list[CodeCert] = field(default_factory=list)
    default_days: int = DEFAULT_DAYS

    def save(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "ca.crt").write_text(self.ca_cert.to_armor())
        key_path = directory / "ca.key"
        key_path.write_text(_codec.private_key_pem(self.ca_key))
        key_path.chmod(0o600)
        (directory / "ca.srl").write_text(f"{self.serial:02X}\n")
        signed = directory / "signed"
        signed.mkdir(exist_ok=True)
        lines = []
        for cert in self.issued_index:
            lines.append(f"{cert.serial:02X}\t{cert.subject}\t{cert.fingerprint.hex()}\n")
            (signed / f"{cert.serial:02X}.pem").write_text(cert.to_armor())
        (directory / "ca.idx").write_text("".join(lines))

    @classmethod
    def load(cls, directory: Path) -> CodeSignCa:
        cert = CodeCert.from_armor((directory / "ca.crt").read_text())
        key = _codec.load_private_key((directory / "ca.key").read_text())
        serial = int((directory / "ca.srl").read_text().strip(), 16)
        issued = []
        idx = directory / "ca.idx"
        if idx.exists():
            for line in idx.read_text().splitlines():
                number = line.split("\t", 1)[0]
                issued.append(CodeCert.from_armor((directory / "signed" / f"{number}.pem").read_text()))
        return cls(cert, key, serial, issued)


def ca_init(subject: str = "ipxe.ca") -> CodeSignCa:
    key = _codec.new_rsa_key()
    unsigned = CodeCert(
        subject=subject,
        issuer=subject,
        serial=0,
        public_der=_codec.public_der(key.public_key()),
        key_usage=CA_KEY_USAGE,
        extended_key_usage=frozenset(),
        is_ca=True,
        validity_days=CA_VALIDITY_DAYS,
    )
    cert = replace(unsigned, issuer_signature=_codec.rsa_sign(key, unsigned.tbs()))
    return CodeSignCa(cert, key)


def issue_codesign(ca: CodeSignCa, subject: str, public_key: rsa.RSAPublicKey) -> CodeCert:
    """Issue a code-signing certificate for ``public_key`` (the ``codesigning`` extension)."""
    unsigned = CodeCert(
        subject=subject,
        issuer=ca.ca_cert.subject,
        serial=ca.serial,
        public_der=_codec.public_der(public_key),
        key_usage=CODESIGN_KEY_USAGE,
        extended_key_usage=CODESIGN_EKU,
        is_ca=False,
        validity_days=ca.default_days,
    )
    cert = replace(unsigned, issuer_signature=_codec.rsa_sign(ca.ca_key, unsigned.tbs()))
    ca.serial += 1
    ca.issued_index.append(cert)
    return cert


@dataclass(frozen=True)
class DetachedSignature:
    digest: bytes
    signer_cert: CodeCert
    ca_chain: tuple[CodeCert, ...]
    signature: bytes

    def to_bytes(self) -> bytes:
        return (
            SIG_MAGIC
            + self.digest
            + _codec.pack_bytes(self.signer_cert.to_bytes())
            + bytes([len(self.ca_chain)])
            + b"".join(_codec.pack_bytes(c.to_bytes()) for c in self.ca_chain)
            + _codec.pack_bytes(self.signature, 2)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> DetachedSignature:
        reader = _codec.Reader(data)
        if reader.read(4) != SIG_MAGIC:
            raise ValidationError("not a detached signature")
        digest = reader.read(32)
        signer = CodeCert.from_bytes(reader.lbytes())
        chain = tuple(CodeCert.from_bytes(reader.lbytes()) for _ in range(reader.u8()))
        signature = reader.lbytes(2)
        reader.expect_end()
        return cls(digest, signer, chain, signature)


def sign_detached(
    file: bytes,
    cert: CodeCert,
    key: rsa.RSAPrivateKey,
    ca: CodeSignCa | CodeCert | Iterable[CodeCert] = (),
) -> DetachedSignature:
    """Produce a signature over ``file`` kept apart from the file itself."""
    if "codeSigning" not in cert.extended_key_usage:
        raise RoleError(f"certificate {cert.subject!r} lacks the codeSigning usage")
    if _codec.public_der(key.public_key()) != cert.public_der:
        raise ValidationError("signing key does not match the certificate")
    if isinstance(ca, CodeSignCa):
        chain: tuple[CodeCert, ...] = (ca.ca_cert,)
    elif isinstance(ca, CodeCert):
        chain = (ca,)
    else:
        chain = tuple(ca)
    digest = _codec.sha256(file)
    return DetachedSignature(digest, cert, chain, _codec.rsa_sign_digest(key, digest))


def verify_detached(file: bytes, sig: DetachedSignature, trust: Iterable[CodeCert]) -> bool:
    """True iff ``sig`` covers ``file`` and its signer chains to a trusted root."""
    if _codec.sha256(file) != sig.digest:
        return False
    signer = sig.signer_cert
    if "codeSigning" not in signer.extended_key_usage:
        return False
    try:
        signer_key = signer.public_key
    except ValidationError:
        return False
    if not _codec.rsa_verify_digest(signer_key, sig.signature, sig.digest):
        return False
    anchors = {c.fingerprint: c for c in trust}
    if not anchors:
        return False
    pool = list(anchors.values()) + list(sig.ca_chain)
    current = signer
    for _ in range(len(pool) + 1):
        issuers = [c for c in pool if current.issued_by(c)]
        if any(c.fingerprint in anchors for c in issuers):
            return True
        if not issuers:
            return False
        current = issuers[0]
    return False


def sign_order_check(
    image: SignedBootImage,
    cert: CodeCert,
    key: rsa.RSAPrivateKey,
    ca: CodeSignCa | CodeCert | Iterable[CodeCert] = (),
) -> DetachedSignature:
    """Detached signature over the final bytes, appended Secure Boot signatures included."""
    return sign_detached(image.to_bytes(), cert, key, ca)


def signature_url(url: str) -> str:
    """Where the signature of a dynamically generated resource is served."""
    return url + ("&" if "?" in url else "?") + "sig=true"


# -- script model -------------------------------------------------------------

VERBS = frozenset(
    {
        "set",
        "iseq",
        "goto",
        "prompt",
        "imgtrust",
        "imgfetch",
        "imgverify",
        "imgload",
        "imgexec",
        "chain",
        "boot",
        "imgfree",
    }
)
_VALUE_OPTIONS = {"--name", "-n", "--timeout", "-t", "--key", "-k", "--signer", "-s"}
_OPERATORS = ("||", "&&")
_VAR = re.compile(r"(\\?)\$\{([^}]*)\}")


@dataclass(frozen=True)
class Command:
    verb: str
    args: tuple[str, ...]


@dataclass(frozen=True)
class Statement:
    lineno: int
    # (operator, command) pairs; the first operator is None, a trailing
    # "||" with nothing after it carries command None.
    parts: tuple[tuple[str | None, Command | None], ...]


@dataclass(frozen=True)
class IpxeScript:
    statements: tuple[Statement, ...]
    labels: dict[str, int] = field(default_factory=dict, compare=False)

    @classmethod
    def parse(cls, text: str | bytes) -> IpxeScript:
        if isinstance(text, bytes):
            try:
                text = text.decode("utf-8")
            except UnicodeDecodeError:
                raise ValidationError("script is not UTF-8 text") from None
        statements: list[Statement] = []
        labels: dict[str, int] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith(":"):
                labels[line[1:].strip()] = len(statements)
                continue
            statements.append(Statement(lineno, _parse_statement(line, lineno)))
        return cls(tuple(statements), labels)


def _parse_statement(line: str, lineno: int) -> tuple[tuple[str | None, Command | None], ...]:
    parts: list[tuple[str | None, Command | None]] = []
    op: str | None = None
    words: list[str] = []

    def flush(next_op: str | None) -> None:
        nonlocal op, words
        if words:
            verb = words[0]
            if verb not in VERBS:
                raise ValidationError(f"line {lineno}: unsupported command {verb!r}")
            parts.append((op, Command(verb, tuple(words[1:]))))
        elif op == "||" and next_op is None:
            parts.append((op, None))
        else:
            raise ValidationError(f"line {lineno}: empty command around {op or next_op!r}")
        op, words = next_op, []

    for token in line.split():
        if token in _OPERATORS:
            flush(token)
        else:
            words.append(token)
    flush(None)
    return tuple(parts)


def expand(token: str, env: dict[str, str]) -> str:
    """Substitute ``${name}`` / ``${name:type}``; unknown names become empty text.

    Of the setting types only ``uristring`` and ``hexhyp`` change the text.
    """

    def sub(match: re.Match[str]) -> str:
        if match.group(1):
            return "${" + match.group(2) + "}"
        name, _, kind = match.group(2).partition(":")
        value = env.get(name, "")
        if kind == "uristring":
            return quote(value, safe="")
        if kind == "hexhyp":
            return value.replace(":", "-")
        return value

    return _VAR.sub(sub, token)


# -- interpreter --------------------------------------------------------------


class FetchError(TrustchainError):
    """A resource could not be retrieved."""


Fetcher = Callable[[str], bytes]


class Verdict(str, enum.Enum):
    OK = "ok"
    FAIL = "fail"
    REJECTED = "rejected"


@dataclass(frozen=True)
class TraceEvent:
    verb: str
    target: str
    verdict: Verdict
    detail: str = ""

    def __str__(self) -> str:
        text = f"{self.verb} {self.target} -> {self.verdict.value}"
        return f"{text} ({self.detail})" if self.detail else text


@dataclass
class LoadedImage:
    name: str
    url: str
    data: bytes
    verified: bool = False
    args: tuple[str, ...] = ()


@dataclass(frozen=True)
class BootAction:
    """The non-script image that the interpreter finally handed control to."""

    name: str
    url: str
    data: bytes
    args: tuple[str, ...]
    verified: bool
    extra_images: tuple[LoadedImage, ...] = ()

    @property
    def cmdline(self) -> str:
        return " ".join(a for a in self.args if a)


@dataclass(frozen=True)
class ScriptResult:
    trace: tuple[TraceEvent, ...]
    action: BootAction | None
    error: str | None
    executed: tuple[str, ...]
    verified: frozenset[str]

    @property
    def booted(self) -> bool:
        return self.action is not None


class _Abort(Exception):
    pass


class _Booted(Exception):
    pass


class Interpreter:
    """Runs parsed scripts against a fetcher with iPXE trust semantics."""

    MAX_DEPTH = 8
    MAX_STEPS = 10_000

    def __init__(
        self,
        fetcher: Fetcher,
        trust: Iterable[CodeCert],
        embedded_trust: bool = False,
        env: dict[str, str] | None = None,
    ) -> None:
        self.fetcher = fetcher
        self.trust = tuple(trust)
        self.require_trust = embedded_trust
        self.permanent = embedded_trust
        self.env = dict(env or {})
        self.images: dict[str, LoadedImage] = {}
        self.selected: str | None = None
        self.trace: list[TraceEvent] = []
        self.action: BootAction | None = None
        self.executed: list[str] = []
        self.verified: set[str] = set()
        self._steps = 0

    def _log(self, verb: str, target: str, verdict: Verdict, detail: str = "") -> None:
        self.trace.append(TraceEvent(verb, target, verdict, detail))

    def run(self, script: IpxeScript) -> ScriptResult:
        error = None
        try:
            self._run_script(script, depth=0)
        except _Booted:
            pass
        except _Abort as exc:
            error = str(exc)
        return ScriptResult(
            tuple(self.trace),
            self.action,
            error,
            tuple(self.executed),
            frozenset(self.verified),
        )

    def _run_script(self, script: IpxeScript, depth: int) -> None:
        if depth > self.MAX_DEPTH:
            raise _Abort("script nesting too deep")
        pc = 0
        while pc < len(script.statements):
            self._steps += 1
            if self._steps > self.MAX_STEPS:
                raise _Abort("step limit exceeded")
            statement = script.statements[pc]
            pc += 1
            ok = True
            for op, command in statement.parts:
                if (op == "||" and ok) or (op == "&&" and not ok):
                    continue
                if command is None:
                    ok = True
                    continue
                if command.verb == "goto":
                    target = expand(command.args[0], self.env) if command.args else ""
                    if target not in script.labels:
                        self._log("goto", target, Verdict.FAIL, "no such label")
                        ok = False
                        continue
                    pc = script.labels[target]
                    self._log("goto", target, Verdict.OK)
                    break
                ok = self._execute(command, depth)
            else:
                if not ok:
                    raise _Abort(f"line {statement.lineno}: command failed")

    def _split(self, args: tuple[str, ...]) -> tuple[dict[str, str | bool], list[str]]:
        opts: dict[str, str | bool] = {}
        positional: list[str] = []
        i = 0
        while i < len(args):
            arg = expand(args[i], self.env)
            if not positional and arg.startswith("-") and len(arg) > 1:
                if arg in _VALUE_OPTIONS and i + 1 < len(args):
                    opts[arg.lstrip("-")[0]] = expand(args[i + 1], self.env)
                    i += 2
                    continue
                opts[arg.lstrip("-")] = True
            else:
                positional.append(arg)
            i += 1
        return opts, positional

    def _execute(self, command: Command, depth: int) -> bool:
        handler = getattr(self, "_cmd_" + command.verb)
        return handler(command.args, depth)

    def _cmd_set(self, args: tuple[str, ...], depth: int) -> bool:
        if not args:
            self._log("set", "", Verdict.FAIL, "missing name")
            return False
        name = expand(args[0], self.env).split(":", 1)[0]
        self.env[name] = " ".join(expand(a, self.env) for a in args[1:])
        return True

    def _cmd_iseq(self, args: tuple[str, ...], depth: int) -> bool:
        if len(args) != 2:
            return False
        return expand(args[0], self.env) == expand(args[1], self.env)

    def _cmd_prompt(self, args: tuple[str, ...], depth: int) -> bool:
        _, text = self._split(args)
        self._log("prompt", " ".join(text), Verdict.OK)
        return True

    def _cmd_imgtrust(self, args: tuple[str, ...], depth: int) -> bool:
        opts, _ = self._split(args)
        if opts.get("allow"):
            if self.permanent:
                self._log("imgtrust", "--allow", Verdict.REJECTED, "trust is permanent")
                return False
            self.require_trust = False
        else:
            self.require_trust = True
        if opts.get("permanent"):
            self.permanent = True
        self._log("imgtrust", "permanent" if self.permanent else "", Verdict.OK)
        return True

    def _fetch(self, url: str, verb: str) -> bytes | None:
        try:
            data = self.fetcher(url)
        except (FetchError, LookupError, OSError) as exc:
            self._log(verb, url, Verdict.FAIL, f"fetch failed: {exc}")
            return None
        self._log(verb, url, Verdict.OK, f"{len(data)} bytes")
        return data

    def _register(self, url: str, name: str | None, verb: str) -> LoadedImage | None:
        data = self._fetch(url, verb)
        if data is None:
            return None
        if not name:
            name = urlsplit(url).path.rsplit("/", 1)[-1] or url
        image = LoadedImage(name, url, data)
        self.images[name] = image
        return image

    def _resolve(self, ref: str, verb: str) -> LoadedImage | None:
        if ref in self.images:
            return self.images[ref]
        return self._register(ref, None, verb)

    def _cmd_imgfetch(self, args: tuple[str, ...], depth: int) -> bool:
        opts, pos = self._split(args)
        if not pos:
            return False
        image = self._register(pos[0], opts.get("n") or None, "imgfetch")  # type: ignore[arg-type]
        if image is None:
            return False
        image.args = tuple(pos[1:])
        return True

    def _cmd_imgfree(self, args: tuple[str, ...], depth: int) -> bool:
        _, pos = self._split(args)
        if pos:
            self.images.pop(pos[0], None)
        else:
            self.images.clear()
        self.selected = None
        return True

    def _cmd_imgverify(self, args: tuple[str, ...], depth: int) -> bool:
        _, pos = self._split(args)
        if len(pos) < 2:
            return False
        image = self._resolve(pos[0], "imgfetch")
        if image is None:
            return False
        raw = self._fetch(pos[1], "sigfetch")
        if raw is None:
            return False
        try:
            sig = DetachedSignature.from_bytes(raw)
        except ValidationError as exc:
            self._log("imgverify", image.name, Verdict.FAIL, f"bad signature file: {exc}")
            return False
        if not verify_detached(image.data, sig, self.trust):
            self._log("imgverify", image.name, Verdict.FAIL, "signature does not verify")
            return False
        image.verified = True
        self.verified.add(image.url)
        self._log("imgverify", image.name, Verdict.OK, sig.signer_cert.subject)
        return True

    def _trusted(self, image: LoadedImage, verb: str) -> bool:
        if not self.require_trust:
            return True
        unverified = [i.name for i in self.images.values() if not i.verified]
        if not image.verified:
            self._log(verb, image.name, Verdict.REJECTED, "image not verified (imgtrust)")
            return False
        if unverified:
            self._log(verb, image.name, Verdict.REJECTED, f"unverified images: {unverified}")
            return False
        return True

    def _cmd_imgload(self, args: tuple[str, ...], depth: int) -> bool:
        _, pos = self._split(args)
        if not pos:
            return False
        image = self._resolve(pos[0], "imgfetch")
        if image is None or not self._trusted(image, "imgload"):
            return False
        if len(pos) > 1:
            image.args = tuple(pos[1:])
        self.selected = image.name
        self._log("imgload", image.name, Verdict.OK)
        return True

    def _cmd_chain(self, args: tuple[str, ...], depth: int) -> bool:
        _, pos = self._split(args)
        if not pos:
            return False
        image = self._resolve(pos[0], "imgfetch")
        if image is None:
            return False
        if len(pos) > 1:
            image.args = tuple(pos[1:])
        return self._exec(image, "chain", depth)

    _cmd_imgexec = _cmd_chain

    def _cmd_boot(self, args: tuple[str, ...], depth: int) -> bool:
        _, pos = self._split(args)
        if pos:
            return self._cmd_chain(args, depth)
        if self.selected is None or self.selected not in self.images:
            self._log("boot", "", Verdict.FAIL, "no image selected")
            return False
        return self._exec(self.images[self.selected], "boot", depth)

    def _exec(self, image: LoadedImage, verb: str, depth: int) -> bool:
        if not self._trusted(image, verb):
            return False
        self.executed.append(image.url)
        self.images.pop(image.name, None)
        if self.selected == image.name:
            self.selected = None
        if image.data.startswith(b"#!ipxe"):
            try:
                script = IpxeScript.parse(image.data)
            except ValidationError as exc:
                self._log(verb, image.name, Verdict.FAIL, f"bad script: {exc}")
                return False
            self._log(verb, image.name, Verdict.OK, "script")
            try:
                self._run_script(script, depth + 1)
            except _Abort as exc:
                self._log(verb, image.name, Verdict.FAIL, str(exc))
                return False
            return True
        self._log(verb, image.name, Verdict.OK, "executing image")
        self.action = BootAction(
            image.name,
            image.url,
            image.data,
            image.args,
            image.verified,
            tuple(self.images.values()),
        )
        raise _Booted


def interpret_script(
    script: IpxeScript | str | bytes,
    fetcher: Fetcher,
    trust: Iterable[CodeCert],
    embedded_trust_flag: bool = False,
    env: dict[str, str] | None = None,
) -> ScriptResult:
    if not isinstance(script, IpxeScript):
        script = IpxeScript.parse(script)
    return Interpreter(fetcher, trust, embedded_trust_flag, env).run(script)


class DynamicScriptServer:
    """Serves per-request scripts and, for ``sig=true`` requests, their signatures.

    The signature is computed over the script generated for exactly the same
    parameters minus ``sig``.
    """

    def __init__(
        self,
        generate: Callable[[dict[str, str]], str],
        cert: CodeCert,
        key: rsa.RSAPrivateKey,
        ca: CodeSignCa | CodeCert | Iterable[CodeCert] = (),
    ) -> None:
        self.generate = generate
        self.cert, self.key, self.ca = cert, key, ca

    def __call__(self, url: str) -> bytes:
        parts = urlsplit(url)
        params = parse_qsl(parts.query, keep_blank_values=True)
        want_sig = ("sig", "true") in params
        params = [(k, v) for k, v in params if k != "sig"]
        script = self.generate(dict(params)).encode("utf-8")
        if not want_sig:
            return script
        return sign_detached(script, self.cert, self.key, self.ca).to_bytes()

    @staticmethod
    def canonical_url(url: str, params: dict[str, str]) -> str:
        parts = urlsplit(url)
        return urlunsplit(parts._replace(query=urlencode(params)))
