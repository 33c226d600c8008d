"""Configuration lattice, attack vectors, outcomes and the expected-outcome table."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterator, Mapping

from ..errors import ConfigError


class BootStep(enum.IntEnum):
    DHCP = 1
    IPXE_LOAD = 2
    IPXE_SCRIPT = 3
    BOOT_DECISION = 4
    HOST_SYSTEM_LOAD = 5
    ROOTFS_ACCESS = 6
    VM_LAUNCH = 7

    @property
    def label(self) -> str:
        return _STEP_LABELS[self]

    @classmethod
    def parse(cls, text: str) -> BootStep:
        for step, label in _STEP_LABELS.items():
            if text in (label, step.name, str(step.value)):
                return step
        raise ValueError(f"unknown boot step {text!r}")


_STEP_LABELS = {
    BootStep.DHCP: "Dhcp",
    BootStep.IPXE_LOAD: "IpxeLoad",
    BootStep.IPXE_SCRIPT: "IpxeScript",
    BootStep.BOOT_DECISION: "BootDecision",
    BootStep.HOST_SYSTEM_LOAD: "HostSystemLoad",
    BootStep.ROOTFS_ACCESS: "RootFsAccess",
    BootStep.VM_LAUNCH: "VmLaunch",
}


class _Named(str, enum.Enum):
    @classmethod
    def parse(cls, text: str):  # type: ignore[no-untyped-def]
        for member in cls:
            if text.lower() in (member.value.lower(), member.name.lower()):
                return member
        raise ConfigError(f"{cls.__name__}: unknown value {text!r}")


class SecureBoot(_Named):
    OFF = "Off"
    BASIC = "Basic"
    UKI = "Uki"


class InitrdProtection(_Named):
    NONE = "None"
    IN_UKI = "InUki"
    TPM_SEALED = "TpmSealed"
    TPM_ENCRYPTED = "TpmEncrypted"


class KeyStore(_Named):
    NONE = "None"
    ASSET_TAG = "AssetTag"
    TPM = "Tpm"


_BOOL_TEXT = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


@dataclass(frozen=True, order=True)
class BootConfig:
    secure_boot: SecureBoot = SecureBoot.OFF
    initrd_protection: InitrdProtection = InitrdProtection.NONE
    ipxe_signing: bool = False
    session_encryption: bool = False
    key_store: KeyStore = KeyStore.NONE

    def violations(self) -> list[str]:
        problems = []
        if self.initrd_protection is InitrdProtection.IN_UKI and self.secure_boot is not SecureBoot.UKI:
            problems.append("initrd_protection=InUki requires secure_boot=Uki")
        if (
            self.initrd_protection in (InitrdProtection.TPM_SEALED, InitrdProtection.TPM_ENCRYPTED)
            and self.key_store is not KeyStore.TPM
        ):
            problems.append(f"initrd_protection={self.initrd_protection.value} requires key_store=Tpm")
        if self.session_encryption and self.key_store is KeyStore.NONE:
            problems.append("session_encryption requires a key store for the session key")
        return problems

    @property
    def valid(self) -> bool:
        return not self.violations()

    def validate(self) -> BootConfig:
        problems = self.violations()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def key(self) -> str:
        return (
            f"sb={self.secure_boot.value},initrd={self.initrd_protection.value},"
            f"sign={int(self.ipxe_signing)},enc={int(self.session_encryption)},"
            f"ks={self.key_store.value}"
        )

    def as_dict(self) -> dict[str, object]:
        return {
            "secure_boot": self.secure_boot.value,
            "initrd_protection": self.initrd_protection.value,
            "ipxe_signing": self.ipxe_signing,
            "session_encryption": self.session_encryption,
            "key_store": self.key_store.value,
        }

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> BootConfig:
        unknown = set(values) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

        def flag(name: str) -> bool:
            raw = values.get(name, False)
            if isinstance(raw, bool):
                return raw
            try:
                return _BOOL_TEXT[str(raw).lower()]
            except KeyError:
                raise ConfigError(f"{name}: expected a boolean, got {raw!r}") from None

        return cls(
            SecureBoot.parse(str(values.get("secure_boot", "Off"))),
            InitrdProtection.parse(str(values.get("initrd_protection", "None"))),
            flag("ipxe_signing"),
            flag("session_encryption"),
            KeyStore.parse(str(values.get("key_store", "None"))),
        ).validate()


def config_lattice() -> Iterator[BootConfig]:
    """Every combination of the five config axes, valid or not."""
    for sb, ip, sign, enc, ks in itertools.product(
        SecureBoot, InitrdProtection, (False, True), (False, True), KeyStore
    ):
        yield BootConfig(sb, ip, sign, enc, ks)


def valid_configs() -> list[BootConfig]:
    return [c for c in config_lattice() if c.valid]


class AttackVector(_Named):
    MALICIOUS_DHCP = "MaliciousDhcp"
    MALICIOUS_TFTP = "MaliciousTftp"
    TAMPER_SCRIPT_PARAMS = "TamperScriptParams"
    TAMPER_KERNEL = "TamperKernel"
    TAMPER_INITRD = "TamperInitrd"
    DNBD_BLOCK_SWAP = "DnbdBlockSwap"
    PASSIVE_EAVESDROP = "PassiveEavesdrop"
    ROOT_KEY_EXFILTRATION = "RootKeyExfiltration"

    @property
    def origin(self) -> BootStep | None:
        """Step at which this vector's forged input enters the chain."""
        return _ORIGINS.get(self)


_ORIGINS = {
    AttackVector.MALICIOUS_DHCP: BootStep.DHCP,
    AttackVector.MALICIOUS_TFTP: BootStep.IPXE_LOAD,
    AttackVector.TAMPER_SCRIPT_PARAMS: BootStep.IPXE_SCRIPT,
    AttackVector.TAMPER_KERNEL: BootStep.HOST_SYSTEM_LOAD,
    AttackVector.TAMPER_INITRD: BootStep.HOST_SYSTEM_LOAD,
    AttackVector.DNBD_BLOCK_SWAP: BootStep.ROOTFS_ACCESS,
}


@dataclass(frozen=True, order=True)
class Attack:
    """At most one active vector plus the attacker's capabilities."""

    vector: AttackVector | None = None
    physical_access: bool = False
    root_on_host: bool = False

    @classmethod
    def none(cls) -> Attack:
        return cls()

    @classmethod
    def of(cls, vector: AttackVector | str | None) -> Attack:
        """The vector with the capabilities it needs to be meaningful."""
        if vector is None or vector == "none":
            return cls()
        vector = AttackVector.parse(vector) if isinstance(vector, str) else vector
        return cls(vector, root_on_host=vector is AttackVector.ROOT_KEY_EXFILTRATION)

    @property
    def name(self) -> str:
        if self.vector is None:
            return "none"
        caps = [c for c, on in (("physical", self.physical_access), ("root", self.root_on_host)) if on]
        return self.vector.value + (f"[{'+'.join(caps)}]" if caps else "")


def matrix_attacks() -> list[Attack]:
    return [Attack.none()] + [Attack.of(v) for v in AttackVector]


class OutcomeKind(str, enum.Enum):
    BOOTED_CLEAN = "BootedClean"
    REJECTED = "Rejected"
    COMPROMISED = "Compromised"
    SECRET_LEAKED = "SecretLeaked"


@dataclass(frozen=True)
class Expected:
    kind: OutcomeKind
    step: BootStep | None = None
    what: str | None = None

    @property
    def label(self) -> str:
        if self.step is not None:
            return f"{self.kind.value}({self.step.label})"
        if self.what is not None:
            return f"{self.kind.value}({self.what})"
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> Expected:
        name, _, rest = text.partition("(")
        kind = OutcomeKind(name)
        arg = rest.rstrip(")") if rest else None
        if kind in (OutcomeKind.REJECTED, OutcomeKind.COMPROMISED):
            return cls(kind, BootStep.parse(arg or ""))
        return cls(kind, what=arg)


def clean() -> Expected:
    return Expected(OutcomeKind.BOOTED_CLEAN)


def rejected(step: BootStep) -> Expected:
    return Expected(OutcomeKind.REJECTED, step)


def compromised(step: BootStep) -> Expected:
    return Expected(OutcomeKind.COMPROMISED, step)


def leaked(what: str) -> Expected:
    return Expected(OutcomeKind.SECRET_LEAKED, what=what)


LEAK_PAYLOAD = "dnbd payload"
LEAK_LONG_TERM_KEY = "long-term key"
LEAK_SESSION_KEY = "session key"


def expected_outcome(config: BootConfig, attack: Attack) -> Expected:
    """The defense matrix as a table lookup, independent of the simulator."""
    sb, ip = config.secure_boot, config.initrd_protection
    sign = config.ipxe_signing
    v = attack.vector
    S = BootStep
    if v is None:
        return clean()
    if v is AttackVector.MALICIOUS_DHCP:
        return compromised(S.DHCP) if sb is SecureBoot.OFF else rejected(S.IPXE_LOAD)
    if v is AttackVector.MALICIOUS_TFTP:
        return compromised(S.IPXE_LOAD) if sb is SecureBoot.OFF else rejected(S.IPXE_LOAD)
    if v is AttackVector.TAMPER_SCRIPT_PARAMS:
        if sign:
            return rejected(S.IPXE_SCRIPT)
        if sb is SecureBoot.UKI:
            return clean()
        if ip is InitrdProtection.TPM_SEALED:
            return rejected(S.HOST_SYSTEM_LOAD)
        return compromised(S.IPXE_SCRIPT)
    if v is AttackVector.TAMPER_KERNEL:
        if sign or sb is not SecureBoot.OFF:
            return rejected(S.HOST_SYSTEM_LOAD)
        return compromised(S.HOST_SYSTEM_LOAD)
    if v is AttackVector.TAMPER_INITRD:
        protected = ip in (InitrdProtection.IN_UKI, InitrdProtection.TPM_SEALED, InitrdProtection.TPM_ENCRYPTED)
        return rejected(S.HOST_SYSTEM_LOAD) if sign or protected else compromised(S.HOST_SYSTEM_LOAD)
    if v is AttackVector.DNBD_BLOCK_SWAP:
        return rejected(S.ROOTFS_ACCESS) if config.session_encryption else compromised(S.ROOTFS_ACCESS)
    if v is AttackVector.PASSIVE_EAVESDROP:
        return clean() if config.session_encryption else leaked(LEAK_PAYLOAD)
    # RootKeyExfiltration
    if not (attack.root_on_host or attack.physical_access):
        return clean()
    if config.key_store is KeyStore.ASSET_TAG:
        return leaked(LEAK_LONG_TERM_KEY)
    if config.key_store is KeyStore.TPM:
        return leaked(LEAK_SESSION_KEY)
    return clean()


@dataclass(frozen=True)
class TraceEvent:
    step: BootStep
    action: str
    verdict: str
    detail: tuple[tuple[str, str], ...] = ()

    def line(self) -> str:
        extra = "".join(f" {k}={v}" for k, v in self.detail)
        return f"step={int(self.step)} action={self.action} verdict={self.verdict}{extra}"

    def get(self, key: str) -> str | None:
        return dict(self.detail).get(key)


@dataclass(frozen=True)
class OpCounts:
    fetches: int = 0
    payload_fetches: int = 0
    verifications: int = 0
    assembly: int = 0
    pcr_extends: int = 0


@dataclass(frozen=True)
class Outcome:
    config: BootConfig
    attack: Attack
    result: Expected
    trace: tuple[TraceEvent, ...] = ()
    ops: OpCounts = field(default_factory=OpCounts)

    @property
    def kind(self) -> OutcomeKind:
        return self.result.kind

    @property
    def step(self) -> BootStep | None:
        return self.result.step

    @property
    def label(self) -> str:
        return self.result.label

    def trace_text(self) -> str:
        lines = [e.line() for e in self.trace]
        lines.append(f"outcome={self.label}")
        return "\n".join(lines) + "\n"
