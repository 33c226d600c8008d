from __future__ import annotations

import pytest

from trustchain.anchors import build_enrollment_bundle, enrolled_store, generate_hierarchy
from trustchain.bootsim import Attack, AttackVector, BootConfig, InitrdProtection, KeyStore, SecureBoot, generate_fixtures
from trustchain.ipxe import ca_init, issue_codesign
from trustchain import _codec
from trustchain.tpm import TpmState

HANDLE = 0x81000001

V = AttackVector
TPM_BASIC = BootConfig(SecureBoot.BASIC, key_store=KeyStore.TPM)

# The defense-matrix cells with a fixed expected outcome, as
# (config, attack, outcome label).
ANCHORED_CELLS = [
    (BootConfig(), Attack.of(V.MALICIOUS_TFTP), "Compromised(IpxeLoad)"),
    (BootConfig(SecureBoot.BASIC), Attack.of(V.TAMPER_KERNEL), "Rejected(HostSystemLoad)"),
    (BootConfig(SecureBoot.BASIC), Attack.of(V.TAMPER_INITRD), "Compromised(HostSystemLoad)"),
    (BootConfig(SecureBoot.BASIC), Attack.of(V.TAMPER_SCRIPT_PARAMS), "Compromised(IpxeScript)"),
    (BootConfig(SecureBoot.UKI, InitrdProtection.IN_UKI), Attack.of(V.TAMPER_SCRIPT_PARAMS), "BootedClean"),
    (BootConfig(ipxe_signing=True), Attack.of(V.TAMPER_SCRIPT_PARAMS), "Rejected(IpxeScript)"),
    (
        BootConfig(SecureBoot.BASIC, InitrdProtection.TPM_SEALED, key_store=KeyStore.TPM),
        Attack.of(V.TAMPER_SCRIPT_PARAMS),
        "Rejected(HostSystemLoad)",
    ),
    (BootConfig(), Attack.of(V.PASSIVE_EAVESDROP), "SecretLeaked(dnbd payload)"),
    (BootConfig(session_encryption=True, key_store=KeyStore.TPM), Attack.of(V.PASSIVE_EAVESDROP), "BootedClean"),
    (
        BootConfig(key_store=KeyStore.ASSET_TAG),
        Attack(V.ROOT_KEY_EXFILTRATION, root_on_host=True),
        "SecretLeaked(long-term key)",
    ),
    (TPM_BASIC, Attack(V.ROOT_KEY_EXFILTRATION, root_on_host=True), "SecretLeaked(session key)"),
]


@pytest.fixture(scope="session")
def hierarchy():
    return generate_hierarchy("Lab")


@pytest.fixture(scope="session")
def bundle(hierarchy):
    return build_enrollment_bundle(hierarchy)


@pytest.fixture(scope="session")
def store(bundle):
    return enrolled_store(bundle)


@pytest.fixture(scope="session")
def codesign():
    ca = ca_init("ipxe.ca")
    key = _codec.new_rsa_key()
    cert = issue_codesign(ca, "codesign", key.public_key())
    return ca, cert, key


@pytest.fixture(scope="session")
def tpm_with_key():
    """A TPM holding one persistent key. Tests must clone before mutating."""
    tpm = TpmState()
    tpm.evict_control(tpm.create_primary("rsa2048"), HANDLE)
    return tpm


@pytest.fixture(scope="session")
def boot_fixtures():
    return generate_fixtures(0)


_CRITERIA: dict[int, tuple[str, list[bool]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    outcomes = _CRITERIA.setdefault(number, (title, []))[1]
    if report.when == "call" or report.failed:
        outcomes.append(report.passed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    result = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        result.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcomes = _CRITERIA[number]
        verdict = "PASS" if outcomes and all(outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {title}")
