"""Boot-chain simulation: configs, attacks, fixtures, scenario runs and reports."""

from .fixtures import Fixtures, generate_fixtures
from .model import (
    Attack,
    AttackVector,
    BootConfig,
    BootStep,
    Expected,
    InitrdProtection,
    KeyStore,
    Outcome,
    OutcomeKind,
    SecureBoot,
    config_lattice,
    expected_outcome,
    matrix_attacks,
    valid_configs,
)
from .report import LEVELS, Report, emit_report, level_report
from .runner import MatrixReport, full_matrix, run_scenario

__all__ = [
    "Attack",
    "AttackVector",
    "BootConfig",
    "BootStep",
    "Expected",
    "Fixtures",
    "InitrdProtection",
    "KeyStore",
    "LEVELS",
    "MatrixReport",
    "Outcome",
    "OutcomeKind",
    "Report",
    "SecureBoot",
    "config_lattice",
    "emit_report",
    "expected_outcome",
    "full_matrix",
    "generate_fixtures",
    "level_report",
    "matrix_attacks",
    "run_scenario",
    "valid_configs",
]
