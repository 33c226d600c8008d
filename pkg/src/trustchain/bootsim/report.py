"""Per-config step-cost report: network fetches, verifications, assembly steps.

Operation counts stand in for boot time. Wall-clock timing depends on the
hardware and is deliberately not measured.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable

from ..errors import ValidationError
from .fixtures import Fixtures
from .model import Attack, BootConfig, InitrdProtection, Outcome, SecureBoot
from .runner import run_scenario

# The three protection levels compared in the timing analog.
LEVELS = {
    "Off": BootConfig(),
    "Basic": BootConfig(SecureBoot.BASIC),
    "Uki": BootConfig(SecureBoot.UKI, InitrdProtection.IN_UKI),
}

COLUMNS = ("config", "attack", "outcome", "fetches", "payload_fetches", "verifications", "assembly", "pcr_extends")


@dataclass(frozen=True)
class ReportRow:
    config: str
    attack: str
    outcome: str
    fetches: int
    payload_fetches: int
    verifications: int
    assembly: int
    pcr_extends: int

    def as_dict(self) -> dict[str, object]:
        return {c: getattr(self, c) for c in COLUMNS}


@dataclass(frozen=True)
class Report:
    rows: tuple[ReportRow, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow(row.as_dict())
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(len(r.config) for r in self.rows)
        head = f"{'config':<{width}}  {'attack':<20} {'outcome':<28} fetch  payload  verify  assemble"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.config:<{width}}  {r.attack:<20} {r.outcome:<28} {r.fetches:>5}  "
                f"{r.payload_fetches:>7}  {r.verifications:>6}  {r.assembly:>8}"
            )
        return "\n".join(lines) + "\n"

    def by_config(self) -> dict[str, ReportRow]:
        return {r.config: r for r in self.rows}


def emit_report(outcomes: Iterable[Outcome], names: dict[BootConfig, str] | None = None) -> Report:
    """One row per outcome, with the operation counts of that run."""
    names = names or {}
    rows = tuple(
        ReportRow(
            names.get(o.config, o.config.key),
            o.attack.name,
            o.label,
            o.ops.fetches,
            o.ops.payload_fetches,
            o.ops.verifications,
            o.ops.assembly,
            o.ops.pcr_extends,
        )
        for o in outcomes
    )
    if not rows:
        raise ValidationError("cannot report on zero outcomes")
    return Report(rows)


def level_report(fixtures: Fixtures) -> Report:
    """Attack-free boots at the Off, Basic and Uki protection levels."""
    outcomes = [run_scenario(config, Attack.none(), fixtures) for config in LEVELS.values()]
    return emit_report(outcomes, {config: name for name, config in LEVELS.items()})
