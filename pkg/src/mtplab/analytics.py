"""Finetuning-schedule analytics.

From each dataset's raw training settings the module derives:

* total processed samples   n_to_sa = n_tr_im * n_tr_ep   (epoch-specified)
                            n_to_sa = n_to_it * s_b       (iteration-specified)
* total iterations          n_to_it = rhe(n_tr_im * n_tr_ep / s_b)
* average iterations/class  ai_c    = rhe(n_to_it / n_c)
* average pixels/class      ap_c    = rhe(n_to_sa * s_tr_im / n_c)

where rhe is round-half-to-even, computed exactly on integer ratios (no
floating point), and s_tr_im is the training image side length in pixels.
Exactly one of epochs/iterations is given per config; iteration-specified
configs take the iteration count as authoritative.

``reconcile_table`` recomputes all four derived cells for every fixture row
and reports per-cell matches against the fixture's expected values;
``emit_report`` renders the rows as a byte-stable CSV.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ConfigError, FixtureError


def round_half_even_ratio(num: int, den: int) -> int:
    """Nearest integer to num/den with ties to even, exact in integers."""
    if den <= 0 or num < 0:
        raise ConfigError(f"need num >= 0 and den > 0, got {num}/{den}")
    q, r = divmod(num, den)
    twice = 2 * r
    if twice < den:
        return q
    if twice > den:
        return q + 1
    return q if q % 2 == 0 else q + 1


@dataclass(frozen=True)
class ScheduleConfig:
    """Raw finetuning settings for one dataset."""

    name: str
    n_tr_im: int  # training image count
    s_b: int  # batch size
    s_tr_im: int  # training image side, pixels
    n_c: int  # class count
    n_tr_ep: int | None = None  # epochs (exclusive with n_to_it)
    n_to_it: int | None = None  # total iterations (exclusive with n_tr_ep)

    def __post_init__(self):
        if min(self.n_tr_im, self.s_b, self.s_tr_im, self.n_c) <= 0:
            raise ConfigError(f"{self.name}: all raw settings must be positive")
        if (self.n_tr_ep is None) == (self.n_to_it is None):
            raise ConfigError(
                f"{self.name}: exactly one of epochs / iterations must be given"
            )
        given = self.n_tr_ep if self.n_tr_ep is not None else self.n_to_it
        if given <= 0:
            raise ConfigError(f"{self.name}: epochs/iterations must be positive")


@dataclass(frozen=True)
class ScheduleRow:
    """Derived quantities for one dataset."""

    n_to_sa: int
    n_to_it: int
    ai_c: int
    ap_c: int


def derive_row(cfg: ScheduleConfig) -> ScheduleRow:
    if cfg.n_tr_ep is not None:
        n_to_sa = cfg.n_tr_im * cfg.n_tr_ep
        n_to_it = round_half_even_ratio(n_to_sa, cfg.s_b)
    else:
        n_to_it = cfg.n_to_it
        n_to_sa = n_to_it * cfg.s_b
    ai_c = round_half_even_ratio(n_to_it, cfg.n_c)
    ap_c = round_half_even_ratio(n_to_sa * cfg.s_tr_im, cfg.n_c)
    return ScheduleRow(n_to_sa=n_to_sa, n_to_it=n_to_it, ai_c=ai_c, ap_c=ap_c)


DERIVED_CELLS = ("n_to_sa", "n_to_it", "ai_c", "ap_c")


@dataclass(frozen=True)
class CellCheck:
    dataset: str
    cell: str
    expected: int
    derived: int

    @property
    def ok(self) -> bool:
        return self.expected == self.derived


@dataclass
class TableReport:
    checks: list[CellCheck]

    @property
    def mismatches(self) -> list[CellCheck]:
        return [c for c in self.checks if not c.ok]

    @property
    def all_match(self) -> bool:
        return not self.mismatches

    def summary(self) -> str:
        ok = sum(1 for c in self.checks if c.ok)
        return f"{ok}/{len(self.checks)} derived cells match"


def reconcile_table(rows: list[tuple[ScheduleConfig, ScheduleRow]]) -> TableReport:
    """Recompute every derived cell and compare with the expected row."""
    checks = []
    for cfg, expected in rows:
        derived = derive_row(cfg)
        for cell in DERIVED_CELLS:
            checks.append(
                CellCheck(cfg.name, cell, getattr(expected, cell), getattr(derived, cell))
            )
    return TableReport(checks)


CSV_COLUMNS = (
    "name",
    "n_tr_im",
    "n_tr_ep",
    "n_to_it_given",
    "s_b",
    "s_tr_im",
    "n_c",
    "n_to_sa",
    "n_to_it",
    "ai_c",
    "ap_c",
)


def emit_report(rows: list[ScheduleConfig]) -> str:
    """Raw + derived columns, one line per dataset, byte-reproducible."""
    lines = [",".join(CSV_COLUMNS)]
    for cfg in rows:
        d = derive_row(cfg)
        lines.append(
            ",".join(
                [
                    cfg.name,
                    str(cfg.n_tr_im),
                    "" if cfg.n_tr_ep is None else str(cfg.n_tr_ep),
                    "" if cfg.n_to_it is None else str(cfg.n_to_it),
                    str(cfg.s_b),
                    str(cfg.s_tr_im),
                    str(cfg.n_c),
                    str(d.n_to_sa),
                    str(d.n_to_it),
                    str(d.ai_c),
                    str(d.ap_c),
                ]
            )
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# fixture loading


_RAW_KEYS = {"name", "n_tr_im", "s_b", "s_tr_im", "n_c", "n_tr_ep", "n_to_it"}


def parse_fixture(obj) -> list[tuple[ScheduleConfig, ScheduleRow]]:
    """Fixture: JSON array of {raw settings..., expected: {4 derived cells}}."""
    if isinstance(obj, dict) and "rows" in obj:
        obj = obj["rows"]
    if not isinstance(obj, list):
        raise FixtureError("fixture must be a JSON array of rows")
    rows = []
    for i, entry in enumerate(obj):
        if not isinstance(entry, dict) or "expected" not in entry:
            raise FixtureError(f"fixture row {i} missing 'expected'")
        raw = {k: v for k, v in entry.items() if k in _RAW_KEYS}
        try:
            cfg = ScheduleConfig(**raw)
        except (TypeError, ConfigError) as e:
            raise FixtureError(f"fixture row {i}: {e}") from None
        exp = entry["expected"]
        try:
            row = ScheduleRow(**{k: int(exp[k]) for k in DERIVED_CELLS})
        except (KeyError, TypeError, ValueError) as e:
            raise FixtureError(f"fixture row {i} expected cells: {e}") from None
        rows.append((cfg, row))
    return rows


def load_fixture(path) -> list[tuple[ScheduleConfig, ScheduleRow]]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise FixtureError(f"fixture file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise FixtureError(f"fixture is not valid JSON: {e}") from None
    return parse_fixture(obj)
