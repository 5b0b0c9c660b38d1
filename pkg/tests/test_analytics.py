import json
from fractions import Fraction
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mtplab.analytics as an
from mtplab.errors import ConfigError, FixtureError

FIXTURE = Path(__file__).parent.parent / "src" / "mtplab" / "data" / "schedule_fixture.json"
GOLDEN = Path(__file__).parent.parent / "src" / "mtplab" / "data" / "schedule_report_golden.csv"


# ----------------------------------------------------------------- rounding


def reference_round_half_even(num, den):
    """Independent oracle via exact Fractions and Python's banker's rounding."""
    return round(Fraction(num, den))


@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=0, max_value=10**12), st.integers(min_value=1, max_value=10**6))
def test_round_half_even_matches_fraction_oracle(num, den):
    assert an.round_half_even_ratio(num, den) == reference_round_half_even(num, den)


def test_round_half_even_tie_cases():
    assert an.round_half_even_ratio(5, 2) == 2  # 2.5 -> 2
    assert an.round_half_even_ratio(7, 2) == 4  # 3.5 -> 4
    assert an.round_half_even_ratio(1620000, 64) == 25312  # 25312.5 -> even
    assert an.round_half_even_ratio(1260000, 64) == 19688  # 19687.5 -> even
    assert an.round_half_even_ratio(1066800, 32) == 33338  # 33337.5 -> even


# ----------------------------------------------------------------- derive_row


def cfg_epochs(name, n_tr_im, n_tr_ep, s_b, s_tr_im, n_c):
    return an.ScheduleConfig(name=name, n_tr_im=n_tr_im, n_tr_ep=n_tr_ep, s_b=s_b,
                             s_tr_im=s_tr_im, n_c=n_c)


def test_derive_eurosat():
    row = an.derive_row(cfg_epochs("EuroSAT", 16200, 100, 64, 224, 10))
    assert row == an.ScheduleRow(n_to_sa=1_620_000, n_to_it=25_312, ai_c=2_531, ap_c=36_288_000)


def test_derive_dior():
    row = an.derive_row(cfg_epochs("DIOR", 11725, 12, 4, 800, 20))
    assert row.n_to_it == 35_175
    assert row.ai_c == 1_759
    assert row.ap_c == 5_628_000


def test_derive_resisc():
    row = an.derive_row(cfg_epochs("RESISC-45", 6300, 200, 64, 224, 45))
    assert row.n_to_it == 19_688
    assert row.ai_c == 438
    assert row.ap_c == 6_272_000


def test_derive_iteration_specified_loveda():
    cfg = an.ScheduleConfig(name="LoveDA", n_tr_im=4191, n_to_it=80_000, s_b=8,
                            s_tr_im=512, n_c=7)
    row = an.derive_row(cfg)
    assert row.n_to_sa == 640_000  # iterations x batch, exactly
    assert row.n_to_it == 80_000
    assert row.ai_c == 11_429
    assert row.ap_c == 46_811_429


def test_config_requires_exactly_one_duration():
    with pytest.raises(ConfigError):
        an.ScheduleConfig(name="x", n_tr_im=10, s_b=2, s_tr_im=32, n_c=2)
    with pytest.raises(ConfigError):
        an.ScheduleConfig(name="x", n_tr_im=10, n_tr_ep=1, n_to_it=5, s_b=2, s_tr_im=32, n_c=2)
    with pytest.raises(ConfigError):
        an.ScheduleConfig(name="x", n_tr_im=0, n_tr_ep=1, s_b=2, s_tr_im=32, n_c=2)


@settings(max_examples=100, deadline=None)
@given(
    st.integers(min_value=1, max_value=10**6),
    st.integers(min_value=1, max_value=500),
    st.integers(min_value=1, max_value=512),
)
def test_scale_consistency_doubling_images_and_batch(n_tr_im, n_tr_ep, s_b):
    a = an.derive_row(cfg_epochs("a", n_tr_im, n_tr_ep, s_b, 64, 5))
    b = an.derive_row(cfg_epochs("b", 2 * n_tr_im, n_tr_ep, 2 * s_b, 64, 5))
    assert a.n_to_it == b.n_to_it


@settings(max_examples=100, deadline=None)
@given(
    st.integers(min_value=1, max_value=10**6),
    st.integers(min_value=1, max_value=200),
    st.integers(min_value=1, max_value=128),
    st.integers(min_value=1, max_value=64),
)
def test_rounding_bound_ai_c(n_tr_im, n_tr_ep, s_b, n_c):
    row = an.derive_row(cfg_epochs("r", n_tr_im, n_tr_ep, s_b, 32, n_c))
    assert abs(row.ai_c * n_c - row.n_to_it) <= n_c / 2


# ----------------------------------------------------------------- reconcile


def test_full_fixture_reconciles_56_of_56():
    rows = an.load_fixture(FIXTURE)
    assert len(rows) == 14
    report = an.reconcile_table(rows)
    assert len(report.checks) == 56
    assert report.all_match, report.mismatches
    assert report.summary() == "56/56 derived cells match"


def test_perturbed_batch_flags_only_that_row():
    rows = an.load_fixture(FIXTURE)
    perturbed = []
    for cfg, exp in rows:
        if cfg.name == "EuroSAT":
            cfg = an.ScheduleConfig(name=cfg.name, n_tr_im=cfg.n_tr_im, n_tr_ep=cfg.n_tr_ep,
                                    s_b=63, s_tr_im=cfg.s_tr_im, n_c=cfg.n_c)
        perturbed.append((cfg, exp))
    report = an.reconcile_table(perturbed)
    assert not report.all_match
    assert {c.dataset for c in report.mismatches} == {"EuroSAT"}
    cells = {c.cell for c in report.mismatches}
    assert "n_to_it" in cells and "ai_c" in cells
    assert "n_to_sa" not in cells  # epochs-specified: sample count unaffected


def test_fixture_errors():
    with pytest.raises(FixtureError):
        an.load_fixture("/nonexistent/fixture.json")
    with pytest.raises(FixtureError):
        an.parse_fixture({"not": "a list"})
    with pytest.raises(FixtureError):
        an.parse_fixture([{"name": "x"}])


# ----------------------------------------------------------------- emit_report


def test_emit_empty_is_header_only():
    assert an.emit_report([]) == ",".join(an.CSV_COLUMNS) + "\n"


def test_emit_single_row():
    csv = an.emit_report([cfg_epochs("EuroSAT", 16200, 100, 64, 224, 10)])
    lines = csv.strip().split("\n")
    assert len(lines) == 2
    assert lines[1] == "EuroSAT,16200,100,,64,224,10,1620000,25312,2531,36288000"


def test_emit_full_fixture_matches_golden_bytes():
    rows = an.load_fixture(FIXTURE)
    csv = an.emit_report([cfg for cfg, _ in rows])
    assert csv.encode("utf-8") == GOLDEN.read_bytes()


def test_emit_reproducible():
    rows = an.load_fixture(FIXTURE)
    a = an.emit_report([cfg for cfg, _ in rows])
    b = an.emit_report([cfg for cfg, _ in rows])
    assert a == b
