"""Indirect estimation pipeline: parity ratios, multipliers, level lookup."""

import importlib.resources

import numpy as np
import pytest

from sbhfuse.brass import (AGE_GROUPS, BrassError, BrassInput, BrassTable,
                           X_OF_I, brass_input_from_cells,
                           brass_parity_and_fraction, brass_pipeline, brass_qx,
                           brass_reference_dates, brass_to_q5,
                           load_brass_input, load_brass_table,
                           write_brass_estimate)
from sbhfuse.data_model import SbhCell

WORKSHEET_TABLE = """family: worksheet
[coeffs]
# i  a    b    c    e    f    g
1  1.0  0.0  0.0  1.0  0.0  0.0
2  0.9  0.2  0.1  2.0  1.0  0.5
3  1.0  0.0  0.0  3.0  0.0  0.0
4  1.0  0.0  0.0  4.0  0.0  0.0
5  1.0  0.0  0.0  5.0  0.0  0.0
6  1.0  0.0  0.0  6.0  0.0  0.0
7  1.0  0.0  0.0  7.0  0.0  0.0
[x_of_i]
1 1
2 2
3 3
4 5
5 10
6 15
7 20
[levels]
1  0.10  0.15  0.20  0.30  0.35  0.38  0.40
2  0.04  0.05  0.08  0.12  0.15  0.17  0.18
"""


@pytest.fixture
def worksheet_table(tmp_path):
    p = tmp_path / "table.txt"
    p.write_text(WORKSHEET_TABLE, encoding="utf-8")
    return load_brass_table(p)


@pytest.fixture
def worksheet_input():
    return BrassInput(ceb={1: 50.0, 2: 100.0, 3: 200.0},
                      cd={1: 4.0, 2: 10.0, 3: 30.0},
                      fp={1: 100.0, 2: 100.0, 3: 100.0})


class TestWorksheet:
    """Every intermediate agrees with a hand calculation.

    P = (0.5, 1.0, 2.0) so both parity ratios are 0.5; D = (0.08, 0.1, 0.15).
    """

    def test_parity_and_fraction(self, worksheet_input):
        parity, fraction = brass_parity_and_fraction(worksheet_input)
        assert parity == {1: 0.5, 2: 1.0, 3: 2.0}
        assert fraction == {1: 0.08, 2: 0.1, 3: 0.15}

    def test_qx(self, worksheet_input, worksheet_table):
        parity, fraction = brass_parity_and_fraction(worksheet_input)
        qx = brass_qx(fraction, parity, worksheet_table)
        assert np.isclose(qx[1], 0.08)                 # multiplier 1
        # 0.1 * (0.9 + 0.2*0.5 + 0.1*0.5) = 0.105
        assert np.isclose(qx[2], 0.105)
        assert np.isclose(qx[3], 0.15)

    def test_reference_dates(self, worksheet_input, worksheet_table):
        parity, _ = brass_parity_and_fraction(worksheet_input)
        t = brass_reference_dates(parity, worksheet_table)
        assert np.isclose(t[1], 1.0)
        assert np.isclose(t[2], 2.0 + 1.0 * 0.5 + 0.5 * 0.5)  # 2.75
        assert np.isclose(t[3], 3.0)

    def test_level_interpolation(self, worksheet_table):
        # q(1)=0.08 between 0.10 and 0.04: h = 1/3, q5 = 2/3*0.30 + 1/3*0.12
        q5, level, h, oor = brass_to_q5(0.08, 1, worksheet_table)
        assert level == 1 and not oor
        assert np.isclose(h, 1.0 / 3.0)
        assert np.isclose(q5, 0.24)
        # q(2)=0.105 between 0.15 and 0.05: h = 0.45
        q5, _, h, _ = brass_to_q5(0.105, 2, worksheet_table)
        assert np.isclose(h, 0.45)
        assert np.isclose(q5, 0.219)
        # q(3)=0.15 between 0.20 and 0.08: h = 5/12
        q5, _, h, _ = brass_to_q5(0.15, 3, worksheet_table)
        assert np.isclose(h, 5.0 / 12.0)
        assert np.isclose(q5, 0.225)

    def test_pipeline_collects_everything(self, worksheet_input,
                                          worksheet_table):
        est = brass_pipeline(worksheet_input, worksheet_table)
        assert np.isclose(est.q5[1], 0.24)
        assert np.isclose(est.q5[2], 0.219)
        assert np.isclose(est.q5[3], 0.225)
        assert set(est.qx) == {1, 2, 3}
        assert not any(est.out_of_range.values())


class TestEdgeCases:
    def test_x_equals_5_passes_through(self, worksheet_table):
        q5, level, h, oor = brass_to_q5(0.2, 5, worksheet_table)
        assert q5 == 0.2 and h is None and not oor

    def test_clamping_above_and_below(self, worksheet_table):
        q5, level, _, oor = brass_to_q5(0.5, 2, worksheet_table)
        assert oor and q5 == 0.30 and level == 1
        q5, level, _, oor = brass_to_q5(0.001, 2, worksheet_table)
        assert oor and q5 == 0.12 and level == 2

    def test_negative_multiplier_clamped(self, tmp_path):
        # a negative b coefficient with a large parity ratio goes negative
        text = WORKSHEET_TABLE.replace("2  0.9  0.2  0.1",
                                       "2  0.9  -0.2  0.1")
        p = tmp_path / "neg.txt"
        p.write_text(text, encoding="utf-8")
        table = load_brass_table(p)
        qx = brass_qx({2: 0.1}, {1: 50.0, 2: 1.0, 3: 1.0}, table)
        assert qx[2] == 0.0

    def test_died_exceeds_born(self):
        with pytest.raises(BrassError, match="exceeds"):
            BrassInput(ceb={1: 2.0}, cd={1: 3.0}, fp={1: 10.0})

    def test_missing_parity(self, worksheet_table):
        with pytest.raises(BrassError, match="P\\(1\\.\\.3\\)"):
            brass_qx({1: 0.1}, {1: 0.5, 2: 1.0}, worksheet_table)

    def test_zero_denominators_skipped(self):
        parity, fraction = brass_parity_and_fraction(
            BrassInput(ceb={1: 0.0, 2: 10.0}, cd={2: 1.0},
                       fp={1: 10.0, 2: 0.0}))
        assert 1 in parity and 1 not in fraction
        assert 2 not in parity


class TestTableLoading:
    def test_shipped_synthetic_table(self):
        ref = importlib.resources.files("sbhfuse") / "data" / \
            "brass_table_synthetic.txt"
        table = load_brass_table(str(ref))
        assert table.family == "synthetic-nested-survival"
        assert table.x_of_i == X_OF_I
        assert len(table.levels) == 14

    def test_levels_must_decrease(self, tmp_path):
        bad = WORKSHEET_TABLE.replace("2  0.04", "2  0.11")
        p = tmp_path / "bad.txt"
        p.write_text(bad, encoding="utf-8")
        with pytest.raises(BrassError, match="strictly decrease"):
            load_brass_table(p)

    def test_missing_coeff_rows(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("[coeffs]\n1 1 0 0 1 0 0\n", encoding="utf-8")
        with pytest.raises(BrassError, match="i=1\\.\\.7"):
            load_brass_table(p)

    def test_unknown_block(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("[bogus]\n", encoding="utf-8")
        with pytest.raises(BrassError, match="unknown block"):
            load_brass_table(p)


def test_input_from_cells_aggregates_by_age_group():
    cells = [
        SbhCell("s", "a", "rural", 22, 10, 2, 5),
        SbhCell("s", "a", "urban", 24, 6, 1, 3),
        SbhCell("s", "b", "rural", 33, 20, 4, 8),
    ]
    inp = brass_input_from_cells(cells)
    assert inp.ceb == {2: 16.0, 4: 20.0}
    assert inp.cd == {2: 3.0, 4: 4.0}
    assert inp.fp == {2: 8.0, 4: 8.0}


def test_load_input_and_write_estimate(tmp_path, worksheet_table,
                                       worksheet_input):
    p = tmp_path / "input.csv"
    lines = ["age_group,women,children_born,children_died"]
    for i, g in enumerate(AGE_GROUPS[:3], start=1):
        lines.append(f"{g},{worksheet_input.fp[i]:.0f},"
                     f"{worksheet_input.ceb[i]:.0f},"
                     f"{worksheet_input.cd[i]:.0f}")
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    inp = load_brass_input(p)
    assert inp.ceb == worksheet_input.ceb
    est = brass_pipeline(inp, worksheet_table)
    out = tmp_path / "est.csv"
    write_brass_estimate(est, out)
    text = out.read_text(encoding="utf-8")
    assert "0.240000" in text and "0.219000" in text
