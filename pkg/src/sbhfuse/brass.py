"""Trussell-variant Brass estimation from children-ever-born tabulations.

Coefficient and life-table level data are ingested, never hard coded; the
shipped example table is synthetic and only suitable for tests.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

log = logging.getLogger(__name__)

AGE_GROUPS = ["15-19", "20-24", "25-29", "30-34", "35-39", "40-44", "45-49"]
N_GROUPS = 7
LEVEL_AGES = (1, 2, 3, 5, 10, 15, 20)
# mother's age group index -> child age x whose cumulative mortality q(x) the
# group's fraction dead identifies
X_OF_I = {1: 1, 2: 2, 3: 3, 4: 5, 5: 10, 6: 15, 7: 20}


class BrassError(ValueError):
    pass


@dataclass(frozen=True)
class BrassTable:
    family: str
    # per age group i=1..7: multiplier and reference-date coefficients
    a: dict[int, float]
    b: dict[int, float]
    c: dict[int, float]
    e: dict[int, float]
    f: dict[int, float]
    g: dict[int, float]
    x_of_i: dict[int, int]
    # levels[j][x] = q(x) at mortality level j; higher level = lower mortality
    levels: dict[int, dict[int, float]]

    def __post_init__(self):
        if self.x_of_i != X_OF_I:
            raise BrassError(f"x_of_i must be {X_OF_I}, got {self.x_of_i}")
        js = sorted(self.levels)
        for x in LEVEL_AGES:
            col = [self.levels[j][x] for j in js]
            if any(hi <= lo for lo, hi in zip(col[1:], col)):
                raise BrassError(
                    f"levels column q({x}) must strictly decrease in level")


@dataclass(frozen=True)
class BrassInput:
    """Counts per mother's age group i=1..7 (missing groups allowed)."""

    ceb: dict[int, float]     # children ever born
    cd: dict[int, float]      # children died
    fp: dict[int, float]      # women in group

    def __post_init__(self):
        for i, v in self.cd.items():
            if v > self.ceb.get(i, 0.0):
                raise BrassError(f"group {i}: children died {v} exceeds "
                                 f"children ever born {self.ceb.get(i)}")


@dataclass(frozen=True)
class BrassEstimate:
    parity: dict[int, float]          # P(i)
    fraction_dead: dict[int, float]   # D(i)
    qx: dict[int, float]              # q(x_of_i(i))
    reference_years: dict[int, float]  # t(i), years before survey
    q5: dict[int, float]
    level_used: dict[int, int]
    h: dict[int, float | None]
    out_of_range: dict[int, bool]


def brass_parity_and_fraction(inp: BrassInput):
    """Average parity P(i) = CEB/FP and fraction dead D(i) = CD/CEB.

    Groups with zero denominators are excluded with a warning.
    """
    parity, fraction = {}, {}
    for i in sorted(inp.ceb):
        fp = inp.fp.get(i, 0.0)
        ceb = inp.ceb[i]
        if fp <= 0:
            log.warning("Brass: group %d has no women, skipping", i)
            continue
        parity[i] = ceb / fp
        if ceb <= 0:
            log.warning("Brass: group %d has no births, skipping D(i)", i)
            continue
        fraction[i] = inp.cd.get(i, 0.0) / ceb
    return parity, fraction


def _parity_ratios(parity):
    for i in (1, 2, 3):
        if parity.get(i, 0.0) <= 0:
            raise BrassError(f"parity ratio needs P(1..3) > 0; P({i}) missing "
                             "or zero")
    return parity[1] / parity[2], parity[2] / parity[3]


def brass_qx(fraction_dead, parity, table: BrassTable):
    """q(x) = D(i) * (a + b*P1/P2 + c*P2/P3); the multiplier is clamped at 0."""
    r12, r23 = _parity_ratios(parity)
    qx = {}
    for i, d in fraction_dead.items():
        mult = table.a[i] + table.b[i] * r12 + table.c[i] * r23
        if mult < 0:
            log.warning("Brass: negative multiplier %.4f for group %d, "
                        "clamping to 0", mult, i)
            mult = 0.0
        qx[i] = d * mult
    return qx


def brass_reference_dates(parity, table: BrassTable):
    """t(i) = e + f*P1/P2 + g*P2/P3, in years before the survey."""
    r12, r23 = _parity_ratios(parity)
    return {i: table.e[i] + table.f[i] * r12 + table.g[i] * r23
            for i in sorted(table.e)}


def brass_to_q5(q_e: float, x: int, table: BrassTable):
    """Interpolate q(x) between adjacent life-table levels and read off q(5).

    Returns (q5, level j, h, out_of_range).  For x = 5 the value passes
    through unchanged.  Values outside the level grid are clamped to the
    nearest boundary level and flagged.
    """
    if x == 5:
        return q_e, 0, None, False
    js = sorted(table.levels)
    col = {j: table.levels[j][x] for j in js}
    if q_e >= col[js[0]]:
        log.warning("Brass: q(%d)=%.4f above level grid, clamping", x, q_e)
        return table.levels[js[0]][5], js[0], 0.0, True
    if q_e <= col[js[-1]]:
        log.warning("Brass: q(%d)=%.4f below level grid, clamping", x, q_e)
        return table.levels[js[-1]][5], js[-1], 0.0, True
    for j, j1 in zip(js, js[1:]):
        if col[j1] < q_e <= col[j]:
            h = (q_e - col[j]) / (col[j1] - col[j])
            q5 = (1.0 - h) * table.levels[j][5] + h * table.levels[j1][5]
            return q5, j, h, False
    raise BrassError(f"could not bracket q({x}) = {q_e} in the level grid")


def brass_pipeline(inp: BrassInput, table: BrassTable) -> BrassEstimate:
    """Run all five steps and collect per-group results."""
    parity, fraction = brass_parity_and_fraction(inp)
    qx = brass_qx(fraction, parity, table)
    refdates = brass_reference_dates(parity, table)
    q5, level, h, oor = {}, {}, {}, {}
    for i, q in qx.items():
        q5[i], level[i], h[i], oor[i] = brass_to_q5(q, table.x_of_i[i], table)
    return BrassEstimate(parity, fraction, qx,
                         {i: refdates[i] for i in qx}, q5, level, h, oor)


# ---------------------------------------------------------------------------
# table and input files

def load_brass_table(path) -> BrassTable:
    """Three whitespace-separated blocks: [coeffs], [x_of_i], [levels].

    ``coeffs`` rows: i a b c e f g.  ``x_of_i`` rows: i x.  ``levels`` rows:
    level q1 q2 q3 q5 q10 q15 q20.  A ``family:`` line before the blocks
    labels the model life table family.
    """
    family = "unspecified"
    block = None
    coeffs, x_of_i, levels = {}, {}, {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.lower().startswith("family:"):
                family = line.split(":", 1)[1].strip()
                continue
            if line.startswith("["):
                block = line.strip("[]").lower()
                if block not in ("coeffs", "x_of_i", "levels"):
                    raise BrassError(f"{path}:{lineno}: unknown block {block!r}")
                continue
            parts = line.split()
            try:
                if block == "coeffs":
                    if len(parts) != 7:
                        raise ValueError("need 7 fields: i a b c e f g")
                    i = int(parts[0])
                    coeffs[i] = tuple(float(p) for p in parts[1:])
                elif block == "x_of_i":
                    if len(parts) != 2:
                        raise ValueError("need 2 fields: i x")
                    x_of_i[int(parts[0])] = int(parts[1])
                elif block == "levels":
                    if len(parts) != 1 + len(LEVEL_AGES):
                        raise ValueError(f"need {1 + len(LEVEL_AGES)} fields")
                    j = int(parts[0])
                    levels[j] = dict(zip(LEVEL_AGES, map(float, parts[1:])))
                else:
                    raise ValueError("data before any block header")
            except ValueError as exc:
                raise BrassError(f"{path}:{lineno}: {exc}")
    if set(coeffs) != set(range(1, N_GROUPS + 1)):
        raise BrassError(f"{path}: coeffs block must cover i=1..7")
    if len(levels) < 2:
        raise BrassError(f"{path}: need at least 2 levels")
    return BrassTable(
        family=family,
        a={i: v[0] for i, v in coeffs.items()},
        b={i: v[1] for i, v in coeffs.items()},
        c={i: v[2] for i, v in coeffs.items()},
        e={i: v[3] for i, v in coeffs.items()},
        f={i: v[4] for i, v in coeffs.items()},
        g={i: v[5] for i, v in coeffs.items()},
        x_of_i=x_of_i,
        levels=levels,
    )


def load_brass_input(path) -> BrassInput:
    """CSV with columns age_group,women,children_born,children_died."""
    group_index = {g: i + 1 for i, g in enumerate(AGE_GROUPS)}
    ceb, cd, fp = {}, {}, {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"age_group", "women", "children_born", "children_died"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise BrassError(f"{path}: expected columns {sorted(need)}")
        for row in reader:
            g = row["age_group"].strip()
            if g not in group_index:
                raise BrassError(f"{path}: unknown age group {g!r}")
            i = group_index[g]
            fp[i] = float(row["women"])
            ceb[i] = float(row["children_born"])
            cd[i] = float(row["children_died"])
    return BrassInput(ceb, cd, fp)


def brass_input_from_cells(cells) -> BrassInput:
    """Tabulate SBH cells into the 5-year mother age groups."""
    ceb: dict[int, float] = {}
    cd: dict[int, float] = {}
    fp: dict[int, float] = {}
    for cell in cells:
        i = (cell.age_at_survey - 15) // 5 + 1
        if not 1 <= i <= N_GROUPS:
            continue
        ceb[i] = ceb.get(i, 0.0) + cell.total_born
        cd[i] = cd.get(i, 0.0) + cell.total_died
        fp[i] = fp.get(i, 0.0) + cell.n_women
    return BrassInput(ceb, cd, fp)


def write_brass_estimate(est: BrassEstimate, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["age_group", "i", "x", "parity", "fraction_dead", "qx",
                     "reference_years_before_survey", "q5", "level", "h",
                     "out_of_range"])
        for i in sorted(est.qx):
            wr.writerow([AGE_GROUPS[i - 1], i, X_OF_I[i],
                         f"{est.parity[i]:.6f}",
                         f"{est.fraction_dead[i]:.6f}",
                         f"{est.qx[i]:.6f}",
                         f"{est.reference_years[i]:.4f}",
                         f"{est.q5[i]:.6f}",
                         est.level_used[i],
                         "" if est.h[i] is None else f"{est.h[i]:.6f}",
                         int(est.out_of_range[i])])
