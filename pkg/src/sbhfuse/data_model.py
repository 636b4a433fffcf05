"""Input records, region graphs, and birth-history panels.

Panels hold woman-level records from two kinds of sources: full birth
histories (dated births and deaths per child) and summary birth histories
(totals only).  Everything is validated at ingestion; the resulting panel is
immutable and safe to share across threads.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import yaml

log = logging.getLogger(__name__)

NA = "NA"
MIN_MOTHER_AGE = 15
MAX_MOTHER_AGE = 49


class PanelError(ValueError):
    """Malformed input or invariant violation; carries file/line context."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + message)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class SurveyMeta:
    survey_id: str
    survey_year: int
    source_kind: str  # "FBH" | "SBH"
    bias_group: str | None = None


@dataclass(frozen=True)
class WomanRecord:
    woman_id: str
    age_at_survey: int
    region: str
    stratum: str  # "urban" | "rural"
    survey_id: str
    source_kind: str


@dataclass(frozen=True)
class FbhChildRecord:
    woman_id: str
    birth_year: int
    age_at_death: int | None  # None = alive at survey


@dataclass(frozen=True)
class SbhRecord:
    woman_id: str
    total_born: int
    total_died: int


@dataclass(frozen=True)
class RegionGraph:
    regions: tuple[str, ...]
    adjacency: dict[str, frozenset]

    def __post_init__(self):
        for r in self.regions:
            for rp in self.adjacency[r]:
                if rp == r:
                    raise PanelError(f"region {r} listed as its own neighbor")
                if r not in self.adjacency[rp]:
                    raise PanelError(f"adjacency not symmetric: {r} ~ {rp}")

    @property
    def islands(self) -> tuple[str, ...]:
        return tuple(r for r in self.regions if not self.adjacency[r])


@dataclass(frozen=True)
class BirthHistoryPanel:
    women: tuple[WomanRecord, ...]
    children: tuple[FbhChildRecord, ...]   # FBH women only
    sbh: tuple[SbhRecord, ...]             # SBH women only
    graph: RegionGraph
    surveys: dict[str, SurveyMeta]

    def woman(self, woman_id: str) -> WomanRecord:
        return self._by_id[woman_id]

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {w.woman_id: w for w in self.women})

    def children_of(self, woman_id: str) -> list[FbhChildRecord]:
        by_mother = getattr(self, "_children_by_mother", None)
        if by_mother is None:
            by_mother = {}
            for c in self.children:
                by_mother.setdefault(c.woman_id, []).append(c)
            object.__setattr__(self, "_children_by_mother", by_mother)
        return by_mother.get(woman_id, [])

    def counts(self) -> dict:
        """Women / births / deaths per source kind, for ingestion reports."""
        out = {}
        for kind in ("FBH", "SBH"):
            women = [w for w in self.women if w.source_kind == kind]
            if kind == "FBH":
                ids = {w.woman_id for w in women}
                births = sum(1 for c in self.children if c.woman_id in ids)
                deaths = sum(1 for c in self.children
                             if c.woman_id in ids and c.age_at_death is not None)
            else:
                births = sum(s.total_born for s in self.sbh)
                deaths = sum(s.total_died for s in self.sbh)
            out[kind] = {"women": len(women), "births": births, "deaths": deaths}
        return out


@dataclass(frozen=True)
class SbhCell:
    survey_id: str
    region: str
    stratum: str
    age_at_survey: int
    total_born: int
    total_died: int
    n_women: int = 0


# ---------------------------------------------------------------------------
# ingestion

def load_region_graph(path) -> RegionGraph:
    """Adjacency list, one line per region: ``region_id: n1 n2 ...``."""
    regions = []
    adjacency = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise PanelError("expected 'region: neighbors...'", path, lineno)
            rid, rest = line.split(":", 1)
            rid = rid.strip()
            if rid in adjacency:
                raise PanelError(f"duplicate region {rid}", path, lineno)
            regions.append(rid)
            adjacency[rid] = frozenset(rest.split())
    for r, nbrs in adjacency.items():
        for rp in nbrs:
            if rp not in adjacency:
                raise PanelError(f"region {r} references unknown neighbor {rp}", path)
    graph = RegionGraph(tuple(regions), adjacency)
    for r in graph.islands:
        log.warning("region %s has no neighbors (island)", r)
    return graph


def load_survey_meta(path) -> dict[str, SurveyMeta]:
    """Survey metadata config: a YAML list under the key ``surveys``."""
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or "surveys" not in doc:
        raise PanelError("survey metadata must contain a 'surveys' list", path)
    metas = {}
    for entry in doc["surveys"]:
        try:
            meta = SurveyMeta(
                survey_id=str(entry["survey_id"]),
                survey_year=int(entry["year"]),
                source_kind=str(entry["kind"]).upper(),
                bias_group=entry.get("bias_group"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PanelError(f"bad survey entry {entry!r}: {exc}", path)
        if meta.source_kind not in ("FBH", "SBH"):
            raise PanelError(f"survey kind must be FBH or SBH, got {meta.source_kind}",
                             path)
        metas[meta.survey_id] = meta
    return metas


def _parse_int(text, name, path, lineno, allow_na=False):
    text = text.strip()
    if allow_na and text == NA:
        return None
    try:
        return int(text)
    except ValueError:
        raise PanelError(f"column {name}: expected integer, got {text!r}",
                         path, lineno)


def _check_woman(fields, graph, surveys, path, lineno) -> WomanRecord:
    wid, sid, region, stratum, m_s = fields
    if sid not in surveys:
        raise PanelError(f"unknown survey {sid!r}", path, lineno)
    if region not in graph.adjacency:
        raise PanelError(f"unknown region {region!r}", path, lineno)
    stratum = stratum.strip().lower()
    if stratum not in ("urban", "rural"):
        if stratum in ("", NA.lower(), "na"):
            log.warning("%s:%s: unknown stratum, defaulting to rural", path, lineno)
            stratum = "rural"
        else:
            raise PanelError(f"stratum must be urban or rural, got {stratum!r}",
                             path, lineno)
    if not (MIN_MOTHER_AGE <= m_s <= MAX_MOTHER_AGE):
        raise PanelError(f"mother age {m_s} outside [{MIN_MOTHER_AGE}, "
                         f"{MAX_MOTHER_AGE}]", path, lineno)
    return WomanRecord(wid, m_s, region, stratum, sid, surveys[sid].source_kind)


FBH_COLUMNS = ["woman_id", "survey_id", "region", "stratum",
               "mother_age_at_survey", "child_birth_year", "child_age_at_death"]
SBH_COLUMNS = ["woman_id", "survey_id", "region", "stratum",
               "mother_age_at_survey", "children_born", "children_died"]


def load_panel(fbh_path, sbh_path, graph_path, meta_path,
               drop_survey_year_births: bool = True) -> BirthHistoryPanel:
    """Load and cross-validate the four input files into a panel.

    ``drop_survey_year_births`` excludes children born in the survey year,
    matching the convention that the survey year itself is not exposed to
    fertility; set to False to keep such rows.
    """
    graph = load_region_graph(graph_path)
    surveys = load_survey_meta(meta_path)

    women: dict[str, WomanRecord] = {}
    children: list[FbhChildRecord] = []
    sbh: list[SbhRecord] = []

    if fbh_path is not None:
        for lineno, row in _read_rows(fbh_path, FBH_COLUMNS):
            wid, sid = row[0], row[1]
            m_s = _parse_int(row[4], "mother_age_at_survey", fbh_path, lineno)
            rec = _check_woman((wid, sid, row[2], row[3], m_s), graph, surveys,
                               fbh_path, lineno)
            if rec.source_kind != "FBH":
                raise PanelError(f"survey {sid} is not an FBH source", fbh_path,
                                 lineno)
            prev = women.get(wid)
            if prev is not None and prev != rec:
                raise PanelError(f"conflicting rows for woman {wid}", fbh_path,
                                 lineno)
            women[wid] = rec
            birth_year = _parse_int(row[5], "child_birth_year", fbh_path, lineno,
                                    allow_na=True)
            if birth_year is None:
                continue  # childless-woman marker row
            survey_year = surveys[sid].survey_year
            if birth_year > survey_year:
                raise PanelError(f"birth year {birth_year} after survey year "
                                 f"{survey_year}", fbh_path, lineno)
            if birth_year == survey_year and drop_survey_year_births:
                log.warning("%s:%s: dropping child born in survey year",
                            fbh_path, lineno)
                continue
            mother_age_at_birth = m_s - (survey_year - birth_year)
            if mother_age_at_birth < MIN_MOTHER_AGE:
                raise PanelError(f"mother aged {mother_age_at_birth} at birth",
                                 fbh_path, lineno)
            aad = _parse_int(row[6], "child_age_at_death", fbh_path, lineno,
                             allow_na=True)
            if aad is not None:
                if aad < 0:
                    raise PanelError("negative age at death", fbh_path, lineno)
                if birth_year + aad > survey_year:
                    raise PanelError(f"death at age {aad} would fall after the "
                                     "survey year", fbh_path, lineno)
            children.append(FbhChildRecord(wid, birth_year, aad))

    if sbh_path is not None:
        for lineno, row in _read_rows(sbh_path, SBH_COLUMNS):
            wid, sid = row[0], row[1]
            m_s = _parse_int(row[4], "mother_age_at_survey", sbh_path, lineno)
            rec = _check_woman((wid, sid, row[2], row[3], m_s), graph, surveys,
                               sbh_path, lineno)
            if rec.source_kind != "SBH":
                raise PanelError(f"survey {sid} is not an SBH source", sbh_path,
                                 lineno)
            if wid in women:
                raise PanelError(f"duplicate woman {wid}", sbh_path, lineno)
            women[wid] = rec
            born = _parse_int(row[5], "children_born", sbh_path, lineno)
            died = _parse_int(row[6], "children_died", sbh_path, lineno)
            if born < 0 or died < 0 or died > born:
                raise PanelError(f"need 0 <= died <= born, got born={born} "
                                 f"died={died}", sbh_path, lineno)
            sbh.append(SbhRecord(wid, born, died))

    panel = BirthHistoryPanel(tuple(women.values()), tuple(children),
                              tuple(sbh), graph, surveys)
    counts = panel.counts()
    log.info("loaded panel: FBH %(women)d women, %(births)d births, "
             "%(deaths)d deaths", counts["FBH"])
    log.info("loaded panel: SBH %(women)d women, %(births)d births, "
             "%(deaths)d deaths", counts["SBH"])
    return panel


def _read_rows(path, columns):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelError("empty file", path, 1)
        header = [h.strip() for h in header]
        if header != columns:
            raise PanelError(f"expected header {columns}, got {header}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(columns):
                raise PanelError(f"expected {len(columns)} columns, got "
                                 f"{len(row)}", path, lineno)
            yield lineno, [c.strip() for c in row]


# ---------------------------------------------------------------------------
# emission (round trips with load_panel)

def write_panel(panel: BirthHistoryPanel, fbh_path, sbh_path, graph_path=None,
                meta_path=None) -> None:
    with open(fbh_path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(FBH_COLUMNS)
        for w in panel.women:
            if w.source_kind != "FBH":
                continue
            kids = panel.children_of(w.woman_id)
            if not kids:
                wr.writerow([w.woman_id, w.survey_id, w.region, w.stratum,
                             w.age_at_survey, NA, NA])
            for c in kids:
                wr.writerow([w.woman_id, w.survey_id, w.region, w.stratum,
                             w.age_at_survey, c.birth_year,
                             NA if c.age_at_death is None else c.age_at_death])
    with open(sbh_path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(SBH_COLUMNS)
        recs = {s.woman_id: s for s in panel.sbh}
        for w in panel.women:
            if w.source_kind != "SBH":
                continue
            s = recs[w.woman_id]
            wr.writerow([w.woman_id, w.survey_id, w.region, w.stratum,
                         w.age_at_survey, s.total_born, s.total_died])
    if graph_path is not None:
        write_region_graph(panel.graph, graph_path)
    if meta_path is not None:
        write_survey_meta(panel.surveys, meta_path)


def write_region_graph(graph: RegionGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in graph.regions:
            fh.write(f"{r}: {' '.join(sorted(graph.adjacency[r]))}\n")


def write_survey_meta(surveys: dict[str, SurveyMeta], path) -> None:
    doc = {"surveys": [
        {"survey_id": m.survey_id, "year": m.survey_year, "kind": m.source_kind,
         **({"bias_group": m.bias_group} if m.bias_group else {})}
        for m in surveys.values()]}
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


# ---------------------------------------------------------------------------
# SBH tabulation

def tabulate_sbh(panel: BirthHistoryPanel) -> list[SbhCell]:
    """Aggregate woman-level SBH records to (survey, region, stratum, age) cells.

    The cells partition the SBH women; birth and death totals are conserved.
    """
    acc: dict[tuple, list[int]] = {}
    for rec in panel.sbh:
        w = panel.woman(rec.woman_id)
        key = (w.survey_id, w.region, w.stratum, w.age_at_survey)
        tb_td = acc.setdefault(key, [0, 0, 0])
        tb_td[0] += rec.total_born
        tb_td[1] += rec.total_died
        tb_td[2] += 1
    return [SbhCell(sid, region, stratum, m_s, tb, td, nw)
            for (sid, region, stratum, m_s), (tb, td, nw) in sorted(acc.items())]
