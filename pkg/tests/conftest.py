"""Shared fixtures: tiny hand-built panels and small simulated scenarios."""

import sys

import numpy as np
import pytest

from sbhfuse.data_model import (BirthHistoryPanel, FbhChildRecord, RegionGraph,
                                SbhRecord, SurveyMeta, WomanRecord)
from sbhfuse.hazards import TimeWindow
from sbhfuse.simulator import ScenarioConfig, grid_graph


@pytest.fixture
def two_region_graph():
    return RegionGraph(
        regions=("north", "south"),
        adjacency={"north": frozenset({"south"}),
                   "south": frozenset({"north"})})


@pytest.fixture
def tiny_panel(two_region_graph):
    """Two FBH women and two SBH women, survey in 2010."""
    surveys = {
        "dhs": SurveyMeta("dhs", 2010, "FBH"),
        "cen": SurveyMeta("cen", 2010, "SBH"),
    }
    women = (
        WomanRecord("f1", 30, "north", "rural", "dhs", "FBH"),
        WomanRecord("f2", 25, "south", "urban", "dhs", "FBH"),
        WomanRecord("s1", 28, "north", "rural", "cen", "SBH"),
        WomanRecord("s2", 35, "south", "rural", "cen", "SBH"),
    )
    children = (
        FbhChildRecord("f1", 2004, None),
        FbhChildRecord("f1", 2007, 1),
        FbhChildRecord("f2", 2009, None),
    )
    sbh = (
        SbhRecord("s1", 3, 1),
        SbhRecord("s2", 5, 0),
    )
    return BirthHistoryPanel(women=women, children=children, sbh=sbh,
                             graph=two_region_graph, surveys=surveys)


@pytest.fixture(scope="session")
def small_scenario():
    """Four regions, short window: quick enough for end-to-end fits."""
    return ScenarioConfig(
        graph=grid_graph(4),
        window=TimeWindow(1990, 2009),
        survey_year=2010,
        seed=7,
        n_fbh_per_region=150,
        n_sbh_per_region=400,
    )


@pytest.fixture(scope="session")
def small_panel(small_scenario):
    from sbhfuse import simulator
    return simulator.simulate_women(small_scenario)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Repeat the acceptance verdict lines outside of output capture."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
