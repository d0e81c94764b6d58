import pytest

from soma.cli import PRESETS
from soma.model import builtin_workload
from soma.notation import ScheduleEncoding, apply_dlsa, parse_lfa


@pytest.fixture
def toy5():
    return builtin_workload("toy5", 1)


@pytest.fixture
def edge_hw():
    return PRESETS["edge"]


# The worked five-layer example: order A,B,C,E,D; fusion cuts after A and B;
# a DRAM cut after B; tilings 2/1/2. Tile ids: A1=0 A2=1 B=2 C1=3 E1=4 D1=5
# C2=6 E2=7 D2=8, end marker 9.
FIG5_ENCODING = ScheduleEncoding(
    computing_order=(0, 1, 2, 4, 3),
    flc_set=frozenset({1, 2}),
    tiling_numbers=(2, 1, 2),
    dram_cut_set=frozenset({2}),
)

FIG5_DLSA_ORDER = (
    "I:A:in:0", "W:A", "I:A:in:1", "W:B", "O:B:0", "I:C:B:0", "W:E", "W:D",
    "I:C:B:1", "O:E:0", "O:D:0", "O:E:1", "O:D:1",
)

FIG5_DURATIONS = {
    "I:A:in:0": (0, 1),
    "W:A": (0, 2),
    "I:A:in:1": (0, 2),
    "W:B": (2, 3),       # no prefetch: waits for A2, stalling B
    "O:B:0": (2, 3),
    "I:C:B:0": (2, 4),
    "W:E": (2, 8),       # lives from tile B to tile D2
    "W:D": (3, 9),
    "I:C:B:1": (3, 7),
    "O:E:0": (4, 5),     # deadline at D1: D1 stalls until this store lands
    "O:D:0": (5, 9),
    "O:E:1": (7, 9),
    "O:D:1": (8, 9),
}


@pytest.fixture
def fig5_plan(toy5):
    plan = parse_lfa(toy5, FIG5_ENCODING)
    return apply_dlsa(plan, FIG5_DLSA_ORDER, FIG5_DURATIONS)
