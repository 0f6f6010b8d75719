import warnings

import numpy as np
import pytest

warnings.filterwarnings("ignore", message="The TBB threading layer")

CRITERIA = {
    1: "augmentation oracle agreement",
    2: "policy distribution",
    3: "intensity chains leave landmarks untouched",
    4: "loss gradient fidelity",
    5: "zero-strength identities and DFT oracle",
    6: "desk-scale training with vs without augmentation",
    7: "Grad-CAM correctness",
    8: "determinism and resume",
    9: "metrics arithmetic",
}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


def pytest_collection_modifyitems(items):
    # tag reports up front so setup errors still count against the criterion
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    # one line per acceptance criterion; a criterion passes when all its tests pass
    outcome: dict = {}
    notes: dict = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props:
                continue
            if rep.when != "call" and key == "passed":
                continue
            if rep.when == "teardown" and key != "error":
                continue
            n = int(props["criterion"])
            ok = key == "passed"
            outcome[n] = outcome.get(n, True) and ok
            notes.setdefault(n, []).extend(str(v) for k, v in rep.user_properties if k == "detail")
    if not outcome:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n not in outcome:
            terminalreporter.write_line(f"criterion {n} ({CRITERIA[n]}): NOT RUN")
            continue
        status = "PASS" if outcome[n] else "FAIL"
        line = f"criterion {n} ({CRITERIA[n]}): {status}"
        if notes.get(n):
            line += "  [" + "; ".join(notes[n]) + "]"
        terminalreporter.write_line(line)
