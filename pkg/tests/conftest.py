from pathlib import Path

import pytest

from fairfedgnn.data import prepare

ROOT = Path(__file__).resolve().parents[1]
ML100K = ROOT / "data" / "ml-100k"


@pytest.fixture(scope="session")
def ml100k_dir():
    if not (ML100K / "u.data").exists():
        pytest.skip("ML-100K raw files not present")
    return ML100K


@pytest.fixture(scope="session")
def ml100k(ml100k_dir):
    return prepare(ml100k_dir, "ml-100k", 20, "gender")


def make_synthetic(n_users=5, n_items=12, per_user=10, seed=0):
    """Small dense-ish rating set with groups split by user parity."""
    import numpy as np

    from fairfedgnn.data import S0, S1, RatingTable, SensitiveAssignment, temporal_split

    rng = np.random.default_rng(seed)
    recs = []
    for u in range(n_users):
        items = rng.choice(n_items, size=per_user, replace=False)
        for t, i in enumerate(items):
            recs.append((u, int(i), float(rng.integers(1, 6)), t))
    split = temporal_split(RatingTable.from_records(recs))
    groups = SensitiveAssignment("gender", {u: S0 if u % 2 == 0 else S1 for u in range(n_users)})
    return split, groups


@pytest.fixture
def synthetic():
    return make_synthetic


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in getattr(rep, "nodeid", "") or rep.when != "call" and outcome != "error":
                continue
            detail = dict(rep.user_properties).get("detail", "")
            name = rep.nodeid.split("::")[-1]
            lines.append((name, "PASS" if outcome == "passed" else "FAIL", detail))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, status, detail in sorted(lines):
            number = name.split("_")[2]
            terminalreporter.write_line(f"ACCEPTANCE {int(number)} {status} {name}: {detail}")
