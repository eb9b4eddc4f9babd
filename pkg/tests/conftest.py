import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from koasev.dataset import ColumnSpec, cohort_from_records

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

SCHEMA_TEXT = """\
pid|categorical|patient_id
side|categorical|knee_side
kl|numeric|response
age|numeric|predictor
sex|binary|predictor|male,female
pain|categorical|predictor|none,mild,severe
"""


def make_cohort(n_patients=20, seed=0, missing=0.0, single_knee=()):
    """Small mixed-type cohort; patients in ``single_knee`` get only a left knee."""
    rng = np.random.default_rng(seed)
    schema = [
        ColumnSpec("pid", "categorical", "patient_id"),
        ColumnSpec("side", "categorical", "knee_side"),
        ColumnSpec("kl", "numeric", "response"),
        ColumnSpec("age", "numeric", "predictor"),
        ColumnSpec("sex", "binary", "predictor", ("male", "female")),
        ColumnSpec("pain", "categorical", "predictor", ("none", "mild", "severe")),
    ]
    rec = {k: [] for k in ("pid", "side", "kl", "age", "sex", "pain")}
    for i in range(n_patients):
        sides = ("left",) if i in single_knee else ("left", "right")
        age = float(np.round(rng.normal(60, 9), 1))
        sex = int(rng.integers(2))
        for s in sides:
            rec["pid"].append(f"P{i:03d}")
            rec["side"].append(s)
            rec["kl"].append(float(rng.integers(5)))
            rec["age"].append(None if rng.random() < missing else age)
            rec["sex"].append(sex)
            rec["pain"].append(None if rng.random() < missing else int(rng.integers(3)))
    return cohort_from_records(schema, rec)


@pytest.fixture
def small_cohort():
    return make_cohort()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
