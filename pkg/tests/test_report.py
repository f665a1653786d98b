import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillroute.gate import GuardrailConfig
from skillroute.loop import DEPLOYED, run_loop
from skillroute.report import calibration_pairs, pearson, write_report
from skillroute.simulator import gen_environment

from test_loop import SMALL_ENV, small_config


@pytest.fixture(scope="module")
def records():
    env = gen_environment(SMALL_ENV, seed=2)
    recs = run_loop(env, small_config(n_cycles=3))
    # one forced abort so both statuses appear
    recs += run_loop(env, small_config(n_cycles=1, guardrails=GuardrailConfig(critical_segments={"x"})))
    recs[-1].cycle = 3
    return recs


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _naive_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sx = math.sqrt(sum((a - mx) ** 2 for a in x))
    sy = math.sqrt(sum((b - my) ** 2 for b in y))
    return sxy / (sx * sy)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=3, max_size=20))
def test_pearson_matches_textbook(pairs):
    x, y = zip(*pairs)
    if np.std(x) < 1e-6 or np.std(y) < 1e-6:
        return
    assert pearson(x, y) == pytest.approx(_naive_pearson(x, y), abs=1e-9)


def test_pearson_degenerate():
    assert math.isnan(pearson([1.0], [2.0]))
    assert math.isnan(pearson([1.0, 1.0], [2.0, 3.0]))


def test_tables(records, tmp_path):
    paths = write_report(records, tmp_path)
    cycles = _read(paths["cycles"])
    assert [r["status"] for r in cycles][-1] == "aborted"
    assert len(cycles) == len(records)
    cal = _read(paths["calibration"])
    deployed = [r for r in records if r.status == DEPLOYED]
    assert len(cal) == len(deployed) == len(calibration_pairs(records))
    for row, r in zip(cal, deployed):
        assert float(row["true_reward"]) == r.post_true_reward
        assert float(row["ope_lo"]) <= float(row["ope_expected_reward"]) <= float(row["ope_hi"])
    trend = _read(paths["trend"])
    assert trend[0]["status"] == "baseline" and float(trend[0]["true_pct_change"]) == 0.0
    base = records[0].incumbent_true_reward
    for row in trend[1:]:
        assert float(row["true_pct_change"]) == pytest.approx(100 * (float(row["true_reward"]) - base) / base)
    # an aborted cycle keeps the previous serving value
    assert trend[-1]["true_reward"] == trend[-2]["true_reward"]
    summary = {r["key"]: r["value"] for r in _read(paths["summary"])}
    assert int(summary["n_deployed"]) == len(deployed) and int(summary["n_aborted"]) == 1
    rep = _read(paths["replication"])
    assert {r["model"] for r in rep} == {"rp", "hp", "lp"}
    for key in ("trend_png", "calibration_png", "replication_png"):
        assert paths[key].stat().st_size > 0


def test_csvs_are_reproducible(records, tmp_path):
    a = write_report(records, tmp_path / "a", figures=False)
    b = write_report(records, tmp_path / "b", figures=False)
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()
    assert not (tmp_path / "a" / "trend.png").exists()


def test_empty_records(tmp_path):
    paths = write_report([], tmp_path, figures=False)
    assert _read(paths["cycles"]) == []
