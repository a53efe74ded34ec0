"""End-to-end acceptance gate: one pass/fail test per criterion.

The full suite trains several models and takes on the order of an hour
on a laptop CPU; all criteria share one run_all() invocation.
"""

import pytest

from qrl import acceptance

CRITERION_NAMES = [name for name, _ in acceptance.CRITERIA]


@pytest.fixture(scope="session")
def results():
    res = acceptance.run_all(fast=False, verbose=True)
    return {r["name"]: r for r in res}


@pytest.mark.parametrize("name", CRITERION_NAMES)
def test_criterion(results, name):
    r = results[name]
    assert r["passed"], f"{name} failed after {r['runtime_s']}s: {r['details']}"


def test_negative_control_axiom_checker_can_fail():
    # impossible slack must flip the verdict: guards against a checker
    # that trivially passes everything
    ok, details = acceptance.check_quasimetric_axioms(n_samples=500, slack=-1.0)
    assert not ok
    assert details["worst_triangle_gap"] > -1.0
