"""The built-in verification suites must pass end to end."""

import numpy as np
import pytest

from debiformer import verification as V


def _assert_suite(result):
    failed = [c for c in result.checks if not c.passed]
    msg = "; ".join(f"{c.name}: {c.value} vs {c.threshold} {c.detail}" for c in failed)
    assert result.passed, msg
    assert result.seconds >= 0.0
    assert result.checks


def test_suite_oracle():
    _assert_suite(V.run_suite("oracle", seed=0))


def test_suite_invariants():
    _assert_suite(V.run_suite("invariants", seed=0))


def test_suite_flops():
    _assert_suite(V.run_suite("flops", seed=0))


@pytest.mark.slow
def test_suite_gradcheck():
    _assert_suite(V.run_suite("gradcheck", seed=0))


def test_unknown_suite():
    with pytest.raises(ValueError, match="unknown suite"):
        V.run_suite("spelling")


def test_crashed_check_is_a_failure():
    def boom():
        raise RuntimeError("exploded")

    checks = V._run_checks([("ok", lambda: V.CheckResult("ok", True, 0.0, 1.0)),
                            ("bad", boom)])
    assert checks[0].passed and not checks[1].passed
    assert "RuntimeError" in checks[1].detail and np.isnan(checks[1].value)


def test_result_serialization():
    r = V.run_suite("flops", seed=1)
    d = r.to_dict()
    assert d["suite"] == "flops" and isinstance(d["checks"], list)
    assert set(d["checks"][0]) == {"name", "passed", "value", "threshold", "detail"}


def test_run_all_covers_every_suite():
    # seed only flows into randomized inputs; suite list is fixed
    assert V.SUITES == ("gradcheck", "oracle", "invariants", "flops")
