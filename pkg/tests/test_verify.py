import json
import math

import pytest

from infodrop.layers import kl_softplus_unit
from infodrop.verify import (
    GRAD_TOL,
    discrete_ib_checks,
    factorized_prior_checks,
    gradient_checks,
    kl_checks,
    report_json,
    run_verification_suite,
)


def broken_softplus_kl(alpha, f_val, prior):
    """The closed form with its constant -1/2 dropped."""
    return kl_softplus_unit(alpha, f_val, prior) + 0.5


def test_kl_checks_pass():
    checks = kl_checks(0)
    assert len(checks) == 9
    assert all(c.passed for c in checks)


def test_injected_fault_detected():
    checks = [c for c in kl_checks(0, softplus_kl=broken_softplus_kl) if "log_normal" in c.check]
    assert len(checks) == 6
    for c in checks:
        assert not c.passed
        gap = c.detail["closed_form"] - c.detail["mc_estimate"]
        assert gap == pytest.approx(0.5, abs=0.02)


def test_gradient_checks_few_seeds():
    checks = gradient_checks(0, n_seeds=2)
    names = {c.check for c in checks}
    assert {"gradient/network_dense_relu", "gradient/network_conv_softplus"} <= names
    assert all(c.passed and c.value <= GRAD_TOL for c in checks)


def test_factorized_and_discrete_checks():
    assert all(c.passed for c in factorized_prior_checks(1, 10))
    assert all(c.passed for c in discrete_ib_checks())


def test_report_schema():
    report = run_verification_suite(seed=0, grad_seeds=1)
    parsed = json.loads(report_json(report))
    assert len(parsed) == len(report)
    assert len({e["check"] for e in parsed}) == len(parsed)
    for e in parsed:
        assert set(e) >= {"check", "value", "tolerance", "pass"}
        assert isinstance(e["pass"], bool)
    assert all(e["pass"] for e in parsed)


def test_crash_becomes_failed_check():
    def explode(*_):
        raise RuntimeError("boom")

    report = run_verification_suite(seed=0, softplus_kl=explode, grad_seeds=1)
    failed = [e for e in report if not e["pass"]]
    assert len(failed) == 1 and "boom" in failed[0]["check"]
    assert math.isnan(failed[0]["value"])
    # NaN is not valid JSON, so the report writes null instead
    parsed = {e["check"]: e for e in json.loads(report_json(report))}
    assert parsed[failed[0]["check"]]["value"] is None
