"""Finite-difference verification of every differentiable primitive."""

import numpy as np
import pytest

from crossground import gradcheck as gc
from crossground import tensor as T


class TestPrimitiveSuite:
    @pytest.mark.parametrize("seed", range(10))
    def test_all_primitives_pass_fd(self, seed):
        results = gc.default_suite(seed=seed)
        failing = [r for r in results if not r.passed]
        assert not failing, gc.format_report(failing)

    def test_kink_cases_reported_as_skipped(self):
        results = gc.default_suite(seed=0)
        skipped = {r.op for r in results if r.status == gc.STATUS_SKIPPED}
        assert "relu@0" in skipped
        assert "clamp@bound" in skipped

    def test_matmul_random_3x3(self):
        rng = np.random.default_rng(42)
        r = gc.finite_difference_check(
            lambda a, b, t: T.matmul(a, b, t),
            [rng.standard_normal((3, 3)), rng.standard_normal((3, 3))],
            name="matmul")
        assert r.passed and r.max_rel_err <= 1e-3

    def test_softmax_random_2x5(self):
        rng = np.random.default_rng(7)
        r = gc.finite_difference_check(
            lambda a, t: T.softmax_rows(a, t),
            [rng.standard_normal((2, 5))], name="softmax_rows")
        assert r.passed and r.max_rel_err <= 1e-3

    def test_detects_wrong_gradient(self):
        def bad_op(a, tape):
            out = T.Tensor(a.values * 3.0)
            if tape is not None and a.requires_grad:
                out.requires_grad = True
                tape.record("bad", (a,), out, lambda g: a.accumulate(g * 2.0))
            return out

        r = gc.finite_difference_check(bad_op, [np.ones((2, 2))], name="bad")
        assert not r.passed

    def test_report_format_lists_every_op(self):
        results = gc.default_suite(seed=0)
        report = gc.format_report(results)
        for op in ("matmul", "softmax_rows", "kl_rows", "smooth_l1"):
            assert op in report
