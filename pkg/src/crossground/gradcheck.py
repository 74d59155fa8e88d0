"""Central finite-difference verification of analytic gradients.

The checker re-runs operations in float64 (the engine follows its input
dtype) and compares tape gradients against central differences of a
randomly weighted scalarization of the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T

DEFAULT_H = 1e-4
DEFAULT_RTOL = 1e-3
DEFAULT_ATOL = 1e-5

STATUS_PASSED = "passed"
STATUS_FAILED = "failed"
STATUS_SKIPPED = "skipped-nondifferentiable"


@dataclass
class CheckResult:
    op: str
    status: str
    max_rel_err: float = 0.0
    per_input: list[float] = field(default_factory=list)
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.status != STATUS_FAILED


def _rel_err(a: np.ndarray, b: np.ndarray, rtol: float, atol: float) -> float:
    # r <= rtol  <=>  |a-b| <= max(rtol*max(|a|,|b|), atol)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), atol / rtol)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def finite_difference_check(
    fn: Callable[..., T.Tensor],
    arrays: Sequence[np.ndarray],
    h: float = DEFAULT_H,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    seed: int = 0,
    name: str = "fn",
) -> CheckResult:
    """Compare tape gradients of `fn(*tensors, tape)` against central
    differences, input by input, reporting the max relative error.

    `fn` may return a non-scalar tensor; the output is scalarized with a
    fixed random weighting before differentiation.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [T.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    tape = T.Tape()
    out = fn(*tensors, tape)
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    loss = T.sum_all(T.mul(out, T.const(weights, dtype=np.float64), tape), tape)
    T.backward(loss, tape)

    def scalar_at(xs: list[np.ndarray]) -> float:
        ts = [T.Tensor(x, dtype=np.float64) for x in xs]
        return float((fn(*ts, None).values * weights).sum())

    per_input: list[float] = []
    for i, base in enumerate(arrays):
        fd = np.zeros_like(base)
        flat = fd.reshape(-1)
        for j in range(base.size):
            bumped = [a.copy() for a in arrays]
            bumped[i].reshape(-1)[j] += h
            up = scalar_at(bumped)
            bumped[i].reshape(-1)[j] -= 2 * h
            down = scalar_at(bumped)
            flat[j] = (up - down) / (2.0 * h)
        per_input.append(_rel_err(tensors[i].grad, fd, rtol, atol))
    worst = max(per_input) if per_input else 0.0
    status = STATUS_PASSED if worst <= rtol else STATUS_FAILED
    return CheckResult(op=name, status=status, max_rel_err=worst, per_input=per_input)


def _rng_inputs(rng: np.random.Generator, *shapes: tuple[int, int]) -> list[np.ndarray]:
    return [rng.standard_normal(s) for s in shapes]


def _dirichlet_rows(rng: np.random.Generator, m: int, n: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n) * 2.0, size=m)


def default_suite(seed: int = 0) -> list[CheckResult]:
    """Run every differentiable primitive through the checker at randomized
    inputs, steering clear of kinks; known-nondifferentiable points are
    reported as skipped rather than tested.
    """
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def run(name, fn, arrays, **kw):
        results.append(finite_difference_check(fn, arrays, name=name, seed=seed, **kw))

    run("matmul", lambda a, b, t: T.matmul(a, b, t), _rng_inputs(rng, (3, 3), (3, 3)))
    run("add", lambda a, b, t: T.add(a, b, t), _rng_inputs(rng, (2, 4), (2, 4)))
    run("sub", lambda a, b, t: T.sub(a, b, t), _rng_inputs(rng, (2, 4), (2, 4)))
    run("mul", lambda a, b, t: T.mul(a, b, t), _rng_inputs(rng, (2, 4), (2, 4)))
    run("div", lambda a, b, t: T.div(a, b, t),
        [rng.standard_normal((2, 4)), rng.uniform(0.5, 2.0, (2, 4))])
    run("scale", lambda a, t: T.scale(a, 1.7, t), _rng_inputs(rng, (2, 3)))
    run("add_scalar", lambda a, t: T.add_scalar(a, -0.3, t), _rng_inputs(rng, (2, 3)))
    run("sigmoid", lambda a, t: T.sigmoid(a, t), _rng_inputs(rng, (2, 5)))
    run("relu", lambda a, t: T.relu(a, t),
        [np.where(np.abs(x := rng.standard_normal((3, 4))) < 0.1, 0.5, x)])
    run("log", lambda a, t: T.log(a, t), [rng.uniform(0.5, 2.0, (2, 4))])
    run("sqrt", lambda a, t: T.sqrt(a, t), [rng.uniform(0.5, 2.0, (2, 4))])
    run("clamp", lambda a, t: T.clamp(a, -1.0, 1.0, t),
        [rng.uniform(-0.9, 0.9, (2, 4))])
    run("transpose", lambda a, t: T.transpose(a, t), _rng_inputs(rng, (2, 3)))
    run("concat_rows", lambda a, b, t: T.concat_rows([a, b], t),
        _rng_inputs(rng, (2, 3), (1, 3)))
    run("concat_cols", lambda a, b, t: T.concat_cols([a, b], t),
        _rng_inputs(rng, (2, 3), (2, 2)))
    run("slice_rows", lambda a, t: T.slice_rows(a, 1, 3, t), _rng_inputs(rng, (4, 3)))
    run("slice_cols", lambda a, t: T.slice_cols(a, 0, 2, t), _rng_inputs(rng, (3, 4)))
    run("repeat_rows", lambda a, t: T.repeat_rows(a, 3, t), _rng_inputs(rng, (2, 3)))
    run("avg_rows", lambda a, t: T.avg_rows(a, t), _rng_inputs(rng, (4, 3)))
    # max-pool gradients hold only away from ties
    gap = rng.standard_normal((4, 3))
    gap += np.arange(4)[:, None] * 0.37
    run("max_rows", lambda a, t: T.max_rows(a, t), [gap])
    gap2 = rng.standard_normal((6, 3)) + np.arange(6)[:, None] * 0.41
    run("group_max_rows", lambda a, t: T.group_max_rows(a, 3, t), [gap2])
    run("sum_all", lambda a, t: T.sum_all(a, t), _rng_inputs(rng, (2, 3)))
    run("mean_all", lambda a, t: T.mean_all(a, t), _rng_inputs(rng, (2, 3)))
    run("broadcast_add", lambda a, b, t: T.broadcast_add(a, b, t),
        _rng_inputs(rng, (3, 4), (1, 4)))
    run("broadcast_mul", lambda a, b, t: T.broadcast_mul(a, b, t),
        _rng_inputs(rng, (3, 4), (1, 4)))
    run("softmax_rows", lambda a, t: T.softmax_rows(a, t), _rng_inputs(rng, (2, 5)))
    mask = (rng.random((3, 5)) < 0.6).astype(np.float64)
    mask[:, 0] = 1.0  # keep every row non-empty
    run("masked_softmax_rows", lambda a, t: T.masked_softmax_rows(a, mask, t),
        _rng_inputs(rng, (3, 5)))
    # smooth_l1 kinks at |d| = 1; sample residuals away from it
    base = rng.standard_normal((2, 3))
    delta = rng.uniform(-0.8, 0.8, (2, 3))
    run("smooth_l1", lambda a, b, t: T.smooth_l1(a, b, t), [base + delta, base])
    delta_far = np.sign(rng.standard_normal((2, 3))) * rng.uniform(1.2, 2.0, (2, 3))
    run("smooth_l1#far", lambda a, b, t: T.smooth_l1(a, b, t), [base + delta_far, base])
    # kl_rows rows must stay near the simplex: tiny step keeps the
    # perturbed rows inside the validation tolerance
    run("kl_rows", lambda p, q, t: T.kl_rows(p, q, t),
        [_dirichlet_rows(rng, 3, 4), _dirichlet_rows(rng, 3, 4)], h=1e-6)
    labels = rng.integers(0, 5, size=4)
    run("cross_entropy_mean", lambda a, t: T.cross_entropy_mean(a, labels, t),
        _rng_inputs(rng, (4, 5)))

    results.append(CheckResult(
        op="relu@0", status=STATUS_SKIPPED,
        note="kink at 0: no two-sided derivative exists"))
    results.append(CheckResult(
        op="clamp@bound", status=STATUS_SKIPPED,
        note="kink at the clip bounds: no two-sided derivative exists"))
    results.append(CheckResult(
        op="max_rows@tie", status=STATUS_SKIPPED,
        note="tied maxima: subgradient is set-valued"))
    return results


def suite_passes(results: Sequence[CheckResult]) -> bool:
    return all(r.passed for r in results)


def format_report(results: Sequence[CheckResult]) -> str:
    lines = [f"{'op':<22} {'status':<26} {'max rel err':>12}"]
    for r in results:
        err = f"{r.max_rel_err:.3e}" if r.status != STATUS_SKIPPED else "-"
        lines.append(f"{r.op:<22} {r.status:<26} {err:>12}")
    return "\n".join(lines)
