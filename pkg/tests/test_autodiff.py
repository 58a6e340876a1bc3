"""Gradient and structural properties of the autodiff core.

Every operator's analytic gradient is compared against central finite
differences on a float64 shadow path; the adjoint and equivariance
properties below are independent of the backward code they exercise.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwnet import gradcheck, tensor as T
from dwnet.tensor import PaddingMode, Tape


def run_checks(results):
    bad = [r for r in results if not r.ok]
    assert not bad, "FD mismatch: " + ", ".join(f"{r.name}={r.rel_err:.2e}" for r in bad)


def test_conv2d_weight_gradient_matches_fd():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32) * 0.5
    b = rng.standard_normal(4).astype(np.float32)
    run_checks(gradcheck.check_gradients(
        "conv_sum_loss",
        lambda tape, l: T.tsum(T.conv2d(l[0], l[1], l[2])),
        [x, w, b], wrt=[1]))


def test_full_operator_suite():
    run_checks(gradcheck.operator_suite(seed=42, cases_per_op=2))


def test_concat_backward_splits_by_channel_range():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
    b = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
    proj = rng.standard_normal((1, 5, 4, 4)).astype(np.float32)
    tape = Tape()
    la, lb = tape.leaf(a), tape.leaf(b)
    y = T.concat_channels([la, lb])
    root = T.tsum(T.mul(y, tape.leaf(proj)))
    grads = T.backward(tape, root)
    assert np.allclose(grads[la.node], proj[:, :2])
    assert np.allclose(grads[lb.node], proj[:, 2:])


def test_gelu_gradient_at_reference_points():
    for v in (-2.0, -0.5, 0.5, 2.0):
        x = np.full((1, 1, 1, 1), v, np.float32)
        res = gradcheck.check_gradients(
            f"gelu@{v}", lambda tape, l: T.tsum(T.gelu(l[0])), [x], wrt=[0],
            step=1e-3, tol=1e-4)
        run_checks(res)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 7), st.integers(0, 7), st.integers(0, 2 ** 31 - 1))
def test_periodic_stack_is_shift_equivariant(dy, dx, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    w1 = rng.standard_normal((4, 3, 3, 3)).astype(np.float32) * 0.4
    b1 = rng.standard_normal(4).astype(np.float32)
    gamma = rng.standard_normal(4).astype(np.float32)
    beta = rng.standard_normal(4).astype(np.float32)
    w2 = rng.standard_normal((2, 4, 3, 3)).astype(np.float32) * 0.4
    b2 = rng.standard_normal(2).astype(np.float32)

    def stack(inp):
        y = T.conv2d(T.constant(inp), T.constant(w1), T.constant(b1),
                     pad=PaddingMode.PERIODIC)
        y = T.group_norm(y, 2, T.constant(gamma), T.constant(beta))
        y = T.gelu(y)
        y = T.conv2d(y, T.constant(w2), T.constant(b2), pad=PaddingMode.PERIODIC)
        return y.data

    shifted_in = np.roll(x, (dy, dx), axis=(2, 3))
    out_then_shift = np.roll(stack(x), (dy, dx), axis=(2, 3))
    shift_then_out = stack(shifted_in)
    assert np.abs(out_then_shift - shift_then_out).max() < 1e-5


def test_adjoint_identity_20_cases():
    rng = np.random.default_rng(11)
    for _ in range(20):
        ci, co, h = rng.integers(1, 5), rng.integers(1, 5), 2 * rng.integers(2, 5)
        w = rng.standard_normal((co, ci, 2, 2)).astype(np.float32)
        a = rng.standard_normal((1, ci, h, h)).astype(np.float32)
        b = rng.standard_normal((1, co, h // 2, h // 2)).astype(np.float32)
        down = T.conv2d(T.constant(a), T.constant(w),
                        T.constant(np.zeros(co, np.float32)), stride=2).data
        up = T.conv_transpose2d(T.constant(b), T.constant(w),
                                T.constant(np.zeros(ci, np.float32))).data
        lhs = float((down * b).sum())
        rhs = float((a * up).sum())
        assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs), abs(rhs))


def test_pool_gradients_match_fd():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32) * 2
    proj = rng.standard_normal((1, 2, 2, 2)).astype(np.float32)
    for op in (T.max_pool2, T.avg_pool2):
        res = gradcheck.check_gradients(
            op.__name__,
            lambda tape, l, op=op: T.tsum(T.mul(op(l[0]), l[1])),
            [x, proj], wrt=[0], step=1e-4)
        run_checks(res)


def test_gradients_accumulate_on_reuse():
    tape = Tape()
    xv = np.array([[[[2.0]]]], np.float32)
    x = tape.leaf(xv)
    root = T.tsum(T.add(x, x))
    grads = T.backward(tape, root)
    assert np.allclose(grads[x.node], 2.0)


def test_mixed_tapes_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.leaf(np.zeros((1, 1, 2, 2), np.float32))
    b = t2.leaf(np.zeros((1, 1, 2, 2), np.float32))
    with pytest.raises(ValueError):
        T.add(a, b)
