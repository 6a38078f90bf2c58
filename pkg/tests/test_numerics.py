"""Autodiff engine, kernels, optimizer, schedule, and random streams."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vrdu import _kernels_py, kernels
from vrdu.autodiff import (
    Parameter,
    Tensor,
    backward,
    binary_cross_entropy,
    concat,
    cross_entropy,
    dropout,
    gather_pair,
    gelu,
    grad_enabled,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mul,
    no_grad,
    sigmoid,
    softmax,
    sqrt,
    take_rows,
    tanh,
    tmean,
    transpose,
    tsum,
)
from vrdu.optim import Adam, lr_schedule
from vrdu.rng import RngStream

# ---------------------------------------------------------------------------
# finite-difference oracle


def fd_check(make_loss, params, n_probes=30, eps=1e-6, tol=1e-4, seed=0):
    """Central finite differences against backprop, elementwise on random
    probes of every parameter."""
    for p in params:
        p.zero_grad()
    loss = make_loss()
    backward(loss)
    rng = np.random.default_rng(seed)
    for p in params:
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        k = min(n_probes, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = make_loss().item()
            flat[i] = orig - eps
            lo = make_loss().item()
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            denom = max(abs(fd), abs(grad[i]), 1e-8)
            assert abs(fd - grad[i]) / denom < tol, (
                f"{getattr(p, 'name', 'param')}[{i}]: fd={fd} bp={grad[i]}"
            )


def _param(shape, seed, name="p"):
    return Parameter(np.random.default_rng(seed).normal(size=shape), name)


class TestGradients:
    def test_elementwise_chain(self):
        p = _param((4, 5), 1)

        def loss():
            return tsum(mul(tanh(p), sigmoid(p)))

        fd_check(loss, [p])

    def test_exp_log_sqrt(self):
        p = _param((3, 4), 2)

        def loss():
            x = sqrt(mul(p, p) + 1.0)
            return tsum(log(x))

        fd_check(loss, [p])

    def test_matmul_linear(self):
        w = _param((6, 3), 3, "w")
        b = _param((3,), 4, "b")
        x = Tensor(np.random.default_rng(5).normal(size=(4, 6)))

        def loss():
            return tsum(mul(linear(x, w, b), linear(x, w, b)))

        fd_check(loss, [w, b])

    def test_gelu(self):
        p = _param((5, 5), 6)
        fd_check(lambda: tsum(gelu(p)), [p])

    def test_softmax(self):
        p = _param((4, 7), 7)
        t = np.random.default_rng(8).random((4, 7))
        fd_check(lambda: tsum(mul(softmax(p), Tensor(t))), [p])

    def test_layer_norm(self):
        p = _param((3, 8), 9)
        g = _param((8,), 10, "g")
        b = _param((8,), 11, "b")
        fd_check(lambda: tsum(mul(layer_norm(p, g, b), layer_norm(p, g, b))), [p, g, b])

    def test_concat_transpose_reshape(self):
        a = _param((2, 3), 12, "a")
        b = _param((4, 3), 13, "b")

        def loss():
            c = concat([a, b], axis=0)
            return tsum(mul(transpose(c), transpose(c)))

        fd_check(loss, [a, b])

    def test_take_rows_repeated_indices(self):
        # the same row gathered twice must receive both gradient shares
        p = _param((5, 4), 14)
        ids = np.array([0, 2, 2, 4, 0], dtype=np.int64)
        w = np.random.default_rng(15).normal(size=(5, 4))
        fd_check(lambda: tsum(mul(take_rows(p, ids), Tensor(w))), [p])

    def test_gather_pair(self):
        p = _param((6, 9), 16)
        rng = np.random.default_rng(17)
        rows = rng.integers(0, 6, size=(7, 7))
        cols = rng.integers(0, 9, size=(7, 7))
        w = rng.normal(size=(7, 7))
        fd_check(lambda: tsum(mul(gather_pair(p, rows, cols), Tensor(w))), [p])

    def test_cross_entropy(self):
        p = _param((5, 6), 18)
        t = np.random.default_rng(19).dirichlet(np.ones(6), size=5)
        fd_check(lambda: cross_entropy(p, t, reduction="mean"), [p])
        fd_check(lambda: cross_entropy(p, t, reduction="sum"), [p])

    def test_binary_cross_entropy(self):
        p = _param((8,), 20)
        labels = np.random.default_rng(21).integers(0, 2, size=8).astype(float)
        fd_check(lambda: binary_cross_entropy(sigmoid(p), labels), [p])

    def test_division_and_broadcast(self):
        a = _param((3, 4), 22, "a")
        b = _param((1, 4), 23, "b")
        fd_check(lambda: tsum((a * a) / (b * b + 1.0)), [a, b])


class TestEngine:
    def test_backward_requires_scalar(self):
        p = _param((2, 2), 30)
        with pytest.raises(ValueError):
            backward(p + p)

    def test_matmul_shape_errors(self):
        with pytest.raises(ValueError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        with pytest.raises(ValueError):
            matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))

    def test_grad_accumulates_across_backward_calls(self):
        p = Parameter(np.array([2.0]), "p")
        backward(tsum(p * p))
        backward(tsum(p * p))
        assert p.grad[0] == pytest.approx(8.0)
        p.zero_grad()
        assert p.grad[0] == 0.0

    def test_no_grad_blocks_tape(self):
        p = _param((2, 2), 31)
        with no_grad():
            assert not grad_enabled()
            out = tsum(p * p)
        assert out._parents == ()
        assert grad_enabled()

    def test_diamond_graph_gradient(self):
        # y = x*x used twice: dz/dx = 4x^3 at x=3 -> 108
        p = Parameter(np.array([3.0]), "p")
        y = p * p
        backward(tsum(y * y))
        assert p.grad[0] == pytest.approx(108.0)

    def test_dropout_zero_rate_identity_and_scaling(self):
        x = Tensor(np.ones((4, 4)))
        assert dropout(x, 0.0, None) is x
        stream = RngStream(3, "drop-test")
        out = dropout(x, 0.5, stream).data
        assert set(np.round(np.unique(out), 6)).issubset({0.0, 2.0})

    def test_log_softmax_matches_log_of_softmax(self):
        x = Tensor(np.random.default_rng(32).normal(size=(3, 5)) * 10)
        np.testing.assert_allclose(
            log_softmax(x).data, np.log(softmax(x).data), atol=1e-12
        )


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_normalized_and_nonnegative(x):
    out = softmax(Tensor(x)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (2, 5), elements=st.floats(-30, 30)),
    st.floats(-100, 100),
)
def test_softmax_shift_invariance(x, c):
    np.testing.assert_allclose(
        softmax(Tensor(x)).data, softmax(Tensor(x + c)).data, atol=1e-9
    )


# ---------------------------------------------------------------------------
# kernels: compiled vs reference


class TestKernels:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.table = rng.normal(size=(11, 13))
        self.rows = rng.integers(0, 11, size=(9, 9)).astype(np.int64)
        self.cols = rng.integers(0, 13, size=(9, 9)).astype(np.int64)
        self.grad = rng.normal(size=(9, 9))

    def test_gather_pair_matches_reference(self):
        got = kernels.gather_pair(self.table, self.rows, self.cols)
        ref = _kernels_py.gather_pair(self.table, self.rows, self.cols)
        np.testing.assert_array_equal(got, ref)

    def test_scatter_add_pair_matches_reference(self):
        a = np.zeros_like(self.table)
        b = np.zeros_like(self.table)
        kernels.scatter_add_pair(a, self.rows, self.cols, self.grad)
        _kernels_py.scatter_add_pair(b, self.rows, self.cols, self.grad)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_scatter_add_rows_matches_reference(self):
        rng = np.random.default_rng(8)
        ids = rng.integers(0, 11, size=30).astype(np.int64)
        grad = rng.normal(size=(30, 13))
        a = np.zeros((11, 13))
        b = np.zeros((11, 13))
        kernels.scatter_add_rows(a, ids, grad)
        _kernels_py.scatter_add_rows(b, ids, grad)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_non_contiguous_falls_back(self):
        table = np.asfortranarray(self.table)
        got = kernels.gather_pair(table, self.rows, self.cols)
        ref = _kernels_py.gather_pair(self.table, self.rows, self.cols)
        np.testing.assert_array_equal(got, ref)


# ---------------------------------------------------------------------------
# optimizer and schedule


def reference_adam_step(p, g, m, v, t, lr, b1, b2, eps, wd):
    """Textbook Adam with decoupled weight decay, written independently."""
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    p = p - lr * wd * p
    p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p, m, v


class TestAdam:
    def test_matches_reference_trajectory(self):
        rng = np.random.default_rng(9)
        p = Parameter(rng.normal(size=(4, 3)), "p")
        ref_p = p.data.copy()
        m = np.zeros_like(ref_p)
        v = np.zeros_like(ref_p)
        opt = Adam([p], lr=0.05, weight_decay=0.02)
        for t in range(1, 6):
            g = rng.normal(size=(4, 3))
            p.zero_grad()
            p.grad += g
            opt.step()
            ref_p, m, v = reference_adam_step(
                ref_p, g, m, v, t, 0.05, 0.9, 0.999, 1e-8, 0.02
            )
            np.testing.assert_allclose(p.data, ref_p, atol=1e-12)

    def test_converges_on_quadratic(self):
        p = Parameter(np.array([5.0, -3.0]), "p")
        opt = Adam([p], lr=0.1)
        for _ in range(400):
            p.zero_grad()
            backward(tsum(p * p))
            opt.step()
        assert np.abs(p.data).max() < 1e-3

    def test_weight_decay_is_decoupled(self):
        # zero gradient: decoupled decay still shrinks the value
        p = Parameter(np.array([2.0]), "p")
        opt = Adam([p], lr=0.1, weight_decay=0.5)
        p.zero_grad()
        opt.step()
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))

    def test_zero_lr_keeps_parameters(self):
        p = Parameter(np.array([1.0, 2.0]), "p")
        opt = Adam([p], lr=0.1)
        p.zero_grad()
        p.grad += np.array([1.0, -1.0])
        opt.step(lr=0.0)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_rejects_bad_hyperparameters(self):
        with pytest.raises(ValueError):
            Adam([], lr=-1.0)
        with pytest.raises(ValueError):
            Adam([], beta1=1.0)


class TestLrSchedule:
    def test_oracle_values(self):
        # total=100, warmup 10%: ramp to peak at step 10, zero at step 100
        assert lr_schedule(0, 100, 2.0) == 0.0
        assert lr_schedule(5, 100, 2.0) == pytest.approx(1.0)
        assert lr_schedule(10, 100, 2.0) == pytest.approx(2.0)
        assert lr_schedule(55, 100, 2.0) == pytest.approx(1.0)
        assert lr_schedule(100, 100, 2.0) == 0.0
        assert lr_schedule(150, 100, 2.0) == 0.0

    def test_no_warmup(self):
        assert lr_schedule(0, 10, 1.0, warmup_frac=0.0) == pytest.approx(1.0)

    def test_all_warmup(self):
        assert lr_schedule(10, 10, 1.0, warmup_frac=1.0) == 0.0

    def test_rejects_nonpositive_total(self):
        with pytest.raises(ValueError):
            lr_schedule(0, 0, 1.0)


# ---------------------------------------------------------------------------
# random streams


class TestRngStream:
    def test_reproducible(self):
        a = RngStream(42, "s").random(5)
        b = RngStream(42, "s").random(5)
        np.testing.assert_array_equal(a, b)

    def test_draw_order_advances_counter(self):
        s = RngStream(42, "s")
        first = s.random(5)
        second = s.random(5)
        assert not np.array_equal(first, second)

    def test_streams_independent_by_name(self):
        a = RngStream(42, "alpha").random(5)
        b = RngStream(42, "beta").random(5)
        assert not np.array_equal(a, b)

    def test_interleaving_does_not_disturb_other_streams(self):
        a = RngStream(42, "a")
        ref = RngStream(42, "b").random(4)
        a.random(100)  # consuming one stream must not shift another
        np.testing.assert_array_equal(RngStream(42, "b").random(4), ref)

    def test_child_naming(self):
        s = RngStream(1, "parent")
        c = s.child("x")
        assert c.name == "parent/x"
        np.testing.assert_array_equal(c.random(3), RngStream(1, "parent/x").random(3))

    def test_frozen_reference_values(self):
        # regression pin: Philox output for a fixed (seed, name, counter)
        vals = RngStream(0, "pin").random(3)
        np.testing.assert_allclose(vals, _PINNED_PHILOX, atol=1e-15)

    def test_choice_without_replacement_bounds(self):
        s = RngStream(0, "c")
        out = s.choice_without_replacement(10, 10)
        assert sorted(out) == list(range(10))
        with pytest.raises(ValueError):
            s.choice_without_replacement(3, 4)


# frozen once from a verified run; Philox guarantees platform stability
_PINNED_PHILOX = np.array(
    [0.15730465887271805, 0.18520773556721182, 0.5098587573851563]
)
