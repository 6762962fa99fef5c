"""Discretization, the three scan forms, and the selective scan op."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mamba_moc import autograd as ag
from mamba_moc.autograd import Tensor
from mamba_moc.errors import ConfigError, ModeError, ShapeError
from mamba_moc.ssm import (DiscreteSsm, SelectiveSSM, associative_combine, available_backends,
                           convolution_kernel, discretize, kernel_conv, scan_parallel,
                           scan_recurrent, selective_scan_op)
from mamba_moc.ssm import kernels

from _helpers import check_gradients

BACKENDS = available_backends()


def random_lti(rng, n=None, length=None, d=1):
    n = n or int(rng.integers(1, 9))
    length = length or int(rng.integers(1, 65))
    a = -rng.uniform(0.1, 3.0, size=(d, n))
    return DiscreteSsm.from_continuous(a, rng.normal(size=n), rng.normal(size=n),
                                       rng.uniform(0.01, 0.5), length)


# ---------------------------------------------------------------- discretization

def test_discretize_scalar_example():
    a_bar, b_bar = discretize(-1.0, 2.0, np.log(2.0))
    assert abs(a_bar - 0.5) < 1e-9 and abs(b_bar - 1.0) < 1e-9


def test_discretize_small_step_limit():
    a_bar, b_bar = discretize(-1e-4, 3.0, 1e-6)
    assert abs(b_bar - 3e-6) <= 1e-12 * 3e-6
    assert a_bar == pytest.approx(np.exp(-1e-10), abs=0)


def test_discretize_is_continuous_across_threshold():
    # just below and above the switch the two formulas agree to first order
    lo = discretize(-1.0, 1.0, 0.999e-6)[1]
    hi = discretize(-1.0, 1.0, 1.001e-6)[1]
    assert abs(hi - lo) / lo < 3e-3


def test_discretize_rejects_non_positive_step():
    with pytest.raises(ValueError):
        discretize(-1.0, 1.0, 0.0)


def test_discretize_decay_in_unit_interval(rng):
    a = -rng.uniform(0.01, 10, 100)
    a_bar, _ = discretize(a, np.ones(100), rng.uniform(1e-3, 1.0, 100))
    assert np.all((a_bar > 0) & (a_bar < 1))


# ---------------------------------------------------------------- scan forms

def test_scan_hand_example():
    ssm = DiscreteSsm(np.full((3, 1), 0.5), np.ones((3, 1)), np.ones((3, 1)))
    np.testing.assert_allclose(scan_recurrent(ssm, [1.0, 0.0, 0.0]), [1.0, 0.5, 0.25])
    np.testing.assert_allclose(scan_recurrent(ssm, [1.0, 1.0, 1.0]), [1.0, 1.5, 1.75])
    np.testing.assert_allclose(scan_parallel(ssm, [1.0, 1.0, 1.0]), [1.0, 1.5, 1.75])
    np.testing.assert_allclose(kernel_conv(ssm, [1.0, 1.0, 1.0]), [1.0, 1.5, 1.75])


def test_initial_state_is_carried():
    ssm = DiscreteSsm(np.full((2, 1), 0.5), np.ones((2, 1)), np.ones((2, 1)))
    np.testing.assert_allclose(scan_recurrent(ssm, [0.0, 0.0], h0=[4.0]), [2.0, 1.0])
    np.testing.assert_allclose(scan_parallel(ssm, [0.0, 0.0], h0=[4.0]), [2.0, 1.0])


def test_convolution_kernel_taps():
    ssm = DiscreteSsm(np.full((4, 1), 0.5), np.full((4, 1), 2.0), np.full((4, 1), 3.0))
    np.testing.assert_allclose(convolution_kernel(ssm)[:, 0], 6.0 * 0.5 ** np.arange(4))


@pytest.mark.parametrize("backend", BACKENDS)
def test_lti_forms_agree(backend, rng):
    for _ in range(25):
        ssm = random_lti(rng, d=int(rng.integers(1, 4)))
        x = rng.normal(size=(ssm.length, ssm.a_bar.shape[1]))
        y_conv = kernel_conv(ssm, x)
        np.testing.assert_allclose(scan_recurrent(ssm, x, backend=backend), y_conv, atol=1e-5)
        np.testing.assert_allclose(scan_parallel(ssm, x), y_conv, atol=1e-5)


def test_parallel_matches_recurrent_time_varying(rng):
    length, d, n = 37, 3, 4
    ssm = DiscreteSsm.from_continuous(-rng.uniform(0.1, 2, (d, n)), rng.normal(size=(length, n)),
                                      rng.normal(size=(length, n)), rng.uniform(0.01, 0.5, (length, d)), length)
    x = rng.normal(size=(length, d))
    np.testing.assert_allclose(scan_parallel(ssm, x), scan_recurrent(ssm, x), atol=1e-5)


def test_kernel_conv_rejects_time_varying(rng):
    ssm = DiscreteSsm.from_continuous(-np.ones((1, 2)), rng.normal(size=(5, 2)), np.ones(2), 0.1, 5)
    with pytest.raises(ModeError):
        kernel_conv(ssm, np.zeros(5))


def test_causality(rng):
    ssm = random_lti(rng, length=30)
    x = rng.normal(size=30)
    y = scan_recurrent(ssm, x)
    x2 = x.copy()
    x2[17:] = rng.normal(size=13)
    y2 = scan_recurrent(ssm, x2)
    np.testing.assert_array_equal(y[:17], y2[:17])
    assert not np.allclose(y[17:], y2[17:])


def test_scan_length_mismatch(rng):
    with pytest.raises(ShapeError):
        scan_recurrent(random_lti(rng, length=5), np.zeros(6))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-2, 2), st.floats(-2, 2)), min_size=3, max_size=3))
def test_associative_combine_is_associative(elems):
    (a1, b1), (a2, b2), (a3, b3) = [(np.float64(a), np.float64(b)) for a, b in elems]
    left = associative_combine(associative_combine((a1, b1), (a2, b2)), (a3, b3))
    right = associative_combine((a1, b1), associative_combine((a2, b2), (a3, b3)))
    np.testing.assert_allclose(left, right, atol=1e-12)


# ---------------------------------------------------------------- selective scan

def selective_inputs(rng, m=4, length=7, d=3, n=4, ka=2):
    return (rng.normal(size=(m, length, d)), rng.uniform(0.05, 1.0, (m, length, d)),
            -rng.uniform(0.5, 2.0, (ka, d, n)), rng.normal(size=(m, length, n)), rng.normal(size=(m, length, n)))


def selective_oracle(x, delta, a, b, c):
    m, length, d = x.shape
    y = np.zeros_like(x)
    for i in range(m):
        ai = a[i % a.shape[0]]
        h = np.zeros(ai.shape)
        for t in range(length):
            a_bar, b_bar = discretize(ai, b[i, t][None, :], delta[i, t][:, None])
            h = a_bar * h + b_bar * x[i, t][:, None]
            y[i, t] = h @ c[i, t]
    return y


@pytest.mark.parametrize("backend", BACKENDS)
def test_selective_forward_matches_oracle(backend, rng):
    args = selective_inputs(rng)
    y, _ = kernels.selective_forward(*args, backend=backend)
    np.testing.assert_allclose(y, selective_oracle(*args), rtol=1e-10, atol=1e-12)


def test_backends_agree_in_float32(rng):
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernels unavailable")
    args = [a.astype(np.float32) for a in selective_inputs(rng, m=8, length=33, d=5, n=6, ka=4)]
    gy = rng.normal(size=args[0].shape).astype(np.float32)
    outs = {}
    for backend in BACKENDS:
        y, cache = kernels.selective_forward(*args, backend=backend)
        outs[backend] = (y, *kernels.selective_backward(*args, cache, gy, backend=backend))
    for got, want in zip(outs["cython"], outs["python"]):
        assert got.dtype == np.float32
        np.testing.assert_allclose(got, want, rtol=2e-4, atol=2e-5)


@pytest.mark.parametrize("backend", BACKENDS)
def test_selective_op_gradients(backend, rng):
    with ag.default_dtype(np.float64):
        x, dl, a, b, c = (Tensor(v, requires_grad=True) for v in selective_inputs(rng, m=2, length=5, ka=2))
        x, dl, b, c = (t.reshape(1, 2, 5, t.shape[-1]) for t in (x, dl, b, c))
        x, dl, b, c = (Tensor(t.data, requires_grad=True) for t in (x, dl, b, c))
        w = Tensor(rng.normal(size=x.shape))
        check_gradients(lambda: ag.sum_(ag.mul(selective_scan_op(x, dl, a, b, c, backend=backend), w)),
                        [x, dl, a, b, c], rtol=1e-6, atol=1e-9)


def test_selective_op_near_zero_step_gradients(rng):
    # early steps put |delta*A| under the first-order cut-off, later ones
    # inside the series branch of the A derivative
    with ag.default_dtype(np.float64):
        x = Tensor(rng.normal(size=(1, 6, 2)), requires_grad=True)
        steps = np.concatenate([rng.uniform(1e-7, 4e-7, (1, 3, 2)), rng.uniform(1e-3, 4e-3, (1, 3, 2))], axis=1)
        dl = Tensor(steps, requires_grad=True)
        a = Tensor(-rng.uniform(0.5, 2.0, (2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 6, 3)), requires_grad=True)
        c = Tensor(rng.normal(size=(1, 6, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=x.shape))
        check_gradients(lambda: ag.sum_(ag.mul(selective_scan_op(x, dl, a, b, c), w)),
                        [x, dl, a, b, c], h=[1e-6, 3e-8, 1e-6, 1e-6, 1e-6], rtol=1e-5, atol=1e-9)


def test_selective_op_shape_errors(rng):
    x = Tensor(np.zeros((2, 5, 3)))
    with pytest.raises(ShapeError):
        selective_scan_op(x, Tensor(np.ones((2, 5, 2))), Tensor(-np.ones((3, 4))),
                          Tensor(np.zeros((2, 5, 4))), Tensor(np.zeros((2, 5, 4))))
    with pytest.raises(ShapeError):
        selective_scan_op(x, Tensor(np.ones((2, 5, 3))), Tensor(-np.ones((3, 4))),
                          Tensor(np.zeros((2, 5, 2))), Tensor(np.zeros((2, 5, 2))))


def test_selective_ssm_init_and_shapes(rng):
    ssm = SelectiveSSM(6, 4, rng, directions=4)
    np.testing.assert_allclose(-np.exp(ssm.a_log.data[2, 3]), -np.arange(1, 5), rtol=1e-6)
    dt = np.log1p(np.exp(ssm.b_delta.data.astype(np.float64)))
    assert np.all((dt >= 1e-3 * 0.999) & (dt <= 0.1 * 1.001))
    y = ssm(Tensor(rng.normal(size=(2, 4, 9, 6))))
    assert y.shape == (2, 4, 9, 6)
    single = SelectiveSSM(6, 4, rng)
    assert single(Tensor(rng.normal(size=(9, 6)))).shape == (9, 6)
    assert single(Tensor(rng.normal(size=(3, 9, 6)))).shape == (3, 9, 6)


def test_selective_ssm_rejects_bad_query_width(rng):
    ssm = SelectiveSSM(6, 4, rng)
    with pytest.raises(ConfigError):
        ssm(Tensor(rng.normal(size=(9, 6))), c_offset=Tensor(np.zeros((9, 3))))


def test_selective_ssm_is_causal(rng):
    ssm = SelectiveSSM(4, 3, rng)
    x = rng.normal(size=(12, 4))
    y1 = ssm(Tensor(x)).data
    x[8:] += 1.0
    y2 = ssm(Tensor(x)).data
    np.testing.assert_array_equal(y1[:8], y2[:8])


def test_pure_python_fallback_selected_by_env():
    code = "from mamba_moc.ssm import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, MOC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_unknown_backend_rejected(rng):
    with pytest.raises(ValueError):
        kernels.selective_forward(*selective_inputs(rng), backend="fortran")
