"""Degradation fidelity: kernel responses, partition of unity, covariance."""

import numpy as np
import pytest

from vsrpp.degrade import (
    DegradationSpec,
    blur_gaussian,
    degrade_bd,
    degrade_bi,
    gaussian_kernel1d,
    imresize_matrix,
    resize_cubic,
    upsample_cubic,
)
from vsrpp.errors import DimensionError

from oracles import gaussian_kernel_ref, imresize_ref

# Frozen once from the scalar kernel-response oracle (tests/oracles.py):
# 4x downsample of a 16x16 Kronecker delta at (8, 8).
GOLDEN_DELTA_RESPONSE = np.array([
    [0.0001206994, -0.0010702014, -0.0019982457, 0.0002011657],
    [-0.0010702014, 0.0094891191, 0.0177177787, -0.0017836690],
    [-0.0019982457, 0.0177177787, 0.0330820680, -0.0033304095],
    [0.0002011657, -0.0017836690, -0.0033304095, 0.0003352761],
])


def test_bi_constant_preserved():
    img = np.full((3, 32, 32), 0.613, dtype=np.float32)
    out = degrade_bi(img, 4)
    assert out.shape == (3, 8, 8)
    np.testing.assert_allclose(out, 0.613, atol=1e-6)


def test_bi_golden_delta_response():
    img = np.zeros((1, 16, 16), dtype=np.float32)
    img[0, 8, 8] = 1.0
    out = degrade_bi(img, 4)[0]
    np.testing.assert_allclose(out, GOLDEN_DELTA_RESPONSE, atol=1e-8)


def test_bi_matches_scalar_oracle(rng):
    img = rng.random((24, 20))
    got = degrade_bi(img, 4)
    want = imresize_ref(img, 6, 5)
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_bi_output_size_and_divisibility(rng):
    img = rng.random((3, 64, 64)).astype(np.float32)
    assert degrade_bi(img, 4).shape == (3, 16, 16)
    with pytest.raises(DimensionError):
        degrade_bi(rng.random((3, 30, 32)), 4)


def test_partition_of_unity_many_sizes():
    for n_in, n_out in ((16, 4), (64, 16), (96, 24), (57, 19), (12, 48), (33, 33)):
        m = imresize_matrix(n_in, n_out)
        assert np.abs(m.sum(axis=1) - 1.0).max() <= 1e-7


def test_bd_constant_preserved():
    img = np.full((3, 32, 32), 0.25, dtype=np.float32)
    out = degrade_bd(img, 1.6, 4)
    assert out.shape == (3, 8, 8)
    np.testing.assert_allclose(out, 0.25, atol=1e-6)


def test_bd_gaussian_closed_form():
    k = gaussian_kernel1d(1.6, 13)
    want = gaussian_kernel_ref(1.6, 13)
    np.testing.assert_allclose(k, want, atol=1e-12)
    assert abs(k.sum() - 1.0) < 1e-12
    # blur of a delta gives the separable kernel outer product
    img = np.zeros((1, 33, 33))
    img[0, 16, 16] = 1.0
    blurred = blur_gaussian(img, 1.6, 13)[0]
    sep = np.outer(np.pad(k, 10), np.pad(k, 10))
    np.testing.assert_allclose(blurred, sep, atol=1e-12)
    np.testing.assert_allclose(blurred[16, 10:23], k * k[6], atol=1e-12)


def test_bd_subsample_phase():
    img = np.zeros((1, 16, 16), dtype=np.float32)
    ramp = np.arange(16, dtype=np.float32)
    img[0] = ramp[None, :] * 0 + ramp[:, None] * 0
    # mark exact grid points; blur is skipped by checking indices directly
    marked = np.zeros((16, 16), dtype=np.float32)
    marked[::4, ::4] = 1.0
    sub = marked[::4, ::4]
    assert sub.shape == (4, 4) and np.all(sub == 1.0)
    out = degrade_bd(np.broadcast_to(marked, (1, 16, 16)), 1.6, 4)
    assert out.shape == (1, 4, 4)


def test_shift_covariance_integer_multiples(rng):
    """Degrading a scale-shifted frame equals shifting the degraded frame.

    Two overlapping crops of one wide image realize a clean 4-pixel content
    shift with no wraparound; their degradations must agree up to a 1-pixel
    shift away from the borders.
    """
    wide = rng.random((40, 48))
    a_hr = wide[:, 0:40]
    b_hr = wide[:, 4:44]  # content of a_hr shifted left by 4
    for fn in (lambda x: degrade_bi(x, 4), lambda x: degrade_bd(x, 1.6, 4)):
        a = fn(a_hr)
        b = fn(b_hr)
        np.testing.assert_allclose(a[2:-2, 3:-2], b[2:-2, 2:-3], atol=1e-6)


def test_upsample_cubic_shape_and_constant():
    img = np.full((3, 8, 8), 0.4, dtype=np.float32)
    up = upsample_cubic(img, 4)
    assert up.shape == (3, 32, 32)
    np.testing.assert_allclose(up, 0.4, atol=1e-6)


def test_resize_cubic_identity_same_size(rng):
    img = rng.random((5, 7))
    np.testing.assert_allclose(resize_cubic(img, 5, 7), img, atol=1e-7)


def test_degradation_spec_dispatch(rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    bi = DegradationSpec(mode="BI", scale=4).apply(img)
    bd = DegradationSpec(mode="BD", scale=4, sigma=1.6).apply(img)
    assert bi.shape == bd.shape == (3, 4, 4)
    assert not np.allclose(bi, bd)
    with pytest.raises(DimensionError):
        DegradationSpec(mode="XX")
    with pytest.raises(DimensionError):
        DegradationSpec(scale=1)
    with pytest.raises(DimensionError):
        DegradationSpec(sigma=0.0)
