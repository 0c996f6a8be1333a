import math

import numpy as np
import pytest

from transxssm.tensor import Rng, Tensor
from transxssm.rope import (
    build_frequencies,
    log_position_scale,
    log_position_scales,
    relative_score,
    rotate,
    rotate_sequence,
    rotation_matrix,
)


def test_frequencies_d2():
    t = build_frequencies(2, 10000.0)
    assert t.theta.tolist() == [1.0]


def test_frequencies_d4():
    t = build_frequencies(4, 10000.0)
    assert t.theta[0] == 1.0
    assert abs(t.theta[1] - 0.01) < 1e-15


def test_frequencies_d8_closed_form():
    t = build_frequencies(8, 10000.0)
    expect = [1.0, 10000.0 ** -0.25, 10000.0 ** -0.5, 10000.0 ** -0.75]
    assert np.abs(t.theta - expect).max() < 1e-15
    # strictly decreasing
    assert (np.diff(t.theta) < 0).all()


def test_frequencies_validation():
    with pytest.raises(ValueError):
        build_frequencies(5, 10000.0)
    with pytest.raises(ValueError):
        build_frequencies(4, -1.0)


def test_rotate_zero_position_bit_exact():
    r = Rng(0)
    x = r.normal((6, 8))
    t = build_frequencies(8, 10000.0, 32)
    assert np.array_equal(rotate(Tensor(x), 0, t).data, x)


def test_rotate_quarter_turn():
    # theta_0 = 1, so position m rotates the first pair by m radians
    t = build_frequencies(2, 10000.0, 8)
    y = rotate(Tensor([1.0, 0.0]), 1, t).data
    assert np.abs(y - [math.cos(1.0), math.sin(1.0)]).max() < 1e-15


def test_rotate_matches_block_diagonal_matrix():
    r = Rng(1)
    t = build_frequencies(4, 10000.0, 32)
    x = r.normal((4,))
    fast = rotate(Tensor(x), 7, t).data
    dense = rotation_matrix(t, 7) @ x
    assert np.abs(fast - dense).max() < 1e-12


def test_rotate_dimension_mismatch():
    t = build_frequencies(4, 10000.0, 8)
    with pytest.raises(ValueError):
        rotate(Tensor(np.ones(6)), 1, t)


def test_rotate_position_beyond_cache():
    t = build_frequencies(4, 10000.0, 8)
    with pytest.raises(ValueError):
        rotate(Tensor(np.ones(4)), 9, t)
    t2 = t.extended(16)
    rotate(Tensor(np.ones(4)), 9, t2)  # fine after extension
    assert t2.extended(4) is t2  # never shrinks


def test_norm_preservation():
    r = Rng(2)
    t = build_frequencies(16, 10000.0, 512)
    for _ in range(25):
        x = r.normal((16,))
        m = int(r.integers(0, 512, ()))
        y = rotate(Tensor(x), m, t).data
        assert abs(np.linalg.norm(y) - np.linalg.norm(x)) < 1e-12


def test_composition_additivity():
    r = Rng(3)
    t = build_frequencies(8, 10000.0, 2048)
    for _ in range(25):
        x = Tensor(r.normal((8,)))
        m1, m2 = int(r.integers(0, 1000, ())), int(r.integers(0, 1000, ()))
        two = rotate(rotate(x, m1, t), m2, t).data
        assert np.abs(two - rotate(x, m1 + m2, t).data).max() < 1e-10


def test_relative_score_same_position_is_dot():
    r = Rng(4)
    t = build_frequencies(8, 10000.0, 64)
    q, k = r.normal((8,)), r.normal((8,))
    s = relative_score(Tensor(q), 11, Tensor(k), 11, t)
    assert abs(s - float(q @ k)) < 1e-12


@pytest.mark.parametrize("shift", [1, 5, 100])
def test_relative_score_shift_invariance(shift):
    r = Rng(5)
    t = build_frequencies(8, 10000.0, 4096)
    q, k = Tensor(r.normal((8,))), Tensor(r.normal((8,)))
    base = relative_score(q, 40, k, 13, t)
    assert abs(base - relative_score(q, 40 + shift, k, 13 + shift, t)) < 1e-10


def test_relative_score_closed_form_d2():
    t = build_frequencies(2, 10000.0, 8)
    s = relative_score(Tensor([1.0, 0.0]), 1, Tensor([1.0, 0.0]), 0, t)
    assert abs(s - math.cos(1.0)) < 1e-12


def test_relative_score_equals_explicit_relative_matrix():
    r = Rng(6)
    t = build_frequencies(8, 10000.0, 256)
    for _ in range(20):
        q, k = r.normal((8,)), r.normal((8,))
        m, n = int(r.integers(0, 200, ())), int(r.integers(0, 200, ()))
        lhs = relative_score(Tensor(q), m, Tensor(k), n, t)
        # row-vector convention: <R_m q, R_n k> = q R_{m-n}^T k = q R_{n-m} k
        rhs = float(q @ rotation_matrix(t, n - m) @ k)
        assert abs(lhs - rhs) < 1e-10


def test_role_tags_share_one_code_path():
    r = Rng(7)
    t = build_frequencies(8, 10000.0, 64)
    x = r.normal((8,))
    outs = [rotate(Tensor(x), 21, t, role=role).data for role in ("q", "k", "c", "b")]
    for o in outs[1:]:
        assert np.array_equal(outs[0], o)


def test_rotate_sequence_matches_per_row():
    r = Rng(8)
    t = build_frequencies(6, 10000.0, 64)
    x = r.normal((5, 6))
    pos = np.array([3, 1, 4, 1, 5])
    batch = rotate_sequence(Tensor(x), pos, t).data
    rows = np.stack([rotate(Tensor(x[i]), int(pos[i]), t).data for i in range(5)])
    assert np.abs(batch - rows).max() == 0.0


def test_log_position_scale():
    assert log_position_scale(0, 256) == 1.0
    assert log_position_scale(255, 256) == 1.0  # m + 1 == base
    assert log_position_scale(100, 256) == 1.0  # within base
    assert abs(log_position_scale(256 * 256 - 1, 256) - 2.0) < 1e-12  # m + 1 == base^2
    with pytest.raises(ValueError):
        log_position_scale(4, 1)
    with pytest.raises(ValueError):
        log_position_scale(-1, 16)


def test_log_position_scales_vectorised():
    got = log_position_scales(np.array([0, 255, 65535]), 256)
    assert np.abs(got - [1.0, 1.0, 2.0]).max() < 1e-12


def test_scaled_rotation_applies_to_query_side():
    r = Rng(9)
    t = build_frequencies(4, 10000.0, 1024)
    x = r.normal((3, 4))
    pos = np.array([0, 300, 1000])
    scales = log_position_scales(pos, 256)
    plain = rotate_sequence(Tensor(x), pos, t).data
    scaled = rotate_sequence(Tensor(x), pos, t, scales=scales).data
    assert np.abs(scaled - plain * scales[:, None]).max() < 1e-14
