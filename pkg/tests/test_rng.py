"""Seeded randomness: reproducibility and stream independence."""

import numpy as np
import pytest

from stunmoe.errors import ArgumentError
from stunmoe.rng import ALGORITHM, SeededRng


def test_same_seed_same_stream():
    a = SeededRng(123).normal((100,))
    b = SeededRng(123).normal((100,))
    np.testing.assert_array_equal(a, b)


def test_different_seeds_differ():
    a = SeededRng(123).normal((100,))
    b = SeededRng(124).normal((100,))
    assert not np.array_equal(a, b)


def test_spawn_deterministic_and_distinct():
    root = SeededRng(7)
    c0 = root.spawn(0).normal((50,))
    c0_again = SeededRng(7).spawn(0).normal((50,))
    c1 = root.spawn(1).normal((50,))
    np.testing.assert_array_equal(c0, c0_again)
    assert not np.array_equal(c0, c1)


def test_spawn_independent_of_parent_draws():
    a = SeededRng(9)
    a.normal((1000,))  # burn parent draws
    b = SeededRng(9)
    np.testing.assert_array_equal(a.spawn(3).normal((20,)), b.spawn(3).normal((20,)))


def test_nested_spawn_keys():
    a = SeededRng(5).spawn(1).spawn(2)
    b = SeededRng(5, key=(1, 2))
    np.testing.assert_array_equal(a.normal((10,)), b.normal((10,)))


def test_known_first_draws_pinned():
    # frozen from this generator (pcg64 via SeedSequence(0)); numpy
    # guarantees stream stability for a fixed bit generator, so a change
    # here means the algorithm changed, which would break every planted
    # model in the corpus
    got = SeededRng(0).normal((3,))
    want = np.array(
        [0.1257302210933933, -0.1321048632913019, 0.6404226504432821]
    )
    np.testing.assert_allclose(got, want, rtol=0, atol=0)


def test_integers_and_uniform_ranges():
    r = SeededRng(42)
    ints = r.integers(0, 10, (1000,))
    assert ints.min() >= 0 and ints.max() < 10
    u = r.uniform((1000,), low=2.0, high=3.0)
    assert u.min() >= 2.0 and u.max() < 3.0


def test_state_token_round_trip():
    assert SeededRng(3).spawn(4).state_token() == f"{ALGORITHM}:3:4"


def test_bad_seed_rejected():
    with pytest.raises(ArgumentError):
        SeededRng(-1)
    with pytest.raises(ArgumentError):
        SeededRng(1.5)


def test_bad_algorithm_rejected():
    with pytest.raises(ArgumentError):
        SeededRng(0, algorithm="mersenne")
