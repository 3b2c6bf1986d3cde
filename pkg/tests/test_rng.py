from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from bertpipe.rng import derive_u64, keyed_rng, keyed_uniform


@given(st.integers(0, 2**63), st.text(max_size=20))
def test_determinism(n: int, s: str):
    assert derive_u64(n, s) == derive_u64(n, s)
    assert keyed_uniform(n, s) == keyed_uniform(n, s)


def test_uniform_range_and_mean():
    values = [keyed_uniform(42, i) for i in range(20_000)]
    assert all(0 <= v < 1 for v in values)
    mean = sum(values) / len(values)
    assert abs(mean - 0.5) < 0.01  # ~4.9 sigma for n=20k


def test_part_boundaries_matter():
    # ("ab", "c") and ("a", "bc") must not collide: encoding is length-prefixed.
    assert derive_u64("ab", "c") != derive_u64("a", "bc")
    assert derive_u64(1, 23) != derive_u64(12, 3)


def test_keyed_rng_is_private_stream():
    a = keyed_rng(1, "x")
    b = keyed_rng(1, "x")
    assert [a.random() for _ in range(5)] == [b.random() for _ in range(5)]
    assert keyed_rng(1, "x").random() != keyed_rng(2, "x").random()


def test_rejects_ambiguous_parts():
    with pytest.raises(TypeError):
        derive_u64(True)
    with pytest.raises(TypeError):
        derive_u64(3.14)
