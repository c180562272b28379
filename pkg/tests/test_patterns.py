import numpy as np
import pytest
from hypothesis import given, strategies as st

from nsl_lab.patterns import (DEFAULT_PARAMS, TEST_KINDS, TRAIN_KINDS, InvalidPatternSpec,
                              PatternKind, PatternSpec, alacarte_stack, generate_pattern)

ALL_KINDS = list(PatternKind)


def test_six_train_two_test_kinds_disjoint():
    assert len(TRAIN_KINDS) == 6 and len(TEST_KINDS) == 2
    assert not set(TRAIN_KINDS) & set(TEST_KINDS)
    assert set(TRAIN_KINDS) | set(TEST_KINDS) == set(PatternKind)


def test_alacarte_columns_constant():
    img = generate_pattern(PatternSpec("alacarte", 64, 48, seed=7)).intensities
    assert img.shape == (48, 64)
    assert np.all(img == img[0:1, :])
    assert set(np.unique(img)) <= {0.0, 1.0}


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_repeat_calls_bit_identical(kind):
    spec = PatternSpec(kind, 40, 24, seed=99)
    a = generate_pattern(spec).intensities
    b = generate_pattern(spec).intensities
    assert a.tobytes() == b.tobytes()


def test_random_binary_fraction():
    img = generate_pattern(PatternSpec("random_binary", 1024, 1024, seed=3, params={"p": 0.5}))
    frac = img.intensities.mean()
    assert abs(frac - 0.5) <= 0.01


def test_alacarte_roll_rows_are_cyclic_shifts_of_a_code():
    w, h = 48, 20
    img = generate_pattern(PatternSpec("alacarte_roll", w, h, seed=4)).intensities
    base = img[0]
    for row in img:
        assert any(np.array_equal(np.roll(base, s), row) for s in range(w))


def test_sincos_mean_when_periods_divide():
    img = generate_pattern(PatternSpec("sincos", 64, 32, params={"period_x": 16, "period_y": 8}))
    assert abs(img.intensities.mean() - 0.5) <= 1e-3


@pytest.mark.parametrize("kind,lo,hi", [("dots_d415", 0.06, 0.10), ("dots_d435", 0.08, 0.12),
                                        ("kinect_dots", 0.045, 0.075)])
def test_dot_densities(kind, lo, hi):
    img = generate_pattern(PatternSpec(kind, 256, 256, seed=2)).intensities
    assert lo <= img.mean() <= hi


def test_random_square_coverage():
    img = generate_pattern(PatternSpec("random_square", 128, 96, seed=8)).intensities
    assert 0.30 <= img.mean() < 0.40


@pytest.mark.parametrize("bad", [dict(kind="zigzag"), dict(width=4), dict(height=0),
                                 dict(width=-3), dict(params={"nope": 1})])
def test_invalid_specs(bad):
    kw = dict(kind="random_binary", width=32, height=32) | bad
    with pytest.raises(InvalidPatternSpec):
        PatternSpec(**kw)


def test_spec_dict_roundtrip():
    s = PatternSpec("sincos", 32, 16, seed=5, params={"period_x": 8.0})
    assert PatternSpec.from_dict(s.to_dict()) == s


def test_image_is_read_only():
    img = generate_pattern(PatternSpec("random_binary", 16, 16)).intensities
    with pytest.raises(ValueError):
        img[0, 0] = 0.5


def test_alacarte_stack_distinct():
    stack = alacarte_stack(32, 8, 4, seed=1)
    rows = {s.intensities[0].tobytes() for s in stack}
    assert len(rows) == 4


@given(kind=st.sampled_from(ALL_KINDS), seed=st.integers(0, 2**64 - 1),
       w=st.integers(8, 48), h=st.integers(8, 40))
def test_range_and_shape(kind, seed, w, h):
    img = generate_pattern(PatternSpec(kind, w, h, seed=seed))
    assert img.intensities.shape == (h, w)
    assert img.intensities.min() >= 0.0 and img.intensities.max() <= 1.0


@given(seed=st.integers(0, 2**32), w=st.integers(8, 64))
def test_alacarte_column_constancy_property(seed, w):
    img = generate_pattern(PatternSpec("alacarte", w, 12, seed=seed)).intensities
    assert np.all(img == img[0])


def test_every_kind_has_defaults():
    assert set(DEFAULT_PARAMS) == set(PatternKind)
