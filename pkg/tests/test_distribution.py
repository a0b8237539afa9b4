"""Importance-index math and the four distribution variants."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rstpeft.distribution import (
    VARIANTS,
    binarize_tensor,
    collapse_labels,
    importance_index,
    make_variant,
)
from rstpeft.errors import ConfigError, DataError
from rstpeft.parser_io import EDUSegmentation, ParseOutput


def parse_3x2():
    """Hand fixture: three units, two relation groups."""
    probs = np.zeros((3, 3, 2))
    probs[0, 1, 0] = 0.8
    probs[0, 2, 0] = 0.6
    probs[1, 2, 1] = 0.4
    seg = EDUSegmentation("fix", ((0, 2), (2, 4), (4, 6)), 6)
    return ParseOutput(seg, probs, {"a": "A", "b": "B"}, groups=("A", "B"))


def random_parse(seed, n=4, k=3):
    rng = np.random.default_rng(seed)
    probs = rng.random((n, n, k))
    probs[np.arange(n), np.arange(n), :] = 0.0
    seg = EDUSegmentation("r", tuple((i, i + 1) for i in range(n)), n)
    return ParseOutput(seg, probs, {"x": "X"}, groups=tuple("ABC"[:k]))


class TestImportanceIndex:
    def test_hand_fixture(self):
        out = importance_index(parse_3x2())
        expected = np.array([[0.7, 0.0], [0.0, 0.2], [0.0, 0.0]])
        assert np.array_equal(out, expected)

    def test_all_zero_tensor(self):
        p = parse_3x2()
        p.probs = np.zeros_like(p.probs)
        assert np.array_equal(importance_index(p), np.zeros((3, 2)))

    def test_constant_tensor_gives_constant(self):
        p = parse_3x2()
        probs = np.full((3, 3, 2), 0.5)
        probs[np.arange(3), np.arange(3), :] = 0.0
        p.probs = probs
        assert np.array_equal(importance_index(p), np.full((3, 2), 0.5))

    def test_degenerate_document_rejected(self):
        seg = EDUSegmentation("one", ((0, 2),), 2)
        p = ParseOutput(seg, np.zeros((1, 1, 2)), groups=("A", "B"))
        with pytest.raises(DataError, match="at least 2"):
            importance_index(p)

    def test_include_diagonal_deflates_uniformly(self):
        p = random_parse(0)
        out = importance_index(p)
        deflated = importance_index(p, include_diagonal=True)
        n = p.n_edu
        assert np.allclose(deflated, out * (n - 1) / n)

    def test_permutation_invariance_within_rows(self):
        # Dyadic values keep the sums exact under any summation order.
        rng = np.random.default_rng(1)
        probs = rng.integers(0, 16, size=(4, 4, 2)).astype(float) / 16.0
        probs[np.arange(4), np.arange(4), :] = 0.0
        seg = EDUSegmentation("p", tuple((i, i + 1) for i in range(4)), 4)
        base = importance_index(ParseOutput(seg, probs, groups=("A", "B")))
        perm = probs.copy()
        perm[0, [1, 2, 3], :] = probs[0, [3, 1, 2], :]  # shuffle row 0 off-diagonal
        shuffled = importance_index(ParseOutput(seg, perm, groups=("A", "B")))
        assert np.array_equal(shuffled, base)


class TestBinarize:
    def test_threshold_is_inclusive(self):
        p = parse_3x2()
        p.probs[0, 1, 0] = 0.5
        out = binarize_tensor(p)
        assert out.probs[0, 1, 0] == 1.0

    def test_just_below_threshold_is_zero(self):
        p = parse_3x2()
        p.probs[0, 1, 0] = 0.49999
        assert binarize_tensor(p).probs[0, 1, 0] == 0.0

    def test_diagonal_stays_zero(self):
        p = parse_3x2()
        out = binarize_tensor(p, threshold=1e-12)
        assert np.all(out.probs[np.arange(3), np.arange(3), :] == 0.0)

    def test_threshold_range_enforced(self):
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ConfigError):
                binarize_tensor(parse_3x2(), threshold=bad)

    def test_source_parse_unchanged(self):
        p = parse_3x2()
        before = p.probs.copy()
        binarize_tensor(p)
        assert np.array_equal(p.probs, before)


class TestCollapse:
    def test_row_mean(self):
        out = collapse_labels(np.array([[0.4, 0.8]]))
        assert out[0, 0] == pytest.approx(0.6)

    def test_k1_is_identity(self):
        values = np.array([[0.3], [0.9]])
        assert np.array_equal(collapse_labels(values), values)

    def test_fixture_collapse(self):
        out = collapse_labels(importance_index(parse_3x2()))
        assert np.array_equal(out, np.array([[0.35], [0.1], [0.0]]))


class TestMakeVariant:
    def test_p_w_fixture(self):
        dist = make_variant(parse_3x2(), "p_w")
        assert np.array_equal(dist.values, np.array([[0.7, 0.0], [0.0, 0.2], [0.0, 0.0]]))
        assert dist.variant == "p_w" and dist.values.shape == (3, 2)

    def test_b_w_fixture(self):
        dist = make_variant(parse_3x2(), "b_w")
        assert np.array_equal(dist.values, np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]))

    def test_unknown_variant(self):
        with pytest.raises(ConfigError, match="unknown variant"):
            make_variant(parse_3x2(), "x_y")

    def test_shape_law(self):
        p = random_parse(3)
        for variant in VARIANTS:
            dist = make_variant(p, variant)
            cols = p.k_relations if variant.endswith("_w") else 1
            assert dist.values.shape == (p.n_edu, cols)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_order_law(self, seed):
        p = random_parse(seed)
        for b, wo in (("b_w", "b_wo"), ("p_w", "p_wo")):
            aware = make_variant(p, b)
            agnostic = make_variant(p, wo)
            assert np.array_equal(collapse_labels(aware.values), agnostic.values)

    def test_monotonicity_exact_for_dyadic_scale(self):
        p = random_parse(5)
        base = make_variant(p, "p_w").values
        for s in (0.5, 0.25):
            scaled = random_parse(5)
            scaled.probs = p.probs * s
            assert np.array_equal(make_variant(scaled, "p_w").values, base * s)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=10**6))
    def test_outputs_bounded(self, seed):
        p = random_parse(seed)
        for variant in VARIANTS:
            values = make_variant(p, variant).values
            assert np.all(values >= 0.0) and np.all(values <= 1.0)

    def test_binarize_after_merge_flag(self):
        p = random_parse(7)
        dist = make_variant(p, "b_w", binarize_after_merge=True)
        assert set(np.unique(dist.values)) <= {0.0, 1.0}
