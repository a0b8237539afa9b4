"""Token-level projection of distributions and the .rstg file format."""

from __future__ import annotations

import numpy as np
import pytest

from rstpeft.distribution import RSTDistribution
from rstpeft.errors import ConfigError, ShapeError
from rstpeft.gamma import GammaMatrix, load_gamma, project_gamma, save_gamma, zero_gamma
from rstpeft.parser_io import EDUSegmentation


def agnostic(values):
    arr = np.asarray(values, dtype=float).reshape(-1, 1)
    return RSTDistribution("p_wo", arr, arr.shape[0], 2)


def aware(rows):
    arr = np.asarray(rows, dtype=float)
    return RSTDistribution("p_w", arr, arr.shape[0], arr.shape[1])


SEG = EDUSegmentation("g", ((0, 3), (3, 5), (5, 6)), 6)


class TestProject:
    def test_label_agnostic_broadcast(self):
        gm = project_gamma(agnostic([0.7, 0.1, 0.0]), SEG, seq_len=7, d_model=3)
        expected = np.zeros((7, 3))
        expected[0:3] = 0.7
        expected[3:5] = 0.1
        assert np.array_equal(gm.values, expected)
        assert gm.doc_region == (0, 6)

    def test_label_aware_tiling(self):
        seg = EDUSegmentation("t", ((0, 1),), 1)
        gm = project_gamma(aware([[0.7, 0.0]]), seg, seq_len=1, d_model=4)
        assert gm.values[0].tolist() == [0.7, 0.0, 0.7, 0.0]

    def test_tiling_truncates(self):
        seg = EDUSegmentation("t", ((0, 1),), 1)
        gm = project_gamma(aware([[0.7, 0.0]]), seg, seq_len=1, d_model=3)
        assert gm.values[0].tolist() == [0.7, 0.0, 0.7]

    def test_band_layout(self):
        seg = EDUSegmentation("t", ((0, 1),), 1)
        gm = project_gamma(aware([[0.3, 0.9]]), seg, seq_len=1, d_model=4, layout="band")
        assert gm.values[0].tolist() == [0.3, 0.3, 0.9, 0.9]

    def test_doc_offset_shifts_rows(self):
        gm = project_gamma(agnostic([1.0, 1.0, 1.0]), SEG, seq_len=10, d_model=2, doc_offset=2)
        assert np.all(gm.values[:2] == 0.0)
        assert np.all(gm.values[2:8] == 1.0)
        assert np.all(gm.values[8:] == 0.0)
        assert gm.doc_region == (2, 8)

    def test_overrun_raises_shape_error(self):
        with pytest.raises(ShapeError):
            project_gamma(agnostic([0.1, 0.2, 0.3]), SEG, seq_len=5, d_model=2)

    def test_row_constancy_within_spans(self):
        gm = project_gamma(aware([[0.1, 0.5], [0.9, 0.2], [0.4, 0.4]]), SEG, 6, 5)
        assert not gm.violations(SEG)

    def test_linearity_in_values(self):
        dist = aware([[0.25, 0.5], [0.125, 0.75], [0.0, 1.0]])
        full = project_gamma(dist, SEG, 8, 4)
        halved = project_gamma(
            RSTDistribution("p_w", dist.values * 0.5, 3, 2), SEG, 8, 4
        )
        assert np.array_equal(halved.values, full.values * 0.5)

    def test_no_foreign_values(self):
        dist = agnostic([0.7, 0.1, 0.3])
        gm = project_gamma(dist, SEG, 9, 4, doc_offset=1)
        allowed = {0.0} | set(dist.values.ravel().tolist())
        assert set(np.unique(gm.values).tolist()) <= allowed


class TestZeroGamma:
    def test_shape_and_values(self):
        gm = zero_gamma(4, 2)
        assert gm.values.shape == (4, 2)
        assert np.all(gm.values == 0.0)
        assert gm.doc_region == (0, 4)

    def test_invariants_hold(self):
        assert not zero_gamma(5, 3).violations()

    def test_bad_dims(self):
        with pytest.raises(ConfigError):
            zero_gamma(0, 3)


class TestGammaFile:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        values = rng.random((6, 4)).astype(np.float32)
        gm = GammaMatrix(values=values, doc_region=(1, 5))
        path = tmp_path / "g.rstg"
        save_gamma(path, gm)
        back = load_gamma(path)
        assert back.doc_region == (1, 5)
        assert np.array_equal(back.values, values)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "g.rstg"
        save_gamma(path, zero_gamma(3, 2))
        blob = path.read_bytes()
        assert blob[:4] == b"RSTG"
        assert len(blob) == 4 + 18 + 3 * 2 * 4

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "g.rstg"
        path.write_bytes(b"XXXX" + bytes(30))
        with pytest.raises(Exception, match="magic"):
            load_gamma(path)
