import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convsense import features as ft
from convsense.dataset import segment_session
from convsense.dsp import standardize_imu
from oracles import direct_entropy, direct_mi


class TestDiscretize:
    def test_integers_align(self):
        assert ft.discretize(np.arange(10)).tolist() == list(range(10))

    def test_constant(self):
        assert not ft.discretize(np.full(7, 3.3)).any()

    def test_nan_marked(self):
        assert ft.discretize([0.0, np.nan, 1.0]).tolist() == [0, -1, 9]

    @pytest.mark.parametrize("bad", [[], [np.nan, np.nan]])
    def test_errors(self, bad):
        with pytest.raises(ValueError):
            ft.discretize(bad)

    def test_uniform_bin_frequencies(self):
        x = np.random.default_rng(0).uniform(size=10000)
        freq = np.bincount(ft.discretize(x), minlength=10) / x.size
        sigma = math.sqrt(0.1 * 0.9 / x.size)
        assert np.all(np.abs(freq - 0.1) < 3 * sigma)


class TestMutualInformation:
    def test_identity_two_symbols(self):
        x = np.array([0, 1] * 50)
        assert abs(ft.mutual_information(x, x) - math.log(2)) < 1e-12

    def test_independent_product_table(self):
        x = np.repeat([0, 1, 2], 4)
        y = np.tile([0, 1, 1, 2], 3)
        assert abs(ft.mutual_information(x, y)) < 1e-12

    def test_hand_table(self):
        # [[2,1],[1,2]]: 2*(2/6)ln(4/3) + 2*(1/6)ln(2/3)
        expected = (4 / 6) * math.log(4 / 3) + (2 / 6) * math.log(2 / 3)
        assert abs(ft.mi_from_counts(np.array([[2, 1], [1, 2]])) - expected) < 1e-12
        x = [0, 0, 0, 1, 1, 1]
        y = [0, 0, 1, 0, 1, 1]
        assert abs(ft.mutual_information(x, y) - expected) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ft.mutual_information([0, 1], [0])

    def test_exhaustive_small_tables(self):
        # every 2x2 and 2x3 table with counts 0..3
        for shape in ((2, 2), (2, 3)):
            for cells in itertools.product(range(4), repeat=shape[0] * shape[1]):
                if sum(cells) == 0:
                    continue
                t = np.array(cells).reshape(shape)
                assert abs(ft.mi_from_counts(t) - max(direct_mi(t), 0.0)) < 1e-12

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 2)), min_size=1, max_size=60))
    def test_properties(self, pairs):
        x = np.array([p[0] for p in pairs])
        y = np.array([p[1] for p in pairs])
        mi = ft.mutual_information(x, y)
        assert mi == ft.mutual_information(y, x)
        assert 0 <= mi <= min(direct_entropy(x.tolist()), direct_entropy(y.tolist())) + 1e-12
        assert abs(ft.mutual_information(x, x) - direct_entropy(x.tolist())) < 1e-12
        # injective relabelling
        assert abs(ft.mutual_information(7 - 3 * x, y) - mi) < 1e-12
        assert abs(ft.entropy(x) - direct_entropy(x.tolist())) < 1e-12


class TestRanking:
    def test_label_copy_first(self):
        g = np.random.default_rng(0)
        y = g.integers(0, 3, 300)
        X = np.c_[g.standard_normal(300), y + 0.01 * g.standard_normal(300)]
        r = ft.rank_features(X, y, ["noise", "copy"])
        assert [s.feature_name for s in r] == ["copy", "noise"]
        assert r[0].mi_nats > r[1].mi_nats

    def test_ties_by_name(self):
        g = np.random.default_rng(1)
        y = g.integers(0, 3, 100)
        f = g.standard_normal(100)
        r = ft.rank_features(np.c_[f, f, g.standard_normal(100)], y, ["zeta", "alpha", "mid"])
        names = [s.feature_name for s in r]
        assert names.index("alpha") + 1 == names.index("zeta")

    def test_row_mismatch(self):
        with pytest.raises(ValueError):
            ft.rank_features(np.zeros((5, 2)), np.zeros(4))

    def test_csv(self):
        text = ft.scores_csv([ft.FeatureScore("ax_energy", 0.5)])
        assert text.splitlines() == ["feature,mi_nats", "ax_energy,0.5"]

    def test_energy_outranks_raw_mean(self, small_sessions):
        X, y = [], []
        for s in small_sessions:
            imu = standardize_imu(s.imu)
            from dataclasses import replace

            for seg in segment_session(replace(s, imu=imu), 30):
                v, names = ft.imu_statistics(seg.imu_slice)
                X.append(v)
                y.append(int(seg.label))
        scores = {sc.feature_name: sc.mi_nats for sc in ft.rank_features(np.array(X), y, names)}
        energy = np.mean([scores[f"{c}_energy"] for c in ft.CHANNELS])
        mean = np.mean([scores[f"{c}_mean"] for c in ft.CHANNELS])
        assert energy > mean
