from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mitune.denoiser import OracleDenoiser
from mitune.gaussian_world import GaussianWorld, ring_means
from mitune.metrics import (RankTable, agreement_study, kendall_tau, ranking,
                            triplet_positions)
from mitune.schedule import build_schedule


def _brute_tau(a, b):
    pa = {x: i for i, x in enumerate(a)}
    pb = {x: i for i, x in enumerate(b)}
    s = 0
    for x, y in combinations(a, 2):
        s += np.sign(pa[x] - pa[y]) * np.sign(pb[x] - pb[y])
    n = len(a)
    return s / (n * (n - 1) / 2)


permutations = st.integers(2, 30).flatmap(
    lambda n: st.tuples(st.permutations(list(range(n))), st.permutations(list(range(n)))))


class TestKendallTau:
    def test_identical(self):
        assert kendall_tau([4, 2, 9, 1], [4, 2, 9, 1]) == 1.0

    def test_reversed(self):
        assert kendall_tau([1, 2, 3, 4, 5], [5, 4, 3, 2, 1]) == -1.0

    def test_one_discordant_pair(self):
        assert kendall_tau([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(permutations)
    def test_matches_pairwise_enumeration(self, ab):
        a, b = ab
        assert kendall_tau(a, b) == pytest.approx(_brute_tau(a, b), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(permutations)
    def test_antisymmetric_under_reversal(self, ab):
        a, b = ab
        assert kendall_tau(a, b[::-1]) == pytest.approx(-kendall_tau(a, b), abs=1e-12)

    @pytest.mark.parametrize("a,b", [([1, 2], [1, 2, 3]), ([1], [1]), ([1, 1, 2], [1, 2, 2]),
                                     ([1, 2, 3], [1, 2, 4])])
    def test_errors(self, a, b):
        with pytest.raises(ValueError):
            kendall_tau(a, b)


class TestRanking:
    def test_descending_with_id_tie_break(self):
        assert ranking([0.5, 0.9, 0.5, 0.1], ids=[7, 3, 2, 5]) == [3, 2, 7, 5]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=20))
    def test_monotone_transform_invariance(self, scores):
        # integer scores keep the transforms exact, so ties stay ties
        x = np.array(scores, dtype=float)
        assert ranking(x) == ranking(2 * x + 7) == ranking(x**3)

    def test_triplet_positions(self):
        mi = np.arange(50, 0, -1).astype(float)  # item j has rank j + 1
        assert triplet_positions(mi) == [0, 24, 49]
        assert triplet_positions([0.2, 0.9, 0.5]) == [1, 2, 0]

    def test_rank_table(self):
        t = RankTable([10, 11, 12])
        t.add("mi", [1.0, 3.0, 2.0])
        with pytest.raises(ValueError):
            t.add("llr", [1.0, 2.0])
        assert t.ranking("mi") == [11, 12, 10]
        assert t.subset([2, 0]).ranking("mi") == [12, 10]


class TestAgreementStudy:
    s = build_schedule(100, 1e-3, 0.1)
    w = GaussianWorld.mixture(ring_means(4, 2, 2.0), data_sigma=0.3)

    def test_self_and_random(self):
        net = OracleDenoiser(self.w, self.s)
        res = {a.pair: a for a in agreement_study(net, self.w, self.s, n_prompts=120, M=10,
                                                    seed=1)}
        assert res[("mi", "mi")].mean_tau == 1.0 and res[("mi", "mi")].stderr == 0.0
        rnd = res[("mi", "random")]
        assert rnd.n == 120 and abs(rnd.mean_tau) <= 3 * rnd.stderr
        assert all(-1 <= a.mean_tau <= 1 for a in res.values())

    def test_preconditions(self):
        net = OracleDenoiser(self.w, self.s)
        with pytest.raises(ValueError):
            agreement_study(net, GaussianWorld.correlated(2, 0.5), self.s, 2, 10)
        with pytest.raises(ValueError):
            agreement_study(net, self.w, self.s, 2, 2)
