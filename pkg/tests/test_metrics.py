import math
import warnings
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest

from spvs import metrics
from spvs.errors import ContractError, DataError


def mask(n, members):
    out = np.zeros(n, dtype=bool)
    out[list(members)] = True
    return out


def tau_quadratic(x, y):
    """Definitional tau-b: pairwise concordance scan with tie corrections."""
    n = len(x)
    conc = disc = tx = ty = 0
    for i, j in combinations(range(n), 2):
        dx = x[i] - x[j]
        dy = y[i] - y[j]
        if dx == 0 and dy == 0:
            continue
        if dx == 0:
            tx += 1
        elif dy == 0:
            ty += 1
        elif (dx > 0) == (dy > 0):
            conc += 1
        else:
            disc += 1
    denom = math.sqrt((conc + disc + tx) * (conc + disc + ty))
    if denom == 0:
        return float("nan")
    return (conc - disc) / denom


def rho_exact(x, y):
    """Pearson correlation of average ranks computed in exact rationals."""

    def ranks(v):
        order = sorted(range(len(v)), key=lambda i: v[i])
        out = [Fraction(0)] * len(v)
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            avg = Fraction(i + j + 2, 2)
            for t in range(i, j + 1):
                out[order[t]] = avg
            i = j + 1
        return out

    rx, ry = ranks(list(x)), ranks(list(y))
    n = len(rx)
    mx = sum(rx) / n
    my = sum(ry) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    if vx == 0 or vy == 0:
        return float("nan")
    return float(cov) / math.sqrt(float(vx) * float(vy))


class TestFScore:
    def test_perfect_overlap(self):
        p, r, f = metrics.f_score(mask(5, {1, 2, 3}), mask(5, {1, 2, 3}))
        assert (p, r, f) == (1.0, 1.0, 1.0)

    def test_disjoint(self):
        _, _, f = metrics.f_score(mask(6, {1, 2}), mask(6, {3, 4}))
        assert f == 0.0

    def test_half_overlap(self):
        # 10-frame summaries overlapping on 5 frames
        p, r, f = metrics.f_score(mask(20, range(1, 11)), mask(20, range(6, 16)))
        assert p == pytest.approx(0.5, abs=1e-15)
        assert r == pytest.approx(0.5, abs=1e-15)
        assert f == pytest.approx(0.5, abs=1e-15)

    def test_empty_pred(self):
        p, r, f = metrics.f_score(mask(4, set()), mask(4, {1}))
        assert (p, r, f) == (0.0, 0.0, 0.0)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            metrics.f_score(mask(4, {1}), mask(5, {1}))

    def test_symmetric_f(self, rng):
        a = mask(50, {int(rng.randint(50)) for _ in range(20)})
        b = mask(50, {int(rng.randint(50)) for _ in range(20)})
        assert metrics.f_score(a, b)[2] == pytest.approx(metrics.f_score(b, a)[2], abs=1e-15)


class TestKendallTau:
    def test_identical_order(self):
        assert metrics.kendall_tau([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0

    def test_reversed_order(self):
        assert metrics.kendall_tau([1, 2, 3, 4], [40, 30, 20, 10]) == -1.0

    def test_single_swap(self):
        # 1 discordant pair out of 6
        got = metrics.kendall_tau([1, 2, 3, 4], [2, 1, 3, 4])
        assert got == pytest.approx(4 / 6, abs=1e-15)

    def test_all_tied_is_nan_with_warning(self):
        with pytest.warns(UserWarning):
            out = metrics.kendall_tau([1.0, 1.0, 1.0], [1, 2, 3])
        assert math.isnan(out)

    def test_matches_quadratic_oracle_with_ties(self, rng):
        for _ in range(50):
            n = 2 + rng.randint(30)
            x = [float(rng.randint(6)) for _ in range(n)]
            y = [float(rng.randint(6)) for _ in range(n)]
            expect = tau_quadratic(x, y)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                got = metrics.kendall_tau(x, y)
            if math.isnan(expect):
                assert math.isnan(got)
            else:
                assert got == pytest.approx(expect, abs=1e-12)

    def test_matches_quadratic_oracle_continuous(self, rng):
        for _ in range(30):
            n = 2 + rng.randint(40)
            x = rng.normals((n,))
            y = rng.normals((n,))
            assert metrics.kendall_tau(x, y) == pytest.approx(
                tau_quadratic(list(x), list(y)), abs=1e-12
            )

    def test_invariant_under_monotone_transform(self, rng):
        x = rng.normals((25,))
        y = rng.normals((25,))
        base = metrics.kendall_tau(x, y)
        assert metrics.kendall_tau(np.exp(x), y) == pytest.approx(base, abs=1e-12)
        assert metrics.kendall_tau(x, 3 * y + 7) == pytest.approx(base, abs=1e-12)

    def test_antisymmetric_under_reversal(self, rng):
        x = rng.normals((20,))
        y = rng.normals((20,))
        assert metrics.kendall_tau(x, -y) == pytest.approx(
            -metrics.kendall_tau(x, y), abs=1e-12
        )

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            metrics.kendall_tau([1, 2], [1, 2, 3])


class TestSpearmanRho:
    def test_identical_order(self):
        assert metrics.spearman_rho([1, 2, 3], [5, 6, 7]) == pytest.approx(1.0, abs=1e-15)

    def test_reversed_order(self):
        assert metrics.spearman_rho([1, 2, 3], [7, 6, 5]) == pytest.approx(-1.0, abs=1e-15)

    def test_all_tied_is_nan_with_warning(self):
        with pytest.warns(UserWarning):
            out = metrics.spearman_rho([2.0, 2.0], [1, 2])
        assert math.isnan(out)

    def test_matches_exact_rational_oracle_with_ties(self, rng):
        for _ in range(50):
            n = 2 + rng.randint(25)
            x = [float(rng.randint(5)) for _ in range(n)]
            y = [float(rng.randint(5)) for _ in range(n)]
            expect = rho_exact(x, y)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                got = metrics.spearman_rho(x, y)
            if math.isnan(expect):
                assert math.isnan(got)
            else:
                assert got == pytest.approx(expect, abs=1e-12)

    def test_invariant_under_monotone_transform(self, rng):
        x = rng.normals((25,))
        y = rng.normals((25,))
        base = metrics.spearman_rho(x, y)
        assert metrics.spearman_rho(np.exp(x), y) == pytest.approx(base, abs=1e-12)


class TestAverageRanks:
    def test_no_ties(self):
        np.testing.assert_array_equal(
            metrics.average_ranks([30.0, 10.0, 20.0]), [3.0, 1.0, 2.0]
        )

    def test_tied_block_gets_midrank(self):
        np.testing.assert_array_equal(
            metrics.average_ranks([5.0, 5.0, 1.0]), [2.5, 2.5, 1.0]
        )


class TestEvaluate:
    def test_per_annotator_average(self, rng):
        pred = rng.normals((12,))
        gts = [rng.normals((12,)) for _ in range(3)]
        rep = metrics.evaluate(pred, gts)
        taus = [metrics.kendall_tau(pred, g) for g in gts]
        rhos = [metrics.spearman_rho(pred, g) for g in gts]
        assert rep["tau"] == pytest.approx(float(np.mean(taus)), abs=1e-12)
        assert rep["rho"] == pytest.approx(float(np.mean(rhos)), abs=1e-12)
        got_taus = [p["tau"] for p in rep["per_annotator"]]
        assert got_taus == pytest.approx(taus, abs=1e-12)

    def test_no_f_without_summaries(self, rng):
        rep = metrics.evaluate(rng.normals((8,)), [rng.normals((8,))])
        assert "f" not in rep

    def test_f_averaged_over_annotator_summaries(self, rng):
        pred_sum = mask(8, {0, 1, 2})
        gt_sums = [mask(8, {0, 1}), mask(8, {5, 6})]
        rep = metrics.evaluate(
            rng.normals((8,)), [rng.normals((8,)) for _ in range(2)],
            pred_summary=pred_sum, gt_summaries=gt_sums,
        )
        expect = (metrics.f_score(pred_sum, gt_sums[0])[2]
                  + metrics.f_score(pred_sum, gt_sums[1])[2]) / 2
        assert rep["f"] == pytest.approx(expect, abs=1e-15)

    def test_bad_annotator_length_names_index(self, rng):
        with pytest.raises(DataError, match="annotator 1"):
            metrics.evaluate(rng.normals((8,)), [rng.normals((8,)), rng.normals((7,))])
