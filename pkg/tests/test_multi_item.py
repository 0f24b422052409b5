import itertools
import math
import os
import tempfile
import unittest

import numpy as np

from sp_mechanisms.core import UtilityPoint, UtilityVector, social_welfare
from sp_mechanisms.errors import InvalidInputError
from sp_mechanisms.multi_item import (
    AVERAGED_PA_WEIGHTS,
    CERTIFICATE_HEADER,
    aur_segment_bound,
    averaged_pa_mechanism,
    pa_max_mechanism,
    pa_mechanism,
    pa_ratio_certificate,
    segment_bounds,
    solve_weighted_product,
)
from sp_mechanisms.verify import measure_ratio

skewed_bid = (0.99, 0.01)
even_bid = (0.5, 0.5)
oracle_levels = 200
oracle_profiles = 100
oracle_tol = 1e-3
oracle_seed = 11


def get_bids(first=skewed_bid, second=even_bid):
    return UtilityVector(first), UtilityVector(second)


def brute_force_product(u1, u2, c):
    """Best u1(a1) * u2(a2)^c over full splits in multiples of 1 / oracle_levels"""
    levels = np.linspace(0.0, 1.0, oracle_levels + 1)
    first, second = u1.array, u2.array
    tail = np.stack(np.meshgrid(levels, levels, indexing="ij"), axis=-1).reshape(-1, 2)
    own_tail, other_tail = tail @ first[-2:], (1.0 - tail) @ second[-2:]
    best = 0.0
    for head in itertools.product(levels, repeat=u1.m - 2):
        share = np.asarray(head, dtype=float)
        own = own_tail + float(np.dot(share, first[:-2]))
        other = other_tail + float(np.dot(1.0 - share, second[:-2]))
        best = max(best, float(np.max(own * other**c)))
    return best


class TestWeightedProduct(unittest.TestCase):
    def test_pa_one_halves_agent_1(self):
        allocation = pa_mechanism(1.0)(*get_bids())
        np.testing.assert_allclose(allocation.shares, [[0.5, 0.0], [0.0, 0.99]], atol=1e-9)

    def test_pa_half_scales_by_roots_and_powers(self):
        result = solve_weighted_product(*get_bids(), 0.5)
        np.testing.assert_allclose(result.base_allocation.shares, [[1.0, 0.0], [0.0, 1.0]], atol=1e-9)
        self.assertAlmostEqual(result.scaled_allocation.shares[0, 0], math.sqrt(0.5), places=8)
        self.assertAlmostEqual(result.scaled_allocation.shares[1, 1], 0.9801, places=8)
        self.assertAlmostEqual(result.w_value, 0.99 * math.sqrt(0.5), places=9)
        w1, w2 = result.attained
        self.assertAlmostEqual(w2, result.w_value**2, places=12)
        self.assertEqual(w1, result.w_value)

    def test_interior_split(self):
        u = UtilityVector(even_bid)
        result = solve_weighted_product(u, u, 1.0)
        self.assertAlmostEqual(result.w_value, 0.25, places=9)
        self.assertAlmostEqual(float(result.base_allocation.shares[0].sum()), 1.0, places=6)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(oracle_seed)
        for _ in range(oracle_profiles):
            m = int(rng.integers(2, 4))
            u1 = UtilityVector(tuple(rng.dirichlet(np.ones(m))))
            u2 = UtilityVector(tuple(rng.dirichlet(np.ones(m))))
            c = float(rng.choice([0.421, 1.0, 1.0 / 0.421]))
            result = solve_weighted_product(u1, u2, c)
            oracle = brute_force_product(u1, u2, c)
            self.assertGreaterEqual(result.w_value, oracle - 1e-9)
            self.assertLessEqual(result.w_value - oracle, oracle_tol)

    def test_swapping_agents_inverts_the_exponent(self):
        rng = np.random.default_rng(oracle_seed)
        for _ in range(oracle_profiles):
            m = int(rng.integers(2, 6))
            u1 = UtilityVector(tuple(rng.dirichlet(np.ones(m))))
            u2 = UtilityVector(tuple(rng.dirichlet(np.ones(m))))
            c = float(rng.uniform(0.25, 4.0))
            forward = solve_weighted_product(u1, u2, c).w_value
            backward = solve_weighted_product(u2, u1, 1.0 / c).w_value
            self.assertAlmostEqual(backward, forward ** (1.0 / c), delta=1e-9)

    def test_bad_exponent(self):
        for c in [0.0, -1.0, math.inf]:
            with self.assertRaises(InvalidInputError):
                pa_mechanism(c)


class TestPartialAllocationMechanisms(unittest.TestCase):
    def test_pa_max_keeps_pa_when_it_wins(self):
        allocation = pa_max_mechanism()(*get_bids((1.0, 0.0), (0.0, 1.0)))
        np.testing.assert_allclose(allocation.shares, [[1.0, 0.0], [0.0, 1.0]], atol=1e-9)

    def test_pa_max_falls_back_to_even_split(self):
        allocation = pa_max_mechanism()(*get_bids(even_bid, even_bid))
        np.testing.assert_array_equal(allocation.shares, np.full((2, 2), 0.5))

    def test_average_label_and_weights(self):
        self.assertEqual(averaged_pa_mechanism().label, "pa-avg")
        self.assertAlmostEqual(math.fsum(AVERAGED_PA_WEIGHTS), 1.0, places=15)
        self.assertNotEqual(averaged_pa_mechanism(c=0.5).label, "pa-avg")

    def test_average_is_feasible_on_three_items(self):
        mech = averaged_pa_mechanism()
        u1, u2 = UtilityVector((0.6, 0.3, 0.1)), UtilityVector((0.1, 0.2, 0.7))
        allocation = mech(u1, u2)
        self.assertTrue(np.all(allocation.shares.sum(axis=0) <= 1.0 + 1e-9))
        self.assertGreater(social_welfare(mech, u1, u2), 0.67776 * (0.6 + 0.3 + 0.7))

    def test_average_ratio_on_two_item_grid(self):
        report = measure_ratio(averaged_pa_mechanism(), grid_n=40)
        self.assertGreaterEqual(report.min_ratio, 0.67776)

    @unittest.skipUnless(os.environ.get("SP_MECHANISMS_EXTENDED"), "extended run")
    def test_average_ratio_on_fine_grid(self):
        report = measure_ratio(averaged_pa_mechanism(), grid_n=200, workers=4)
        self.assertGreaterEqual(report.min_ratio, 0.67776)


class TestSegmentBound(unittest.TestCase):
    def test_full_welfare_corner(self):
        # at (1, 1) the whole unit square is attainable
        self.assertAlmostEqual(aur_segment_bound(UtilityPoint(1.0, 1.0), 1.0), 1.0, places=9)

    def test_diagonal_segment(self):
        self.assertAlmostEqual(aur_segment_bound(UtilityPoint(0.5, 0.5), 1.0), 0.25, places=9)

    def test_vectorised(self):
        bounds = segment_bounds([1.0, 0.5], [1.0, 0.5], 1.0)
        np.testing.assert_allclose(bounds, [1.0, 0.25], atol=1e-9)

    def test_region_check(self):
        with self.assertRaises(InvalidInputError):
            aur_segment_bound(UtilityPoint(0.2, 0.3), 1.0)
        with self.assertRaises(InvalidInputError):
            aur_segment_bound(UtilityPoint(1.0, 1.0), 0.0)


class TestRatioCertificate(unittest.TestCase):
    def test_coarse_grid(self):
        certificate = pa_ratio_certificate(grid_step=1 / 200, workers=2)
        self.assertGreaterEqual(certificate.grid_minimum, 0.67844)
        self.assertAlmostEqual(certificate.corrected_bound, certificate.grid_minimum * 0.99, places=15)
        self.assertEqual(certificate.points, 201 * 202 // 2)
        self.assertGreaterEqual(sum(certificate.argmin), 1.0)
        self.assertEqual(set(certificate.to_json()["argmin"]), {"u1_star", "u2_star"})

    def test_workers_do_not_change_the_result(self):
        single = pa_ratio_certificate(grid_step=1 / 40)
        pooled = pa_ratio_certificate(grid_step=1 / 40, workers=3)
        self.assertEqual(single.points, pooled.points)
        self.assertAlmostEqual(single.grid_minimum, pooled.grid_minimum, places=12)

    def test_csv_dump(self):
        with tempfile.TemporaryDirectory() as workdir:
            path = os.path.join(workdir, "certificate.csv")
            certificate = pa_ratio_certificate(grid_step=1 / 20, csv_path=path)
            with open(path) as handle:
                lines = handle.read().splitlines()
        self.assertEqual(lines[0], CERTIFICATE_HEADER)
        self.assertEqual(len(lines) - 1, certificate.points)

    def test_bad_arguments(self):
        with self.assertRaises(InvalidInputError):
            pa_ratio_certificate(grid_step=0.3)
        with self.assertRaises(InvalidInputError):
            pa_ratio_certificate(weights=(0.5, 0.5, 0.5), grid_step=0.5)

    @unittest.skipUnless(os.environ.get("SP_MECHANISMS_EXTENDED"), "extended run")
    def test_fine_grid(self):
        certificate = pa_ratio_certificate(grid_step=1 / 2000, workers=4)
        self.assertGreaterEqual(certificate.grid_minimum, 0.67844)
        self.assertGreaterEqual(certificate.corrected_bound, 0.67776)


if __name__ == "__main__":
    unittest.main()
