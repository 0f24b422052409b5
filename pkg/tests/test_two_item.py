import math
import os
import tempfile
import unittest

import numpy as np

from sp_mechanisms.core import UtilityVector, competitive_ratio_at, social_welfare
from sp_mechanisms.errors import CouplingError, InvalidInputError
from sp_mechanisms.piecewise import AffinePiece, PiecewiseFunction
from sp_mechanisms.two_item import (
    QRTables,
    check_coupling,
    constant_mechanism,
    f_five_sixths,
    first_best_symmetric,
    five_sixths_f,
    five_sixths_mechanism,
    grid_index,
    identity_mechanism,
    natural_partial_pair,
    partial_family_mechanism,
    ratio_floor,
    round_to_grid,
    rounding_headroom,
    symmetric_social_welfare,
    u_hat,
)

f_half = 0.5 - math.log(2.5) / 6.0
table_n = 10
table_q = 0.5
table_r = 0.1
random_pairs = 10_000


def get_constant_tables(n=table_n, q=table_q, r=table_r, lam=0.8):
    return QRTables(n=n, q_values=(q,) * (n + 1), r_values=(r,) * (n + 1), delta=0.01, lam=lam)


def get_partial_mechanism():
    return partial_family_mechanism(*natural_partial_pair(), get_constant_tables())


class TestFiveSixthsMechanism(unittest.TestCase):
    def test_f_values(self):
        self.assertAlmostEqual(f_five_sixths(0.5), 0.347285, places=6)
        self.assertAlmostEqual(f_five_sixths(0.5), f_half, places=12)
        np.testing.assert_allclose(f_five_sixths([0.0, 0.2, 0.8, 1.0]), [0.0, 0.0, 0.5, 0.5], atol=1e-12)
        with self.assertRaises(InvalidInputError):
            f_five_sixths(-0.1)

    def test_allocation_function(self):
        mech = five_sixths_mechanism()
        self.assertAlmostEqual(mech(0.5, 0.0), f_half + 0.5, places=12)
        self.assertAlmostEqual(mech(0.5, 0.5), 0.5, places=12)
        self.assertEqual(mech.breakpoints, (0.2, 0.8))
        self.assertTrue(mech.full)
        with self.assertRaises(InvalidInputError):
            mech(1.2, 0.0)

    def test_allocation_is_full_and_symmetric(self):
        mech = five_sixths_mechanism()
        allocation = mech.allocation(0.5, 0.0)
        np.testing.assert_allclose(
            allocation.shares, [[f_half + 0.5, f_half], [0.5 - f_half, 1.0 - f_half]], atol=1e-12
        )
        np.testing.assert_allclose(allocation.shares.sum(axis=0), [1.0, 1.0], atol=1e-12)

    def test_u_hat_at_half_against_zero(self):
        mech = five_sixths_mechanism()
        self.assertAlmostEqual(u_hat(mech, 0.5, 0.0), f_half + 0.25, places=12)
        self.assertAlmostEqual(u_hat(mech, 0.5, 0.0), 0.597285, places=6)

    def test_welfare_and_ratio_at_the_tight_point(self):
        handle = five_sixths_mechanism().handle()
        u1, u2 = UtilityVector.from_t(0.5), UtilityVector.from_t(0.0)
        self.assertAlmostEqual(social_welfare(handle, u1, u2), 1.25, places=12)
        self.assertAlmostEqual(competitive_ratio_at(handle, u1, u2), 5.0 / 6.0, places=12)
        self.assertAlmostEqual(symmetric_social_welfare(five_sixths_f(), 0.5, 0.0), 1.25, places=12)

    def test_closed_form_welfare_matches_allocation(self):
        handle = five_sixths_mechanism().handle()
        f = five_sixths_f()
        for t1, t2 in [(0.1, 0.9), (0.3, 0.35), (0.65, 0.0), (1.0, 0.4)]:
            u1, u2 = UtilityVector.from_t(t1), UtilityVector.from_t(t2)
            self.assertAlmostEqual(
                social_welfare(handle, u1, u2), symmetric_social_welfare(f, t1, t2), places=12
            )

    def test_random_profiles_are_fully_allocated(self):
        mech = five_sixths_mechanism()
        rng = np.random.default_rng(11)
        t1, t2 = rng.random(random_pairs), rng.random(random_pairs)
        np.testing.assert_allclose(mech(t1, t2) + mech(t2, t1), 1.0, atol=1e-14, rtol=0.0)
        np.testing.assert_allclose(mech(1.0 - t1, 1.0 - t2) + mech(1.0 - t2, 1.0 - t1), 1.0, atol=1e-14, rtol=0.0)

    def test_gap_to_mirror_on_the_rising_piece(self):
        t = np.linspace(0.2, 0.5, 301)
        gap = f_five_sixths(t) - f_five_sixths(1.0 - t)
        np.testing.assert_allclose(gap, 1.0 / 3.0 - 1.0 / (6.0 * t), atol=1e-10, rtol=0.0)

    def test_gap_to_mirror_is_bounded_below(self):
        t = np.linspace(0.001, 1.0, 1000)
        gap = f_five_sixths(t) - f_five_sixths(1.0 - t)
        self.assertTrue(np.all(gap >= 1.0 / 3.0 - 1.0 / (6.0 * t) - 1e-10))

    def test_marginal_balance_with_mirror(self):
        t = np.linspace(0.001, 0.999, 999)
        t = t[(np.abs(t - 0.2) > 1e-3) & (np.abs(t - 0.8) > 1e-3)]
        h = 1e-6

        def slope(x):
            return (f_five_sixths(x + h) - f_five_sixths(x - h)) / (2.0 * h)

        np.testing.assert_allclose(t * slope(t), (1.0 - t) * slope(1.0 - t), atol=1e-7, rtol=0.0)

    def test_handle_rejects_more_items(self):
        handle = five_sixths_mechanism().handle()
        bid = UtilityVector((0.2, 0.3, 0.5))
        with self.assertRaises(InvalidInputError):
            handle(bid, bid)


class TestSimpleMechanisms(unittest.TestCase):
    def test_constant(self):
        mech = constant_mechanism(0.25)
        self.assertEqual(mech(0.1, 0.9), 0.25)
        self.assertFalse(mech.full)
        self.assertTrue(constant_mechanism().full)
        with self.assertRaises(InvalidInputError):
            constant_mechanism(0.6)

    def test_first_best_symmetric(self):
        mech = first_best_symmetric()
        np.testing.assert_array_equal(mech(np.array([0.2, 0.5, 0.8]), 0.5), [0.0, 0.5, 1.0])

    def test_identity(self):
        mech = identity_mechanism()
        self.assertEqual(mech(0.3, 0.9), 0.3)


class TestGrid(unittest.TestCase):
    def test_ties_round_toward_half(self):
        self.assertEqual(int(grid_index(0.125, 4)), 1)
        self.assertEqual(int(grid_index(0.875, 4)), 3)
        self.assertEqual(int(grid_index(0.1, 4)), 0)
        self.assertEqual(round_to_grid(0.375, 4), 0.5)
        self.assertEqual(round_to_grid(0.625, 4), 0.5)
        self.assertEqual(round_to_grid(1.0, 4), 1.0)
        np.testing.assert_array_equal(grid_index(np.array([0.0, 0.99]), 4), [0, 4])

    def test_mirror_bids_get_mirror_indices(self):
        n = 10
        bids = np.array([0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.73, 0.95])
        np.testing.assert_array_equal(grid_index(1.0 - bids, n), n - grid_index(bids, n))


class TestPartialFamily(unittest.TestCase):
    def test_natural_pair_is_coupled(self):
        f1, f2 = natural_partial_pair()
        check_coupling(f1, f2)
        self.assertAlmostEqual(f2(0.5), 0.0, places=15)
        self.assertAlmostEqual(f2(1.0), math.log(2.0) - 0.5, places=12)

    def test_coupling_violation(self):
        f1, _ = natural_partial_pair()
        wrong = PiecewiseFunction.build([(0.5, 1.0, AffinePiece(-0.5, 1.0))])
        with self.assertRaises(CouplingError) as caught:
            check_coupling(f1, wrong)
        self.assertGreater(caught.exception.residual, 0.5)

    def test_coupling_domain(self):
        _, f2 = natural_partial_pair()
        whole = PiecewiseFunction.build([(0.0, 1.0, AffinePiece(0.0, 1.0))])
        with self.assertRaises(InvalidInputError):
            check_coupling(whole, f2)

    def test_constant_table_mechanism(self):
        mech = get_partial_mechanism()
        self.assertAlmostEqual(mech(0.3, 0.77), table_q * 0.3 + table_r, places=12)
        upper = table_q * 0.5 + table_r + table_q * (0.5 + math.log(1.5) - 0.75)
        self.assertAlmostEqual(mech(0.75, 0.2), upper, places=12)
        self.assertEqual(mech.breakpoints, (0.5,))
        self.assertEqual(mech.label, f"partial-qr(n={table_n})")

    def test_tables_are_looked_up_on_the_rounded_bid(self):
        q_values = tuple(k / table_n for k in range(table_n + 1))
        tables = QRTables(n=table_n, q_values=q_values, r_values=(0.0,) * (table_n + 1), delta=0.0, lam=0.0)
        mech = partial_family_mechanism(*natural_partial_pair(), tables)
        self.assertAlmostEqual(mech(0.4, 0.33), 0.3 * 0.4, places=12)
        self.assertAlmostEqual(mech(0.4, 0.35), 0.4 * 0.4, places=12)

    def test_headroom_and_floor(self):
        self.assertAlmostEqual(rounding_headroom(get_constant_tables()), 0.05, places=15)
        self.assertAlmostEqual(ratio_floor(0.84, 50), 0.83, places=15)
        with self.assertRaises(InvalidInputError):
            ratio_floor(float("nan"), 50)


class TestQRTables(unittest.TestCase):
    def test_validation(self):
        with self.assertRaises(InvalidInputError):
            QRTables(n=2, q_values=(0.0, 0.0), r_values=(0.0, 0.0, 0.0), delta=0.0, lam=0.0)
        with self.assertRaises(InvalidInputError):
            QRTables(n=2, q_values=(0.0, -1.0, 0.0), r_values=(0.0, 0.0, 0.0), delta=0.0, lam=0.0)
        with self.assertRaises(InvalidInputError):
            QRTables(n=1, q_values=(0.0, 0.0), r_values=(0.0, 0.0), delta=0.0, lam=0.0)

    def test_csv_round_trip(self):
        tables = QRTables(
            n=4, q_values=(0.1, 0.2, 1.0 / 3.0, 0.4, 1.45), r_values=(0.0, 0.01, 0.02, 0.03, 0.04),
            delta=2.92 / 8, lam=0.8312345678901234,
        )
        with tempfile.TemporaryDirectory() as workdir:
            path = os.path.join(workdir, "tables.csv")
            tables.to_csv(path)
            self.assertTrue(os.path.exists(path + ".meta"))
            with open(path) as handle:
                self.assertEqual(handle.readline().strip(), "t,q,r")
            self.assertEqual(QRTables.from_csv(path), tables)

    def test_missing_metadata(self):
        with tempfile.TemporaryDirectory() as workdir:
            path = os.path.join(workdir, "tables.csv")
            get_constant_tables().to_csv(path)
            with open(path + ".meta", "w") as handle:
                handle.write("n=10\n")
            with self.assertRaises(InvalidInputError):
                QRTables.from_csv(path)

    def test_reloaded_tables_give_the_same_mechanism(self):
        with tempfile.TemporaryDirectory() as workdir:
            path = os.path.join(workdir, "tables.csv")
            get_constant_tables().to_csv(path)
            reloaded = partial_family_mechanism(*natural_partial_pair(), QRTables.from_csv(path))
        grid = np.linspace(0.0, 1.0, 21)
        original = get_partial_mechanism()
        np.testing.assert_array_equal(
            reloaded(grid[:, None], grid[None, :]), original(grid[:, None], grid[None, :])
        )


if __name__ == "__main__":
    unittest.main()
