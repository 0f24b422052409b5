import io
import json
import os
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from unittest.mock import MagicMock, patch

from sp_mechanisms import __version__
from sp_mechanisms.cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main
from sp_mechanisms.errors import InfeasibleAllocationError
from sp_mechanisms.two_item import QRTables


def run_cli(*argv):
    """Runs the command line and returns (exit code, captured stdout)"""
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue()


def run_json(*argv):
    code, text = run_cli(*argv)
    return code, json.loads(text)


class TestEval(unittest.TestCase):
    def test_two_item_bids(self):
        code, payload = run_json("eval", "--t1", "0.5", "--t2", "0")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(payload["mechanism"], "five-sixths")
        self.assertAlmostEqual(payload["utilities"][0], 0.597285, places=6)
        self.assertEqual(set(payload["allocation"]), {"agent_1", "agent_2"})

    def test_weight_bids_with_pa(self):
        code, payload = run_json("eval", "--mechanism", "pa:1", "--u1", "0.99,0.01", "--u2", "0.5,0.5")
        self.assertEqual(code, EXIT_OK)
        self.assertAlmostEqual(payload["allocation"]["agent_1"][0], 0.5, places=9)

    def test_usage_errors(self):
        self.assertEqual(run_cli("eval")[0], EXIT_USAGE)
        self.assertEqual(run_cli("eval", "--mechanism", "lottery", "--t1", "0.1", "--t2", "0.2")[0], EXIT_USAGE)
        self.assertEqual(run_cli("eval", "--mechanism", "pa:abc", "--t1", "0.1", "--t2", "0.2")[0], EXIT_USAGE)
        self.assertEqual(run_cli("eval", "--mechanism", "partial-qr", "--t1", "0.1", "--t2", "0.2")[0], EXIT_USAGE)
        self.assertEqual(run_cli("eval", "--t1", "1.5", "--t2", "0.2")[0], EXIT_USAGE)

    def test_price_mechanism_stays_feasible(self):
        code, payload = run_json("eval", "--mechanism", "dip-five-sixths", "--t1", "0", "--t2", "0.36")
        self.assertEqual(code, EXIT_OK)
        shares = payload["allocation"]
        self.assertAlmostEqual(shares["agent_1"][0] + shares["agent_2"][0], 1.0, places=6)
        self.assertAlmostEqual(shares["agent_2"][0], 0.7724, places=4)

    @patch("sp_mechanisms.cli.resolve_mechanism", side_effect=InfeasibleAllocationError("item 0 handed out twice"))
    def test_infeasible_allocation_is_a_failure(self, resolve):
        self.assertEqual(run_cli("eval", "--t1", "0.1", "--t2", "0.2")[0], EXIT_FAILED)
        resolve.assert_called_once()


class TestVerify(unittest.TestCase):
    def test_sp_passes(self):
        code, payload = run_json("verify", "sp", "--mechanism", "even-split", "--grid", "20")
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(payload["passed"])

    def test_negative_control_fails(self):
        code, payload = run_json("verify", "sp", "--mechanism", "dictator-fixture", "--grid", "20")
        self.assertEqual(code, EXIT_FAILED)
        self.assertFalse(payload["passed"])
        self.assertGreater(payload["max_regret"], 0.0)

    def test_rochet_needs_a_symmetric_mechanism(self):
        self.assertEqual(run_cli("verify", "rochet", "--mechanism", "pa-max")[0], EXIT_USAGE)
        code, payload = run_json("verify", "rochet", "--grid", "40")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(payload["condition"], "rochet")

    def test_ratio_threshold(self):
        code, payload = run_json("verify", "ratio", "--grid", "50", "--min-ratio", "0.8")
        self.assertEqual(code, EXIT_OK)
        self.assertAlmostEqual(payload["min_ratio"], 5.0 / 6.0, places=9)
        self.assertEqual(run_cli("verify", "ratio", "--grid", "50", "--min-ratio", "0.9")[0], EXIT_FAILED)

    def test_unknown_kind(self):
        self.assertEqual(run_cli("verify", "fairness")[0], EXIT_USAGE)

    @patch("sp_mechanisms.cli.check_sp_direct")
    def test_zero_tolerance_is_kept(self, check):
        check.return_value = MagicMock(passed=True, **{"to_json.return_value": {"passed": True}})
        self.assertEqual(run_cli("verify", "sp", "--mechanism", "even-split", "--grid", "10", "--tol", "0")[0], EXIT_OK)
        self.assertEqual(check.call_args.kwargs["tol"], 0.0)
        run_cli("verify", "sp", "--mechanism", "even-split", "--grid", "10")
        self.assertEqual(check.call_args.kwargs["tol"], 1e-9)

    def test_lp_options_do_not_reach_verify(self):
        code, payload = run_json("verify", "sufficient", "--grid", "20")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(payload["condition"], "sufficient")


class TestLP(unittest.TestCase):
    def setUp(self):
        self.workdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.workdir.cleanup)

    def test_build(self):
        out = os.path.join(self.workdir.name, "gc.lp")
        code, payload = run_json("lp", "build", "--n", "3", "--kind", "partial", "--prune", "--out", out)
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(os.path.exists(out))
        self.assertEqual(payload["variables"], 17)
        self.assertEqual(payload["rows"]["sp"], 24)
        self.assertEqual(payload["rows"]["fullness"], 0)

    def test_build_needs_out(self):
        self.assertEqual(run_cli("lp", "build", "--n", "3")[0], EXIT_USAGE)

    def test_solve(self):
        code, payload = run_json("lp", "solve", "--n", "4")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(payload["status"], "optimal")
        self.assertGreaterEqual(payload["objective"], 5.0 / 6.0 - 1e-7)

    def test_solve_to_file(self):
        out = os.path.join(self.workdir.name, "solution.json")
        code, payload = run_json("lp", "solve", "--n", "4", "--out", out)
        self.assertEqual(code, EXIT_OK)
        self.assertNotIn("nonzeros", payload)
        with open(out) as handle:
            self.assertIn("nonzeros", json.load(handle))

    def test_qr_tables(self):
        out = os.path.join(self.workdir.name, "tables.csv")
        code, payload = run_json("lp", "qr", "--n", "6", "--out", out)
        self.assertEqual(code, EXIT_OK)
        self.assertAlmostEqual(payload["delta"], 2.92 / 12, places=15)
        self.assertEqual(QRTables.from_csv(out).n, 6)
        self.assertAlmostEqual(payload["ratio_floor"], payload["lambda"] - 1.0 / 12, places=12)

    def test_tables_feed_the_partial_mechanism(self):
        out = os.path.join(self.workdir.name, "tables.csv")
        self.assertEqual(run_cli("lp", "qr", "--n", "6", "--out", out)[0], EXIT_OK)
        code, payload = run_json("verify", "sufficient", "--mechanism", "partial-qr", "--tables", out, "--grid", "40")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(payload["condition"], "sufficient")


class TestBound(unittest.TestCase):
    def test_published_certificate(self):
        code, payload = run_json("bound", "check")
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(payload["valid"])
        self.assertEqual(payload["h"], 0.9523)

    def test_failed_certificate(self):
        code, payload = run_json("bound", "check", "--h", "0.94")
        self.assertEqual(code, EXIT_FAILED)
        self.assertFalse(payload["valid"])

    def test_search_without_result(self):
        code, payload = run_json("bound", "search", "--h-max", "0.95", "--q-min", "0.2", "--q-max", "0.3")
        self.assertEqual(code, EXIT_FAILED)
        self.assertEqual(payload, {"found": False})


class TestPAAndDip(unittest.TestCase):
    def test_pa_certificate(self):
        code, payload = run_json("pa", "certificate", "--step", "0.05")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(payload["grid_step"], 0.05)
        self.assertEqual(payload["points"], 21 * 22 // 2)

    def test_dip_prices_to_stdout(self):
        code, text = run_cli("dip", "prices", "--t2", "0.5", "--points", "5")
        self.assertEqual(code, EXIT_OK)
        lines = text.splitlines()
        self.assertEqual(lines[0], "y,price_1,price_2")
        self.assertEqual(len(lines), 6)
        self.assertEqual(lines[1].split(",")[:2], ["0", "0"])

    def test_dip_needs_opponent_bid(self):
        self.assertEqual(run_cli("dip", "prices")[0], EXIT_USAGE)


class TestGlobalOptions(unittest.TestCase):
    def test_version(self):
        code, text = run_cli("--version")
        self.assertEqual(code, EXIT_OK)
        self.assertIn(__version__, text)

    def test_config_file(self):
        with tempfile.TemporaryDirectory() as workdir:
            path = os.path.join(workdir, "run.conf")
            with open(path, "w") as handle:
                handle.write("MECHANISM=even-split\nGRID=10\nLP_KIND=partial\n")
            code, payload = run_json("--config", path, "verify", "ratio")
            self.assertEqual(code, EXIT_OK)
            self.assertAlmostEqual(payload["min_ratio"], 0.5, places=12)
            self.assertEqual(payload["grid_n"], 10)
            with open(path, "a") as handle:
                handle.write("FLAVOUR=mint\n")
            self.assertEqual(run_cli("--config", path, "verify", "ratio")[0], EXIT_USAGE)


if __name__ == "__main__":
    unittest.main()
