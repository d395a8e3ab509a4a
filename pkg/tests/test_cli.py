import csv
import io
import json
import tempfile
import unittest
from contextlib import redirect_stdout
from pathlib import Path

from ctxmhe.cli import build_parser, main

QUICK = str(Path(__file__).parent.parent / "resources" / "quick.json")


def run(*argv) -> tuple[int, str]:
    stream = io.StringIO()
    with redirect_stdout(stream):
        code = main(["--quiet", *argv])
    return code, stream.getvalue()


class TestCli(unittest.TestCase):

    def test_gradcheck_writes_one_row_per_weight(self):
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / "gradcheck.csv"
            code, _ = run("gradcheck", "--instances", "1", "--horizon", "3", "--out", str(out))
            with open(out, newline="") as handle:
                rows = list(csv.reader(handle))
        self.assertEqual(code, 0)
        self.assertEqual(rows[0], ["component", "name", "max_abs_error", "max_rel_error"])
        self.assertEqual(len(rows), 26)
        self.assertEqual(rows[-1][1], "gamma")

    def test_simulate_then_evaluate(self):
        with tempfile.TemporaryDirectory() as tmp:
            runs = Path(tmp) / "runs"
            dump = Path(tmp) / "dump.csv"
            code, output = run(
                "simulate", "--config", QUICK, "--env", "1", "--traj", "hover", "--controller", "base",
                "--variant", "2", "--out", str(runs), "--dump-mhe", str(dump),
            )
            self.assertEqual(code, 0)
            self.assertIn("rmse_ape_m=", output)
            self.assertTrue((runs / "base_env1_hover2_seed0.csv").exists())
            self.assertTrue((runs / "base_env1_hover2_seed0.json").exists())

            results = Path(tmp) / "results.csv"
            code, output = run("eval", "--runs", str(runs), "--out", str(results))
            self.assertEqual(code, 0)
            with open(results, newline="") as handle:
                rows = list(csv.reader(handle))
            self.assertEqual(rows[0], ["controller", "env", "trajectory", "rmse_ape_m", "max_ape_m", "n_runs"])
            self.assertEqual(rows[1][:3], ["Base", "1", "hover"])
            self.assertEqual(rows[1][-1], "1")

            code, output = run("plot", "--runs", str(runs), "--out", str(Path(tmp) / "series"))
            self.assertEqual(code, 0)
            self.assertTrue((Path(tmp) / "series" / "ape_base_env1_hover2_seed0.csv").exists())

    def test_reruns_are_byte_identical(self):
        """Every CSV the suite, eval and gradcheck commands write is the same on a second run."""
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            config = json.loads(Path(QUICK).read_text())
            config["experiment"]["controllers"] = ["base"]
            config_path = tmp / "base.json"
            config_path.write_text(json.dumps(config))

            outputs = {}
            for name in ("first", "second"):
                out = tmp / name
                code, _ = run("suite", "--config", str(config_path), "--out", str(out / "suite"))
                self.assertEqual(code, 0)
                code, _ = run(
                    "eval", "--runs", str(out / "suite" / "runs"),
                    "--out", str(out / "results.csv"), "--ordering", str(out / "ordering.csv"),
                )
                self.assertEqual(code, 0)
                code, _ = run("gradcheck", "--instances", "2", "--horizon", "4", "--seed", "3", "--out", str(out / "gradcheck.csv"))
                self.assertEqual(code, 0)
                outputs[name] = {
                    path.relative_to(out).as_posix(): path.read_bytes() for path in sorted(out.rglob("*.csv"))
                }

        self.assertIn("suite/results.csv", outputs["first"])
        self.assertIn("suite/improvement.csv", outputs["first"])
        self.assertIn("suite/ordering.csv", outputs["first"])
        self.assertEqual(len([name for name in outputs["first"] if name.startswith("suite/runs/")]), 4)
        self.assertEqual(sorted(outputs["first"]), sorted(outputs["second"]))
        for name, content in outputs["first"].items():
            self.assertEqual(content, outputs["second"][name], name)

    def test_invalid_arguments_exit_with_two(self):
        code, _ = run("simulate", "--config", "missing.json", "--env", "1", "--traj", "hover", "--controller", "base")
        self.assertEqual(code, 2)
        code, _ = run("simulate", "--config", QUICK, "--env", "9", "--traj", "hover", "--controller", "base")
        self.assertEqual(code, 2)
        code, _ = run("simulate", "--config", QUICK, "--env", "1", "--traj", "square", "--controller", "base", "--variant", "1")
        self.assertEqual(code, 2)

    def test_parser_rejects_unknown_controller(self):
        with self.assertRaises(SystemExit):
            build_parser().parse_args(["simulate", "--env", "1", "--traj", "hover", "--controller", "oracle"])


if __name__ == "__main__":
    unittest.main()
