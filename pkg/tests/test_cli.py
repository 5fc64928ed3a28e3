import csv
import io
import json
import subprocess
import sys

import pytest

from mpqlab.allocator import brute_force_alloc, build_instance
from mpqlab.cli import main
from mpqlab.expectations import REFERENCE_MOMENTS

from conftest import checkpoint


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


PROFILE = [
    {"layer_id": i, "block": 0, "kind": k, "c_i": c, "trace": t, "alpha": 1.0, "omega": t}
    for i, (k, c, t) in enumerate([("qkv", 48, 9.0), ("proj", 16, 5.0), ("fc1", 64, 2.0), ("fc2", 64, 1.0)])
]


class TestTables:
    def test_eight_rows_with_reference_deltas(self, capsys):
        code, out, _ = run_cli(capsys, "tables", "--max-bit", 8)
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(out)))
        assert [int(r["bits"]) for r in rows] == list(range(1, 9))
        for r in rows:
            ref_xd, ref_dd = REFERENCE_MOMENTS[int(r["bits"])]
            assert float(r["ref_e_xd"]) == ref_xd
            assert float(r["rel_err_dd"]) == pytest.approx(float(r["e_dd"]) / ref_dd - 1)
        assert rows[0]["ratio"] == "" and float(rows[3]["ref_ratio"]) == 4.70

    def test_monte_carlo_columns(self, capsys, tmp_path):
        out = tmp_path / "t.csv"
        code, _, _ = run_cli(capsys, "tables", "--max-bit", 3, "--mc-samples", 1000, "--seed", 0, "--out", out)
        assert code == 0
        rows = list(csv.DictReader(out.open()))
        assert len(rows) == 3 and float(rows[0]["mc_se_dd"]) > 0

    def test_monte_carlo_needs_a_seed(self, capsys):
        code, _, err = run_cli(capsys, "tables", "--mc-samples", 10)
        assert code == 2 and "--seed" in err


class TestAllocate:
    def test_matches_brute_force(self, capsys, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps(PROFILE))
        for bt in (2.5, 3, 3.5):
            code, out, _ = run_cli(capsys, "allocate", "--profile", path, "--bt", bt)
            assert code == 0
            got = json.loads(out)
            ref = brute_force_alloc(build_instance([9, 5, 2, 1], [48, 16, 64, 64], (2, 3, 4), bt, 4.0))
            assert tuple(got["bits"][str(i)] for i in range(4)) == ref.bits
            assert got["objective"] == ref.objective

    def test_infeasible_is_an_input_error(self, capsys, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps(PROFILE))
        code, _, err = run_cli(capsys, "allocate", "--profile", path, "--bt", 1.5)
        assert code == 2 and "error" in err

    def test_missing_profile(self, capsys, tmp_path):
        code, _, _ = run_cli(capsys, "allocate", "--profile", tmp_path / "none.json", "--bt", 3)
        assert code == 2


class TestModelCommands:
    def test_sweep_eval_sensitivity_refine(self, capsys, tmp_path):
        ck = checkpoint(0)
        code, out, _ = run_cli(capsys, "sweep", "--seed", 0, "--checkpoint", ck, "--bits", 32)
        assert code == 0
        drops = json.loads(out)["drops"]
        assert len(drops) == 16 and max(map(abs, drops)) < 1e-6

        prof = tmp_path / "prof.json"
        code, _, _ = run_cli(capsys, "sensitivity", "--seed", 0, "--checkpoint", ck, "--out", prof)
        assert code == 0 and len(json.loads(prof.read_text())) == 16

        alloc = tmp_path / "alloc.json"
        assert run_cli(capsys, "allocate", "--profile", prof, "--bt", 3, "--out", alloc)[0] == 0

        code, out, _ = run_cli(capsys, "refine", "--seed", 0, "--checkpoint", ck, "--profile", prof, "--allocation", alloc)
        assert code == 0
        refined = json.loads(out)
        assert refined["history"] == sorted(refined["history"])

        code, out, _ = run_cli(capsys, "eval", "--seed", 0, "--checkpoint", ck, "--uniform-bits", 3)
        assert code == 0 and json.loads(out)["model"] == "uniform_3"

    def test_sensitivity_matches_the_pipeline(self, capsys, tmp_path):
        from mpqlab.pipeline import RunConfig, run_pipeline

        ck = checkpoint(0)
        code, out, _ = run_cli(capsys, "sensitivity", "--seed", 0, "--checkpoint", ck)
        report = run_pipeline(RunConfig(seed=0, checkpoint=ck))
        assert [e["omega"] for e in json.loads(out)] == [e["omega"] for e in report["layers"]]

    def test_run_is_deterministic_across_jobs(self, capsys, tmp_path):
        ck = checkpoint(0)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert run_cli(capsys, "run", "--seed", 0, "--checkpoint", ck, "--out", a)[0] == 0
        assert run_cli(capsys, "run", "--seed", 0, "--checkpoint", ck, "--jobs", 3, "--out", b)[0] == 0
        assert a.read_bytes() == b.read_bytes()

    def test_run_config_file(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"gamma": 2.0, "checkpoint": checkpoint(0)}))
        code, out, _ = run_cli(capsys, "run", "--seed", 0, "--config", cfg, "--bt", 3.5)
        report = json.loads(out)
        assert code == 0 and report["config"]["gamma"] == 2.0 and report["config"]["target_bits"] == 3.5


class TestExitCodes:
    def test_invalid_config_value(self, capsys):
        code, _, err = run_cli(capsys, "run", "--seed", 0, "--gamma", 0.5)
        assert code == 2 and "[config]" in err

    def test_missing_checkpoint(self, capsys, tmp_path):
        code, _, _ = run_cli(capsys, "run", "--seed", 0, "--checkpoint", tmp_path / "nope.mpq")
        assert code == 2

    def test_unknown_subcommand_and_flag(self, capsys):
        for argv in (["frobnicate"], ["tables", "--bogus"], ["run"]):
            with pytest.raises(SystemExit) as exc:
                main(argv)
            assert exc.value.code == 2
            assert "usage" in capsys.readouterr().err

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "mpqlab", "tables", "--max-bit", "2"], capture_output=True, text=True)
        assert proc.returncode == 0 and len(proc.stdout.strip().splitlines()) == 3
