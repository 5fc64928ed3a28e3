import json

import numpy as np
import pytest

from mpqlab import __version__
from mpqlab.model import ModelConfig, evaluate
from mpqlab.pipeline import (
    SCHEMA_VERSION,
    PipelineError,
    RunConfig,
    run_pipeline,
    run_uniform_baseline,
    uniform_bits,
)

from conftest import checkpoint, trained


@pytest.fixture(scope="module")
def report():
    return run_pipeline(RunConfig(seed=0, checkpoint=checkpoint(0)))


class TestReport:
    def test_top_level_keys(self, report):
        assert set(report.data) == {
            "schema_version", "code_version", "config", "layers", "type_scales",
            "allocation", "avg_bits", "accuracy", "refine",
        }
        assert report["schema_version"] == SCHEMA_VERSION and report["code_version"] == __version__

    def test_per_layer_table(self, report):
        layers = report["layers"]
        assert [e["layer_id"] for e in layers] == list(range(16))
        for e in layers:
            assert e["omega"] == pytest.approx(e["alpha"] * e["trace"])
            assert e["trace"] >= 0 and e["trace_stderr"] >= 0
            assert e["bits_initial"] in (2, 3, 4) and 2 <= e["bits_final"] <= 4
            assert e["recon_initial"] >= 0 and e["recon_final"] >= 0

    def test_budget_and_refine_contract(self, report):
        assert report["avg_bits"]["initial"] <= 3.0 and report["avg_bits"]["final"] <= 3.0
        alloc = report["allocation"]
        counts = [e["c_i"] for e in report["layers"]]
        for key in ("initial", "final"):
            bits = [alloc[key]["bits"][str(i)] for i in range(16)]
            assert np.dot(bits, counts) <= alloc["capacity"]
        acc = report["accuracy"]
        assert acc["mpq_refined"]["sample"] >= acc["mpq_initial"]["sample"]
        hist = report["refine"]["history"]
        assert hist[0] == acc["mpq_initial"]["sample"] and hist[-1] == acc["mpq_refined"]["sample"]
        assert report["refine"]["accepted_swaps"] == len(hist) - 1
        assert acc["uniform"]["bits"] == 3

    def test_full_precision_matches_the_model(self, report):
        model, splits = trained(0)
        fp = report["accuracy"]["full_precision"]
        assert fp == {"sample": evaluate(model, splits.calib), "test": evaluate(model, splits.test)}

    def test_config_echo(self, report):
        cfg = report["config"]
        assert cfg["mu"] == 2 and cfg["bit_set"] == [2, 3, 4] and "jobs" not in cfg
        assert RunConfig.from_dict(cfg).to_dict() == cfg

    def test_json_is_stable(self, report):
        text = report.to_json()
        assert json.loads(text)["config"]["seed"] == 0
        assert text == run_pipeline(RunConfig(seed=0, checkpoint=checkpoint(0), jobs=2)).to_json()


class TestPipeline:
    def test_max_budget_is_uniform_max(self):
        r = run_pipeline(RunConfig(seed=0, checkpoint=checkpoint(0), target_bits=4.0))
        assert set(r["allocation"]["initial"]["bits"].values()) == {4}
        assert set(r["allocation"]["final"]["bits"].values()) == {4}
        acc = r["accuracy"]
        assert acc["uniform"]["bits"] == 4
        assert acc["mpq_refined"]["test"] == acc["uniform"]["test"]
        assert r["refine"]["stop_reason"] == "no_feasible_swap"

    def test_timings_are_opt_in(self):
        r = run_pipeline(RunConfig(seed=0, checkpoint=checkpoint(0), max_refine_iters=0), timings=True)
        assert {"fisher", "type_scales", "allocate", "refine"} <= set(r["timings"])
        assert r["refine"]["stop_reason"] == "max_iters"

    @pytest.mark.parametrize(
        "change",
        [
            {"gamma": 1.0},
            {"bit_set": (4, 2)},
            {"target_bits": 1.5},
            {"mu": 5},
            {"beta": 0},
            {"fisher_mode": "other"},
            {"label_samples": 0},
            {"model": ModelConfig(num_classes=3)},
        ],
    )
    def test_invalid_config(self, change):
        cfg = RunConfig(**change)
        with pytest.raises(PipelineError) as err:
            run_pipeline(cfg)
        assert err.value.stage == "config"

    def test_stage_is_named_on_failure(self, tmp_path):
        with pytest.raises(PipelineError) as err:
            run_pipeline(RunConfig(checkpoint=str(tmp_path / "missing.mpq")))
        assert err.value.stage == "train" and isinstance(err.value.cause, FileNotFoundError)

    def test_checkpoint_must_match(self):
        with pytest.raises(PipelineError):
            run_pipeline(RunConfig(checkpoint=checkpoint(0), model=ModelConfig(n_blocks=2)))


class TestConfig:
    def test_unknown_keys(self):
        with pytest.raises(ValueError):
            RunConfig.from_dict({"sed": 1})
        with pytest.raises(ValueError):
            RunConfig.from_dict({"model": {"depth": 3}})

    def test_load(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 3, "gamma": 6, "model": {"n_blocks": 2}, "bit_set": [2, 4]}))
        cfg = RunConfig.load(path)
        assert (cfg.seed, cfg.gamma, cfg.model.n_blocks, cfg.bit_set, cfg.resolved_mu) == (3, 6, 2, (2, 4), 1)

    def test_uniform_width(self):
        assert uniform_bits(3, (2, 3, 4)) == 3
        assert uniform_bits(3.5, (2, 3, 4)) == 3
        assert uniform_bits(3.4, (2, 4, 8)) == 2


class TestUniformBaseline:
    def test_full_precision(self, toy):
        model, splits = toy
        acc = run_uniform_baseline(model, 32, splits.calib, splits.test)
        assert abs(acc - evaluate(model, splits.test)) <= 1e-6

    def test_deterministic(self, toy):
        model, splits = toy
        assert run_uniform_baseline(model, 3, splits.calib, splits.test) == run_uniform_baseline(
            model, 3, splits.calib, splits.test
        )

    def test_one_bit_below_eight_bits(self):
        one, eight = [], []
        for seed in range(5):
            model, splits = trained(seed)
            one.append(run_uniform_baseline(model, 1, splits.calib, splits.test))
            eight.append(run_uniform_baseline(model, 8, splits.calib, splits.test))
        assert np.median(one) <= np.median(eight)
