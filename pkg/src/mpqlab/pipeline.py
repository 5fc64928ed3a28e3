"""End-to-end mixed-precision run and uniform baselines.

Stages, in order: train (or load) the toy model, full-precision baseline,
Fisher traces, per-kind scales, sensitivity scores, exact bit allocation,
quantization, swap refinement, final evaluation. All decisions use the
calibration split; the test split is only used for the reported accuracies.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .allocator import Allocation, build_instance, solve_ilp
from .checkpoint import load as load_checkpoint
from .data import Batch, Splits, TaskConfig, gen_task
from .expectations import recon_ratio_table
from .model import ModelConfig, ToyViT, TrainConfig, evaluate, train_toy
from .numerics import sub_rng
from .quantizer import activation_ranges, collect_layer_inputs, quantize_model
from .refiner import measure_recon, refine
from .sensitivity import FISHER_MODES, calibrate_type_scales, fisher_traces, score

SCHEMA_VERSION = "mpqlab.run/1"

# sub-stream keys for the stochastic stages
TRACE_STREAM = 30
SCALE_STREAM = 31


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    target_bits: float = 3.0
    bit_set: tuple[int, ...] = (2, 3, 4)
    gamma: float = 4.0
    mu: int | None = None  # sampled blocks for the type scales; None -> N/2
    beta: int = 2
    fisher_mode: str = "true"
    label_samples: int = 4096
    eps_alpha: float = 0.0
    max_refine_iters: int | None = None  # None -> number of layers
    checkpoint: str | None = None  # load weights instead of training
    jobs: int = 1

    @property
    def resolved_mu(self) -> int:
        return self.mu if self.mu is not None else max(1, self.model.n_blocks // 2)

    def validate(self) -> None:
        self.model.validate()
        self.task.validate()
        if (self.model.tokens, self.model.in_dim, self.model.num_classes) != (
            self.task.tokens,
            self.task.in_dim,
            self.task.num_classes,
        ):
            raise ValueError("model and task disagree on tokens / in_dim / num_classes")
        bits = list(self.bit_set)
        if not bits or bits != sorted(set(bits)) or bits[0] < 1 or bits[-1] >= 32:
            raise ValueError("bit_set must be sorted, distinct, within [1, 31]")
        if not bits[0] <= self.target_bits:
            raise ValueError(f"target_bits {self.target_bits} is below the smallest width {bits[0]}")
        if not self.gamma > 1:
            raise ValueError("gamma must be > 1")
        if not 1 <= self.resolved_mu <= self.model.n_blocks:
            raise ValueError(f"mu must lie in [1, {self.model.n_blocks}]")
        if not 1 <= self.beta < 32:
            raise ValueError("beta must lie in [1, 31]")
        if self.fisher_mode not in FISHER_MODES:
            raise ValueError(f"fisher_mode must be one of {FISHER_MODES}")
        if self.label_samples < 1 or self.eps_alpha < 0 or self.jobs < 1:
            raise ValueError("label_samples and jobs must be >= 1, eps_alpha >= 0")
        if self.max_refine_iters is not None and self.max_refine_iters < 0:
            raise ValueError("max_refine_iters must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bit_set"] = list(self.bit_set)
        d["mu"] = self.resolved_mu
        d.pop("jobs")  # does not affect results
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        nested = {"model": ModelConfig, "task": TaskConfig, "train": TrainConfig}
        for key, typ in nested.items():
            if key in d:
                sub = d[key]
                bad = set(sub) - {f.name for f in fields(typ)}
                if bad:
                    raise ValueError(f"unknown {key} keys {sorted(bad)}")
                d[key] = typ(**sub)
        if "bit_set" in d:
            d["bit_set"] = tuple(int(b) for b in d["bit_set"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_config(seed: int = 0) -> RunConfig:
    return RunConfig(seed=seed)


def uniform_bits(target_bits: float, bit_set) -> int:
    """Widest width in ``bit_set`` that fits the budget uniformly."""
    fits = [b for b in bit_set if b <= Fraction(repr(float(target_bits)))]
    return max(fits)


def run_uniform_baseline(model: ToyViT, bits: int, calib: Batch, test: Batch, act_ranges=None) -> float:
    """Test accuracy with every layer at ``bits`` (weights and inputs)."""
    q = quantize_model(model, [bits] * model.num_layers, calib, act_ranges)
    return evaluate(model, test, q)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


@dataclass
class RunReport:
    data: dict

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.data), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())

    def __getitem__(self, key):
        return self.data[key]


class _Stages:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def run(self, name: str, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start


def _prepare(cfg: RunConfig) -> tuple[ToyViT, Splits]:
    if cfg.checkpoint is None:
        return train_toy(cfg.seed, cfg.model, cfg.task, cfg.train)
    model, _ = load_checkpoint(cfg.checkpoint)
    if model.config != cfg.model:
        raise ValueError("checkpoint model config differs from the run config")
    return model, gen_task(cfg.seed, cfg.task)


def run_pipeline(cfg: RunConfig, timings: bool = False) -> RunReport:
    """Run every stage and return the report.

    Timings vary between runs, so they are only included when ``timings`` is
    set; without them the report is a pure function of the config.
    """
    try:
        cfg.validate()
    except ValueError as exc:
        raise PipelineError("config", exc) from exc
    st = _Stages()
    model, splits = st.run("train", _prepare, cfg)
    sample, test = splits.calib, splits.test
    fp_sample = st.run("baseline", evaluate, model, sample)
    fp_test = evaluate(model, test)

    act = st.run("calibrate", activation_ranges, model, sample)
    inputs = collect_layer_inputs(model, sample)

    est = st.run(
        "fisher",
        fisher_traces,
        model,
        sample,
        cfg.fisher_mode,
        sub_rng(cfg.seed, TRACE_STREAM),
        label_samples=cfg.label_samples,
    )
    traces = {e.layer_id: e.trace for e in est}
    scales = st.run(
        "type_scales",
        calibrate_type_scales,
        model,
        sample,
        cfg.resolved_mu,
        cfg.beta,
        sub_rng(cfg.seed, SCALE_STREAM),
        traces=traces,
        eps_alpha=cfg.eps_alpha,
        act_ranges=act,
        jobs=cfg.jobs,
    )
    profile = st.run("score", score, model, traces, scales.alpha)

    inst = st.run(
        "allocate", build_instance, profile.omegas, profile.param_counts, cfg.bit_set, cfg.target_bits, cfg.gamma
    )
    initial: Allocation = st.run("allocate", solve_ilp, inst)
    q0 = st.run("quantize", quantize_model, model, initial, sample, act)
    acc0_sample = evaluate(model, sample, q0)
    recon0 = {i: measure_recon(q0, i, inputs[i]).loss for i in range(model.num_layers)}

    table = recon_ratio_table()
    result = st.run("refine", refine, q0, inputs, sample, inst, table, cfg.max_refine_iters)

    ub = uniform_bits(cfg.target_bits, cfg.bit_set)
    uni_q = quantize_model(model, [ub] * model.num_layers, sample, act)
    final = {
        "full_precision": {"sample": fp_sample, "test": fp_test},
        "uniform": {"bits": ub, "sample": evaluate(model, sample, uni_q), "test": evaluate(model, test, uni_q)},
        "mpq_initial": {"sample": acc0_sample, "test": evaluate(model, test, q0)},
        "mpq_refined": {"sample": result.history[-1], "test": evaluate(model, test, result.qmodel)},
    }

    layers = []
    for entry in profile.layers:
        i = entry.layer_id
        layers.append(
            {
                **asdict(entry),
                "trace_stderr": est[i].stderr,
                "bits_initial": initial.bits[i],
                "bits_final": result.allocation.bits[i],
                "recon_initial": recon0[i],
                "recon_final": result.recon[i],
            }
        )
    data = {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "config": cfg.to_dict(),
        "layers": layers,
        "type_scales": scales.to_dict(),
        "allocation": {
            "capacity": inst.capacity,
            "total_params": inst.total_params,
            "initial": initial.to_dict(),
            "final": result.allocation.to_dict(),
        },
        "avg_bits": {"initial": initial.avg_bits, "final": result.allocation.avg_bits},
        "accuracy": final,
        "refine": {
            "stop_reason": result.stop_reason,
            "accepted_swaps": len(result.history) - 1,
            "history": result.history,
            "trace": [r.to_dict() for r in result.trace],
        },
    }
    if timings:
        data["timings"] = st.timings
    return RunReport(data)

