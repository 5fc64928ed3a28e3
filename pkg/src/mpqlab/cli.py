"""Command-line entry points.

Exit status: 0 on success, 2 on invalid input (bad flags, files or config),
1 on a runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from .allocator import Allocation, InfeasibleError, build_instance, solve_ilp
from .checkpoint import CheckpointError, load as load_checkpoint, save as save_checkpoint
from .data import gen_task
from .expectations import REFERENCE_MOMENTS, REFERENCE_RECON, monte_carlo_expectations, recon_ratio_table
from .model import evaluate, train_toy
from .numerics import make_rng, sub_rng
from .pipeline import SCALE_STREAM, TRACE_STREAM, PipelineError, RunConfig, run_pipeline
from .quantizer import activation_ranges, collect_layer_inputs, quantize_model
from .refiner import refine
from .sensitivity import FISHER_MODES, SensitivityProfile, calibrate_type_scales, fisher_traces, score, sweep_single_layer


class UsageError(ValueError):
    pass


def _bits(text: str) -> tuple[int, ...]:
    try:
        return tuple(sorted(int(b) for b in text.split(",") if b.strip()))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _dump(obj, out: str | None) -> None:
    _emit(json.dumps(obj, indent=2, sort_keys=True) + "\n", out)


def _rel(a: float, b: float) -> float:
    return (a - b) / b


# --------------------------------------------------------------------------
# shared flag groups
# --------------------------------------------------------------------------


def _add_seed(p, required=True):
    p.add_argument("--seed", type=int, required=required, help="seed for data, init and sampling")


def _add_model_flags(p):
    g = p.add_argument_group("model and task")
    g.add_argument("--checkpoint", help="load weights from an MPQ1 file instead of training")
    g.add_argument("--blocks", type=int, help="transformer blocks N")
    g.add_argument("--dim", type=int, help="hidden width d")
    g.add_argument("--heads", type=int, help="attention heads")
    g.add_argument("--tokens", type=int, help="tokens per example L")
    g.add_argument("--in-dim", type=int, help="token feature size")
    g.add_argument("--classes", type=int, help="number of classes")
    g.add_argument("--noise", type=float, help="task noise level")
    g.add_argument("--calib-size", type=int, help="sample-set size S")
    g.add_argument("--epochs", type=int, help="training epochs")
    g.add_argument("--lr", type=float, help="learning rate")


def _add_quant_flags(p):
    g = p.add_argument_group("allocation")
    g.add_argument("--bt", type=float, help="target average bits per weight")
    g.add_argument("--bits", type=_bits, help="allowed widths, e.g. 2,3,4")
    g.add_argument("--gamma", type=float, help="penalty base of the allocation objective")


def _add_sens_flags(p):
    g = p.add_argument_group("sensitivity")
    g.add_argument("--fisher-mode", choices=FISHER_MODES)
    g.add_argument("--label-samples", type=int)
    g.add_argument("--mu", type=int, help="blocks sampled for the per-kind scales")
    g.add_argument("--beta", type=int, help="calibration width for the per-kind scales")
    g.add_argument("--eps-alpha", type=float)


def _apply_flags(cfg: RunConfig, a) -> RunConfig:
    """Overlay explicitly given flags onto ``cfg``."""

    def pick(obj, **pairs):
        given = {k: v for k, v in pairs.items() if v is not None}
        return replace(obj, **given) if given else obj

    get = lambda name: getattr(a, name, None)  # noqa: E731
    task = pick(
        cfg.task, tokens=get("tokens"), in_dim=get("in_dim"), num_classes=get("classes"),
        noise=get("noise"), n_calib=get("calib_size"),
    )
    model = pick(
        cfg.model, n_blocks=get("blocks"), dim=get("dim"), heads=get("heads"),
        tokens=task.tokens, in_dim=task.in_dim, num_classes=task.num_classes,
    )
    train = pick(cfg.train, epochs=get("epochs"), lr=get("lr"))
    return pick(
        cfg, seed=get("seed"), model=model, task=task, train=train, target_bits=get("bt"),
        bit_set=get("bits"), gamma=get("gamma"), mu=get("mu"), beta=get("beta"),
        fisher_mode=get("fisher_mode"), label_samples=get("label_samples"), eps_alpha=get("eps_alpha"),
        max_refine_iters=get("max_refine_iters"), checkpoint=get("checkpoint"), jobs=get("jobs"),
    )


def _model_and_data(cfg: RunConfig):
    if cfg.checkpoint:
        model, _ = load_checkpoint(cfg.checkpoint)
        task = replace(
            cfg.task, tokens=model.config.tokens, in_dim=model.config.in_dim, num_classes=model.config.num_classes
        )
        return model, gen_task(cfg.seed, task)
    cfg.validate()
    return train_toy(cfg.seed, cfg.model, cfg.task, cfg.train)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_tables(a) -> int:
    if a.mc_samples and a.seed is None:
        raise UsageError("--mc-samples needs --seed")
    table = recon_ratio_table(range(a.min_bit, a.max_bit + 1), domain=a.domain)
    norm = table.normalized
    cols = [
        "bits", "e_xd", "e_dd", "ref_e_xd", "ref_e_dd", "rel_err_xd", "rel_err_dd",
        "k", "k_normalized", "ref_k_normalized", "ratio", "ref_ratio", "rel_err_ratio",
    ]
    if a.mc_samples:
        cols += ["mc_e_xd", "mc_se_xd", "mc_e_dd", "mc_se_dd"]
        x = make_rng(a.seed).standard_normal(a.mc_samples)
    rows = []
    for b in table.bits:
        r = table.rows[b]
        ref = REFERENCE_MOMENTS.get(b)
        ref_norm, ref_ratio = REFERENCE_RECON.get(b, (None, None))
        ratio = table.ratio.get(b)
        row = {
            "bits": b, "e_xd": r.e_xd, "e_dd": r.e_dd,
            "ref_e_xd": ref[0] if ref else "", "ref_e_dd": ref[1] if ref else "",
            "rel_err_xd": _rel(r.e_xd, ref[0]) if ref else "", "rel_err_dd": _rel(r.e_dd, ref[1]) if ref else "",
            "k": table.k[b], "k_normalized": norm[b], "ref_k_normalized": ref_norm if ref_norm is not None else "",
            "ratio": ratio if ratio is not None else "", "ref_ratio": ref_ratio if ref_ratio is not None else "",
            "rel_err_ratio": _rel(ratio, ref_ratio) if ratio is not None and ref_ratio else "",
        }
        if a.mc_samples:
            mc = monte_carlo_expectations(b, x, domain=a.domain)
            row.update(mc_e_xd=mc.row.e_xd, mc_se_xd=mc.se_xd, mc_e_dd=mc.row.e_dd, mc_se_dd=mc.se_dd)
        rows.append(row)
    out = open(a.out, "w", newline="") if a.out else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if a.out:
            out.close()
    return 0


def cmd_train_toy(a) -> int:
    cfg = _apply_flags(RunConfig(), a)
    cfg.validate()
    model, splits = train_toy(cfg.seed, cfg.model, cfg.task, cfg.train)
    save_checkpoint(a.out, model)
    _dump(
        {
            "checkpoint": a.out,
            "config": model.config.to_dict(),
            "accuracy": {"sample": evaluate(model, splits.calib), "test": evaluate(model, splits.test)},
        },
        None,
    )
    return 0


def cmd_sweep(a) -> int:
    cfg = _apply_flags(RunConfig(), a)
    model, splits = _model_and_data(cfg)
    drops = sweep_single_layer(model, splits.calib, a.sweep_bits, jobs=cfg.jobs)
    _dump({"bits": a.sweep_bits, "baseline": evaluate(model, splits.calib), "drops": drops}, a.out)
    return 0


def _profile(cfg: RunConfig, model, sample):
    rng = sub_rng(cfg.seed, TRACE_STREAM)
    est = fisher_traces(model, sample, cfg.fisher_mode, rng, label_samples=cfg.label_samples)
    traces = {e.layer_id: e.trace for e in est}
    scales = calibrate_type_scales(
        model, sample, cfg.resolved_mu, cfg.beta, sub_rng(cfg.seed, SCALE_STREAM), traces=traces,
        eps_alpha=cfg.eps_alpha, jobs=cfg.jobs,
    )
    return score(model, traces, scales.alpha), scales


def cmd_sensitivity(a) -> int:
    cfg = _apply_flags(RunConfig(), a)
    model, splits = _model_and_data(cfg)
    cfg.validate()
    profile, scales = _profile(cfg, model, splits.calib)
    _emit(profile.to_json() + "\n", a.out)
    if a.scales_out:
        _dump(scales.to_dict(), a.scales_out)
    return 0


def _load_profile(path: str) -> SensitivityProfile:
    return SensitivityProfile.from_json(Path(path).read_text())


def cmd_allocate(a) -> int:
    prof = _load_profile(a.profile)
    defaults = RunConfig()
    inst = build_instance(
        prof.omegas, prof.param_counts, a.bits or defaults.bit_set, a.bt, a.gamma or defaults.gamma
    )
    _emit(solve_ilp(inst).to_json() + "\n", a.out)
    return 0


def cmd_refine(a) -> int:
    cfg = _apply_flags(RunConfig(), a)
    model, splits = _model_and_data(cfg)
    prof = _load_profile(a.profile)
    if len(prof.layers) != model.num_layers:
        raise UsageError("profile and model have different layer counts")
    inst = build_instance(prof.omegas, prof.param_counts, cfg.bit_set, cfg.target_bits, cfg.gamma)
    initial = Allocation.from_dict(json.loads(Path(a.allocation).read_text()), prof.param_counts)
    sample = splits.calib
    act = activation_ranges(model, sample)
    q0 = quantize_model(model, initial, sample, act)
    result = refine(q0, collect_layer_inputs(model, sample), sample, inst, recon_ratio_table(), cfg.max_refine_iters)
    _dump(
        {
            "initial": initial.to_dict() | {"objective": inst.objective(initial.bits)},
            "final": result.allocation.to_dict(),
            "history": result.history,
            "stop_reason": result.stop_reason,
            "trace": [r.to_dict() for r in result.trace],
        },
        a.out,
    )
    return 0


def cmd_run(a) -> int:
    base = RunConfig() if a.config == "default" else RunConfig.load(a.config)
    cfg = _apply_flags(base, a)
    report = run_pipeline(cfg, timings=a.timings)
    _emit(report.to_json(), a.out)
    return 0


def cmd_eval(a) -> int:
    cfg = _apply_flags(RunConfig(), a)
    model, splits = _model_and_data(cfg)
    sample, test = splits.calib, splits.test
    if a.allocation and a.uniform_bits:
        raise UsageError("give at most one of --allocation and --uniform-bits")
    quant, label = None, "full_precision"
    if a.allocation:
        alloc = Allocation.from_dict(json.loads(Path(a.allocation).read_text()), [r.param_count for r in model.layers])
        quant, label = quantize_model(model, alloc, sample), "allocation"
    elif a.uniform_bits:
        quant, label = quantize_model(model, [a.uniform_bits] * model.num_layers, sample), f"uniform_{a.uniform_bits}"
    _dump({"model": label, "sample": evaluate(model, sample, quant), "test": evaluate(model, test, quant)}, a.out)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpqlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tables", help="Gaussian error moments and k(B) ratios as CSV")
    p.add_argument("--min-bit", type=int, default=1)
    p.add_argument("--max-bit", type=int, default=8)
    p.add_argument("--domain", choices=("clip", "full"), default="clip")
    p.add_argument("--mc-samples", type=int, default=0, help="add Monte-Carlo columns (needs --seed)")
    _add_seed(p, required=False)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_tables)

    p = sub.add_parser("train-toy", help="train the toy model and save an MPQ1 checkpoint")
    _add_seed(p)
    _add_model_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("sweep", help="accuracy drop from quantizing one layer at a time")
    _add_seed(p)
    _add_model_flags(p)
    p.add_argument("--bits", dest="sweep_bits", type=int, default=1)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("sensitivity", help="per-layer traces, kind scales and scores as profile JSON")
    _add_seed(p)
    _add_model_flags(p)
    _add_sens_flags(p)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.add_argument("--scales-out")
    p.set_defaults(fn=cmd_sensitivity)

    p = sub.add_parser("allocate", help="exact bit allocation from a profile JSON")
    p.add_argument("--profile", required=True)
    p.add_argument("--bt", type=float, required=True)
    p.add_argument("--bits", type=_bits)
    p.add_argument("--gamma", type=float)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_allocate)

    p = sub.add_parser("refine", help="swap refinement of an allocation")
    _add_seed(p)
    _add_model_flags(p)
    _add_quant_flags(p)
    p.add_argument("--profile", required=True)
    p.add_argument("--allocation", required=True)
    p.add_argument("--max-refine-iters", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_refine)

    p = sub.add_parser("run", help="full pipeline; writes the run report JSON")
    _add_seed(p)
    p.add_argument("--config", default="default", help="'default' or a JSON config file")
    _add_model_flags(p)
    _add_quant_flags(p)
    _add_sens_flags(p)
    p.add_argument("--max-refine-iters", type=int)
    p.add_argument("--jobs", type=int, help="worker threads; results do not depend on it")
    p.add_argument("--timings", action="store_true", help="include wall-clock stage timings")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval", help="accuracy of the full-precision or a quantized model")
    _add_seed(p)
    _add_model_flags(p)
    p.add_argument("--allocation")
    p.add_argument("--uniform-bits", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)
    return parser


_INPUT_ERRORS = (ValueError, KeyError, FileNotFoundError, CheckpointError, InfeasibleError, json.JSONDecodeError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        bad_input = exc.stage == "config" or isinstance(exc.cause, (FileNotFoundError, CheckpointError))
        return 2 if bad_input else 1
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
