"""Layer sensitivity: Fisher traces, a finite-difference Hessian check, type scales.

The score of layer ``i`` is ``omega_i = alpha[kind(i)] * trace_i`` where
``trace_i`` is the Fisher trace of the layer's weights and ``alpha`` converts one
unit of trace into an expected accuracy drop for that layer kind.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Batch
from .model import (
    KINDS,
    LayerKind,
    ToyViT,
    backward,
    block_forward,
    embed,
    evaluate,
    forward,
    forward_from,
    layer_id_of,
    layer_param_name,
    split_layer_id,
)
from .numerics import log_softmax, softmax
from .quantizer import FULL_PRECISION_BITS, QuantizedModel, activation_ranges, weight_ranges

FISHER_MODES = ("empirical", "true", "exact")


@dataclass(frozen=True)
class FisherEstimate:
    layer_id: int
    trace: float
    num_samples: int
    mode: str
    stderr: float = 0.0


# --------------------------------------------------------------------------
# Fisher trace
# --------------------------------------------------------------------------


def label_weights(
    probs: np.ndarray,
    mode: str,
    labels: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    label_samples: int = 1,
) -> np.ndarray:
    """Per-example weights over classes, shape ``(n, C)``, rows summing to 1.

    * ``empirical``: one-hot observed labels.
    * ``true``: ``label_samples`` labels per example drawn from the model's own
      predictive distribution, stored as normalized counts.
    * ``exact``: the predictive distribution itself (the limit of ``true``).
    """
    n, c = probs.shape
    if mode == "empirical":
        if labels is None:
            raise ValueError("empirical Fisher needs observed labels")
        return np.eye(c)[labels]
    if mode == "true":
        if rng is None:
            raise ValueError("true Fisher needs an rng for label sampling")
        if label_samples < 1:
            raise ValueError("label_samples must be >= 1")
        p = np.clip(probs, 0.0, None)
        p = p / p.sum(axis=1, keepdims=True)
        return rng.multinomial(label_samples, p) / float(label_samples)
    if mode == "exact":
        return np.array(probs, dtype=np.float64)
    raise ValueError(f"unknown Fisher mode {mode!r}; expected one of {FISHER_MODES}")


def _per_example_values(probs, weights, sq_norms) -> np.ndarray:
    """``sum_y weights[:, y] * sq_norms(p - onehot(y))`` per example.

    The gradient for label y is linear in ``p - onehot(y)``, so any number of
    sampled labels costs at most one pass per class.
    """
    n, c = probs.shape
    eye = np.eye(c)
    hard = weights.max(axis=1) == 1.0
    if np.all(hard):
        return sq_norms(probs - eye[np.argmax(weights, axis=1)])
    total = np.zeros(n)
    for y in range(c):
        if np.any(weights[:, y] > 0):
            total += weights[:, y] * sq_norms(probs - eye[np.full(n, y)])
    return total


def _mean_stderr(values: np.ndarray) -> tuple[float, float]:
    stderr = float(np.std(values) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return float(np.mean(values)), stderr


def fisher_trace_generic(
    probs: np.ndarray,
    sq_grad_norms: Callable[[np.ndarray], np.ndarray],
    mode: str,
    labels: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    label_samples: int = 1,
) -> tuple[float, float]:
    """Fisher trace for any softmax model, returned as ``(trace, stderr)``.

    ``sq_grad_norms(dlogits)`` must return, per example, the squared norm of the
    parameter gradient of ``-log p(y|x)`` given that example's logit gradient
    ``p - onehot(y)``. The stderr is over examples.
    """
    w = label_weights(probs, mode, labels, rng, label_samples)
    return _mean_stderr(_per_example_values(probs, w, sq_grad_norms))


def fisher_traces(
    model: ToyViT,
    data: Batch,
    mode: str = "empirical",
    rng: np.random.Generator | None = None,
    layer_ids: Sequence[int] | None = None,
    label_samples: int = 1,
    quant=None,
    batch_size: int = 256,
) -> list[FisherEstimate]:
    """Fisher traces of several layers from shared per-example backward passes.

    ``quant`` evaluates the traces on a fake-quantized network (straight-through
    gradients); by default the full-precision network is used.
    """
    layer_ids = list(range(model.num_layers)) if layer_ids is None else list(layer_ids)
    values: dict[int, list[np.ndarray]] = {i: [] for i in layer_ids}
    for chunk in data.chunks(batch_size):
        z, cache = forward(model, chunk.inputs, quant)
        probs = softmax(z)
        weights = label_weights(probs, mode, chunk.labels, rng, label_samples)
        norms: dict[int, list[np.ndarray]] = {i: [] for i in layer_ids}

        def sq_norms(dlogits, first=layer_ids[0]):
            per_ex = backward(model, cache, dlogits, per_example=layer_ids)[1]
            for i in layer_ids:
                norms[i].append(np.sum(per_ex[i] ** 2, axis=(1, 2)))
            return norms[first][-1]

        _per_example_values(probs, weights, sq_norms)
        for i in layer_ids:
            it = iter(norms[i])
            values[i].append(_per_example_values(probs, weights, lambda _dl: next(it)))
    out = []
    for i in layer_ids:
        v = np.concatenate(values[i])
        trace, stderr = _mean_stderr(v)
        out.append(FisherEstimate(i, trace, int(len(v)), mode, stderr))
    return out


def fisher_trace(model, layer_id, data, mode="empirical", rng=None, label_samples=1) -> FisherEstimate:
    return fisher_traces(model, data, mode, rng, [layer_id], label_samples)[0]


# --------------------------------------------------------------------------
# finite-difference Hessian trace
# --------------------------------------------------------------------------


def hessian_trace_fd(loss: Callable[[], float], w: np.ndarray, rel_step: float = 1e-3) -> float:
    """Sum of central second differences of ``loss`` along every entry of ``w``.

    ``w`` is perturbed in place (and restored); ``loss`` must read it.
    Step per entry is ``rel_step * max(|w_j|, 1)``.
    """
    flat = w.reshape(-1)
    base = loss()
    total = 0.0
    for j in range(flat.size):
        orig = flat[j]
        h = rel_step * max(abs(orig), 1.0)
        flat[j] = orig + h
        up = loss()
        flat[j] = orig - h
        down = loss()
        flat[j] = orig
        total += (up - 2.0 * base + down) / (h * h)
    return total


class _WeightStack:
    """Forward hook that swaps one layer's weight for a stack of variants."""

    def __init__(self, model: ToyViT, layer_id: int, stack: np.ndarray):
        self.model, self.layer_id, self.stack = model, layer_id, stack

    def act(self, i, x):
        return x

    def weight(self, i):
        return self.stack if i == self.layer_id else self.model.params[layer_param_name(i)]


def layer_hessian_trace_fd(
    model: ToyViT,
    layer_id: int,
    data: Batch,
    labels: str = "model",
    rel_step: float = 1e-3,
    chunk: int = 64,
) -> float:
    """Hessian trace of the mean NLL with respect to one layer's weights.

    ``labels="observed"`` differentiates the NLL of the data labels.
    ``labels="model"`` differentiates the expected NLL under the model's own
    predictive distribution at the current weights (held fixed), i.e. the
    expected Hessian ``E_x E_{y~p(y|x)}[H]`` that the Fisher approximates.

    Same central second differences as :func:`hessian_trace_fd`, evaluated
    ``chunk`` entries at a time by stacking perturbed copies of the weight.
    """
    block, _ = split_layer_id(layer_id)
    z0, _ = forward(model, data.inputs)
    if labels == "model":
        target = softmax(z0)
    elif labels == "observed":
        target = np.eye(z0.shape[1])[data.labels]
    else:
        raise ValueError("labels must be 'model' or 'observed'")
    # the residual stream entering the layer's block does not depend on its weights
    hidden = embed(model, data.inputs)
    for b in range(block):
        hidden = block_forward(model, b, hidden)
    n = data.size

    def losses(stack: np.ndarray) -> np.ndarray:
        p = stack.shape[0]
        tiled = np.broadcast_to(hidden, (p, *hidden.shape)).reshape(p * n, *hidden.shape[1:])
        z, _ = forward_from(model, tiled, block, quant=_WeightStack(model, layer_id, stack))
        nll = -np.sum(np.tile(target, (p, 1)) * log_softmax(z), axis=1)
        return nll.reshape(p, n).mean(axis=1)

    w = model.params[layer_param_name(layer_id)]
    base = losses(w[None])[0]
    flat = w.reshape(-1)
    steps = rel_step * np.maximum(np.abs(flat), 1.0)
    total = 0.0
    for start in range(0, flat.size, chunk):
        idx = np.arange(start, min(start + chunk, flat.size))
        stack = np.repeat(flat[None], len(idx), axis=0)
        rows = np.arange(len(idx))
        stack[rows, idx] += steps[idx]
        up = losses(stack.reshape(len(idx), *w.shape))
        stack[rows, idx] = flat[idx] - steps[idx]
        down = losses(stack.reshape(len(idx), *w.shape))
        total += float(np.sum((up - 2.0 * base + down) / (steps[idx] ** 2)))
    return total


# --------------------------------------------------------------------------
# accuracy probes and type-aware scaling
# --------------------------------------------------------------------------


def single_layer_quant(model: ToyViT, layer_id: int, bits: int, act_ranges, w_ranges=None) -> QuantizedModel:
    alloc = {i: FULL_PRECISION_BITS for i in range(model.num_layers)}
    alloc[layer_id] = bits
    return QuantizedModel(model, alloc, w_ranges or weight_ranges(model), act_ranges)


def sweep_single_layer(
    model: ToyViT, data: Batch, bits: int, act_ranges=None, baseline: float | None = None, jobs: int = 1
) -> list[float]:
    """Accuracy drop on ``data`` when only layer ``i`` is quantized to ``bits``, for every i."""
    if bits < 1:
        raise ValueError("bits must be >= 1")
    act_ranges = act_ranges or activation_ranges(model, data)
    w_ranges = weight_ranges(model)
    base = evaluate(model, data) if baseline is None else baseline

    def drop(i):
        return base - evaluate(model, data, single_layer_quant(model, i, bits, act_ranges, w_ranges))

    return _map(drop, range(model.num_layers), jobs)


def _map(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))  # results come back in input order


@dataclass
class TypeScales:
    alpha: dict[str, float]
    mu: int
    beta: int
    blocks: list[int]
    accuracy_drop: dict[str, float]
    mean_trace: dict[str, float]
    baseline_accuracy: float = float("nan")
    drops: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drops"] = {str(k): v for k, v in self.drops.items()}
        return d


def type_scales_from_measurements(
    blocks: Sequence[int], drops: dict[int, float], traces: dict[int, float], eps_alpha: float = 0.0
) -> tuple[dict[str, float], dict[str, float], dict[str, float]]:
    """``alpha_t = mean clamped drop / mean trace`` over the sampled blocks' layers of kind t.

    Negative drops count as zero. ``alpha_t`` falls back to ``eps_alpha`` when the
    mean drop is zero or the mean trace vanishes.
    """
    alpha, acc_drop, mean_trace = {}, {}, {}
    for kind in KINDS:
        ids = [layer_id_of(b, kind) for b in blocks]
        a = float(np.mean([max(drops[i], 0.0) for i in ids]))
        t = float(np.mean([traces[i] for i in ids]))
        acc_drop[kind.value], mean_trace[kind.value] = a, t
        alpha[kind.value] = a / t if a > 0 and t > 0 else eps_alpha
    return alpha, acc_drop, mean_trace


def sample_blocks(n_blocks: int, mu: int, rng: np.random.Generator) -> list[int]:
    if not 1 <= mu <= n_blocks:
        raise ValueError(f"mu={mu} must lie in [1, {n_blocks}]")
    return sorted(int(b) for b in rng.choice(n_blocks, size=mu, replace=False))


def calibrate_type_scales(
    model: ToyViT,
    data: Batch,
    mu: int,
    beta: int,
    rng: np.random.Generator,
    traces: dict[int, float] | None = None,
    eps_alpha: float = 0.0,
    trace_source: str = "full",
    fisher_mode: str = "empirical",
    act_ranges=None,
    jobs: int = 1,
) -> TypeScales:
    """Estimate one scale per layer kind from ``mu`` randomly sampled blocks.

    Each sampled layer is quantized alone to ``beta`` bits (weights and inputs),
    its accuracy drop on ``data`` is measured against the unquantized model, and
    the layer is restored. ``trace_source="full"`` uses full-precision traces;
    ``"quantized"`` measures each trace with that layer quantized to ``beta``.
    """
    if not 1 <= beta < FULL_PRECISION_BITS:
        raise ValueError(f"beta={beta} must lie in [1, {FULL_PRECISION_BITS})")
    blocks = sample_blocks(model.config.n_blocks, mu, rng)
    act_ranges = act_ranges or activation_ranges(model, data)
    w_ranges = weight_ranges(model)
    baseline = evaluate(model, data)
    ids = [layer_id_of(b, k) for k in KINDS for b in blocks]
    acc = _map(
        lambda i: evaluate(model, data, single_layer_quant(model, i, beta, act_ranges, w_ranges)), ids, jobs
    )
    drops = {i: baseline - a for i, a in zip(ids, acc)}
    if trace_source == "full":
        if traces is None:
            traces = {e.layer_id: e.trace for e in fisher_traces(model, data, fisher_mode, rng, ids)}
    elif trace_source == "quantized":
        traces = {}
        for i in sorted(ids):
            q = single_layer_quant(model, i, beta, act_ranges, w_ranges)
            traces[i] = fisher_traces(model, data, fisher_mode, rng, [i], quant=q)[0].trace
    else:
        raise ValueError("trace_source must be 'full' or 'quantized'")
    alpha, acc_drop, mean_trace = type_scales_from_measurements(blocks, drops, traces, eps_alpha)
    return TypeScales(alpha, mu, beta, blocks, acc_drop, mean_trace, baseline, drops)


# --------------------------------------------------------------------------
# profile
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSensitivity:
    layer_id: int
    block: int
    kind: str
    c_i: int
    trace: float
    alpha: float
    omega: float


@dataclass
class SensitivityProfile:
    layers: list[LayerSensitivity]

    @property
    def omegas(self) -> list[float]:
        return [entry.omega for entry in self.layers]

    @property
    def param_counts(self) -> list[int]:
        return [entry.c_i for entry in self.layers]

    def to_json(self) -> str:
        return json.dumps([asdict(e) for e in self.layers], indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SensitivityProfile":
        raw = json.loads(text)
        if isinstance(raw, dict):
            raw = raw["layers"]
        layers = [
            LayerSensitivity(
                int(e["layer_id"]), int(e["block"]), str(e["kind"]), int(e["c_i"]),
                float(e["trace"]), float(e["alpha"]), float(e["omega"]),
            )
            for e in raw
        ]
        layers.sort(key=lambda e: e.layer_id)
        if [e.layer_id for e in layers] != list(range(len(layers))):
            raise ValueError("profile layer ids must be 0..n-1 without gaps")
        for e in layers:
            if e.c_i < 1 or e.omega < 0 or not math.isfinite(e.omega):
                raise ValueError(f"invalid profile entry for layer {e.layer_id}")
        return cls(layers)


def score(model: ToyViT, traces: dict[int, float], alpha: dict[str, float]) -> SensitivityProfile:
    """``omega_i = alpha[kind(i)] * trace_i`` for every quantizable layer."""
    entries = []
    for rec in model.layers:
        kind = LayerKind(rec.kind).value
        if rec.layer_id not in traces or kind not in alpha:
            raise KeyError(f"missing trace or scale for layer {rec.layer_id} ({kind})")
        t, a = float(traces[rec.layer_id]), float(alpha[kind])
        entries.append(LayerSensitivity(rec.layer_id, rec.block_idx, kind, rec.param_count, t, a, a * t))
    return SensitivityProfile(entries)
