"""Error-driven bit refinement after the initial allocation.

Each iteration moves one bit from the layer whose reconstruction error is
predicted to grow least (``d``) to the layer whose error is predicted to shrink
most (``u``). Predictions scale a measured error by the Gaussian ratio table.
A swap is kept only if accuracy on the sample set strictly improves; otherwise
it is undone and the loop stops.

Activation ranges come from full-precision layer inputs and do not depend on
the bit-width, so re-calibrating the two touched layers after a swap reduces to
re-quantizing them at their new widths.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .allocator import Allocation, IlpInstance
from .data import Batch
from .expectations import ReconRatioTable
from .model import evaluate
from .quantizer import QuantizedModel, QuantParams, fake_quant


class DegenerateLayerError(ValueError):
    pass


@dataclass(frozen=True)
class ReconMeasurement:
    layer_id: int
    bits: int
    loss: float


def relative_recon_error(w: np.ndarray, x, wparams: QuantParams, aparams: QuantParams) -> float:
    """``sum ||X^ W^T - X W^T||^2 / sum ||X W^T||^2`` over the chunks of ``x``.

    ``w`` is ``(out, in)``; ``x`` is a ``(tokens, in)`` array or a list of them.
    Numerators and denominators are summed over chunks before dividing.
    """
    chunks = [x] if isinstance(x, np.ndarray) else list(x)
    wq = fake_quant(w, wparams)
    num = den = 0.0
    for xc in chunks:
        ref = xc @ w.T
        err = fake_quant(xc, aparams) @ wq.T - ref
        num += float(np.sum(err * err))
        den += float(np.sum(ref * ref))
    if den == 0.0:
        raise DegenerateLayerError("layer output W X is identically zero")
    return num / den


def measure_recon(qmodel: QuantizedModel, layer_id: int, inputs, bits: int | None = None) -> ReconMeasurement:
    """Reconstruction error of one layer at its current (or a given) bit-width.

    ``inputs`` holds that layer's cached full-precision inputs (see
    :func:`mpqlab.quantizer.collect_layer_inputs`).
    """
    b = qmodel.bits[layer_id] if bits is None else int(bits)
    w = qmodel.base.layer(layer_id).weight
    loss = relative_recon_error(
        w, inputs, qmodel.weight_params(layer_id).with_bits(b), qmodel.act_params(layer_id).with_bits(b)
    )
    return ReconMeasurement(layer_id, b, loss)


@dataclass(frozen=True)
class NeighborEstimate:
    loss: float
    loss_down: float | None  # predicted loss at B-1, None if unavailable
    loss_up: float | None  # predicted loss at B+1

    @property
    def gain(self) -> float | None:
        """Predicted error reduction from adding one bit."""
        return None if self.loss_up is None else self.loss - self.loss_up

    @property
    def degradation(self) -> float | None:
        """Predicted error increase from removing one bit."""
        return None if self.loss_down is None else self.loss_down - self.loss


def estimate_neighbors(m: ReconMeasurement, table: ReconRatioTable) -> NeighborEstimate:
    """Predicted losses one bit below and above ``m.bits`` from the ratio table."""
    down = table.neighbor_ratio(m.bits, m.bits - 1) if m.bits > 1 else None
    up = table.neighbor_ratio(m.bits, m.bits + 1)
    return NeighborEstimate(m.loss, None if down is None else m.loss * down, None if up is None else m.loss * up)


@dataclass(frozen=True)
class SwapCandidate:
    up_layer: int
    down_layer: int
    gain: float
    degradation: float
    budget_delta: int  # c_u - c_d

    @property
    def net_estimate(self) -> float:
        return self.gain - self.degradation


def select_swap(
    bits: Sequence[int],
    measurements: Mapping[int, ReconMeasurement],
    table: ReconRatioTable,
    inst: IlpInstance,
) -> SwapCandidate | None:
    """Best budget-feasible one-bit move, or None.

    Up-candidates are ranked by estimated gain (largest first), down-candidates
    by estimated degradation (smallest first), ties by layer id. Infeasible pairs
    are skipped: next-best ``d`` first, then next-best ``u``.
    """
    lo, hi = inst.bit_set[0], inst.bit_set[-1]
    est = {i: estimate_neighbors(measurements[i], table) for i in range(inst.n)}
    ups = sorted(
        (i for i in range(inst.n) if bits[i] < hi and est[i].gain is not None),
        key=lambda i: (-est[i].gain, i),
    )
    downs = sorted(
        (i for i in range(inst.n) if bits[i] > lo and est[i].degradation is not None),
        key=lambda i: (est[i].degradation, i),
    )
    used = inst.weight(bits)
    c = inst.param_counts
    for u in ups:
        for d in downs:
            if d == u:
                continue
            if used + c[u] - c[d] > inst.capacity:
                continue
            return SwapCandidate(u, d, est[u].gain, est[d].degradation, c[u] - c[d])
    return None


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    up_layer: int
    down_layer: int
    est_gain: float
    est_degradation: float
    accuracy_before: float
    accuracy_after: float
    accepted: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RefineState:
    bits: tuple[int, ...]
    qmodel: QuantizedModel
    history: list[float]  # accuracy on the sample set after each accepted step
    iteration: int = 0
    max_iters: int = 0
    trace: list[TraceRecord] = field(default_factory=list)
    stop_reason: str = ""

    @property
    def accuracy(self) -> float:
        return self.history[-1]


@dataclass
class RefineResult:
    allocation: Allocation
    qmodel: QuantizedModel
    history: list[float]
    trace: list[TraceRecord]
    stop_reason: str
    recon: dict[int, float]  # final per-layer reconstruction loss


class _ReconCache:
    """Memoized reconstruction losses; they depend only on (layer, bits)."""

    def __init__(self, qmodel: QuantizedModel, layer_inputs):
        self.qmodel = qmodel
        self.inputs = layer_inputs
        self.values: dict[tuple[int, int], ReconMeasurement] = {}

    def get(self, i: int, bits: int) -> ReconMeasurement:
        key = (i, bits)
        if key not in self.values:
            self.values[key] = measure_recon(self.qmodel, i, self.inputs[i], bits)
        return self.values[key]


def refine(
    qmodel: QuantizedModel,
    layer_inputs: Mapping[int, list[np.ndarray]],
    sample_set: Batch,
    inst: IlpInstance,
    table: ReconRatioTable,
    max_iters: int | None = None,
) -> RefineResult:
    """Greedy swap loop; stops on the first swap that does not raise accuracy.

    ``qmodel`` carries the initial allocation, ``layer_inputs`` the cached
    full-precision layer inputs from the calibration data, and ``sample_set``
    is the data on which accuracy decides acceptance. ``max_iters`` defaults to
    the number of layers.
    """
    n = inst.n
    if max_iters is None:
        max_iters = n
    bits = tuple(qmodel.allocation())
    if inst.weight(bits) > inst.capacity:
        raise ValueError("initial allocation exceeds the bit budget")
    if any(b not in inst.bit_set for b in bits):
        raise ValueError("initial allocation uses widths outside the bit set")
    state = RefineState(bits, qmodel, [evaluate(qmodel.base, sample_set, qmodel)], max_iters=max_iters)
    cache = _ReconCache(qmodel, layer_inputs)
    while True:
        if state.iteration >= max_iters:
            state.stop_reason = "max_iters"
            break
        meas = {i: cache.get(i, state.bits[i]) for i in range(n)}
        cand = select_swap(state.bits, meas, table, inst)
        if cand is None:
            state.stop_reason = "no_feasible_swap"
            break
        state.iteration += 1
        u, d = cand.up_layer, cand.down_layer
        trial_bits = list(state.bits)
        trial_bits[u] += 1
        trial_bits[d] -= 1
        trial = state.qmodel.with_bits({u: trial_bits[u], d: trial_bits[d]})
        acc = evaluate(qmodel.base, sample_set, trial)
        accepted = acc > state.accuracy
        state.trace.append(
            TraceRecord(state.iteration, u, d, cand.gain, cand.degradation, state.accuracy, acc, accepted)
        )
        if not accepted:
            state.stop_reason = "no_improvement"
            break
        state.bits, state.qmodel = tuple(trial_bits), trial
        state.history.append(acc)
    recon = {i: cache.get(i, state.bits[i]).loss for i in range(n)}
    alloc = Allocation(state.bits, inst.objective(state.bits), inst.weight(state.bits), inst.total_params)
    return RefineResult(alloc, state.qmodel, state.history, state.trace, state.stop_reason, recon)

