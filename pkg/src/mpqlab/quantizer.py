"""Asymmetric uniform fake quantization, per tensor.

For a range ``(r_min, r_max)`` and ``B`` bits::

    s = (r_max - r_min) / (2**B - 1)
    z = r_min / s + 2**(B - 1)
    q = clamp(floor(x / s - z + 0.5), -2**(B-1), 2**(B-1) - 1)
    x_hat = s * (q + z)

Rounding is literally floor(. + 0.5), so exact half-way points round up, also
for negative values. Integer codes are clamped so out-of-range inputs saturate
at the range endpoints. ``B >= 32`` is treated as full precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

FULL_PRECISION_BITS = 32


@dataclass(frozen=True)
class QuantParams:
    bits: int
    r_min: float
    r_max: float

    def __post_init__(self):
        if int(self.bits) != self.bits or self.bits < 1:
            raise ValueError(f"bits must be a positive integer, got {self.bits}")
        if not (math.isfinite(self.r_min) and math.isfinite(self.r_max)) or not self.r_min < self.r_max:
            raise ValueError(f"invalid range ({self.r_min}, {self.r_max})")

    @property
    def levels(self) -> int:
        return 2**self.bits - 1

    @property
    def scale(self) -> float:
        return (self.r_max - self.r_min) / self.levels

    @property
    def offset(self) -> float:
        return self.r_min / self.scale + 2 ** (self.bits - 1)

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    def with_bits(self, bits: int) -> "QuantParams":
        return QuantParams(bits, self.r_min, self.r_max)

    def to_dict(self) -> dict:
        return {"bits": self.bits, "r_min": self.r_min, "r_max": self.r_max, "scale": self.scale, "offset": self.offset}


class RangeObserver:
    """Running min/max over a stream of tensors."""

    def __init__(self):
        self.lo = math.inf
        self.hi = -math.inf
        self.count = 0

    def update(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            return
        self.lo = min(self.lo, float(values.min()))
        self.hi = max(self.hi, float(values.max()))
        self.count += values.size

    def range(self) -> tuple[float, float]:
        if self.count == 0:
            raise ValueError("cannot calibrate a range from an empty stream")
        if self.lo == self.hi:
            eps = max(abs(self.lo), 1.0) * 2.0**-20
            return self.lo - eps, self.hi + eps
        return self.lo, self.hi


def calibrate_range(values: Iterable[np.ndarray] | np.ndarray) -> tuple[float, float]:
    """Min/max over a tensor or an iterable of tensors, widened if degenerate."""
    obs = RangeObserver()
    if isinstance(values, np.ndarray):
        obs.update(values)
    else:
        for v in values:
            obs.update(v)
    return obs.range()


def _codes(m, p: QuantParams) -> np.ndarray:
    # integer-valued float64 codes; exact for every B < 53
    q = np.floor(np.asarray(m, dtype=np.float64) / p.scale - p.offset + 0.5)
    return np.clip(q, p.qmin, p.qmax, out=q)


def quantize(m: np.ndarray, p: QuantParams) -> np.ndarray:
    return _codes(m, p).astype(np.int64)


def dequantize(q: np.ndarray, p: QuantParams) -> np.ndarray:
    """``s * (q + z)``, evaluated as an endpoint-exact interpolation.

    Algebraically ``s*(q + z) = r_min + (q - qmin) * s``; writing it as
    ``(1 - t) * r_min + t * r_max`` with ``t = (q - qmin) / (2**B - 1)`` makes
    both range endpoints reproduce bit-exactly.
    """
    t = (np.asarray(q, dtype=np.float64) - p.qmin) / p.levels
    return (1.0 - t) * p.r_min + t * p.r_max


def fake_quant(m: np.ndarray, p: QuantParams) -> np.ndarray:
    if p.bits >= FULL_PRECISION_BITS:
        return np.array(m, dtype=np.float64, copy=True)
    return dequantize(_codes(m, p), p)


def codebook(p: QuantParams) -> np.ndarray:
    return dequantize(np.arange(p.qmin, p.qmax + 1), p)


def decision_boundaries(p: QuantParams) -> np.ndarray:
    """Inputs where the code steps from ``j`` to ``j + 1`` (right-continuous)."""
    j = np.arange(p.qmin, p.qmax)
    return p.scale * (j + p.offset + 0.5)


# --------------------------------------------------------------------------
# whole-model quantization
# --------------------------------------------------------------------------


class QuantizedModel:
    """A full-precision model plus per-layer bit-widths and calibrated ranges.

    Weight ranges come from the weight tensors, activation ranges from the
    layer inputs seen during a full-precision pass over the calibration data.
    One bit-width per layer applies to both its weight and its input.
    Instances are used as the ``quant`` hook of :func:`mpqlab.model.forward`.
    """

    def __init__(self, base, bits: Mapping[int, int], weight_ranges, act_ranges):
        missing = [i for i in range(base.num_layers) if i not in bits]
        if missing:
            raise KeyError(f"allocation is missing layers {missing}")
        self.base = base
        self.bits = {i: int(bits[i]) for i in range(base.num_layers)}
        self.weight_ranges = dict(weight_ranges)
        self.act_ranges = dict(act_ranges)
        self._wq: dict[int, np.ndarray] = {}
        for i in range(base.num_layers):
            self._requantize(i)

    def _requantize(self, i: int) -> None:
        self._wq[i] = fake_quant(self.base.layer(i).weight, self.weight_params(i))

    def weight_params(self, i: int) -> QuantParams:
        return QuantParams(self.bits[i], *self.weight_ranges[i])

    def act_params(self, i: int) -> QuantParams:
        return QuantParams(self.bits[i], *self.act_ranges[i])

    # forward hook interface
    def weight(self, i: int) -> np.ndarray:
        return self._wq[i]

    def act(self, i: int, x: np.ndarray) -> np.ndarray:
        return fake_quant(x, self.act_params(i))

    def with_bits(self, changes: Mapping[int, int]) -> "QuantizedModel":
        """Copy with some layers moved to new bit-widths; only those are re-quantized."""
        new = object.__new__(QuantizedModel)
        new.base = self.base
        new.bits = dict(self.bits)
        new.bits.update({int(i): int(b) for i, b in changes.items()})
        new.weight_ranges = self.weight_ranges
        new.act_ranges = self.act_ranges
        new._wq = dict(self._wq)
        for i in changes:
            new._requantize(int(i))
        return new

    def allocation(self) -> list[int]:
        return [self.bits[i] for i in range(self.base.num_layers)]


def collect_layer_inputs(model, calib, batch_size: int = 256):
    """Full-precision inputs of every quantizable layer, flattened to (tokens, in_dim) per chunk."""
    from .model import forward

    out: dict[int, list[np.ndarray]] = {i: [] for i in range(model.num_layers)}
    for chunk in _as_chunks(calib, batch_size):
        _, cache = forward(model, chunk)
        for i, x in cache.layer_inputs.items():
            out[i].append(x.reshape(-1, x.shape[-1]))
    return out


def _as_chunks(calib, batch_size):
    inputs = getattr(calib, "inputs", calib)
    if isinstance(inputs, np.ndarray):
        if len(inputs) == 0:
            raise ValueError("calibration stream is empty")
        for i in range(0, len(inputs), batch_size):
            yield inputs[i : i + batch_size]
    else:
        seen = False
        for item in inputs:
            seen = True
            yield getattr(item, "inputs", item)
        if not seen:
            raise ValueError("calibration stream is empty")


def activation_ranges(model, calib) -> dict[int, tuple[float, float]]:
    acts = collect_layer_inputs(model, calib)
    return {i: calibrate_range(xs) for i, xs in acts.items()}


def weight_ranges(model) -> dict[int, tuple[float, float]]:
    return {r.layer_id: calibrate_range(r.weight) for r in model.layers}


def quantize_model(model, alloc, calib, act_ranges: dict | None = None) -> QuantizedModel:
    """Quantize every layer of ``model`` at its allocated bit-width.

    ``alloc`` is a sequence of bits indexed by layer id, a ``{layer_id: bits}``
    mapping, or anything with a ``bits`` attribute of either form.
    ``act_ranges`` may be passed to reuse an earlier calibration.
    """
    bits = getattr(alloc, "bits", alloc)
    if not isinstance(bits, Mapping):
        bits = dict(enumerate(bits))
    if act_ranges is None:
        act_ranges = activation_ranges(model, calib)
    return QuantizedModel(model, bits, weight_ranges(model), act_ranges)
