"""Gaussian quantization-error moments and the reconstruction-error factor k(B).

Weights and activations are modelled as N(0, 1) and quantized on the range
(-3, 3) with the uniform quantizer of :mod:`mpqlab.quantizer`. With
``delta(x) = fake_quant(x) - x``:

* ``e_xd = E[X * delta(X)]`` and ``e_dd = E[delta(X)^2]``, integrated over the
  clipping range (``domain="clip"``, default) or over ``[-tail, tail]`` with the
  saturated tails included (``domain="full"``);
* ``e_xx = E[X^2] = 1``;
* ``k = e_ddW e_xxX + e_xxW e_ddX + e_ddW e_ddX + 2 e_xdW e_xdX + 2 e_xdW e_ddX + 2 e_ddW e_xdX``,
  the expected squared error of one product term ``(dW X + W dX + dW dX)^2`` for
  independent W and X.

The ratio ``k(B-1) / k(B)`` predicts how a layer's reconstruction error changes
when it loses one bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .quantizer import QuantParams, decision_boundaries, fake_quant

ASYMPTOTIC_RATIO = 4.0

# Published reference values, used for side-by-side reporting only.
REFERENCE_MOMENTS = {
    1: (1.396e0, 5.212e0),
    2: (1.655e-2, 3.359e-1),
    3: (7.123e-4, 6.109e-2),
    4: (1.723e-4, 1.330e-2),
    5: (4.123e-5, 3.113e-3),
    6: (1.003e-5, 7.538e-4),
    7: (2.472e-6, 1.855e-4),
    8: (6.134e-7, 4.601e-5),
}
REFERENCE_RECON = {
    1: (1.000e0, None),
    2: (1.209e-2, 82.74),
    3: (1.835e-3, 6.59),
    4: (3.903e-4, 4.70),
    5: (9.093e-5, 4.29),
    6: (2.199e-5, 4.13),
    7: (5.339e-6, 4.12),
    8: (1.324e-6, 4.03),
}

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ExpectationRow:
    bits: int
    e_xx: float
    e_xd: float
    e_dd: float


def gaussian_pdf(x):
    return np.exp(-0.5 * np.asarray(x) ** 2) / _SQRT_2PI


def _grid(bits: int, clip_sigma: float) -> QuantParams:
    return QuantParams(bits, -clip_sigma, clip_sigma)


def _pieces(p: QuantParams, lo: float, hi: float) -> list[tuple[float, float]]:
    cuts = [float(c) for c in decision_boundaries(p) if lo < c < hi]
    edges = [lo, *cuts, hi]
    return list(zip(edges[:-1], edges[1:]))


def gaussian_expectations(
    bits: int, clip_sigma: float = 3.0, domain: str = "clip", tail: float = 8.0, nodes: int = 32
) -> ExpectationRow:
    """``E[X delta]`` and ``E[delta^2]`` by Gauss-Legendre quadrature per code cell.

    delta is piecewise linear between decision boundaries, so each cell's
    integrand is smooth and a fixed rule per cell is accurate to roundoff.
    """
    p = _grid(bits, clip_sigma)
    if domain == "clip":
        lo, hi = -clip_sigma, clip_sigma
    elif domain == "full":
        lo, hi = -max(tail, clip_sigma), max(tail, clip_sigma)
    else:
        raise ValueError("domain must be 'clip' or 'full'")
    t, w = np.polynomial.legendre.leggauss(nodes)
    e_xd = e_dd = 0.0
    for a, b in _pieces(p, lo, hi):
        x = 0.5 * (b - a) * t + 0.5 * (a + b)
        weights = 0.5 * (b - a) * w * gaussian_pdf(x)
        delta = fake_quant(x, p) - x
        e_xd += float(np.sum(weights * x * delta))
        e_dd += float(np.sum(weights * delta * delta))
    return ExpectationRow(bits, 1.0, e_xd, e_dd)


@dataclass(frozen=True)
class MonteCarloRow:
    row: ExpectationRow
    se_xd: float
    se_dd: float
    samples: int


def monte_carlo_expectations(
    bits: int, samples: np.ndarray, clip_sigma: float = 3.0, domain: str = "clip"
) -> MonteCarloRow:
    """Sample-mean estimate of the same moments from standard-normal draws.

    In the clip domain samples outside the range contribute zero, matching the
    truncated integrals of :func:`gaussian_expectations`.
    """
    p = _grid(bits, clip_sigma)
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    if domain == "clip":
        kept = x[np.abs(x) <= clip_sigma]
    elif domain == "full":
        kept = x
    else:
        raise ValueError("domain must be 'clip' or 'full'")
    delta = fake_quant(kept, p)
    delta -= kept
    xd = kept * delta
    dd = delta * delta

    def mean_se(v):
        # zeros for the dropped samples are implicit in dividing by n
        m = float(v.sum()) / n
        var = max(float(np.dot(v, v)) / n - m * m, 0.0)
        return m, math.sqrt(var / n)

    m_xd, se_xd = mean_se(xd)
    m_dd, se_dd = mean_se(dd)
    row = ExpectationRow(bits, float(np.dot(x, x)) / n, m_xd, m_dd)
    return MonteCarloRow(row, se_xd, se_dd, n)


def k_value(row_w: ExpectationRow, row_x: ExpectationRow) -> float:
    return (
        row_w.e_dd * row_x.e_xx
        + row_w.e_xx * row_x.e_dd
        + row_w.e_dd * row_x.e_dd
        + 2.0 * row_w.e_xd * row_x.e_xd
        + 2.0 * row_w.e_xd * row_x.e_dd
        + 2.0 * row_w.e_dd * row_x.e_xd
    )


@dataclass
class ReconRatioTable:
    bits: list[int]
    rows: dict[int, ExpectationRow]
    k: dict[int, float]
    ratio: dict[int, float] = field(default_factory=dict)  # bits -> k(bits-1)/k(bits)

    @property
    def normalized(self) -> dict[int, float]:
        first = self.k[self.bits[0]]
        return {b: self.k[b] / first for b in self.bits}

    def neighbor_ratio(self, bits_from: int, bits_to: int) -> float | None:
        """Predicted ``L(bits_to) / L(bits_from)`` for a one-bit move.

        Moves beyond the top of the table use the asymptotic factor 4; moves
        below its bottom are unavailable (None).
        """
        if abs(bits_to - bits_from) != 1:
            raise ValueError("only single-bit moves are tabulated")
        lo, hi = self.bits[0], self.bits[-1]
        if bits_to < lo or bits_from < lo:
            return None
        if bits_from in self.k and bits_to in self.k:
            return self.k[bits_to] / self.k[bits_from]
        # outside the table the error shrinks 4x per added bit
        return ASYMPTOTIC_RATIO ** (bits_from - bits_to)

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "rows": {str(b): asdict(r) for b, r in self.rows.items()},
            "k": {str(b): v for b, v in self.k.items()},
            "normalized": {str(b): v for b, v in self.normalized.items()},
            "ratio": {str(b): v for b, v in self.ratio.items()},
        }


def recon_ratio_table(bits=range(1, 9), clip_sigma: float = 3.0, domain: str = "clip") -> ReconRatioTable:
    bits = sorted(int(b) for b in bits)
    if not bits or bits != list(range(bits[0], bits[-1] + 1)):
        raise ValueError("bit range must be non-empty and contiguous")
    rows = {b: gaussian_expectations(b, clip_sigma, domain) for b in bits}
    k = {b: k_value(rows[b], rows[b]) for b in bits}
    ratio = {b: k[b - 1] / k[b] for b in bits[1:]}
    return ReconRatioTable(bits, rows, k, ratio)


@dataclass(frozen=True)
class RatioCheck:
    bits: int
    measured: float  # median over trials of L(B-1)/L(B); nan if undefined
    predicted: float
    trials: tuple[float, ...]
    defined: bool


def empirical_ratio_check(
    rng: np.random.Generator,
    bits: int,
    dims: tuple[int, int, int] = (32, 32, 32),
    trials: int = 20,
    clip_sigma: float = 3.0,
    table: ReconRatioTable | None = None,
) -> RatioCheck:
    """Measure ``L(B-1)/L(B)`` on random Gaussian layers and compare with the table.

    ``dims = (out, in, tokens)``. Both tensors use the fixed range
    ``(-clip_sigma, clip_sigma)``. A trial whose B-bit error is exactly zero has
    no defined ratio and marks the result undefined. Widths beyond the table are
    predicted with the asymptotic factor.
    """
    from .refiner import relative_recon_error

    if bits < 2:
        raise ValueError("need bits >= 2 to compare against bits - 1")
    table = table or recon_ratio_table(range(1, 9), clip_sigma)
    out_dim, in_dim, tokens = dims
    values = []
    defined = True
    for _ in range(trials):
        w = rng.standard_normal((out_dim, in_dim))
        x = rng.standard_normal((tokens, in_dim))
        lo = relative_recon_error(w, x, _grid(bits - 1, clip_sigma), _grid(bits - 1, clip_sigma))
        hi = relative_recon_error(w, x, _grid(bits, clip_sigma), _grid(bits, clip_sigma))
        if hi == 0.0:
            defined = False
            values.append(math.nan)
        else:
            values.append(lo / hi)
    measured = float(np.median(values)) if defined else math.nan
    return RatioCheck(bits, measured, table.neighbor_ratio(bits, bits - 1), tuple(values), defined)
