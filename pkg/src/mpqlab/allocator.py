"""Exact bit allocation as a multiple-choice knapsack.

    minimize   sum_i gamma**(-B_i) * omega_i
    subject to sum_i c_i * B_i <= b_t * sum_i c_i,   B_i in bit_set

The budget is compared in integers: ``b_t`` is read as an exact fraction and the
capacity is ``floor(b_t * sum c_i)``. Objectives are summed with ``math.fsum``,
which is order independent, so allocations with the same multiset of terms tie
exactly. Among optimal allocations the lexicographically smallest bit tuple
(in layer order) is returned.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

# relative slack on float lower bounds so that rounding never prunes an optimum
_BOUND_SLACK = 1e-9
# table size up to which the search is seeded by a dynamic program
_DP_CELLS = 10**7


class InfeasibleError(ValueError):
    pass


@dataclass(frozen=True)
class IlpInstance:
    omegas: tuple[float, ...]
    param_counts: tuple[int, ...]
    bit_set: tuple[int, ...]
    target_bits: Fraction
    gamma: float

    def __post_init__(self):
        if len(self.omegas) != len(self.param_counts) or not self.omegas:
            raise ValueError("need one omega and one parameter count per layer")
        if any(not math.isfinite(o) or o < 0 for o in self.omegas):
            raise ValueError("omegas must be finite and non-negative")
        if any(int(c) != c or c < 1 for c in self.param_counts):
            raise ValueError("parameter counts must be positive integers")
        if not self.bit_set or list(self.bit_set) != sorted(set(self.bit_set)) or self.bit_set[0] < 1:
            raise ValueError("bit set must be sorted, distinct and >= 1")
        if not self.gamma > 1:
            raise ValueError("gamma must be > 1")
        if self.target_bits <= 0:
            raise ValueError("target bits must be positive")
        if self.bit_set[0] * self.total_params > self.capacity:
            raise InfeasibleError(
                f"budget {float(self.target_bits)} bits/param is below the smallest width {self.bit_set[0]}"
            )

    @property
    def n(self) -> int:
        return len(self.omegas)

    @property
    def total_params(self) -> int:
        return int(sum(self.param_counts))

    @property
    def capacity(self) -> int:
        """Largest admissible ``sum c_i B_i``."""
        return math.floor(self.target_bits * self.total_params)

    def cost(self, i: int, bits: int) -> float:
        return self.omegas[i] * self.gamma ** (-bits)

    def objective(self, bits: Sequence[int]) -> float:
        return math.fsum(self.cost(i, b) for i, b in enumerate(bits))

    def weight(self, bits: Sequence[int]) -> int:
        return sum(c * b for c, b in zip(self.param_counts, bits))


@dataclass(frozen=True)
class Allocation:
    bits: tuple[int, ...]
    objective: float
    used: int  # sum c_i B_i
    total_params: int

    @property
    def avg_bits(self) -> float:
        return self.used / self.total_params

    def to_dict(self) -> dict:
        return {
            "bits": {str(i): b for i, b in enumerate(self.bits)},
            "avg_bit": self.avg_bits,
            "objective": self.objective,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict, param_counts: Sequence[int]) -> "Allocation":
        bits = tuple(int(d["bits"][str(i)]) for i in range(len(d["bits"])))
        used = sum(c * b for c, b in zip(param_counts, bits))
        return cls(bits, float(d.get("objective", math.nan)), used, int(sum(param_counts)))


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))  # the decimal the user wrote, not the binary float
    return Fraction(x)


def build_instance(omegas, param_counts, bit_set=(2, 3, 4), target_bits=3, gamma: float = 2.0) -> IlpInstance:
    return IlpInstance(
        tuple(float(o) for o in omegas),
        tuple(int(c) for c in param_counts),
        tuple(sorted(int(b) for b in bit_set)),
        _as_fraction(target_bits),
        float(gamma),
    )


def _make_allocation(inst: IlpInstance, bits) -> Allocation:
    bits = tuple(int(b) for b in bits)
    return Allocation(bits, inst.objective(bits), inst.weight(bits), inst.total_params)


# --------------------------------------------------------------------------
# LP relaxation
# --------------------------------------------------------------------------


def _hull(inst: IlpInstance, i: int) -> list[tuple[int, float]]:
    """Lower convex hull of layer i's ``(extra_weight, cost)`` options, left to right.

    Only strictly decreasing vertices are kept, so every hull edge has a
    positive cost decrease and edges come in non-increasing efficiency.
    """
    c = inst.param_counts[i]
    pts = [(c * (b - inst.bit_set[0]), inst.cost(i, b)) for b in inst.bit_set]
    hull = [pts[0]]
    for p in pts[1:]:
        if p[1] >= hull[-1][1]:
            continue
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            # drop hull[-1] if it lies on or above the segment hull[-2] -> p
            if (y2 - y1) * (p[0] - x1) >= (p[1] - y1) * (x2 - x1):
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


class _Solver:
    def __init__(self, inst: IlpInstance):
        self.inst = inst
        # depth-first over layers by descending parameter count
        self.order = sorted(range(inst.n), key=lambda i: (-inst.param_counts[i], i))
        self.hulls = [_hull(inst, i) for i in range(inst.n)]
        self.min_weight = [inst.param_counts[i] * inst.bit_set[0] for i in range(inst.n)]
        # all hull edges, most cost decrease per unit weight first
        self.edges = []
        for i, h in enumerate(self.hulls):
            for k in range(len(h) - 1):
                dx, dy = h[k + 1][0] - h[k][0], h[k][1] - h[k + 1][1]
                self.edges.append((dy / dx, i, k, dx))
        self.edges.sort(key=lambda e: (-e[0], e[1], e[2]))
        self.nodes = 0

    def lower_bound(self, active, room: int) -> float:
        """LP bound for the layers flagged in ``active`` given ``room`` weight beyond their minimum widths.

        Greedy over hull edges by efficiency; each layer's relaxed cost is
        interpolated on its own hull and the layer costs are summed, which
        avoids cancellation between a large base cost and a large total gain.
        """
        pos = {}  # layer -> (hull vertex index, fraction toward the next)
        for _, i, k, dx in self.edges:
            if room <= 0:
                break
            if not active[i]:
                continue
            pos[i] = (k + 1, 0.0) if room >= dx else (k, room / dx)
            room -= dx
        total = []
        for i in range(self.inst.n):
            if not active[i]:
                continue
            h = self.hulls[i]
            k, t = pos.get(i, (0, 0.0))
            total.append(h[k][1] if t == 0.0 else (1.0 - t) * h[k][1] + t * h[k + 1][1])
        return math.fsum(total)

    def incumbent(self) -> tuple[int, ...]:
        """A good feasible allocation to start the search from.

        Dynamic program over the integer budget with weights divided by ``g``
        and rounded up, so every allocation it returns is feasible; ``g`` is 1
        (an exact program, up to float summation) unless the table would be
        too large. The leftover budget is then spent greedily, and a plain
        greedy fill is kept instead if it is better. It only seeds the search
        and never decides the answer.
        """
        inst = self.inst
        base = inst.bit_set[0]
        room = inst.capacity - sum(self.min_weight)
        g = max(1, -(-inst.n * (room + 1) // _DP_CELLS))
        cap = room // g
        best = np.zeros(cap + 1)
        picks = []
        for i in range(inst.n):
            c = inst.param_counts[i]
            nxt = np.full(cap + 1, np.inf)
            arg = np.zeros(cap + 1, dtype=np.int16)
            for k, b in enumerate(inst.bit_set):
                dw = -(-c * (b - base) // g)
                if dw > cap:
                    break
                cand = best[: cap + 1 - dw] + inst.cost(i, b)
                better = cand < nxt[dw:]
                nxt[dw:][better] = cand[better]
                arg[dw:][better] = k
            best = nxt
            picks.append(arg)
        bits, w = [0] * inst.n, cap
        for i in reversed(range(inst.n)):
            bits[i] = inst.bit_set[int(picks[i][w])]
            w -= -(-inst.param_counts[i] * (bits[i] - base) // g)
        if g == 1:
            return tuple(bits)
        return min(self._top_up(bits), self._top_up([base] * inst.n), key=inst.objective)

    def _top_up(self, bits: list[int]) -> tuple[int, ...]:
        """Raise widths one step at a time, best cost decrease per unit weight first."""
        inst = self.inst
        bits = list(bits)
        used = inst.weight(bits)
        while True:
            step = None
            for i in range(inst.n):
                for b in inst.bit_set:
                    dw = inst.param_counts[i] * (b - bits[i])
                    if b <= bits[i] or used + dw > inst.capacity:
                        continue
                    eff = (inst.cost(i, bits[i]) - inst.cost(i, b)) / dw
                    if step is None or eff > step[0]:
                        step = (eff, i, b, dw)
            if step is None:
                return tuple(bits)
            _, i, b, dw = step
            bits[i] = b
            used += dw

    def search(self, target: float | None = None, start=None):
        """Depth-first branch and bound.

        Without ``target`` returns the minimum objective (and one minimiser),
        seeded with the feasible allocation ``start`` if given. With
        ``target``, layers are visited in index order with bit choices
        ascending, so the first completion whose objective equals ``target``
        is the lexicographically smallest one; returns it or None.
        """
        inst = self.inst
        order = list(range(inst.n)) if target is not None else self.order
        best = [math.inf, None] if start is None else [inst.objective(start), tuple(start)]
        assign: dict[int, int] = {}
        active = [True] * inst.n
        sub_suffix = [0] * (len(order) + 1)
        for d in reversed(range(len(order))):
            sub_suffix[d] = sub_suffix[d + 1] + self.min_weight[order[d]]

        def rec(depth: int, used: int, costs: list[float]):
            self.nodes += 1
            if depth == len(order):
                bits = tuple(assign[i] for i in range(inst.n))
                obj = inst.objective(bits)
                if target is not None:
                    return bits if obj == target else None
                if obj < best[0] or (obj == best[0] and bits < best[1]):
                    best[0], best[1] = obj, bits
                return None
            room = inst.capacity - used - sub_suffix[depth]
            bound = math.fsum([*costs, self.lower_bound(active, room)])
            limit = target if target is not None else best[0]
            if bound > limit + _BOUND_SLACK * abs(limit):
                return None
            i = order[depth]
            choices = inst.bit_set if target is not None else reversed(inst.bit_set)
            for b in choices:
                w = inst.param_counts[i] * b
                if used + w + sub_suffix[depth + 1] > inst.capacity:
                    continue
                assign[i] = b
                active[i] = False
                costs.append(inst.cost(i, b))
                found = rec(depth + 1, used + w, costs)
                costs.pop()
                active[i] = True
                del assign[i]
                if found is not None:
                    return found
            return None

        result = rec(0, 0, [])
        if target is not None:
            return result
        return best[0], best[1]


def solve_ilp(inst: IlpInstance) -> Allocation:
    """Exact optimum with the lexicographic tie-break.

    Phase one finds the optimal objective value by branch and bound with an LP
    (convex-hull greedy) bound. Phase two searches again in lexicographic
    order and stops at the first allocation achieving that value.
    """
    solver = _Solver(inst)
    opt, _ = solver.search(start=solver.incumbent())
    if opt is math.inf:
        raise InfeasibleError("no feasible allocation")
    bits = solver.search(target=opt)
    if bits is None:  # pragma: no cover - phase one guarantees a completion exists
        raise RuntimeError("tie-break pass lost the optimum")
    return _make_allocation(inst, bits)


def brute_force_alloc(inst: IlpInstance, max_configs: int = 10**7) -> Allocation:
    """Exhaustive oracle with the same objective arithmetic and tie-break."""
    m = len(inst.bit_set)
    if m**inst.n > max_configs:
        raise ValueError(f"{m}^{inst.n} configurations exceed the limit {max_configs}")
    grid = np.array(list(itertools.product(inst.bit_set, repeat=inst.n)), dtype=np.int64)
    counts = np.array(inst.param_counts, dtype=np.int64)
    feasible = grid[grid @ counts <= inst.capacity]
    if len(feasible) == 0:
        raise InfeasibleError("no feasible allocation")
    omegas = np.array(inst.omegas)
    approx = (omegas * float(inst.gamma) ** (-feasible.astype(np.float64))).sum(axis=1)
    lo = approx.min()
    near = feasible[approx <= lo + 1e-9 * max(abs(lo), 1e-300)]
    best = min((inst.objective(row), tuple(int(b) for b in row)) for row in near)
    return _make_allocation(inst, best[1])
