"""Analytical prefill FLOPs for pruned runs, in exact integer arithmetic."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

TERA = 10**12


def _frac(x) -> Fraction:
    if isinstance(x, str):
        return Fraction(x)
    return Fraction(x).limit_denominator(10**9) if isinstance(x, float) else Fraction(x)


def round_half_up(x: Fraction) -> int:
    return int((x + Fraction(1, 2)).__floor__())


@dataclass(frozen=True)
class CostInputs:
    T: int
    d: int
    m: int
    n_v: int
    n_t: int
    K: int = 0
    D: Fraction = Fraction(0)
    R: int = 0
    Z: int = 0
    r: Fraction = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, "D", _frac(self.D))
        object.__setattr__(self, "r", _frac(self.r))
        for name in ("T", "d", "m", "n_v", "n_t", "K", "R", "Z"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer")
        if not 0 <= self.D <= 1:
            raise ValueError("D must lie in [0, 1]")
        if self.K > self.T:
            raise ValueError("K may not exceed T")
        if self.Z > self.R:
            raise ValueError("Z may not exceed R")

    @property
    def n(self) -> int:
        return self.n_v + self.n_t

    @property
    def n_hat(self) -> int:
        """Post-pruning token count, rounded half-up to an integer."""
        return round_half_up((1 - self.D) * self.n_v + self.n_t)

    @classmethod
    def from_dict(cls, d: dict) -> "CostInputs":
        known = {"T", "d", "m", "n_v", "n_t", "K", "D", "R", "Z", "r"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown cost fields: {sorted(unknown)}")
        return cls(**d)


def layer_flops(n: int, d: int, m: int) -> int:
    """Per-layer cost 4nd^2 + 2n^2 d + 3ndm."""
    for name, v in (("n", n), ("d", d), ("m", m)):
        if int(v) != v or v < 0:
            raise ValueError(f"{name} must be a non-negative integer")
    n, d, m = int(n), int(d), int(m)
    return 4 * n * d * d + 2 * n * n * d + 3 * n * d * m


def total_flops(inputs: CostInputs) -> int:
    """K layers over all tokens, the remaining T-K over the pruned count."""
    c = inputs
    return c.K * layer_flops(c.n, c.d, c.m) + (c.T - c.K) * layer_flops(c.n_hat, c.d, c.m)


def bypass_overhead(inputs: CostInputs) -> int:
    """Extra work of one bypass stage: grouping, alignment and query/key rescoring."""
    c = inputs
    if not 0 <= c.r <= 1:
        raise ValueError("r must lie in [0, 1]")
    fo = (2 * c.R * c.Z * c.d + c.R * c.d + 2 * c.n_v * c.d + 2 * c.d * c.d
          + 2 * (1 - c.r) * c.n_v * c.d * c.d)
    return round_half_up(Fraction(fo))


def schedule_flops(T: int, d: int, m: int, n_v: int, n_t: int, schedule) -> dict:
    """Piecewise cost of a multi-stage schedule.

    A stage at layer ``s`` reduces the pool before layer ``s`` runs, so
    layers ``1..s-1`` see the earlier count. Keep ratios apply to each
    stage's candidate pool: the previous survivors for drop and merge, the
    survivors plus the restored tokens after a bypass stage. Merged tokens
    are not charged. Every non-final bypass stage adds one overhead term.
    """
    from .pruning import topk_count

    stages = list(schedule.stages)
    base = overhead = 0
    layer, visual, pool = 1, n_v, n_v
    for i, s in enumerate(stages):
        base += (s.layer - layer) * layer_flops(visual + n_t, d, m)
        layer = s.layer
        kept = topk_count(pool, s.keep_ratio)
        nxt = stages[i + 1] if i + 1 < len(stages) else None
        if s.strategy == "bypass" and nxt is not None:
            R = pool - kept
            Z = R if s.merge_budget is None else min(s.merge_budget, R)
            r = Fraction(topk_count(pool, nxt.keep_ratio), pool)
            overhead += bypass_overhead(CostInputs(T, d, m, pool, n_t, R=R, Z=Z, r=r))
        else:
            pool = kept
        visual = kept
    base += (T + 1 - layer) * layer_flops(visual + n_t, d, m)
    return {"base": base, "overhead": overhead, "flops": base + overhead}


def tera_string(flops: int, digits: int = 6) -> str:
    """Decimal string of ``flops / 1e12`` without float rounding."""
    q = Fraction(flops, TERA)
    scaled = round_half_up(q * 10**digits)
    sign = "-" if scaled < 0 else ""
    scaled = abs(scaled)
    return f"{sign}{scaled // 10**digits}.{scaled % 10**digits:0{digits}d}"


def matmul_flop_count(n: int, d: int, m: int, gated: bool = False) -> int:
    """Count 2*rows*inner*cols over each matmul of one dense block.

    Four d x d projections, QK^T and AV, and the FFN (two matmuls, or
    three when ``gated``).
    """
    mm = lambda rows, inner, cols: 2 * rows * inner * cols  # noqa: E731
    total = 4 * mm(n, d, d)
    total += mm(n, d, n) + mm(n, n, d)
    ffn = [mm(n, d, m), mm(n, m, d)]
    if gated:
        ffn.append(mm(n, d, m))
    return total + sum(ffn)
