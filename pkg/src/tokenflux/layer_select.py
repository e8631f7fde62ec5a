"""Pruning-layer selection from a per-layer selection-capability profile.

The objective for a set of pruning layers ``i_1 < ... < i_K`` is the
area under the step function that holds ``x_2`` until ``i_1`` and then
the score of the most recent pruning layer, normalized by ``L - 2``.
The search runs in exact rational arithmetic, so ties are real ties and
the optimizer and the brute-force oracle agree bit for bit.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .metrics import fidelity
from .model import ModelWeights, TokenSequence, forward_full
from .pruning import run_with_fixed_selection, select_topk_tokens

FIRST_ELIGIBLE = 3
EXHAUSTIVE_LIMIT = 20


@dataclass(frozen=True)
class PerformanceProfile:
    """Scores ``x_1..x_L``; ``scores[0]`` is layer 1."""

    scores: tuple
    metadata: tuple = ()

    def __post_init__(self):
        scores = tuple(float(x) for x in self.scores)
        object.__setattr__(self, "scores", scores)
        if len(scores) < 3:
            raise ValueError("a profile needs at least 3 layers")
        if not all(np.isfinite(scores)):
            raise ValueError("profile scores must be finite")

    @property
    def L(self) -> int:
        return len(self.scores)

    def x(self, layer: int) -> float:
        return self.scores[layer - 1]


@dataclass(frozen=True)
class SelectionResult:
    layers: tuple
    objective: float
    budget: int

    def to_dict(self) -> dict:
        return {"layers": list(self.layers), "objective": self.objective, "budget": self.budget}


def _as_profile(profile) -> PerformanceProfile:
    return profile if isinstance(profile, PerformanceProfile) else PerformanceProfile(tuple(profile))


def eligible_layers(profile) -> list:
    """Layers ``i >= 3`` whose score strictly exceeds every earlier score."""
    p = _as_profile(profile)
    out = []
    best = max(p.scores[:FIRST_ELIGIBLE - 1])
    for i in range(FIRST_ELIGIBLE, p.L + 1):
        xi = p.x(i)
        if xi > best:
            out.append(i)
        best = max(best, xi)
    return out


def _area(p: PerformanceProfile, layers) -> Fraction:
    pts = [2, *layers, p.L]
    return sum((Fraction(p.x(a)) * (b - a) for a, b in zip(pts, pts[1:])), Fraction(0))


def objective(profile, layers) -> float:
    """Normalized step-function area for a sorted set of pruning layers."""
    p = _as_profile(profile)
    return float(_area(p, layers) / (p.L - 2))


def optimal_pruning_layers(profile, budget: int) -> SelectionResult:
    """DP over (last chosen layer, layers used); at most ``budget`` layers.

    ``best[c][j]`` is the largest area up to layer ``j`` with ``c`` layers
    chosen and ``j`` the latest; among equal areas the lexicographically
    smallest prefix is kept, which is safe because the tail that follows
    depends only on ``j``.
    """
    p = _as_profile(profile)
    if budget < 0:
        raise ValueError("budget must be non-negative")
    elig = eligible_layers(p)
    L = p.L
    x = {i: Fraction(p.x(i)) for i in range(1, L + 1)}

    # state key: last chosen layer (2 = none yet); value: (area so far up to that layer, chosen tuple)
    layer_states = {2: (Fraction(0), ())}
    candidates = [(x[2] * (L - 2), ())]
    for _ in range(min(budget, len(elig))):
        nxt = {}
        for j in elig:
            best = None
            for prev, (area, chosen) in layer_states.items():
                if prev >= j:
                    continue
                val = (area + x[prev] * (j - prev), chosen + (j,))
                if best is None or _better(val, best):
                    best = val
            if best is not None:
                nxt[j] = best
        if not nxt:
            break
        layer_states = nxt
        for j, (area, chosen) in nxt.items():
            candidates.append((area + x[j] * (L - j), chosen))
    area, chosen = candidates[0]
    for cand in candidates[1:]:
        if _better(cand, (area, chosen)):
            area, chosen = cand
    return SelectionResult(chosen, float(area / (L - 2)), budget)


def _better(a, b) -> bool:
    return a[0] > b[0] or (a[0] == b[0] and a[1] < b[1])


def exhaustive_selector(profile, budget: int) -> SelectionResult:
    """Enumerate every eligible subset of size <= budget (test oracle)."""
    p = _as_profile(profile)
    if budget < 0:
        raise ValueError("budget must be non-negative")
    elig = eligible_layers(p)
    if len(elig) > EXHAUSTIVE_LIMIT:
        raise ValueError(f"{len(elig)} eligible layers exceeds the enumeration guard of {EXHAUSTIVE_LIMIT}")
    best = None
    for k in range(0, min(budget, len(elig)) + 1):
        for subset in itertools.combinations(elig, k):
            val = (_area(p, subset), subset)
            if best is None or _better(val, best):
                best = val
    return SelectionResult(best[1], float(best[0] / (p.L - 2)), budget)


def profile_selection_capability(seq: TokenSequence, weights: ModelWeights, retain: float,
                                 metric=None, placeholder: str = "floor",
                                 epsilon: float = 1e-6) -> PerformanceProfile:
    """Per-layer capability: keep only layer-l's top tokens from layer 3 on.

    For each layer ``l >= 3`` the model is re-run with every token through
    layer 2 and, from layer 3 onward, only the top ``retain`` fraction of
    visual tokens by the vanilla layer-``l`` ranking. ``x_l`` is
    ``metric(reduced_final_states, vanilla_final_states)``.

    Layers 1-2 get a placeholder: ``"floor"`` (default) puts them
    ``epsilon`` below the lowest measured score so they never block
    eligibility; ``"vanilla"`` uses the vanilla self-score minus
    ``epsilon``.
    """
    if not 0.0 < retain <= 1.0:
        raise ValueError("retain must be in (0, 1]")
    metric = metric or (lambda reduced, vanilla: fidelity(reduced[-1], vanilla[-1]))
    final, trace = forward_full(seq, weights, trace=True)
    L = weights.config.num_layers
    xs = []
    for li in range(FIRST_ELIGIBLE, L + 1):
        keep, _ = select_topk_tokens(trace.scores[li], retain, trace.score_positions[li])
        reduced = run_with_fixed_selection(seq, weights, FIRST_ELIGIBLE, keep)
        xs.append(float(metric(reduced, final)))
    if placeholder == "floor":
        ph = min(xs) - epsilon
    elif placeholder == "vanilla":
        ph = float(metric(final, final)) - epsilon
    else:
        raise ValueError("placeholder must be 'floor' or 'vanilla'")
    meta = (("retain", retain), ("placeholder", placeholder), ("epsilon", epsilon))
    return PerformanceProfile((ph, ph, *xs), meta)


def normalize_profiles(profiles) -> PerformanceProfile:
    """Min-max each profile to [0, 1] over layers >= 3, then average layer-wise."""
    profiles = [_as_profile(p) for p in profiles]
    if not profiles:
        raise ValueError("no profiles to pool")
    L = profiles[0].L
    if any(p.L != L for p in profiles):
        raise ValueError("profiles differ in length")
    rows = []
    for p in profiles:
        a = np.array(p.scores)
        lo, hi = a[2:].min(), a[2:].max()
        span = hi - lo
        rows.append((a - lo) / span if span > 0 else np.zeros_like(a))
    return PerformanceProfile(tuple(np.mean(rows, axis=0)), (("normalization", "min-max"),))
