"""Visual-token reduction strategies run as a schedule of stages.

A stage at layer ``s`` ranks the current candidate visual tokens by the
last text token's attention in layer ``s`` (computed on the states
entering layer ``s``) and reduces the pool before layer ``s`` runs:

* ``drop``   - unselected tokens are removed for good.
* ``merge``  - unselected tokens are grouped by cosine similarity and each
  group is replaced by its mean token, which stays until the end.
* ``bypass`` - like merge, but the members' states are frozen on a side
  path. At the next stage the merged tokens' accumulated change is added
  back onto their members, the members rejoin the candidate pool, and the
  merged tokens are discarded. At the final stage bypass behaves as drop.

Position ids are never reassigned; a merged token takes the lowest
position id of its group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import (
    TEXT,
    VISUAL,
    LayerTrace,
    LayerWeights,
    ModelConfig,
    ModelWeights,
    TokenSequence,
    forward_layer,
    last_token_attention,
)
from .numerics import cosine_matrix

STRATEGIES = ("drop", "merge", "bypass")


class BypassConsistencyError(RuntimeError):
    """A bypassed group's merged token went missing before restoration."""


@dataclass(frozen=True)
class Stage:
    layer: int
    keep_ratio: float
    strategy: str = "drop"
    merge_budget: Optional[int] = None  # None means one group per unselected token

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not (0.0 < self.keep_ratio <= 1.0):
            raise ValueError(f"keep_ratio must be in (0, 1], got {self.keep_ratio}")
        if self.merge_budget is not None and (int(self.merge_budget) != self.merge_budget or self.merge_budget < 1):
            raise ValueError("merge_budget must be a positive integer or null")

    def to_dict(self) -> dict:
        return {"layer": self.layer, "keep_ratio": self.keep_ratio,
                "merge_budget": self.merge_budget, "strategy": self.strategy}


@dataclass(frozen=True)
class PruneSchedule:
    stages: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        layers = [s.layer for s in self.stages]
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ValueError("stage layers must be strictly increasing")
        if layers and layers[0] < 3:
            raise ValueError("stages may not start before layer 3")

    def validate_for(self, config: ModelConfig) -> None:
        for s in self.stages:
            if s.layer > config.num_layers:
                raise ValueError(f"stage layer {s.layer} exceeds num_layers={config.num_layers}")

    def with_strategy(self, strategy: str) -> "PruneSchedule":
        return PruneSchedule(tuple(Stage(s.layer, s.keep_ratio, strategy, s.merge_budget) for s in self.stages))

    def keep_counts(self, n_visual: int) -> list:
        """Candidate and kept counts per stage under drop semantics."""
        out, n = [], n_visual
        for s in self.stages:
            k = topk_count(n, s.keep_ratio)
            out.append((n, k))
            n = k
        return out

    def to_dict(self) -> dict:
        return {"stages": [s.to_dict() for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "PruneSchedule":
        stages = []
        for raw in d.get("stages", []):
            unknown = set(raw) - {"layer", "keep_ratio", "merge_budget", "strategy"}
            if unknown:
                raise ValueError(f"unknown stage fields: {sorted(unknown)}")
            stages.append(Stage(int(raw["layer"]), float(raw["keep_ratio"]),
                                raw.get("strategy", "drop"), raw.get("merge_budget")))
        return cls(tuple(stages))


def geometric_keep_ratios(n_visual: int, target: int, num_stages: int) -> list:
    """Equal per-stage keep ratios whose ceil-chained counts end exactly at ``target``."""
    if not 1 <= target <= n_visual or num_stages < 1:
        raise ValueError("need 1 <= target <= n_visual and num_stages >= 1")
    r = (target / n_visual) ** (1.0 / num_stages)
    ratios, n = [], n_visual
    for _ in range(num_stages - 1):
        ratios.append(r)
        n = topk_count(n, r)
    ratios.append(target / n)
    return ratios


def topk_count(n: int, keep_ratio: float) -> int:
    # Guard ceil against float noise such as 0.5 * 6 = 3.0000000000000004.
    return min(n, math.ceil(round(keep_ratio * n, 9)))


def select_topk_tokens(scores, keep_ratio: float, positions=None):
    """Split candidates into (selected, unselected) position arrays, both ascending.

    Keeps ``ceil(keep_ratio * count)`` highest scores; ties go to the lower
    position id.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not (0.0 < keep_ratio <= 1.0):
        raise ValueError("keep_ratio must be in (0, 1]")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    positions = np.arange(scores.size) if positions is None else np.asarray(positions, dtype=np.int64)
    if positions.shape != scores.shape:
        raise ValueError("scores and positions differ in length")
    if scores.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    k = topk_count(scores.size, keep_ratio)
    order = np.lexsort((positions, -scores))
    chosen = np.zeros(scores.size, dtype=bool)
    chosen[order[:k]] = True
    return np.sort(positions[chosen]), np.sort(positions[~chosen])


@dataclass
class TokenGroup:
    group_id: int
    members: np.ndarray
    frozen: np.ndarray
    merged_position: int
    merged_state: np.ndarray


@dataclass
class BypassState:
    groups: list
    origin_layer: int

    @property
    def proxy_positions(self) -> list:
        return [g.merged_position for g in self.groups]


def group_tokens(states, positions, merge_budget: int) -> list:
    """Farthest-point seeding on cosine similarity, then nearest-seed assignment.

    Returns exactly ``merge_budget`` groups ordered by seed position.
    """
    states = np.asarray(states, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64)
    R = positions.size
    if R == 0:
        return []
    if merge_budget < 1 or merge_budget > R:
        raise ValueError(f"merge budget {merge_budget} outside 1..{R}")
    order = np.argsort(positions, kind="stable")
    states, positions = states[order], positions[order]

    sims = cosine_matrix(states, states)
    seeds = [0]
    max_sim = sims[0].copy()
    taken = np.zeros(R, dtype=bool)
    taken[0] = True
    while len(seeds) < merge_budget:
        cand = np.where(taken, np.inf, max_sim)
        nxt = int(np.argmin(cand))  # argmin returns the lowest index on ties
        seeds.append(nxt)
        taken[nxt] = True
        max_sim = np.maximum(max_sim, sims[nxt])
    seeds.sort()

    assign = np.argmax(sims[:, seeds], axis=1)  # first max wins, seeds are position-sorted
    for gi, s in enumerate(seeds):
        assign[s] = gi

    groups = []
    for gi in range(len(seeds)):
        idx = np.flatnonzero(assign == gi)
        frozen = states[idx].copy()
        groups.append(
            TokenGroup(gi, positions[idx].copy(), frozen, int(positions[idx].min()), frozen.mean(axis=0))
        )
    return groups


def merge_groups(groups) -> tuple:
    """Merged tokens as ``(positions, states)``; states are the member means."""
    if not groups:
        return np.zeros(0, dtype=np.int64), None
    pos = np.array([g.merged_position for g in groups], dtype=np.int64)
    states = np.stack([g.frozen.mean(axis=0) for g in groups])
    return pos, states


def align_bypassed_tokens(state: BypassState, merged_now) -> tuple:
    """Add each group's merged-token offset onto its frozen members.

    ``merged_now`` maps merged position id to that token's current state.
    Returns ``(positions, restored_states)`` sorted by position.
    """
    pos_out, st_out = [], []
    for g in state.groups:
        if g.merged_position not in merged_now:
            raise BypassConsistencyError(f"merged token {g.merged_position} of group {g.group_id} is not live")
        offset = np.asarray(merged_now[g.merged_position]) - g.merged_state
        pos_out.append(g.members)
        st_out.append(g.frozen + offset)
    if not pos_out:
        return np.zeros(0, dtype=np.int64), None
    pos = np.concatenate(pos_out)
    st = np.concatenate(st_out)
    order = np.argsort(pos)
    return pos[order], st[order]


def rescore_bypassed(candidate_positions, candidate_states, context_positions, context_states,
                     layer: LayerWeights, config: ModelConfig, pre_rope: bool = False) -> np.ndarray:
    """Layer-``y`` T-V scores for the candidate pool.

    Candidates and context (text tokens and any persisting merged tokens)
    are interleaved by position id; the last context token is the query.
    Scores are the query's head-averaged attention restricted to candidate
    columns, in candidate order.
    """
    cpos = np.asarray(candidate_positions, dtype=np.int64)
    xpos = np.asarray(context_positions, dtype=np.int64)
    if cpos.size == 0:
        return np.zeros(0)
    pos = np.concatenate([cpos, xpos])
    st = np.concatenate([np.asarray(candidate_states), np.asarray(context_states)])
    is_cand = np.concatenate([np.ones(cpos.size, bool), np.zeros(xpos.size, bool)])
    order = np.argsort(pos, kind="stable")
    if np.any(np.diff(pos[order]) == 0):
        raise BypassConsistencyError("duplicate position ids in rescoring pool")
    if is_cand[order][-1]:
        raise ValueError("the query token must come last")
    row = last_token_attention(st[order], layer, pos[order], config, pre_rope)
    scores_sorted = row[is_cand[order]]
    # map back to the caller's candidate order
    cand_sorted_pos = pos[order][is_cand[order]]
    back = {int(p): s for p, s in zip(cand_sorted_pos, scores_sorted)}
    return np.array([back[int(p)] for p in cpos])


@dataclass
class StageRecord:
    layer: int
    strategy: str
    candidates: np.ndarray
    scores: np.ndarray
    selected: np.ndarray
    unselected: np.ndarray
    restored: np.ndarray
    groups: list = field(default_factory=list)
    restored_states: Optional[np.ndarray] = None


@dataclass
class ScheduledRun:
    final_states: np.ndarray
    final_positions: np.ndarray
    final_roles: list
    trace: Optional[LayerTrace]
    stages: list
    bypass_history: list
    layer_token_counts: list

    @property
    def survivors(self) -> np.ndarray:
        return self.final_positions

    @property
    def visual_survivors(self) -> np.ndarray:
        return np.array([p for p, r in zip(self.final_positions, self.final_roles) if r == VISUAL], dtype=np.int64)

    def stage_at(self, layer: int) -> StageRecord:
        for s in self.stages:
            if s.layer == layer:
                return s
        raise KeyError(f"no pruning stage at layer {layer}")

    @property
    def last_state(self) -> np.ndarray:
        return self.final_states[-1]


class _Live:
    """Mutable live-token table for one scheduled run."""

    def __init__(self, seq: TokenSequence):
        self.pos = seq.positions.copy()
        self.h = seq.embeddings.copy()
        self.vis = seq.is_visual.copy()
        self.merged = np.zeros(len(seq), dtype=bool)

    def keep(self, mask):
        self.pos, self.h, self.vis, self.merged = self.pos[mask], self.h[mask], self.vis[mask], self.merged[mask]

    def add(self, pos, h, vis, merged):
        if len(pos) == 0:
            return
        self.pos = np.concatenate([self.pos, pos])
        self.h = np.concatenate([self.h, h])
        self.vis = np.concatenate([self.vis, np.full(len(pos), vis)])
        self.merged = np.concatenate([self.merged, np.full(len(pos), merged)])
        order = np.argsort(self.pos, kind="stable")
        if np.any(np.diff(self.pos[order]) == 0):
            raise BypassConsistencyError("position id collision in live sequence")
        self.keep(order)

    def roles(self) -> list:
        return [VISUAL if v else TEXT for v in self.vis]


def _effective_budget(stage: Stage, n_unselected: int) -> int:
    if stage.merge_budget is None:
        return n_unselected
    return min(stage.merge_budget, n_unselected)


def run_with_schedule(seq: TokenSequence, weights: ModelWeights, schedule: PruneSchedule,
                      strategy: Optional[str] = None, trace: bool = True,
                      pre_rope: bool = False) -> ScheduledRun:
    """Forward pass applying ``schedule``; ``strategy`` overrides every stage's strategy."""
    cfg = weights.config
    if strategy is not None:
        schedule = schedule.with_strategy(strategy)
    schedule.validate_for(cfg)
    stages = {s.layer: s for s in schedule.stages}
    last_stage_layer = schedule.stages[-1].layer if schedule.stages else None

    live = _Live(seq)
    tr = LayerTrace() if trace else None
    if tr is not None:
        tr.record(live.pos, live.h, live.vis)
    pending: Optional[BypassState] = None
    records, history, counts = [], [], []

    for li in range(1, cfg.num_layers + 1):
        layer = weights.layer(li)
        if li in stages:
            stage = stages[li]
            restored_pos = np.zeros(0, dtype=np.int64)
            restored_h = np.zeros((0, cfg.hidden_dim))
            if pending is not None:
                lookup = {int(p): live.h[i] for i, p in enumerate(live.pos) if live.merged[i]}
                proxies = set(pending.proxy_positions)
                merged_now = {p: lookup[p] for p in proxies if p in lookup}
                restored_pos, rh = align_bypassed_tokens(pending, merged_now)
                if rh is not None:
                    restored_h = rh
                live.keep(~np.isin(live.pos, list(proxies)) | ~live.merged)
                pending = None

            cand_mask = live.vis & ~live.merged
            cand_pos = np.concatenate([live.pos[cand_mask], restored_pos])
            cand_h = np.concatenate([live.h[cand_mask], restored_h])
            order = np.argsort(cand_pos)
            cand_pos, cand_h = cand_pos[order], cand_h[order]
            scores = rescore_bypassed(cand_pos, cand_h, live.pos[~cand_mask], live.h[~cand_mask],
                                      layer, cfg, pre_rope)
            selected, unselected = select_topk_tokens(scores, stage.keep_ratio, cand_pos)

            # rebuild live set: non-candidates + selected candidates
            sel_mask = np.isin(cand_pos, selected)
            live.keep(~cand_mask)
            live.add(cand_pos[sel_mask], cand_h[sel_mask], True, False)

            groups = []
            un_mask = ~sel_mask
            is_final = li == last_stage_layer
            if stage.strategy in ("merge", "bypass") and un_mask.any() and not (stage.strategy == "bypass" and is_final):
                z = _effective_budget(stage, int(un_mask.sum()))
                groups = group_tokens(cand_h[un_mask], cand_pos[un_mask], z)
                mpos, mstates = merge_groups(groups)
                live.add(mpos, mstates, True, True)
                if stage.strategy == "bypass":
                    pending = BypassState(groups, origin_layer=li - 1)
                    history.append(pending)
            records.append(StageRecord(li, stage.strategy, cand_pos, scores, selected, unselected,
                                       restored_pos, groups, restored_h))

        score_pos = scores_l = None
        if tr is not None:
            scores_l = (last_token_attention(live.h, layer, live.pos, cfg, pre_rope)[live.vis]
                        if live.vis.any() else np.zeros(0))
            score_pos = live.pos[live.vis]
        counts.append(len(live.pos))
        live.h = forward_layer(live.h, layer, live.pos, cfg, layer_index=li)
        if tr is not None:
            tr.record(live.pos, live.h, live.vis, score_pos, scores_l)

    return ScheduledRun(live.h, live.pos, live.roles(), tr, records, history, counts)


def run_with_fixed_selection(seq: TokenSequence, weights: ModelWeights, start_layer: int,
                             keep_positions) -> np.ndarray:
    """Full tokens before ``start_layer``; from it onward only the given visual tokens.

    Returns the final hidden states (text tokens are always kept).
    """
    cfg = weights.config
    keep = set(int(p) for p in keep_positions)
    h, pos, vis = seq.embeddings.copy(), seq.positions.copy(), seq.is_visual.copy()
    for li in range(1, cfg.num_layers + 1):
        if li == start_layer:
            mask = ~vis | np.array([int(p) in keep for p in pos], dtype=bool)
            h, pos, vis = h[mask], pos[mask], vis[mask]
        h = forward_layer(h, weights.layer(li), pos, cfg, layer_index=li)
    return h
