"""Diagnostics comparing reduced runs against the vanilla trace."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import cosine_sim, softmax_row


@dataclass
class OverlapReport:
    label: str
    ratio: float
    size_a: int
    size_ref: int
    denominator: str = "reference"

    def to_dict(self) -> dict:
        return {"label": self.label, "ratio": self.ratio, "size_a": self.size_a,
                "size_ref": self.size_ref, "denominator": self.denominator}


def overlap_ratio(set_a, set_ref) -> float:
    """``|A & B| / |B|`` with ``B`` the reference set."""
    a = {int(x) for x in set_a}
    b = {int(x) for x in set_ref}
    if not b:
        raise ValueError("reference set is empty")
    return len(a & b) / len(b)


def _bottom(positions, scores, frac):
    """Lowest-scoring ``ceil(frac * n)`` positions; ties go to the higher id."""
    from .pruning import topk_count

    positions = np.asarray(positions)
    scores = np.asarray(scores)
    k = topk_count(len(scores), frac)
    order = np.lexsort((-positions, scores))
    return set(int(p) for p in positions[order[:k]])


def top_set(positions, scores, frac) -> set:
    from .pruning import select_topk_tokens

    sel, _ = select_topk_tokens(scores, frac, positions)
    return set(int(p) for p in sel)


def cross_layer_overlap_matrix(trace, bottom_frac: float = 0.5, top_frac: float = 0.1,
                               early=None, late=None) -> dict:
    """Overlap of layer-a bottom sets with layer-b top sets.

    Entry ``[a][b]`` is the fraction of layer ``b``'s top tokens that were
    in layer ``a``'s bottom set. Defaults: early = first half of the
    layers, late = the rest.
    """
    L = trace.num_layers
    if early is None:
        early = (1, L // 2)
    if late is None:
        late = (L // 2 + 1, L)
    for lo, hi in (early, late):
        if not 1 <= lo <= hi <= L:
            raise ValueError(f"layer range {lo}..{hi} outside 1..{L}")
    rows = list(range(early[0], early[1] + 1))
    cols = list(range(late[0], late[1] + 1))
    mat = np.zeros((len(rows), len(cols)))
    for i, a in enumerate(rows):
        bottom = _bottom(trace.score_positions[a], trace.scores[a], bottom_frac)
        for j, b in enumerate(cols):
            mat[i, j] = overlap_ratio(bottom, top_set(trace.score_positions[b], trace.scores[b], top_frac))
    return {"early_layers": rows, "late_layers": cols, "matrix": mat,
            "bottom_frac": bottom_frac, "top_frac": top_frac, "denominator": "top-set size"}


def kl_divergence(p_logits, q_logits) -> float:
    p = softmax_row(p_logits)
    q = softmax_row(q_logits)
    return float(np.sum(p * (np.log(p) - np.log(q))))


def fidelity(reduced_state, vanilla_state, reduced_logits=None, vanilla_logits=None):
    """Cosine between last-text-token final states; with logits also returns KL(vanilla || reduced)."""
    cos = cosine_sim(reduced_state, vanilla_state)
    if reduced_logits is None or vanilla_logits is None:
        return cos
    return cos, kl_divergence(vanilla_logits, reduced_logits)


def selection_overlap_vs_vanilla(run, vanilla_trace, layer: int, top_frac: float) -> OverlapReport:
    """Retained set of the run's stage at ``layer`` against vanilla's top tokens there."""
    stage = run.stage_at(layer)
    ref = top_set(vanilla_trace.score_positions[layer], vanilla_trace.scores[layer], top_frac)
    ratio = overlap_ratio(stage.selected, ref)
    return OverlapReport(f"{stage.strategy}@{layer}", ratio, len(stage.selected), len(ref))


@dataclass
class GroupOffset:
    group_id: int
    members: list
    merged_offset: np.ndarray
    member_offsets: np.ndarray
    vanilla_mean_offset: np.ndarray
    cosine: float
    distance: float


@dataclass
class OffsetReport:
    origin_layer: int
    restore_layer: int
    groups: list = field(default_factory=list)

    @property
    def cosines(self) -> np.ndarray:
        return np.array([g.cosine for g in self.groups])

    @property
    def distances(self) -> np.ndarray:
        return np.array([g.distance for g in self.groups])

    def summary(self) -> dict:
        c = self.cosines
        return {
            "origin_layer": self.origin_layer,
            "restore_layer": self.restore_layer,
            "num_groups": len(self.groups),
            "median_cosine": float(np.median(c)) if c.size else None,
            "mean_cosine": float(np.mean(c)) if c.size else None,
            "mean_distance": float(np.mean(self.distances)) if c.size else None,
        }

    def to_dict(self) -> dict:
        d = self.summary()
        d["groups"] = [
            {"group_id": g.group_id, "members": g.members, "cosine": g.cosine, "distance": g.distance,
             "merged_offset": g.merged_offset.tolist(), "vanilla_mean_offset": g.vanilla_mean_offset.tolist()}
            for g in self.groups
        ]
        return d

    def stacked_vectors(self) -> np.ndarray:
        """Rows: each group's merged offset, its vanilla mean, then its member offsets."""
        rows = []
        for g in self.groups:
            rows.append(g.merged_offset)
            rows.append(g.vanilla_mean_offset)
            rows.extend(g.member_offsets)
        return np.array(rows)


def group_offset_report(run, vanilla_trace, stage_index: int = 0) -> OffsetReport:
    """Merged-token offsets of one bypass stage against vanilla member offsets.

    Offsets span from the stage's origin (the state frozen at bypass) to
    the input of the restoring stage.
    """
    if stage_index >= len(run.bypass_history):
        raise ValueError("run has no bypass stage with that index")
    bstate = run.bypass_history[stage_index]
    restore = next((s for s in run.stages if s.layer > bstate.origin_layer + 1 and s.restored.size), None)
    if restore is None:
        raise ValueError("bypass stage was never restored")
    x, y1 = bstate.origin_layer, restore.layer - 1
    if run.trace is None:
        raise ValueError("run was executed without tracing")
    report = OffsetReport(x, restore.layer)
    for g in bstate.groups:
        merged_now = run.trace.state_of(y1, g.merged_position)
        d_merged = merged_now - g.merged_state
        before = vanilla_trace.states_of(x, g.members)
        after = vanilla_trace.states_of(y1, g.members)
        member_off = after - before
        vmean = member_off.mean(axis=0)
        report.groups.append(GroupOffset(
            g.group_id, [int(p) for p in g.members], d_merged, member_off, vmean,
            cosine_sim(d_merged, vmean, return_flag=True)[0], float(np.linalg.norm(d_merged - vmean)),
        ))
    return report
