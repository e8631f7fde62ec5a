"""Seeded scenarios and batch experiments over pruning strategies."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cost_model import schedule_flops
from .io import save_tensor, write_csv, write_json, write_matrix_csv
from .metrics import cross_layer_overlap_matrix, fidelity, group_offset_report, selection_overlap_vs_vanilla
from .model import TEXT, VISUAL, ModelConfig, TokenSequence, forward_full, init_model, next_token_logits
from .numerics import SeededRng
from .pruning import STRATEGIES, PruneSchedule, Stage, run_with_schedule

log = logging.getLogger(__name__)

THREADS_ENV = "TOKENFLUX_THREADS"

DECISIONS = {
    "topk_tie_rule": "higher score first, then lower position id",
    "keep_count": "ceil(keep_ratio * pool)",
    "stage_timing": "a stage at layer s ranks by layer s attention and reduces before layer s runs",
    "merged_position": "lowest member position id",
    "grouping": "farthest-point cosine seeding, nearest-seed assignment",
    "head_aggregation": "mean over heads of the last text token's softmax row",
    "overlap_denominator": "reference (top) set size",
    "fidelity": "cosine of last-text-token final states; KL(vanilla || reduced) on logits",
    "flops_rounding": "post-pruning token count rounded half-up; merged tokens not charged",
    "profile_normalization": "min-max per profile over layers >= 3",
}


@dataclass(frozen=True)
class ScenarioSpec:
    id: str
    model: dict
    model_seed: int = 0
    n_v: int = 48
    n_t: int = 8
    embed_seed: int = 0
    signal_tokens: int = 0
    signal_strength: float = 0.0
    clusters: int = 0
    cluster_noise: float = 0.5

    def __post_init__(self):
        if self.n_v < 1 or self.n_t < 1:
            raise ValueError("need n_v >= 1 and n_t >= 1")
        if not 0 <= self.signal_tokens <= self.n_v:
            raise ValueError("signal_tokens must be within 0..n_v")
        if self.clusters < 0 or self.cluster_noise < 0:
            raise ValueError("clusters and cluster_noise must be non-negative")
        ModelConfig.from_dict(self.model)

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(**d)


@dataclass
class Scenario:
    spec: ScenarioSpec
    sequence: TokenSequence
    signal_positions: np.ndarray
    _weights: object = field(default=None, repr=False)

    @property
    def id(self) -> str:
        return self.spec.id

    @property
    def weights(self):
        if self._weights is None:
            self._weights = init_model(self.spec.config, self.spec.model_seed)
        return self._weights


def generate_scenario(spec: ScenarioSpec, seed: int | None = None) -> Scenario:
    """Build the token sequence for ``spec``; ``seed`` overrides ``embed_seed``.

    Visual tokens take positions ``0..n_v-1`` and text tokens follow. With
    ``clusters > 0`` visual embeddings are noisy copies of shared
    prototypes. Signal tokens get ``signal_strength`` times the last text
    embedding added, which raises their dot product with the query.
    """
    if isinstance(spec, dict):
        spec = ScenarioSpec.from_dict(spec)
    if seed is not None:
        spec = ScenarioSpec.from_dict({**spec.to_dict(), "embed_seed": int(seed)})
    d = spec.config.hidden_dim
    rng = SeededRng(spec.embed_seed)
    text = rng.normal_array((spec.n_t, d))
    if spec.clusters:
        protos = rng.normal_array((spec.clusters, d))
        which = (rng.uniform_array((spec.n_v,)) * spec.clusters).astype(int)
        visual = protos[which] + spec.cluster_noise * rng.normal_array((spec.n_v, d))
    else:
        visual = rng.normal_array((spec.n_v, d))
    # seeded Fisher-Yates picks the signal positions
    perm = list(range(spec.n_v))
    u = rng.uniform_array((spec.n_v,))
    for i in range(spec.n_v - 1, 0, -1):
        j = int(u[i] * (i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    signal = np.sort(np.array(perm[: spec.signal_tokens], dtype=np.int64))
    visual[signal] += spec.signal_strength * text[-1]
    emb = np.concatenate([visual, text])
    roles = [VISUAL] * spec.n_v + [TEXT] * spec.n_t
    seq = TokenSequence(roles, np.arange(spec.n_v + spec.n_t), emb)
    return Scenario(spec, seq, signal)


def expand_scenarios(cfg) -> list:
    """Scenario specs from either an explicit list or ``{"base": ..., "seeds": [...]}``."""
    if cfg is None:
        return []
    if isinstance(cfg, list):
        return [ScenarioSpec.from_dict(s) for s in cfg]
    base = dict(cfg["base"])
    prefix = base.pop("id", "scenario")
    out = []
    for s in cfg.get("seeds", []):
        out.append(ScenarioSpec.from_dict({**base, "id": f"{prefix}-{int(s):05d}", "embed_seed": int(s)}))
    return out


def matched_budget_schedules(n_v: int, layers, keep_counts, strategies=("drop", "bypass"),
                             merge_budget=None) -> dict:
    """Per-strategy schedules keeping the same number of visual tokens at each stage.

    Keep ratios are relative to each stage's candidate pool, which after a
    bypass stage is the whole visual set again, so the ratios differ by
    strategy while the kept counts do not.
    """
    if len(layers) != len(keep_counts):
        raise ValueError("layers and keep_counts differ in length")
    if any(b > a for a, b in zip([n_v, *keep_counts], keep_counts)):
        raise ValueError("keep_counts must be non-increasing and at most n_v")
    out = {}
    for strat in strategies:
        if strat not in STRATEGIES:
            raise ValueError(f"unknown strategy {strat!r}")
        stages, pool = [], n_v
        for i, (layer, k) in enumerate(zip(layers, keep_counts)):
            stages.append(Stage(int(layer), k / pool, strat, merge_budget))
            last = i == len(layers) - 1
            if not (strat == "bypass" and not last):
                pool = k
        out[strat] = PruneSchedule(tuple(stages))
    return out


def resolve_schedules(config: dict, n_v: int) -> dict:
    schedules = {}
    for name, sch in (config.get("schedules") or {}).items():
        schedules[name] = PruneSchedule.from_dict(sch)
    mb = config.get("matched_budget")
    if mb:
        schedules.update(matched_budget_schedules(
            n_v, mb["layers"], mb["keep_counts"], tuple(mb.get("strategies", ("drop", "bypass"))),
            mb.get("merge_budget")))
    return schedules


ROW_FIELDS = [
    "scenario_id", "embed_seed", "strategy", "fidelity", "kl", "final_layer", "selection_overlap",
    "visual_survivors", "live_tokens", "flops", "flops_base", "flops_overhead",
    "offset_median_cosine", "cross_layer_mean_overlap",
]
NUMERIC_FIELDS = ROW_FIELDS[3:]


def run_scenario(spec: ScenarioSpec, schedules: dict, config: dict) -> dict:
    """All strategies on one scenario; returns rows plus auxiliary outputs."""
    metrics = set(config.get("metrics", ["fidelity", "selection_overlap", "flops"]))
    top_frac = float(config.get("top_frac", 0.1))
    scen = generate_scenario(spec)
    w, seq, cfg = scen.weights, scen.sequence, spec.config
    final, trace = forward_full(seq, w, trace=True)
    v_logits = next_token_logits(final[-1], w)

    out = {"rows": [], "survivors": {}, "offsets": [], "cross_layer": None}
    cross_mean = None
    if "cross_layer" in metrics:
        ov = config.get("overlap", {})
        cl = cross_layer_overlap_matrix(trace, ov.get("bottom_frac", 0.5), ov.get("top_frac", 0.1),
                                        ov.get("early"), ov.get("late"))
        out["cross_layer"] = cl
        cross_mean = float(np.mean(cl["matrix"]))

    for name in sorted(schedules):
        sch = schedules[name]
        run = run_with_schedule(seq, w, sch, trace=True)
        fid, kl = fidelity(run.last_state, final[-1], next_token_logits(run.last_state, w), v_logits)
        row = {"scenario_id": spec.id, "embed_seed": spec.embed_seed, "strategy": name,
               "fidelity": fid, "kl": kl, "visual_survivors": int(run.visual_survivors.size),
               "live_tokens": int(run.survivors.size), "cross_layer_mean_overlap": cross_mean}
        if sch.stages:
            final_layer = sch.stages[-1].layer
            row["final_layer"] = final_layer
            if "selection_overlap" in metrics:
                row["selection_overlap"] = selection_overlap_vs_vanilla(run, trace, final_layer, top_frac).ratio
        if "flops" in metrics:
            fl = schedule_flops(cfg.num_layers, cfg.hidden_dim, cfg.ffn_dim, spec.n_v, spec.n_t, sch)
            row.update(flops=fl["flops"], flops_base=fl["base"], flops_overhead=fl["overhead"])
        if "offsets" in metrics and run.bypass_history:
            rep = group_offset_report(run, trace)
            row["offset_median_cosine"] = rep.summary()["median_cosine"]
            for g in rep.groups:
                out["offsets"].append({"scenario_id": spec.id, "strategy": name, "group_id": g.group_id,
                                       "size": len(g.members), "cosine": g.cosine, "distance": g.distance})
        out["survivors"][name] = [int(p) for p in run.visual_survivors]
        out["rows"].append(row)
    return out


def aggregate(rows) -> list:
    """Mean of every numeric column per strategy (blank cells skipped)."""
    by = {}
    for r in rows:
        by.setdefault(r["strategy"], []).append(r)
    out = []
    for strat in sorted(by):
        agg = {"strategy": strat, "n": len(by[strat])}
        for f in NUMERIC_FIELDS:
            vals = [float(r[f]) for r in by[strat] if r.get(f) not in (None, "")]
            agg[f] = math.fsum(vals) / len(vals) if vals else None
        out.append(agg)
    return out


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "0")
    try:
        return max(0, int(raw))
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def run_experiment(config: dict, output_dir=None) -> dict:
    """Run every scenario x strategy, write results, return a summary.

    A failing scenario is recorded and skipped; ``summary["ok"]`` is false
    if any failed. Output is independent of thread count.
    """
    if "config" in config and "scenario_ids" in config:  # a manifest
        config = config["config"]
    out_dir = Path(output_dir or config.get("output_dir", "results"))
    specs = expand_scenarios(config.get("scenarios"))
    results, failures = {}, []

    def work(spec):
        try:
            schedules = resolve_schedules(config, spec.n_v)
            return spec.id, run_scenario(spec, schedules, config), None
        except Exception as exc:  # isolate per scenario
            log.exception("scenario %s failed", spec.id)
            return spec.id, None, f"{type(exc).__name__}: {exc}"

    n = _threads()
    if n > 0 and len(specs) > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            done = list(pool.map(work, specs))
    else:
        done = [work(s) for s in specs]
    for sid, res, err in done:
        if err is not None:
            failures.append({"scenario_id": sid, "error": err})
        else:
            results[sid] = res

    ids = sorted(results)
    rows = [r for sid in ids for r in results[sid]["rows"]]
    agg = aggregate(rows)
    write_csv(out_dir / "results.csv", ROW_FIELDS, rows)
    write_csv(out_dir / "aggregate.csv", ["strategy", "n", *NUMERIC_FIELDS], agg)
    write_json(out_dir / "survivors.json", {sid: results[sid]["survivors"] for sid in ids})
    offsets = [o for sid in ids for o in results[sid]["offsets"]]
    if offsets:
        write_csv(out_dir / "offsets.csv", ["scenario_id", "strategy", "group_id", "size", "cosine", "distance"], offsets)
    cls = [results[sid]["cross_layer"] for sid in ids if results[sid]["cross_layer"] is not None]
    if cls:
        mean = np.mean([c["matrix"] for c in cls], axis=0)
        write_matrix_csv(out_dir / "cross_layer_mean.csv", cls[0]["early_layers"], cls[0]["late_layers"], mean)
    failures.sort(key=lambda f: f["scenario_id"])
    manifest = {
        "config": config,
        "scenario_ids": [s.id for s in specs],
        "seeds": {s.id: {"model_seed": s.model_seed, "embed_seed": s.embed_seed} for s in specs},
        "schedules": {k: v.to_dict() for k, v in resolve_schedules(config, specs[0].n_v).items()} if specs else {},
        "decisions": DECISIONS,
        "version": __version__,
        "failures": failures,
    }
    write_json(out_dir / "manifest.json", manifest)
    return {"ok": not failures, "rows": rows, "aggregate": agg, "failures": failures,
            "output_dir": str(out_dir), "results": results}


def save_offset_vectors(report, path) -> None:
    save_tensor(report.stacked_vectors(), path)
