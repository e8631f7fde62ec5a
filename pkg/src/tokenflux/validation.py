"""Input coercion shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .layer_select import PerformanceProfile
from .model import ModelWeights, TokenSequence
from .pruning import PruneSchedule, Stage


def check_sequence(seq) -> TokenSequence:
    if isinstance(seq, TokenSequence):
        return seq
    if isinstance(seq, dict):
        return TokenSequence(seq["roles"], seq["positions"], seq["embeddings"])
    raise TypeError(f"expected a TokenSequence or dict, got {type(seq).__name__}")


def check_sequences(X) -> list:
    if isinstance(X, (TokenSequence, dict)):
        X = [X]
    seqs = [check_sequence(s) for s in X]
    if not seqs:
        raise ValueError("no sequences given")
    return seqs


def check_schedule(stages, strategy=None) -> PruneSchedule:
    if stages is None:
        sch = PruneSchedule(())
    elif isinstance(stages, PruneSchedule):
        sch = stages
    elif isinstance(stages, dict):
        sch = PruneSchedule.from_dict(stages)
    else:
        items = []
        for s in stages:
            if isinstance(s, Stage):
                items.append(s)
            elif isinstance(s, dict):
                items.extend(PruneSchedule.from_dict({"stages": [s]}).stages)
            else:
                layer, ratio, *rest = s
                items.append(Stage(int(layer), float(ratio), *rest))
        sch = PruneSchedule(tuple(items))
    return sch.with_strategy(strategy) if strategy is not None else sch


def check_weights(weights) -> ModelWeights:
    if not isinstance(weights, ModelWeights):
        raise TypeError("weights must be a ModelWeights instance")
    return weights


def check_profile(X) -> PerformanceProfile:
    if isinstance(X, PerformanceProfile):
        return X
    a = np.asarray(X, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"a profile is 1-D, got shape {a.shape}")
    return PerformanceProfile(tuple(a))
