"""scikit-learn style wrappers so pruning runs and layer selection compose with pipelines."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .layer_select import normalize_profiles, objective, optimal_pruning_layers, profile_selection_capability
from .metrics import fidelity
from .model import ModelConfig, forward_full, init_model, next_token_logits
from .pruning import PruneSchedule, Stage, run_with_schedule
from .validation import check_profile, check_schedule, check_sequences, check_weights


class TokenPruner(TransformerMixin, BaseEstimator):
    """Run token sequences through the model under a pruning schedule.

    ``transform`` returns the last text token's final hidden state per
    sequence, ``predict`` the argmax next token. Pass ``weights`` directly
    or a ``config`` dict plus ``seed`` to build them in ``fit``.
    """

    def __init__(self, weights=None, config=None, seed=0, stages=None, strategy=None, pre_rope=False):
        self.weights = weights
        self.config = config
        self.seed = seed
        self.stages = stages
        self.strategy = strategy
        self.pre_rope = pre_rope

    def fit(self, X=None, y=None):
        if self.weights is not None:
            self.weights_ = check_weights(self.weights)
        elif self.config is not None:
            cfg = self.config if isinstance(self.config, ModelConfig) else ModelConfig.from_dict(self.config)
            self.weights_ = init_model(cfg, self.seed)
        else:
            raise ValueError("TokenPruner needs either weights or config")
        self.schedule_ = check_schedule(self.stages, self.strategy)
        self.schedule_.validate_for(self.weights_.config)
        return self

    def run(self, seq):
        check_is_fitted(self, "weights_")
        (seq,) = check_sequences(seq)
        return run_with_schedule(seq, self.weights_, self.schedule_, trace=False, pre_rope=self.pre_rope)

    def transform(self, X):
        check_is_fitted(self, "weights_")
        return np.stack([self.run(s).last_state for s in check_sequences(X)])

    def predict(self, X):
        states = self.transform(X)
        return np.array([int(np.argmax(next_token_logits(h, self.weights_))) for h in states])

    def score(self, X, y=None):
        """Mean fidelity to the unpruned model."""
        check_is_fitted(self, "weights_")
        seqs = check_sequences(X)
        reduced = self.transform(seqs)
        vals = [fidelity(r, forward_full(s, self.weights_, trace=False)[0][-1]) for r, s in zip(reduced, seqs)]
        return float(np.mean(vals))


class CapabilityProfiler(TransformerMixin, BaseEstimator):
    """Map sequences to per-layer selection-capability profiles (one row each)."""

    def __init__(self, weights=None, retain=0.2, placeholder="floor"):
        self.weights = weights
        self.retain = retain
        self.placeholder = placeholder

    def fit(self, X=None, y=None):
        self.weights_ = check_weights(self.weights)
        if not 0.0 < self.retain <= 1.0:
            raise ValueError("retain must be in (0, 1]")
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        rows = [profile_selection_capability(s, self.weights_, self.retain, placeholder=self.placeholder).scores
                for s in check_sequences(X)]
        return np.array(rows)


class PruningLayerSelector(BaseEstimator):
    """Choose up to ``budget`` pruning layers from one or more profiles.

    A 2-D ``X`` is treated as several profiles and pooled after min-max
    normalization.
    """

    def __init__(self, budget=3):
        self.budget = budget

    def fit(self, X, y=None):
        a = np.asarray(X.scores if hasattr(X, "scores") else X, dtype=np.float64)
        if a.ndim == 2:
            profile = a[0] if a.shape[0] == 1 else normalize_profiles([tuple(r) for r in a])
        else:
            profile = a
        self.profile_ = check_profile(profile)
        res = optimal_pruning_layers(self.profile_, int(self.budget))
        self.layers_ = res.layers
        self.objective_ = res.objective
        return self

    def score(self, X, y=None):
        """Objective of the fitted layers on another profile of the same length."""
        check_is_fitted(self, "layers_")
        return objective(check_profile(X), self.layers_)

    def to_schedule(self, keep_ratios, strategy="bypass", merge_budget=None) -> PruneSchedule:
        check_is_fitted(self, "layers_")
        if len(keep_ratios) != len(self.layers_):
            raise ValueError("need one keep ratio per selected layer")
        return PruneSchedule(tuple(Stage(l, r, strategy, merge_budget) for l, r in zip(self.layers_, keep_ratios)))
