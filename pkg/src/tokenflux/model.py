"""Toy decoder-only transformer used as the vanilla reference model.

Pre-norm (RMSNorm) blocks with rotary multi-head causal attention and a
GELU feed-forward. Token embeddings are fed in directly; only the final
next-token logits use an output projection. Every layer can report the
last text token's attention row, which is what the pruning strategies
rank visual tokens by.

Layer indices are 1-based throughout: layer 1 is the first block, and
"the state after layer 0" is the input embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import NumericError, SeededRng, softmax

VISUAL = "visual"
TEXT = "text"


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_dim: int
    ffn_dim: int
    num_heads: int
    vocab_size: int = 64
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "ffn_dim", "num_heads", "vocab_size"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)!r}")
        if self.num_layers < 3:
            raise ValueError("num_layers must be at least 3")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if not self.rope_base > 0:
            raise ValueError("rope_base must be positive")
        if not self.norm_eps > 0:
            raise ValueError("norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_dim": self.hidden_dim,
            "ffn_dim": self.ffn_dim,
            "num_heads": self.num_heads,
            "vocab_size": self.vocab_size,
            "rope_base": self.rope_base,
            "norm_eps": self.norm_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TokenSequence:
    """Model input: roles, original position ids and embeddings, in order."""

    roles: list
    positions: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.roles = list(self.roles)
        n = len(self.roles)
        if self.positions.shape != (n,) or self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise ValueError("roles, positions and embeddings must have matching lengths")
        if any(r not in (VISUAL, TEXT) for r in self.roles):
            raise ValueError("roles must be 'visual' or 'text'")
        if n == 0 or self.roles[-1] != TEXT:
            raise ValueError("sequence must end with a text token")
        if np.any(np.diff(self.positions) <= 0) or (n and self.positions[0] < 0):
            raise ValueError("position ids must be non-negative and strictly increasing")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embeddings contain non-finite values")

    def __len__(self) -> int:
        return len(self.roles)

    @property
    def is_visual(self) -> np.ndarray:
        return np.array([r == VISUAL for r in self.roles], dtype=bool)

    @property
    def visual_positions(self) -> np.ndarray:
        return self.positions[self.is_visual]

    @property
    def text_positions(self) -> np.ndarray:
        return self.positions[~self.is_visual]


@dataclass
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray

    FIELDS = ("w_q", "w_k", "w_v", "w_o", "w_up", "w_down", "attn_norm", "ffn_norm")

    def tensors(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class ModelWeights:
    config: ModelConfig
    layers: list
    final_norm: np.ndarray
    w_out: np.ndarray

    def __post_init__(self):
        cfg = self.config
        d, m = cfg.hidden_dim, cfg.ffn_dim
        if len(self.layers) != cfg.num_layers:
            raise ValueError("layer count does not match config")
        shapes = {
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
            "w_up": (d, m), "w_down": (m, d), "attn_norm": (d,), "ffn_norm": (d,),
        }
        for i, layer in enumerate(self.layers, start=1):
            for name, shape in shapes.items():
                t = getattr(layer, name)
                if t.shape != shape:
                    raise ValueError(f"layer {i} {name} has shape {t.shape}, expected {shape}")
                if not np.all(np.isfinite(t)):
                    raise ValueError(f"layer {i} {name} contains non-finite values")
        if self.final_norm.shape != (d,) or self.w_out.shape != (d, cfg.vocab_size):
            raise ValueError("output head shapes do not match config")

    def layer(self, index: int) -> LayerWeights:
        """1-based layer access."""
        if not 1 <= index <= self.config.num_layers:
            raise IndexError(f"layer {index} outside 1..{self.config.num_layers}")
        return self.layers[index - 1]


def init_model(config: ModelConfig, seed: int) -> ModelWeights:
    """Draw all weights from SplitMix64 normals scaled by 1/sqrt(d)."""
    if not isinstance(config, ModelConfig):
        raise TypeError("config must be a ModelConfig")
    rng = SeededRng(seed)
    d, m = config.hidden_dim, config.ffn_dim
    scale = 1.0 / np.sqrt(d)
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                w_q=rng.normal_array((d, d)) * scale,
                w_k=rng.normal_array((d, d)) * scale,
                w_v=rng.normal_array((d, d)) * scale,
                w_o=rng.normal_array((d, d)) * scale,
                w_up=rng.normal_array((d, m)) * scale,
                w_down=rng.normal_array((m, d)) * scale,
                attn_norm=np.ones(d),
                ffn_norm=np.ones(d),
            )
        )
    w_out = rng.normal_array((d, config.vocab_size)) * scale
    return ModelWeights(config, layers, np.ones(d), w_out)


def zero_model(config: ModelConfig) -> ModelWeights:
    d, m = config.hidden_dim, config.ffn_dim
    layers = [
        LayerWeights(
            np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d)),
            np.zeros((d, m)), np.zeros((m, d)), np.ones(d), np.ones(d),
        )
        for _ in range(config.num_layers)
    ]
    return ModelWeights(config, layers, np.ones(d), np.zeros((d, config.vocab_size)))


def rms_norm(h: np.ndarray, scale: np.ndarray, eps: float) -> np.ndarray:
    return h / np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + eps) * scale


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def apply_rope(x: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    """Rotate ``x`` of shape (n, heads, head_dim) by original position ids.

    Half-split pairing (dim i with dim i + head_dim/2); with an odd head
    dim the last channel is left unrotated.
    """
    dh = x.shape[-1]
    half = dh // 2
    if half == 0:
        return x
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / (2 * half))
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]
    a = x[..., :half]
    b = x[..., half : 2 * half]
    out = x.copy()
    out[..., :half] = a * cos - b * sin
    out[..., half : 2 * half] = a * sin + b * cos
    return out


def _project_qk(x_normed, layer: LayerWeights, positions, config: ModelConfig, rope: bool):
    n = x_normed.shape[0]
    q = (x_normed @ layer.w_q).reshape(n, config.num_heads, config.head_dim)
    k = (x_normed @ layer.w_k).reshape(n, config.num_heads, config.head_dim)
    if rope:
        q = apply_rope(q, positions, config.rope_base)
        k = apply_rope(k, positions, config.rope_base)
    return q, k


def forward_layer(h, layer: LayerWeights, positions, config: ModelConfig,
                  layer_index: Optional[int] = None, return_probs: bool = False):
    """One pre-norm block: ``h + attn(norm(h))`` then ``h + ffn(norm(h))``.

    With ``return_probs`` also returns the per-head attention probabilities,
    shape (heads, n, n).
    """
    h = np.asarray(h, dtype=np.float64)
    positions = np.asarray(positions)
    n = h.shape[0]
    if positions.shape != (n,):
        raise ValueError(f"got {n} hidden states but {positions.shape[0]} position ids")
    H, dh = config.num_heads, config.head_dim

    x = rms_norm(h, layer.attn_norm, config.norm_eps)
    q, k = _project_qk(x, layer, positions, config, rope=True)
    v = (x @ layer.w_v).reshape(n, H, dh)
    logits = np.einsum("ihd,jhd->hij", q, k) / np.sqrt(dh)
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    logits = np.where(mask[None], -np.inf, logits)
    probs = softmax(logits, axis=-1)
    ctx = np.einsum("hij,jhd->ihd", probs, v).reshape(n, H * dh)
    h = h + ctx @ layer.w_o

    x2 = rms_norm(h, layer.ffn_norm, config.norm_eps)
    h = h + gelu(x2 @ layer.w_up) @ layer.w_down

    if not np.all(np.isfinite(h)):
        raise NumericError(f"non-finite hidden state in layer {layer_index if layer_index is not None else '?'}")
    return (h, probs) if return_probs else h


def last_token_attention(h, layer: LayerWeights, positions, config: ModelConfig,
                         pre_rope: bool = False) -> np.ndarray:
    """Head-averaged attention row of the final token over every token.

    ``h`` is the layer's input. The final token is causal-last, so the row
    covers the whole sequence and sums to 1.
    """
    h = np.asarray(h, dtype=np.float64)
    x = rms_norm(h, layer.attn_norm, config.norm_eps)
    q, k = _project_qk(x, layer, positions, config, rope=not pre_rope)
    logits = np.einsum("hd,jhd->hj", q[-1], k) / np.sqrt(config.head_dim)
    return softmax(logits, axis=-1).mean(axis=0)


def tv_attention_scores(h, layer: LayerWeights, is_visual, positions, config: ModelConfig,
                        pre_rope: bool = False) -> np.ndarray:
    """Last-text-token attention restricted to visual columns (not renormalized)."""
    is_visual = np.asarray(is_visual, dtype=bool)
    if not is_visual.any():
        return np.zeros(0)
    return last_token_attention(h, layer, positions, config, pre_rope)[is_visual]


def next_token_logits(h_last, weights: ModelWeights) -> np.ndarray:
    x = rms_norm(np.asarray(h_last, dtype=np.float64), weights.final_norm, weights.config.norm_eps)
    return x @ weights.w_out


@dataclass
class LayerTrace:
    """Per-layer record of a forward pass.

    ``states[l]`` / ``positions[l]`` hold the hidden states after layer
    ``l`` (index 0 is the input). ``scores[l]`` are the T-V scores of
    layer ``l``'s attention, aligned with ``score_positions[l]``; index 0
    is unused.
    """

    positions: list = field(default_factory=list)
    states: list = field(default_factory=list)
    is_visual: list = field(default_factory=list)
    score_positions: list = field(default_factory=list)
    scores: list = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.states) - 1

    def state_of(self, layer: int, position: int) -> np.ndarray:
        idx = np.flatnonzero(self.positions[layer] == position)
        if idx.size == 0:
            raise KeyError(f"position {position} not live after layer {layer}")
        return self.states[layer][idx[0]]

    def states_of(self, layer: int, positions) -> np.ndarray:
        lookup = {int(p): i for i, p in enumerate(self.positions[layer])}
        try:
            rows = [lookup[int(p)] for p in positions]
        except KeyError as exc:
            raise KeyError(f"position {exc.args[0]} not live after layer {layer}") from None
        return self.states[layer][rows]

    def score_map(self, layer: int) -> dict:
        return {int(p): float(s) for p, s in zip(self.score_positions[layer], self.scores[layer])}

    def record(self, positions, states, is_visual, score_positions=None, scores=None):
        self.positions.append(np.array(positions, copy=True))
        self.states.append(np.array(states, copy=True))
        self.is_visual.append(np.array(is_visual, copy=True))
        self.score_positions.append(None if score_positions is None else np.array(score_positions))
        self.scores.append(None if scores is None else np.array(scores))


def forward_full(seq: TokenSequence, weights: ModelWeights, trace: bool = True,
                 pre_rope: bool = False):
    """Vanilla pass over every layer; returns ``(final_states, trace or None)``."""
    cfg = weights.config
    if seq.embeddings.shape[1] != cfg.hidden_dim:
        raise ValueError("embedding width does not match hidden_dim")
    h = seq.embeddings.copy()
    pos = seq.positions
    vis = seq.is_visual
    tr = LayerTrace() if trace else None
    if tr is not None:
        tr.record(pos, h, vis)
    for li in range(1, cfg.num_layers + 1):
        layer = weights.layer(li)
        if tr is not None:
            s = tv_attention_scores(h, layer, vis, pos, cfg, pre_rope)
        h = forward_layer(h, layer, pos, cfg, layer_index=li)
        if tr is not None:
            tr.record(pos, h, vis, pos[vis], s)
    return h, tr
