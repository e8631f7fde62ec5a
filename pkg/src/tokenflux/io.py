"""File formats: TFLX tensors, JSON configs and CSV tables.

TFLX layout (all little-endian): ``b"TFLX"``, then u32 version, T, d, m,
heads, then float64 row-major tensors back to back.

* Model files: for each layer W_Q, W_K, W_V, W_O (d x d), FFN up (d x m),
  FFN down (m x d), attention norm (d), FFN norm (d); then the final
  norm (d) and the output projection (d x vocab). The vocabulary size is
  implied by the remaining length.
* Tensor dumps: the header carries ``T=rows, d=cols, m=0, heads=0`` and a
  single rows x cols matrix follows. ``heads=0`` marks a dump.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .model import LayerWeights, ModelConfig, ModelWeights

MAGIC = b"TFLX"
VERSION = 1
_HEADER = struct.Struct("<4s5I")


class FormatError(ValueError):
    pass


def _write(path, header_fields, tensors):
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, *header_fields))
        for t in tensors:
            f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def _read_header(buf: bytes):
    if len(buf) < _HEADER.size:
        raise FormatError("file too short for a TFLX header")
    magic, version, a, b, c, e = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported TFLX version {version}")
    return a, b, c, e


def save_model(weights: ModelWeights, path, config_json: bool = True) -> None:
    cfg = weights.config
    tensors = [t for layer in weights.layers for t in layer.tensors()]
    tensors += [weights.final_norm, weights.w_out]
    _write(path, (cfg.num_layers, cfg.hidden_dim, cfg.ffn_dim, cfg.num_heads), tensors)
    if config_json:
        write_json(Path(path).with_suffix(".json"), cfg.to_dict())


def load_model(path, config: ModelConfig | None = None) -> ModelWeights:
    """Read a model file; rope/eps come from ``config`` or the JSON mirror if present."""
    path = Path(path)
    buf = path.read_bytes()
    T, d, m, heads = _read_header(buf)
    if heads == 0:
        raise FormatError("file is a tensor dump, not a model")
    data = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    per_layer = 4 * d * d + 2 * d * m + 2 * d
    rest = data.size - T * per_layer - d
    if rest < 0 or rest % d:
        raise FormatError("payload length does not match header")
    vocab = rest // d
    if config is None:
        mirror = path.with_suffix(".json")
        extra = read_json(mirror) if mirror.exists() else {}
        config = ModelConfig(T, d, m, heads, vocab, extra.get("rope_base", 10000.0), extra.get("norm_eps", 1e-6))
    if (config.num_layers, config.hidden_dim, config.ffn_dim, config.num_heads, config.vocab_size) != (T, d, m, heads, vocab):
        raise FormatError("config mirror disagrees with the TFLX header")

    off = 0

    def take(*shape):
        nonlocal off
        n = int(np.prod(shape))
        out = data[off:off + n].reshape(shape).copy()
        off += n
        return out

    layers = []
    for _ in range(T):
        layers.append(LayerWeights(take(d, d), take(d, d), take(d, d), take(d, d),
                                   take(d, m), take(m, d), take(d), take(d)))
    final_norm = take(d)
    w_out = take(d, vocab)
    return ModelWeights(config, layers, final_norm, w_out)


def save_tensor(matrix, path) -> None:
    a = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if a.ndim != 2:
        raise ValueError("tensor dumps hold one 2-D matrix")
    _write(path, (a.shape[0], a.shape[1], 0, 0), [a])


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    rows, cols, m, heads = _read_header(buf)
    if heads != 0 or m != 0:
        raise FormatError("file is a model, not a tensor dump")
    data = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size)
    if data.size != rows * cols:
        raise FormatError("payload length does not match header")
    return data.reshape(rows, cols).astype(np.float64)


def read_json(path):
    with open(path) as f:
        return json.load(f)


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def fmt(v) -> str:
    """CSV cell; floats use repr so they round-trip exactly."""
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            cells = [r.get(h) for h in header] if isinstance(r, dict) else list(r)
            w.writerow([fmt(c) for c in cells])


def read_csv(path) -> list:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_profile_csv(path, profile) -> None:
    write_csv(path, ["layer", "score"], [(i, x) for i, x in enumerate(profile.scores, start=1)])


def read_profile_csv(path):
    from .layer_select import PerformanceProfile

    rows = read_csv(path)
    if not rows or set(rows[0]) != {"layer", "score"}:
        raise FormatError("profile CSV needs a 'layer,score' header")
    rows.sort(key=lambda r: int(r["layer"]))
    if [int(r["layer"]) for r in rows] != list(range(1, len(rows) + 1)):
        raise FormatError("profile layers must be 1..L without gaps")
    return PerformanceProfile(tuple(float(r["score"]) for r in rows))


def write_matrix_csv(path, row_labels, col_labels, matrix, corner="layer") -> None:
    rows = [[a, *m] for a, m in zip(row_labels, np.asarray(matrix))]
    write_csv(path, [corner, *[str(c) for c in col_labels]], rows)
