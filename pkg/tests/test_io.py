import struct

import numpy as np
import pytest

from tokenflux.io import (
    FormatError,
    load_model,
    load_tensor,
    read_profile_csv,
    save_model,
    save_tensor,
    write_profile_csv,
)
from tokenflux.layer_select import PerformanceProfile


def test_model_round_trip(tmp_path, small_model):
    path = tmp_path / "m.tflx"
    save_model(small_model, path)
    back = load_model(path)
    assert back.config == small_model.config
    for a, b in zip(small_model.layers, back.layers):
        for x, y in zip(a.tensors(), b.tensors()):
            assert x.tobytes() == y.tobytes()
    assert back.w_out.tobytes() == small_model.w_out.tobytes()
    magic, version, T, d, m, heads = struct.unpack("<4s5I", path.read_bytes()[:24])
    assert magic == b"TFLX" and version == 1
    assert (T, d, m, heads) == (6, 16, 32, 2)


def test_model_without_config_mirror(tmp_path, small_model):
    path = tmp_path / "m.tflx"
    save_model(small_model, path, config_json=False)
    back = load_model(path)
    assert back.config.vocab_size == small_model.config.vocab_size
    np.testing.assert_array_equal(back.final_norm, small_model.final_norm)


def test_tensor_round_trip(tmp_path):
    a = np.random.default_rng(0).normal(size=(5, 7))
    save_tensor(a, tmp_path / "t.tflx")
    assert load_tensor(tmp_path / "t.tflx").tobytes() == a.tobytes()


def test_bad_magic_and_truncation(tmp_path, small_model):
    p = tmp_path / "bad.tflx"
    p.write_bytes(b"XXXX" + b"\0" * 40)
    with pytest.raises(FormatError):
        load_tensor(p)
    save_model(small_model, tmp_path / "m.tflx", config_json=False)
    raw = (tmp_path / "m.tflx").read_bytes()
    (tmp_path / "cut.tflx").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_model(tmp_path / "cut.tflx")


def test_profile_csv_round_trip(tmp_path):
    prof = PerformanceProfile((0.1, 0.2, 1 / 3, 0.9, 0.5))
    write_profile_csv(tmp_path / "p.csv", prof)
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "layer,score"
    assert read_profile_csv(tmp_path / "p.csv").scores == prof.scores


def test_profile_csv_rejects_gaps(tmp_path):
    (tmp_path / "p.csv").write_text("layer,score\n1,0.1\n3,0.2\n")
    with pytest.raises(FormatError):
        read_profile_csv(tmp_path / "p.csv")
