import json
import math
import struct

import numpy as np
import pytest

from mambasr import checkpoint, config
from mambasr.errors import ConfigError
from mambasr.optim import Adam, cosine_lr
from mambasr.rng import derive, derive_seed
from mambasr.tensor import Tensor


# --------------------------------------------------------------------- rng

def test_derived_streams_reproducible_and_distinct():
    a = derive(7, "init").normal(size=4)
    assert np.array_equal(a, derive(7, "init").normal(size=4))
    assert not np.array_equal(a, derive(7, "batch", 0).normal(size=4))
    assert not np.array_equal(a, derive(8, "init").normal(size=4))
    assert derive_seed(7, "x") == derive_seed(7, "x") != derive_seed(7, "y")


# ------------------------------------------------------------------ config

def test_config_defaults_and_parse():
    cfg = config.parse_text("# comment\nmodel.dim = 12\n\ntrain.lr=0.5  # trailing\nbench.lengths = 8, 16\n")
    assert cfg["model.dim"] == 12
    assert cfg["train.lr"] == 0.5
    assert cfg["bench.lengths"] == (8, 16)
    assert cfg["loss.lambda"] == 4.0
    assert cfg["model.heads"] == 6


def test_config_errors():
    with pytest.raises(ConfigError, match=":1:"):
        config.parse_text("model.bogus = 1")
    with pytest.raises(ConfigError):
        config.parse_text("model.dim")
    with pytest.raises(ConfigError):
        config.parse_text("model.dim = twelve")
    with pytest.raises(ConfigError):
        config.RunConfig().set("seed", str(2 ** 64))


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\ntrain.steps = 10\n", encoding="utf-8")
    cfg = config.load(str(path), ["train.steps=4"])
    assert (cfg["seed"], cfg["train.steps"]) == (3, 4)
    json.dumps(cfg.resolved())
    with pytest.raises(ConfigError):
        config.load(str(tmp_path / "missing.cfg"))


# ------------------------------------------------------------------- optim

def test_cosine_schedule():
    assert cosine_lr(0, 11, 1.0) == 1.0
    assert cosine_lr(5, 11, 1.0) == pytest.approx(0.5, abs=1e-15)
    assert cosine_lr(10, 11, 1.0, 0.1) == pytest.approx(0.1, abs=1e-15)
    assert cosine_lr(50, 11, 1.0) == pytest.approx(0.0, abs=1e-15)


def test_adam_first_steps_match_hand_formula():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam(lr=0.1, total_steps=1)
    g1 = np.array([0.5, -1.0])
    p.grad = g1.copy()
    opt.step({"p": p})
    # first bias-corrected step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 1.0 / (1.0 + 1e-8)], rtol=1e-15)
    g2 = np.array([0.25, 0.0])
    p.grad = g2.copy()
    before = p.data.copy()
    opt.step({"p": p})
    m = (0.1 * 0.9 * g1 + 0.1 * g2) / (1 - 0.9 ** 2)
    v = (0.001 * 0.999 * g1 ** 2 + 0.001 * g2 ** 2) / (1 - 0.999 ** 2)
    np.testing.assert_allclose(p.data, before - 0.1 * m / (np.sqrt(v) + 1e-8), rtol=1e-14)


def test_adam_rejects_bad_lr():
    with pytest.raises(ConfigError):
        Adam(lr=0.0)


# -------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"b": rng.normal(size=(2, 3)), "a": rng.normal(size=4), "s": np.array(2.5)}
    meta = {"z": 1, "a": [1, 2], "nested": {"y": "x"}}
    path = tmp_path / "c.msrckpt"
    checkpoint.save(path, meta, tensors)
    meta2, tensors2 = checkpoint.load(path)
    assert meta2 == meta
    assert list(tensors2) == list(tensors)
    for k in tensors:
        assert tensors2[k].shape == tensors[k].shape
        assert np.array_equal(tensors2[k], tensors[k])


def test_checkpoint_layout():
    raw = checkpoint.encode({"b": 1, "a": 2}, {"w": np.array([[1.0, 2.0]])})
    assert raw[:8] == b"MSRCKPT1"
    (n,) = struct.unpack_from("<Q", raw, 8)
    assert raw[16:16 + n] == b'{"a":2,"b":1}'
    pos = 16 + n
    (name_len,) = struct.unpack_from("<Q", raw, pos)
    assert raw[pos + 8:pos + 8 + name_len] == b"w"
    pos += 8 + name_len
    assert struct.unpack_from("<QQQ", raw, pos) == (2, 1, 2)
    assert struct.unpack_from("<2d", raw, pos + 24) == (1.0, 2.0)
    assert len(raw) == pos + 24 + 16


def test_checkpoint_errors(tmp_path):
    good = checkpoint.encode({}, {"w": np.ones(3)})
    with pytest.raises(checkpoint.CheckpointError, match="bad magic"):
        checkpoint.decode(b"XXXXXXXX" + good[8:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(good[:-5])
    with pytest.raises(FileNotFoundError):
        checkpoint.load(tmp_path / "nope")
    assert math.isfinite(checkpoint.decode(good)[1]["w"].sum())
