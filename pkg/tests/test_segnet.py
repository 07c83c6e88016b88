import numpy as np
import pytest

import oracles
from boxadapt import grid as G
from boxadapt import segnet as S
from boxadapt import trainer as T

SMALL = S.NetConfig(base_channels=4)


def _batch(n=2, h=16, w=16, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 1, h, w)).astype(np.float32)


def test_param_count_pinned():
    assert S.param_count(S.NetConfig()) == 9474
    assert S.param_count(S.NetConfig()) == oracles.param_count(1, 16, 3, 1)
    for cfg in (S.NetConfig(base_channels=8), S.NetConfig(2, 5, 2, 2)):
        assert S.param_count(cfg) == oracles.param_count(cfg.in_channels, cfg.base_channels,
                                                         cfg.shared_blocks, cfg.head_blocks)


def test_param_count_matches_built_model():
    m = S.build(S.NetConfig(), 0)
    assert sum(p.value.size for p in m.parameters().values()) == S.param_count(S.NetConfig())


def test_build_is_deterministic_and_he_uniform():
    a, b = S.build(S.NetConfig(), 7), S.build(S.NetConfig(), 7)
    assert a.checksum() == b.checksum()
    assert a.checksum() != S.build(S.NetConfig(), 8).checksum()
    for name, p in a.named_parameters():
        if name.endswith("bias"):
            assert not p.value.any()
        else:
            bound = np.sqrt(6.0 / np.prod(p.shape[1:]))
            assert np.abs(p.value).max() <= bound


def test_invalid_config_rejected():
    with pytest.raises(S.ConfigError):
        S.build(S.NetConfig(shared_blocks=0), 0)
    with pytest.raises(S.ConfigError):
        S.NetConfig.from_dict({"base_channels": 8, "width": 3})


def test_forward_shape_and_clamp():
    m = S.build(S.NetConfig(), 0)
    out = m.forward("target", _batch(2, 64, 64))
    assert out.shape == (2, 1, 64, 64)
    assert out.value.min() >= 1e-6 and out.value.max() <= 1 - 1e-6


def test_forward_shape_errors():
    m = S.build(SMALL, 0)
    with pytest.raises(G.ShapeError):
        m.forward("source", np.zeros((1, 1, 18, 16), np.float32))
    with pytest.raises(G.ShapeError):
        m.forward("source", np.zeros((1, 2, 16, 16), np.float32))
    with pytest.raises(ValueError):
        m.forward("middle", _batch())


def test_forward_deterministic():
    m = S.build(SMALL, 0)
    x = _batch()
    np.testing.assert_array_equal(m.predict("source", x), m.predict("source", x))


def test_shared_encoder_perturbation_changes_both_heads():
    m = S.build(SMALL, 0)
    x = _batch()
    before = {h: m.predict(h, x) for h in S.HEADS}
    m.bodies["source"]["0.weight"].value[0, 0, 1, 1] += 0.5
    for h in S.HEADS:
        assert not np.array_equal(before[h], m.predict(h, x))
    assert m.bodies["source"] is m.bodies["target"]


def test_unshare_duplicates_then_isolates():
    m = S.build(SMALL, 0)
    for k, v in m.heads["source"].items():
        m.heads["target"][k].value[...] = v.value
    m.unshare_and_freeze_source()
    x = _batch()
    np.testing.assert_array_equal(m.predict("source", x), m.predict("target", x))
    before = m.predict("source", x)
    m.bodies["target"]["0.weight"].value += 0.3
    np.testing.assert_array_equal(m.predict("source", x), before)
    assert m.state == "unshared"
    with pytest.raises(S.StateError):
        m.unshare_and_freeze_source()


def test_unshare_freezes_exactly_the_source_side():
    m = S.build(SMALL, 0)
    m.unshare_and_freeze_source()
    assert m.frozen == set(m.head_parameters("source"))
    trainable = m.trainable_parameters()
    assert trainable and all(k.startswith("target.") for k in trainable)


def test_target_grads_flow_after_unshare_and_source_survives_steps():
    m = S.build(SMALL, 0)
    m.unshare_and_freeze_source()
    src_sum = m.checksum("source")
    params = m.trainable_parameters()
    state = T.AdamState()
    x = _batch()
    for _ in range(100):
        m.zero_grad()
        G.backward(G.mean_all(m.forward("target", x)))
        assert any(p.grad.any() for p in params.values())
        T.adam_step(params, state, 1e-3)
    assert m.checksum("source") == src_sum


def test_sharing_gradient_is_sum_of_separate_passes():
    m = S.build(S.NetConfig(base_channels=3), 1, dtype=np.float64)
    x = _batch(1, 8, 8).astype(np.float64)
    shared = m.bodies["source"]

    def loss(head):
        return G.mean_all(m.forward(head, x))

    m.zero_grad()
    G.backward(G.add(loss("source"), loss("target")))
    joint = {k: v.grad.copy() for k, v in shared.items()}
    separate = {k: np.zeros_like(v) for k, v in joint.items()}
    for h in S.HEADS:
        m.zero_grad()
        G.backward(loss(h))
        for k, v in shared.items():
            separate[k] += v.grad
    for k in joint:
        np.testing.assert_allclose(joint[k], separate[k], rtol=1e-6, atol=1e-15)


def test_model_forward_gradcheck_small():
    cfg = S.NetConfig(base_channels=2, shared_blocks=3, head_blocks=1)
    m = S.build(cfg, 3, dtype=np.float64)
    x = _batch(1, 8, 8, seed=2).astype(np.float64)
    name = "target.head.0.weight"

    def builder(w):
        m.heads["target"]["0.weight"] = w
        return G.mean_all(m.forward("target", x))

    start = m.parameters()[name].value.copy()
    assert G.finite_diff_check(builder, [start]).passed


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    m = S.build(SMALL, 4)
    m.iteration = 17
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    S.save_checkpoint(m, a)
    loaded = S.load_checkpoint(a, expected_config=SMALL)
    S.save_checkpoint(loaded, b)
    assert a.read_bytes() == b.read_bytes()
    assert loaded.iteration == 17 and loaded.seed == 4 and loaded.state == "shared"
    assert loaded.checksum() == m.checksum()
    assert loaded.bodies["source"] is loaded.bodies["target"]


def test_checkpoint_preserves_unshared_state_and_frozen_flags(tmp_path):
    m = S.build(SMALL, 0)
    m.unshare_and_freeze_source()
    p = tmp_path / "u.ckpt"
    S.save_checkpoint(m, p)
    loaded = S.load_checkpoint(p)
    assert loaded.state == "unshared"
    assert loaded.frozen == m.frozen
    assert loaded.bodies["source"] is not loaded.bodies["target"]


def test_checkpoint_errors_are_distinct(tmp_path):
    m = S.build(SMALL, 0)
    p = tmp_path / "m.ckpt"
    S.save_checkpoint(m, p)
    data = p.read_bytes()

    bad_magic = tmp_path / "magic.ckpt"
    bad_magic.write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(S.CheckpointFormatError):
        S.load_checkpoint(bad_magic)

    bad_version = tmp_path / "version.ckpt"
    bad_version.write_bytes(data[:8] + b"\x09\x00" + data[10:])
    with pytest.raises(S.CheckpointFormatError):
        S.load_checkpoint(bad_version)

    short = tmp_path / "short.ckpt"
    short.write_bytes(data[:-10])
    with pytest.raises(S.CheckpointTruncatedError):
        S.load_checkpoint(short)

    with pytest.raises(S.CheckpointConfigMismatch):
        S.load_checkpoint(p, expected_config=S.NetConfig(base_channels=5))


def test_checkpoint_shape_error(tmp_path):
    import json
    import struct

    m = S.build(SMALL, 0)
    p = tmp_path / "m.ckpt"
    S.save_checkpoint(m, p)
    data = p.read_bytes()
    (hlen,) = struct.unpack_from("<I", data, 10)
    header = json.loads(data[14:14 + hlen])
    header["params"][0]["shape"] = [4, 1, 3, 2]
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    bad = tmp_path / "shape.ckpt"
    bad.write_bytes(data[:10] + struct.pack("<I", len(hb)) + hb + data[14 + hlen:])
    with pytest.raises(S.CheckpointShapeError):
        S.load_checkpoint(bad)


def test_astype_keeps_values_and_sharing():
    m = S.build(SMALL, 0)
    d = m.astype(np.float64)
    assert d.dtype == np.float64
    assert d.bodies["source"] is d.bodies["target"]
    for (k, a), (_, b) in zip(m.named_parameters(), d.named_parameters()):
        np.testing.assert_array_equal(a.value.astype(np.float64), b.value)
