import math

import numpy as np
import pytest

import esparse


def test_tensor_round_trip(tmp_path):
    a = np.arange(12, dtype=np.float32).reshape(3, 4)
    esparse.write_tensor(a, tmp_path / "a.espt")
    np.testing.assert_array_equal(esparse.read_tensor(tmp_path / "a.espt"), a)

    h = a.astype(np.float16)
    esparse.write_tensor(h, tmp_path / "h.espt")
    back = esparse.read_tensor(tmp_path / "h.espt")
    assert back.dtype == np.float16
    np.testing.assert_array_equal(back, h)


def test_bad_file_raises(tmp_path):
    (tmp_path / "x.espt").write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        esparse.read_tensor(tmp_path / "x.espt")


def test_channel_stats_anchors():
    x = np.zeros((6, 2), dtype=np.float32)
    x[:, 0] = 2.5
    x[::2, 1] = 1.0
    s = esparse.channel_stats(x)
    assert s["entropy"][0] == 0.0
    assert s["entropy"][1] == math.log(2.0)
    assert s["amplitude"][1] == pytest.approx(math.sqrt(3.0))


def test_metric_matches_numpy():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 8)).astype(np.float32)
    x = rng.normal(size=(32, 8)).astype(np.float32)
    wanda = esparse.metric(w, x, kind="wanda")
    norms = np.linalg.norm(x.astype(np.float64), axis=0)
    np.testing.assert_allclose(wanda, np.abs(w) * norms, rtol=1e-6)


def test_shuffle_and_mask():
    xi = np.array([[8, 7, 6, 5, 4, 3, 2, 1]], dtype=np.float64)
    p = esparse.channel_shuffle(xi, mode="global")
    assert p["order"] == [0, 2, 4, 6, 1, 3, 5, 7]
    assert esparse.retained_objective(xi, p["order"]) == p["objective_after"]
    mask = esparse.nm_mask(np.array([[0.9, 0.1, 0.5, 0.3]]))
    assert mask.tolist() == [[1, 0, 1, 0]]


def test_prune_pack_gemm(tmp_path):
    w, x, outliers = esparse.synth_layer(seed=1, tokens=128, channels=64, out_channels=16, outlier_fraction=0.05)
    assert len(outliers) == 3
    r = esparse.prune_layer(w, x, block_size=32)
    assert sorted(r.permutation) == list(range(64))
    assert (r.mask.reshape(16, 16, 4).sum(axis=2) >= 0).all()
    assert (r.mask_permuted.reshape(16, 16, 4).sum(axis=2) == 2).all()

    packed = esparse.pack(r)
    assert packed.invariant_violations() == []
    assert packed.accounting(8)["flop_ratio"] == 0.5
    dense = packed.dense()
    ref = x @ dense.T
    y = packed.gemm(x)
    assert np.linalg.norm(y - ref) / np.linalg.norm(ref) < 1e-5

    packed.save(tmp_path / "l.espk")
    again = esparse.load_packed(tmp_path / "l.espk")
    np.testing.assert_array_equal(again.dense(), dense)


def test_invalid_pattern():
    w = np.ones((2, 8), dtype=np.float32)
    x = np.ones((4, 8), dtype=np.float32)
    with pytest.raises(ValueError):
        esparse.prune_layer(w, x, pattern="4:3")
