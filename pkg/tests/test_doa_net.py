import math
from dataclasses import dataclass

import numpy as np
import pytest

from dsfanc.doa_net import (Architecture, CnnParams, DoaPrediction, TrainConfig, argmax_classes, backward,
                            count_params_and_macs, evaluate, forward, forward_logits, groupnorm_forward,
                            joint_loss, load_checkpoint, loss_and_grad, maxpool_backward, maxpool_forward,
                            save_checkpoint, softmax, train)

SMALL = Architecture(channels=(4, 4), groups=(2, 2), input_hw=(9, 7))


def naive_forward(x, p, arch):
    """Loop-level forward pass of one sample, independent of the im2col code."""
    h = np.array(x, dtype=float)
    for i, g in enumerate(arch.groups, 1):
        w, b = p[f"conv{i}.w"], p[f"conv{i}.b"]
        C, H, W = h.shape
        pad = np.zeros((C, H + 2, W + 2))
        pad[:, 1:-1, 1:-1] = h
        a = np.zeros((w.shape[0], H, W))
        for o in range(w.shape[0]):
            for y in range(H):
                for z in range(W):
                    a[o, y, z] = b[o] + sum(w[o, c, u, v] * pad[c, y + u, z + v]
                                            for c in range(C) for u in range(3) for v in range(3))
        cg = w.shape[0] // g
        n = np.zeros_like(a)
        for k in range(g):
            blk = a[k * cg:(k + 1) * cg]
            mu = blk.sum() / blk.size
            var = ((blk - mu) ** 2).sum() / blk.size
            n[k * cg:(k + 1) * cg] = (blk - mu) / math.sqrt(var + 1e-5)
        n = n * p[f"gn{i}.gamma"][:, None, None] + p[f"gn{i}.beta"][:, None, None]
        r = np.maximum(n, 0)
        hh, ww = H // 2, W // 2
        m = np.zeros((r.shape[0], hh, ww))
        for c in range(r.shape[0]):
            for y in range(hh):
                for z in range(ww):
                    m[c, y, z] = max(r[c, 2 * y, 2 * z], r[c, 2 * y, 2 * z + 1],
                                     r[c, 2 * y + 1, 2 * z], r[c, 2 * y + 1, 2 * z + 1])
        h = m
    pooled = np.array([h[c].mean() for c in range(h.shape[0])])
    za = p["fc_azim.w"] @ pooled + p["fc_azim.b"]
    ze = p["fc_elev.w"] @ pooled + p["fc_elev.b"]
    return za, ze


def random_params(arch, seed):
    p = CnnParams.init(arch, seed)
    rng = np.random.default_rng(seed + 100)
    for k in p:
        if not k.endswith(".w"):
            p[k] = p[k] + 0.3 * rng.standard_normal(p[k].shape)
    return p


def test_forward_matches_naive_oracle():
    p = random_params(SMALL, 1)
    x = np.random.default_rng(2).standard_normal((3, 8, 9, 7))
    za, ze, _ = forward_logits(x, p)
    for b in range(3):
        ra, re = naive_forward(x[b], p, SMALL)
        np.testing.assert_allclose(za[:, b], ra, rtol=0, atol=1e-10)
        np.testing.assert_allclose(ze[:, b], re, rtol=0, atol=1e-10)


def test_forward_batch_independence():
    p = random_params(SMALL, 3)
    x = np.random.default_rng(4).standard_normal((4, 8, 9, 7))
    za, ze, _ = forward_logits(x, p)
    za1, ze1, _ = forward_logits(x[2], p)
    np.testing.assert_allclose(za[:, 2], za1[:, 0], atol=1e-12)
    np.testing.assert_allclose(ze[:, 2], ze1[:, 0], atol=1e-12)


def test_prediction_normalized_default_arch():
    p = CnnParams.init(seed=0)
    x = np.random.default_rng(5).standard_normal((8, 513, 110))
    pred, _ = forward(x, p)
    assert pred.p_azim.shape == (6,) and pred.p_elev.shape == (3,)
    assert abs(pred.p_azim.sum() - 1) < 1e-6 and abs(pred.p_elev.sum() - 1) < 1e-6
    assert np.all(pred.p_azim >= 0) and np.all(pred.p_elev >= 0)


def test_forward_shape_errors():
    p = CnnParams.init(SMALL)
    for shape in ((8, 9, 8), (7, 9, 7), (2, 8, 9)):
        with pytest.raises(ValueError):
            forward(np.zeros(shape), p)


def test_degenerate_forward():
    p = CnnParams(SMALL)  # all zeros, including GN scale and shift
    p["fc_azim.b"] = np.arange(6.0)
    p["fc_elev.b"] = np.array([0.5, -1.0, 2.0])
    pred, _ = forward(np.zeros((8, 9, 7)), p)
    np.testing.assert_array_equal(pred.p_azim, softmax(p["fc_azim.b"]))
    np.testing.assert_array_equal(pred.p_elev, softmax(p["fc_elev.b"]))


def test_forward_non_finite_raises():
    p = CnnParams.init(SMALL)
    p["fc_azim.b"][0] = np.inf
    with pytest.raises(FloatingPointError):
        forward(np.ones((8, 9, 7)), p)


def test_groupnorm_statistics():
    x = np.random.default_rng(6).standard_normal((8, 3, 5, 6)) * 4 + 2
    out, _ = groupnorm_forward(x, np.ones(8), np.zeros(8), 4)
    g = out.reshape(4, 2, 3, 5, 6)
    assert np.abs(g.mean(axis=(1, 3, 4))).max() <= 1e-6
    np.testing.assert_allclose(g.var(axis=(1, 3, 4)), 1.0, atol=1e-4)


def test_maxpool_first_position_tie():
    x = np.ones((1, 1, 2, 2))
    out, idx = maxpool_forward(x)
    assert out[0, 0, 0, 0] == 1 and idx[0, 0, 0, 0] == 0
    dx = maxpool_backward(np.full((1, 1, 1, 1), 5.0), idx, x.shape)
    np.testing.assert_array_equal(dx[0, 0], [[5, 0], [0, 0]])
    x = np.zeros((1, 1, 3, 5))
    x[0, 0, 1, 3] = 2.0
    out, idx = maxpool_forward(x)
    assert out.shape == (1, 1, 1, 2) and out[0, 0, 0, 1] == 2.0
    dx = maxpool_backward(np.ones((1, 1, 1, 2)), idx, x.shape)
    assert dx[0, 0, 1, 3] == 1 and dx[0, 0, 2].sum() == 0 and dx[0, 0, :, 4].sum() == 0


def test_argmax_classes():
    assert argmax_classes(DoaPrediction(np.array([0.9, 0.02, 0.02, 0.02, 0.02, 0.02]),
                                        np.array([0.1, 0.8, 0.1]))) == (0, 1)
    assert argmax_classes(DoaPrediction(np.ones(6) / 6, np.ones(3) / 3)) == (0, 0)
    z = np.random.default_rng(7).standard_normal(6)
    ze = np.random.default_rng(8).standard_normal(3)
    base = argmax_classes(DoaPrediction(softmax(z), softmax(ze)))
    assert argmax_classes(DoaPrediction(softmax(z + 123.4), softmax(ze - 55.0))) == base


def test_joint_loss_values():
    total, la, le = joint_loss(np.zeros(6), np.zeros(3), 2, 1)
    assert total == pytest.approx(math.log(6) + math.log(3), abs=1e-12)
    assert total == pytest.approx(2.8904, abs=1e-4)
    za, ze = np.full(6, -50.0), np.full(3, -50.0)
    za[4], ze[2] = 50.0, 50.0
    assert joint_loss(za, ze, 4, 2)[0] < 1e-20
    rng = np.random.default_rng(9)
    for _ in range(20):
        za, ze = rng.standard_normal((6, 5)) * 3, rng.standard_normal((3, 5)) * 3
        ya, ye = rng.integers(0, 6, 5), rng.integers(0, 3, 5)
        total, la, le = joint_loss(za, ze, ya, ye)
        assert total >= 0 and total == la + le
        # per-task losses computed independently
        ra = np.mean([-za[ya[b], b] + np.log(np.exp(za[:, b]).sum()) for b in range(5)])
        assert la == pytest.approx(ra, rel=1e-12)


def test_joint_loss_stable_for_large_logits():
    za = np.array([1000.0, 0, 0, 0, 0, 0])
    total, la, _ = joint_loss(za, np.zeros(3), 1, 0)
    assert math.isfinite(total) and la == pytest.approx(1000.0)


def test_head_bias_gradient_closed_form():
    p = random_params(SMALL, 10)
    x = np.random.default_rng(11).standard_normal((1, 8, 9, 7))
    za, ze, cache = forward_logits(x, p)
    g = backward(cache, za, ze, [3], [2], p)
    onehot = np.eye(6)[3]
    np.testing.assert_allclose(g["fc_azim.b"], softmax(za)[:, 0] - onehot, atol=1e-15)
    np.testing.assert_allclose(g["fc_elev.b"], softmax(ze)[:, 0] - np.eye(3)[2], atol=1e-15)


def test_zero_loss_gradients_vanish():
    p = random_params(SMALL, 12)
    p["fc_azim.b"][:] = -40.0
    p["fc_azim.b"][1] = 40.0
    p["fc_elev.b"][:] = -40.0
    p["fc_elev.b"][0] = 40.0
    p["fc_azim.w"] *= 1e-3
    p["fc_elev.w"] *= 1e-3
    (loss, _, _), g = loss_and_grad(np.random.default_rng(13).standard_normal((2, 8, 9, 7)), [1, 1], [0, 0], p)
    assert loss < 1e-30
    assert max(np.abs(v).max() for v in g.values()) <= 1e-8


def finite_difference_check(arch, x, ya, ye, seed, per_tensor=12):
    p = random_params(arch, seed)
    _, g = loss_and_grad(x, ya, ye, p)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in p:
        flat = p[name].ravel()
        for i in rng.choice(flat.size, min(per_tensor, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-5
            lp = loss_and_grad(x, ya, ye, p)[0][0]
            flat[i] = old - 1e-5
            lm = loss_and_grad(x, ya, ye, p)[0][0]
            flat[i] = old
            num = (lp - lm) / 2e-5
            ana = g[name].ravel()[i]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


def test_gradients_small_network():
    x = np.random.default_rng(14).standard_normal((3, 8, 9, 7))
    assert finite_difference_check(SMALL, x, [0, 5, 2], [1, 2, 0], seed=15, per_tensor=30) < 1e-4


def test_count_params_and_macs():
    n, macs = count_params_and_macs(Architecture())
    assert 20_000 <= n <= 40_000
    assert 6e7 <= macs <= 2.4e8
    assert n == CnnParams.init().count() == CnnParams.init().flat().size
    wide = Architecture(channels=(32, 64, 128), groups=(4, 8, 8))
    conv = lambda a: sum(int(np.prod(s)) for k, s in a.param_shapes().items()
                         if k.startswith("conv") and k.endswith(".w") and k != "conv1.w")
    assert conv(wide) / conv(Architecture()) == pytest.approx(4.0)
    assert count_params_and_macs(CnnParams.init())[0] == n


def test_architecture_validation():
    with pytest.raises(ValueError):
        Architecture(channels=(16, 32), groups=(4, 8, 8))
    with pytest.raises(ValueError):
        Architecture(channels=(16, 30, 64), groups=(4, 8, 8))
    with pytest.raises(ValueError):
        CnnParams.from_flat(SMALL, np.zeros(5))


# --- training ------------------------------------------------------------------------


@dataclass
class ToySet:
    x: np.ndarray
    azim: np.ndarray
    elev: np.ndarray

    def __len__(self):
        return len(self.x)

    def batch(self, idx):
        return self.x[list(idx)]


def toy_dataset(n=200, seed=0):
    """Two 'directions': the sign of a fixed spatial pattern in the first
    channel separates them."""
    rng = np.random.default_rng(seed)
    pattern = rng.standard_normal((9, 7))
    y = np.arange(n) % 2
    x = 0.3 * rng.standard_normal((n, 8, 9, 7))
    x[:, 0] += np.where(y == 0, 1.0, -1.0)[:, None, None] * pattern
    return ToySet(x, np.where(y == 0, 1, 4), np.where(y == 0, 1, 2))


def test_toy_training_reduces_loss():
    ds = toy_dataset()
    cfg = TrainConfig(epochs=20, batch_size=32, lr=1e-2, seed=3, micro_batch=32)
    p0 = CnnParams.init(SMALL, cfg.seed)
    initial = evaluate(ds, p0)["loss"]
    best, hist = train(ds, None, cfg, SMALL)
    assert len(hist) == 20
    assert hist[-1]["train_loss"] < 0.1 * initial
    ev = evaluate(ds, best)
    assert ev["acc_azim"] == 1.0 and ev["acc_elev"] == 1.0


def test_training_deterministic_and_best_checkpoint():
    ds = toy_dataset(64, seed=1)
    val = toy_dataset(32, seed=2)
    cfg = TrainConfig(epochs=4, batch_size=16, lr=5e-3, seed=7, micro_batch=4)
    a, ha = train(ds, val, cfg, SMALL)
    b, hb = train(ds, val, cfg, SMALL)
    assert np.array_equal(a.flat(), b.flat())
    assert [h["val_loss"] for h in ha] == [h["val_loss"] for h in hb]
    assert evaluate(val, a)["loss"] == pytest.approx(min(h["val_loss"] for h in ha), rel=1e-12)


def test_time_budget_stops_early(caplog):
    ds = toy_dataset(16, seed=3)
    _, hist = train(ds, None, TrainConfig(epochs=5, batch_size=8, max_seconds=1e-9), SMALL)
    assert len(hist) == 1 and "budget" in caplog.text
    _, hist = train(ds, None, TrainConfig(epochs=3, batch_size=8, max_seconds=1e6), SMALL)
    assert len(hist) == 3


def test_micro_batch_matches_full_batch_gradient():
    ds = toy_dataset(12, seed=4)
    p = random_params(SMALL, 5)
    idx = np.arange(12)
    (_, _, _), g_full = loss_and_grad(ds.batch(idx), ds.azim, ds.elev, p)
    acc = {k: np.zeros_like(v) for k, v in p.items()}
    for m in range(0, 12, 5):
        sub = idx[m:m + 5]
        _, g = loss_and_grad(ds.batch(sub), ds.azim[sub], ds.elev[sub], p)
        for k in acc:
            acc[k] += len(sub) / 12 * g[k]
    for k in acc:
        np.testing.assert_allclose(acc[k], g_full[k], rtol=1e-10, atol=1e-13)


def test_train_rejects_empty_and_nan():
    with pytest.raises(ValueError):
        train(ToySet(np.zeros((0, 8, 9, 7)), np.zeros(0, int), np.zeros(0, int)), None, TrainConfig(), SMALL)
    ds = toy_dataset(8)
    ds.x[0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        train(ds, None, TrainConfig(epochs=1, batch_size=8), SMALL)


def test_checkpoint_round_trip(tmp_path):
    p = random_params(SMALL, 21)
    m = save_checkpoint(tmp_path / "cnn.bin", p, log_magnitude=True, normalize="pooled", extra={"note": "x"})
    assert m["n_params"] == p.count()
    ck = load_checkpoint(tmp_path / "cnn.bin")
    assert ck.log_magnitude is True and ck.normalize == "pooled"
    assert ck.params.arch == SMALL
    for k in p:
        assert np.array_equal(ck.params[k], p[k])
    assert ck.grid == {"azimuth_classes": [0, 60, 120, 180, 240, 300], "elevation_classes": [90, 30, -30]}
