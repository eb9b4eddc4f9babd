import numpy as np
import pytest
from hypothesis import given, strategies as st

from koasev import cnn_ref as cnn

TABLE4 = {
    "conv1": "32x100x150", "maxPool1": "32x49x74", "conv2": "64x49x74", "maxPool2": "64x24x36",
    "conv3": "96x24x36", "maxPool3": "96x11x17", "conv4": "128x11x17", "maxPool4": "128x5x8",
}


def test_reference_shapes():
    rows = {r["layer"]: r["output_shape"] for r in cnn.build_reference_network().shape_table()}
    for k, v in TABLE4.items():
        assert rows[k] == v
    assert rows["flatten"] == "5120" and rows["fc5"] == "1024" and rows["fc6"] == "5"


def test_reference_network_regularisation_layout():
    net = cnn.build_reference_network()
    l2 = {l.name for l in net.layers if l.l2_penalty > 0}
    assert l2 == {"conv3", "conv4", "fc5"}
    names = [l.name for l in net.layers]
    assert names.index("drop4") == names.index("conv4_relu") + 1
    assert names[names.index("fc5") + 2] == "drop5"
    assert [l.dropout_rate for l in net.layers if l.kind == "dropout"] == [0.25, 0.5]
    # every conv is followed by batchnorm then relu
    for i, l in enumerate(net.layers):
        if l.kind == "conv":
            assert [net.layers[i + 1].kind, net.layers[i + 2].kind] == ["batchnorm", "relu"]


@given(st.integers(1, 400), st.integers(1, 5))
def test_same_conv_shape_rule(n, s):
    layer = cnn.LayerSpec("conv", "c", 4, (3, 3), s)
    assert cnn.layer_output_shape(layer, (1, n, n))[1] == -(-n // s)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        cnn.LayerSpec("conv", stride=0)
    with pytest.raises(ValueError):
        cnn.LayerSpec("dropout", dropout_rate=1.0)
    with pytest.raises(ValueError):
        cnn.LayerSpec("dense", l2_penalty=-1)
    with pytest.raises(ValueError):
        cnn.AdamConfig(beta1=1.0)


def _tiny():
    spec = cnn.NetworkSpec((cnn.LayerSpec("conv", "c", 5, (1, 1), 1, bias=False),
                            cnn.LayerSpec("flatten", "f"), cnn.LayerSpec("softmax", "s")), (5, 1, 1))
    net = cnn.init_network(spec)
    net.params["c.W"] = np.eye(5).reshape(5, 5, 1, 1)
    return net


def test_tiny_identity_net_hand_values():
    net = _tiny()
    z = np.array([1.0, 2.0, 0.0, -1.0, 0.5])
    probs, _ = cnn.forward(net, z.reshape(1, 5, 1, 1))
    e = np.exp(z)
    np.testing.assert_allclose(probs[0], e / e.sum(), atol=1e-15)
    zero, _ = cnn.forward(net, np.zeros((2, 5, 1, 1)))
    np.testing.assert_allclose(zero, 0.2)


def test_forward_rows_sum_to_one_and_eval_deterministic():
    net = cnn.init_network(cnn.build_small_network(), seed=1)
    X = np.random.default_rng(0).standard_normal((6, 1, 20, 30))
    a, _ = cnn.forward(net, X, "eval")
    b, _ = cnn.forward(net, X, "eval")
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a.sum(1), 1.0, atol=1e-6)
    with pytest.raises(cnn.ShapeError):
        cnn.forward(net, X[:, :, :10])


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 7, 8))
    W = rng.standard_normal((4, 3, 3, 3))
    out, _ = cnn.conv_forward(x, W, None, 2, "same")
    assert out.shape == (2, 4, 4, 4)
    (pt, pb), (pl, pr) = cnn._same_pads(7, 3, 2), cnn._same_pads(8, 3, 2)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    ref = np.zeros_like(out)
    for n in range(2):
        for f in range(4):
            for i in range(4):
                for j in range(4):
                    ref[n, f, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * W[f])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_maxpool_valid_floor():
    x = np.arange(2 * 7 * 9, dtype=float).reshape(1, 2, 7, 9)
    out, _ = cnn.maxpool_forward(x, (3, 3), 2)
    assert out.shape == (1, 2, 3, 4)
    assert out[0, 0, 0, 0] == x[0, 0, 2, 2]


def test_batchnorm_train_normalises():
    rng = np.random.default_rng(3)
    x = 3.0 + 2.0 * rng.standard_normal((16, 4, 5, 5))
    out, _ = cnn.batchnorm_forward(x, np.ones(4), np.zeros(4), np.zeros(4), np.ones(4), True)
    np.testing.assert_allclose(out.mean((0, 2, 3)), 0.0, atol=1e-4)
    np.testing.assert_allclose(out.var((0, 2, 3)), 1.0, atol=1e-4)


def test_dropout_eval_identity_and_train_unbiased():
    spec = cnn.NetworkSpec((cnn.LayerSpec("flatten", "f"), cnn.LayerSpec("dropout", "d", dropout_rate=0.4),
                            cnn.LayerSpec("softmax", "s")), (1, 1, 5))
    net = cnn.init_network(spec)
    x = np.array([[[[0.5, -1.0, 2.0, 0.0, 1.0]]]])
    _, cache = cnn.forward(net, x, "eval")
    np.testing.assert_array_equal(cache.logits, x.reshape(1, 5))
    acc = np.zeros(5)
    for s in range(10_000):
        _, cache = cnn.forward(net, x, "train", seed=s)
        acc += cache.logits[0]
    np.testing.assert_allclose(acc / 10_000, x.ravel(), rtol=0.02, atol=0.02)


def test_gradient_check_downsized():
    report = cnn.gradient_check(seed=0)
    assert set(report) >= {"conv1.W", "conv2.W", "fc3.W", "fc4.b", "conv1_bn.gamma"}
    assert max(report.values()) < 1e-4


def test_loss_terms():
    net = _tiny()
    net.params["c.W"] *= 1.0
    big = np.zeros((1, 5, 1, 1))
    big[0, 2] = 60.0
    loss, grads = cnn.loss_and_gradients(net, big, np.array([2]))
    assert loss < 1e-6
    assert set(grads) == {"c.W"}
    with pytest.raises(ValueError):
        cnn.loss_and_gradients(net, big, np.array([7]))


def test_penalty_zero_weights_contribute_nothing():
    net = cnn.init_network(cnn.build_small_network(), seed=0)
    base = cnn.l2_penalty(net)
    assert base > 0
    net.params["conv2.W"][:] = 0
    net.params["fc3.W"][:] = 0
    assert cnn.l2_penalty(net) == 0.0


def test_adam_single_step():
    cfg = cnn.AdamConfig()
    p, s = cnn.adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, {}, cfg, 1)
    m, v = s["w"]
    assert m[0] == pytest.approx(0.1, abs=1e-15) and v[0] == pytest.approx(0.001, abs=1e-15)
    assert abs(p["w"][0] - (-0.001 / (1 + 1e-8))) < 1e-12


def test_adam_zero_gradient_and_elementwise():
    cfg = cnn.AdamConfig()
    p, _ = cnn.adam_step({"w": np.array([1.5, -2.0])}, {"w": np.zeros(2)}, {}, cfg, 1)
    np.testing.assert_array_equal(p["w"], [1.5, -2.0])
    p, _ = cnn.adam_step({"w": np.zeros(2)}, {"w": np.array([0.3, 0.3])}, {}, cfg, 1)
    assert p["w"][0] == p["w"][1]
    with pytest.raises(ValueError):
        cnn.adam_step({}, {}, {}, cfg, 0)


def test_adam_multi_step_recurrence():
    cfg = cnn.AdamConfig()
    g = [0.5, -1.0, 2.0]
    theta, m, v = 0.3, 0.0, 0.0
    p, s = {"w": np.array([theta])}, {}
    for t, gt in enumerate(g, 1):
        m = 0.9 * m + 0.1 * gt
        v = 0.999 * v + 0.001 * gt * gt
        theta -= 0.001 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        p, s = cnn.adam_step(p, {"w": np.array([gt])}, s, cfg, t)
    assert abs(p["w"][0] - theta) < 1e-12


def test_train_zero_epochs_keeps_init():
    net = cnn.init_network(cnn.build_small_network(), seed=3)
    before = {k: v.copy() for k, v in net.params.items()}
    X, y = cnn.synthetic_bar_images(10, seed=0)
    assert cnn.train(net, X, y, epochs=0) == []
    for k in before:
        np.testing.assert_array_equal(net.params[k], before[k])
    with pytest.raises(ValueError, match="2 classes"):
        cnn.train(net, X, np.zeros(10, dtype=int), epochs=1)


def test_train_deterministic_and_loss_decreases():
    X, y = cnn.synthetic_bar_images(20, seed=1)
    runs = []
    for _ in range(2):
        net = cnn.init_network(cnn.build_small_network(), seed=1)
        runs.append(cnn.train(net, X, y, epochs=10, batch_size=5, seed=1))
    assert [r["train_loss"] for r in runs[0]] == [r["train_loss"] for r in runs[1]]
    losses = [r["train_loss"] for r in runs[0]]
    assert all(b <= 1.05 * a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_divergence_aborts():
    X, y = cnn.synthetic_bar_images(10, seed=0)
    net = cnn.init_network(cnn.build_small_network(), seed=0)
    net.params["fc4.W"][:] = np.nan
    with pytest.raises(cnn.TrainingDiverged):
        cnn.train(net, X, y, epochs=1)


def test_shuffled_labels_near_chance():
    X, y = cnn.synthetic_bar_images(200, seed=2)
    Xv, yv = cnn.synthetic_bar_images(200, seed=3)
    yr = np.random.default_rng(0).permutation(y)
    net = cnn.init_network(cnn.build_small_network(), seed=2)
    hist = cnn.train(net, X, yr, epochs=3, batch_size=20, seed=0, validation=(Xv, yv))
    assert abs(hist[-1]["val_acc"] - 0.2) <= 0.1


def test_rmse_from_probs():
    eye = np.eye(5)
    assert cnn.rmse_from_probs(eye, np.arange(5)) == 0.0
    assert cnn.rmse_from_probs(np.full((1, 5), 0.2), [2], "expectation") == 0.0
    assert cnn.rmse_from_probs(eye[[4]], [0], "argmax") == 4.0
    with pytest.raises(ValueError):
        cnn.rmse_from_probs(np.full((1, 5), 0.3), [0])
    with pytest.raises(ValueError):
        cnn.rmse_from_probs(eye, np.arange(5), "median")


def test_model_header_records_init():
    net = cnn.init_network(cnn.build_small_network())
    h = cnn.model_header(net)
    assert h["init"] == cnn.INIT_SCHEME and h["input_shape"] == "1x20x30"
