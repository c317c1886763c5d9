import io

import numpy as np
import pytest

from lpdesc import nn


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_conv_counts_overlaps():
    conv = nn.Conv2d(1, 1, 3, 1, 1)
    conv.params["weight"].value[...] = 1
    y = conv.forward(np.ones((1, 1, 3, 3), np.float32))
    assert y[0, 0, 1, 1] == 9
    assert y[0, 0, 0, 0] == y[0, 0, 2, 2] == 4


def test_conv_identity_kernel(rng):
    conv = nn.Conv2d(2, 2, 1, 1, 0)
    conv.params["weight"].value[...] = np.eye(2).reshape(2, 2, 1, 1)
    x = rng.random((3, 2, 4, 5)).astype(np.float32)
    np.testing.assert_array_equal(conv.forward(x), x)


def test_conv_is_cross_correlation():
    conv = nn.Conv2d(1, 1, 3, 1, 0)
    w = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    conv.params["weight"].value[...] = w
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    assert conv.forward(x)[0, 0, 0, 0] == (w * x).sum()


def test_conv_shape_error():
    with pytest.raises(nn.ShapeError, match="expected"):
        nn.Conv2d(3, 4, 3).forward(np.zeros((1, 2, 5, 5), np.float32))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradient(rng, stride):
    conv = nn.Conv2d(2, 3, 3, stride, 1, rng=rng)
    assert nn.check_layer(conv, rng.standard_normal((1, 2, 5, 5)), rng) < 1e-4


def test_conv_head_gradient(rng):
    conv = nn.Conv2d(4, 6, 8, 1, 0, rng=rng)
    assert nn.check_layer(conv, rng.standard_normal((3, 4, 8, 8)), rng) < 1e-4


def test_linear_map_gradient_is_tight(rng):
    # a 1x1 convolution is linear in its input
    conv = nn.Conv2d(3, 2, 1, 1, 0, rng=rng)
    assert nn.check_layer(conv, rng.standard_normal((2, 3, 2, 2)), rng) < 1e-7


def test_batchnorm_gradient(rng):
    assert nn.check_layer(nn.BatchNorm2d(2), rng.standard_normal((4, 2, 3, 3)), rng) < 1e-4


def test_batchnorm_infer_before_training():
    with pytest.raises(nn.StatisticsError):
        nn.BatchNorm2d(2).forward(np.zeros((1, 2, 3, 3), np.float32))


def test_batchnorm_running_stats(rng):
    bn = nn.BatchNorm2d(1, momentum=0.1)
    x = rng.standard_normal((4, 1, 3, 3)) * 2 + 1
    bn.forward(x, train=True)
    mean = bn.buffers()["running_mean"]
    np.testing.assert_allclose(mean, 0.1 * x.mean(), rtol=1e-5)
    np.testing.assert_allclose(bn.buffers()["running_var"], 0.9 + 0.1 * x.var(ddof=1), rtol=1e-5)
    y = bn.forward(x)
    assert y.shape == x.shape


def test_instancenorm_constant_patch():
    y = nn.InstanceNorm2d().forward(np.full((2, 1, 4, 4), 0.7, np.float32))
    assert np.all(y == 0)


def test_instancenorm_statistics_and_invariance(rng):
    x = rng.random((3, 1, 8, 8))
    inorm = nn.InstanceNorm2d()
    y = inorm.forward(x)
    assert np.all(np.abs(y.mean(axis=(2, 3))) < 1e-6)
    assert np.all(np.abs(y.var(axis=(2, 3)) - 1) < 1e-4)
    np.testing.assert_allclose(inorm.forward(2.0 * x - 0.3), y, atol=1e-9)


def test_instancenorm_gradient(rng):
    assert nn.check_layer(nn.InstanceNorm2d(), rng.standard_normal((2, 1, 4, 4)), rng) < 1e-4


def test_relu():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 3, 1, 1)
    np.testing.assert_array_equal(nn.ReLU().forward(x).ravel(), [0, 0, 2])


def test_dropout_rate_zero_is_identity(rng):
    x = rng.random((2, 3, 4, 4))
    np.testing.assert_array_equal(nn.Dropout(0.0).forward(x, train=True, rng=rng), x)


def test_dropout_inverted_mean(rng):
    y = nn.Dropout(0.5).forward(np.ones((10, 10, 100, 100)), train=True, rng=rng)
    assert abs(y.mean() - 1) < 0.01
    x = rng.random((2, 2, 2, 2))
    np.testing.assert_array_equal(nn.Dropout(0.5).forward(x), x)


def test_dropout_and_relu_gradients(rng):
    x = rng.standard_normal((3, 2, 4, 4))
    assert nn.check_layer(nn.Dropout(0.3), x, rng) < 1e-4
    assert nn.check_layer(nn.ReLU(), x + np.sign(x) * 0.05, rng) < 1e-4


def test_l2_normalize():
    v = np.zeros((1, 128))
    v[0, :2] = [3, 4]
    out = nn.l2_normalize(v)
    assert out[0, 0] == pytest.approx(0.6) and out[0, 1] == pytest.approx(0.8)
    np.testing.assert_allclose(nn.l2_normalize(out), out, atol=1e-15)
    with pytest.raises(nn.DegenerateDescriptor):
        nn.l2_normalize(np.zeros((1, 128)))


def test_l2_normalize_gradient(rng):
    assert nn.check_layer(nn.L2Normalize(), rng.standard_normal((4, 16, 1, 1)), rng) < 1e-4


def _param(value, grad):
    p = nn.Param(np.array(value, dtype=np.float64))
    p.grad[...] = grad
    return p


def test_sgd_plain_step():
    p = _param([1.0, 2.0], [0.5, -1.0])
    nn.sgd_step([p], nn.OptimConfig(1.0, 0.0, 0.0, 10), 0)
    np.testing.assert_allclose(p.value, [0.5, 3.0])


def test_sgd_schedule_endpoint():
    cfg = nn.OptimConfig(0.5, 0.0, 0.0, 4)
    assert cfg.lr_at(3) == pytest.approx(0.5 / 4)
    with pytest.raises(ValueError):
        cfg.lr_at(4)


def test_sgd_momentum_unrolled():
    p = _param([0.0], [1.0])
    cfg = nn.OptimConfig(0.1, 0.9, 0.0, 1000)
    nn.sgd_step([p], cfg, 0)
    nn.sgd_step([p], cfg, 0)
    assert p.value[0] == pytest.approx(-0.1 * (1 + 1.9))


def test_weight_decay_skips_normalization():
    bn = nn.BatchNorm2d(1)
    conv = nn.Conv2d(1, 1, 1, 1, 0)
    before = bn.params["scale"].value.copy()
    w_before = conv.params["weight"].value.copy()
    nn.sgd_step(list(bn.params.values()) + list(conv.params.values()),
                nn.OptimConfig(0.1, 0.0, 0.5, 10), 0)
    np.testing.assert_array_equal(bn.params["scale"].value, before)
    assert not np.array_equal(conv.params["weight"].value, w_before)


def test_fault_injection_is_detected(rng):
    conv = nn.Conv2d(2, 2, 3, 1, 1, rng=rng)
    x = rng.standard_normal((1, 2, 4, 4))
    conv.astype(np.float64)
    w = rng.standard_normal((1, 2, 4, 4))

    def objective():
        return float((conv.forward(x) * w).sum())

    objective()
    dx = conv.backward(w)
    assert nn.finite_diff_check(objective, [x], [-dx], rng) > 0.1


def test_checkpoint_roundtrip(rng):
    model = nn.Sequential([nn.InstanceNorm2d(), nn.Conv2d(1, 2, 3, 1, 1, rng=rng), nn.BatchNorm2d(2),
                           nn.ReLU(), nn.Dropout(0.1), nn.Conv2d(2, 4, 4, 1, 0, rng=rng),
                           nn.L2Normalize()])
    x = rng.random((5, 1, 4, 4)).astype(np.float32)
    model.forward(x, train=True, rng=rng)
    buf = io.BytesIO()
    nn.save_checkpoint(model, buf, {"epoch": 3.0})
    buf.seek(0)
    loaded, extra = nn.load_checkpoint(buf)
    assert extra == {"epoch": 3.0}
    assert model.forward(x).tobytes() == loaded.forward(x).tobytes()
    buf2 = io.BytesIO()
    nn.save_checkpoint(loaded, buf2, extra)
    assert buf2.getvalue() == buf.getvalue()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        nn.load_checkpoint(io.BytesIO(b"NOTANET"))
