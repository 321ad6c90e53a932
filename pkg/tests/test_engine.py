import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from gaprune.errors import NumericError, ShapeError
from gaprune.netcore import backward, forward, resnet_bottleneck, run, softmax_cross_entropy
from gaprune.netcore.engine import im2col, layer_backward, layer_forward
from gaprune.netcore.spec import LayerSpec


def direct_conv(x, w, b, stride, padding):
    """Plain loop convolution, used as an independent oracle."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for y in range(ho):
                for z in range(wo):
                    patch = xp[i, :, y * stride : y * stride + k, z * stride : z * stride + k]
                    out[i, o, y, z] = np.sum(patch * w[o]) + (b[o] if b is not None else 0.0)
    return out


def direct_maxpool(x, k, s):
    n, c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.empty((n, c, ho, wo))
    for y in range(ho):
        for z in range(wo):
            out[:, :, y, z] = x[:, :, y * s : y * s + k, z * s : z * s + k].max(axis=(2, 3))
    return out


@pytest.mark.parametrize("k,stride,padding", [(1, 1, 0), (3, 1, 1), (3, 2, 1), (2, 2, 0), (5, 1, 2)])
def test_conv_matches_direct_loop(rng, k, stride, padding):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    layer = LayerSpec("c", "conv2d", 3, 4, k, stride, padding)
    out, _ = layer_forward(layer, {"weight": w, "bias": b}, x)
    np.testing.assert_allclose(out, direct_conv(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)


def test_im2col_row_order(rng):
    x = rng.normal(size=(2, 2, 4, 4))
    cols, ho, wo = im2col(x, 3, 1, 0)
    assert (ho, wo) == (2, 2)
    # row index = (n * ho + y) * wo + x; columns follow C×k×k
    np.testing.assert_array_equal(cols[1 * 4 + 1 * 2 + 0], x[1, :, 1:4, 0:3].reshape(-1))


def test_maxpool_matches_loop(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    layer = LayerSpec("p", "maxpool", 3, 3, kernel_size=2, stride=2)
    out, _ = layer_forward(layer, {}, x)
    np.testing.assert_array_equal(out, direct_maxpool(x, 2, 2))


def test_batchnorm_inference_and_running_update(rng):
    x = rng.normal(2.0, 3.0, size=(8, 3, 4, 4))
    p = {"gamma": rng.normal(size=3), "beta": rng.normal(size=3),
         "running_mean": np.zeros(3), "running_var": np.ones(3)}
    layer = LayerSpec("bn", "batchnorm", 3, 3)
    out, _ = layer_forward(layer, p, x, train=True)
    mean, var = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
    want = (x - mean[None, :, None, None]) / np.sqrt(var + 1e-5)[None, :, None, None]
    want = want * p["gamma"][None, :, None, None] + p["beta"][None, :, None, None]
    np.testing.assert_allclose(out, want, rtol=1e-10)
    m = 8 * 16
    np.testing.assert_allclose(p["running_mean"], 0.1 * mean)
    np.testing.assert_allclose(p["running_var"], 0.9 + 0.1 * var * m / (m - 1))
    out_eval, _ = layer_forward(layer, p, x, train=False)
    want = (x - p["running_mean"][None, :, None, None]) / np.sqrt(p["running_var"] + 1e-5)[None, :, None, None]
    want = want * p["gamma"][None, :, None, None] + p["beta"][None, :, None, None]
    np.testing.assert_allclose(out_eval, want, rtol=1e-10)


def _layer_cases(rng):
    yield LayerSpec("c", "conv2d", 3, 4, 3, 1, 1), {"weight": rng.normal(size=(4, 3, 3, 3)),
                                                     "bias": rng.normal(size=4)}, (2, 3, 5, 5), True
    yield LayerSpec("c2", "conv2d", 3, 2, 3, 2, 1), {"weight": rng.normal(size=(2, 3, 3, 3))}, (2, 3, 6, 6), True
    bn = {"gamma": rng.normal(size=3), "beta": rng.normal(size=3),
          "running_mean": rng.normal(size=3), "running_var": rng.uniform(0.5, 2, size=3)}
    yield LayerSpec("bn", "batchnorm", 3, 3), bn, (4, 3, 3, 3), True
    yield LayerSpec("bn_eval", "batchnorm", 3, 3), dict(bn), (4, 3, 3, 3), False
    yield LayerSpec("bn1d", "batchnorm", 5, 5), {"gamma": rng.normal(size=5), "beta": rng.normal(size=5),
                                                 "running_mean": np.zeros(5), "running_var": np.ones(5)}, (6, 5), True
    yield LayerSpec("r", "relu", 3, 3), {}, (2, 3, 4, 4), True
    yield LayerSpec("mp", "maxpool", 3, 3, kernel_size=2, stride=2), {}, (2, 3, 4, 4), True
    yield LayerSpec("mp3", "maxpool", 2, 2, kernel_size=3, stride=2), {}, (1, 2, 5, 5), True
    yield LayerSpec("ap", "avgpool", 3, 3, kernel_size=2, stride=2), {}, (2, 3, 4, 4), True
    yield LayerSpec("g", "global-avg-pool", 3, 3), {}, (2, 3, 4, 4), True
    yield LayerSpec("fl", "flatten", 3, 48), {}, (2, 3, 4, 4), True
    yield LayerSpec("fc", "linear", 6, 4), {"weight": rng.normal(size=(4, 6)), "bias": rng.normal(size=4)}, (3, 6), True


@pytest.mark.parametrize("case", range(12))
def test_layer_gradients_match_central_differences(case):
    rng = np.random.default_rng(case)
    layer, params, shape, train = list(_layer_cases(rng))[case]
    x = rng.normal(size=shape)
    if layer.kind == "relu":
        x = np.where(np.abs(x) < 0.05, 0.5, x)
    out, cache = layer_forward(layer, params, x, train)
    upstream = rng.normal(size=out.shape)

    def f():
        return float(np.sum(layer_forward(layer, params, x, train)[0] * upstream))

    dx, grads = layer_backward(layer, params, cache, upstream)
    assert rel_err(dx, numeric_grad(f, x)) < 1e-4
    for name, g in grads.items():
        param = params[name]

        def fp():
            return float(np.sum(layer_forward(layer, params, x, train)[0] * upstream))

        assert rel_err(g, numeric_grad(fp, param)) < 1e-4, name


def test_residual_add_gradient(rng):
    layer = LayerSpec("add", "residual-add", 3, 3, operand="a")
    x, o = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 3, 2, 2))
    out, cache = layer_forward(layer, {}, x, other=o)
    np.testing.assert_array_equal(out, x + o)
    up = rng.normal(size=out.shape)
    dx, _ = layer_backward(layer, {}, cache, up)
    assert rel_err(dx, numeric_grad(lambda: float(np.sum((x + o) * up)), x)) < 1e-6


def test_softmax_cross_entropy_gradient(rng):
    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, 5)
    loss, g = softmax_cross_entropy(logits, labels)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert loss == pytest.approx(-np.mean(np.log(p[np.arange(5), labels])))
    assert rel_err(g, numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits)) < 1e-6


def test_whole_network_gradient_with_residual_block():
    net = resnet_bottleneck(stages=((4, 1),), input_shape=(2, 6, 6), stem=4, expansion=2,
                            num_classes=3, seed=1, dtype=np.float64)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 2, 6, 6))
    labels = np.array([0, 2, 1])
    outputs, tape = run(net, x, train=True, record=True)
    _, dlogits = softmax_cross_entropy(outputs[net.layers[-1].id], labels)
    grads, _ = backward(net, tape, dlogits)

    def loss():
        out, _ = run(net, x, train=True)
        return softmax_cross_entropy(out[net.layers[-1].id], labels)[0]

    checked = 0
    for lid, name, w in net.learnable():
        if name not in ("weight", "gamma") or checked >= 6:
            continue
        assert rel_err(grads[lid][name], numeric_grad(loss, w)) < 1e-4, (lid, name)
        checked += 1
    assert checked == 6


def test_injected_gradients_accumulate(tiny_net, rng):
    net = tiny_net.astype(np.float64)
    x = rng.normal(size=(2, 1, 12, 12))
    outputs, tape = run(net, x, record=True)
    zero = np.zeros_like(outputs[net.layers[-1].id])
    inj = rng.normal(size=outputs["relu2"].shape)
    _, act = backward(net, tape, zero, inject={"relu2": inj}, want=("relu2",))
    np.testing.assert_array_equal(act["relu2"], inj)


def test_forward_rejects_bad_batch_and_nan(tiny_net):
    with pytest.raises(ShapeError):
        forward(tiny_net, np.zeros((1, 1, 10, 12), np.float32))
    bad = np.zeros((1, 1, 12, 12), np.float32)
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        forward(tiny_net, bad)


def test_inference_is_deterministic_and_pure(tiny_net, rng):
    x = rng.normal(size=(3, 1, 12, 12)).astype(np.float32)
    before = {(l, n): a.copy() for l, n, a in tiny_net.learnable()}
    a, _ = forward(tiny_net, x)
    b, _ = forward(tiny_net, x)
    np.testing.assert_array_equal(a, b)
    for (l, n), arr in before.items():
        np.testing.assert_array_equal(tiny_net.params[l][n], arr)
