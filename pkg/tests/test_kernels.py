import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcnn import kernels as K
from pcnn.errors import DegenerateBatch, InvalidLabel, InvalidShape
from pcnn.gradsuite import gradient_cases
from pcnn.tensor import Tensor, grad_check, mul, tsum


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# Reference implementations -----------------------------------------------------

def conv_loops(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for k in range(o):
            for r in range(ho):
                for s in range(wo):
                    acc = b[k]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ch, r * stride + u, s * stride + v] * w[k, ch, u, v]
                    out[i, k, r, s] = acc
    return out


def maxpool_scan(x, k, s):
    n, c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((n, c, ho, wo))
    grad = np.zeros_like(x)
    for i in range(n):
        for ch in range(c):
            for r in range(ho):
                for q in range(wo):
                    best, where = -np.inf, None
                    for u in range(k):
                        for v in range(k):
                            val = x[i, ch, r * s + u, q * s + v]
                            if val > best:
                                best, where = val, (r * s + u, q * s + v)
                    out[i, ch, r, q] = best
                    grad[i, ch][where] += 1
    return out, grad


def bilinear_point(img, y, x):
    """Zero-padded bilinear sample of a 2-D image at pixel coordinates (y, x)."""
    h, w = img.shape
    y0, x0 = math.floor(y), math.floor(x)
    total = 0.0
    for yy, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= yy < h and 0 <= xx < w:
                total += wy * wx * img[yy, xx]
    return total


def resize_oracle(img, ho, wo):
    h, w = img.shape
    out = np.zeros((ho, wo))
    for i in range(ho):
        for j in range(wo):
            y = i * (h - 1) / (ho - 1) if ho > 1 else (h - 1) / 2
            x = j * (w - 1) / (wo - 1) if wo > 1 else (w - 1) / 2
            out[i, j] = bilinear_point(img, y, x)
    return out


# Convolution -------------------------------------------------------------------

class TestConv2d:
    def test_counting_overlap(self):
        out = K.conv2d(t64(np.ones((1, 1, 3, 3))), t64(np.ones((1, 1, 3, 3))), t64([0.0]), 1, 1).data[0, 0]
        assert out[1, 1] == 9 and out[0, 0] == 4 and out[0, 2] == 4 and out[0, 1] == 6

    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
        assert np.array_equal(K.conv2d(t64(x), t64(np.ones((1, 1, 1, 1))), t64([0.0])).data, x)

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (3, 2, 5)])
    def test_loop_oracle(self, stride, pad, k):
        rng = np.random.default_rng(stride * 10 + pad + k)
        x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, k, k)), rng.normal(size=4)
        got = K.conv2d(t64(x), t64(w), t64(b), stride, pad).data
        assert np.abs(got - conv_loops(x, w, b, stride, pad)).max() <= 1e-6

    def test_single_precision_oracle(self):
        rng = np.random.default_rng(5)
        x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(2, 3, 3, 3))
        got = K.conv2d(Tensor(x.astype(np.float32)), Tensor(w.astype(np.float32)), None, 1, 1).data
        assert got.dtype == np.float32
        assert np.abs(got - conv_loops(x, w, np.zeros(2), 1, 1)).max() <= 1e-4

    @pytest.mark.parametrize("k", [1, 3])
    def test_same_padding_preserves_extent(self, k):
        x = t64(np.zeros((1, 2, 7, 5)))
        assert K.conv2d(x, t64(np.zeros((3, 2, k, k))), None, 1, (k - 1) // 2).shape == (1, 3, 7, 5)

    def test_channel_mismatch(self):
        with pytest.raises(InvalidShape):
            K.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 3, 3, 3))))

    def test_output_too_small(self):
        with pytest.raises(InvalidShape):
            K.conv2d(t64(np.zeros((1, 1, 2, 2))), t64(np.zeros((1, 1, 3, 3))))

    def test_conv_spec(self):
        spec = K.ConvSpec(3, 8, (3, 3), (2, 2), (1, 1))
        assert spec.output_size(32, 31) == (16, 16)
        with pytest.raises(InvalidShape):
            K.ConvSpec(0, 8)


# Pooling -----------------------------------------------------------------------

class TestPooling:
    def test_max_of_window(self):
        assert K.max_pool2d(t64([[[[1, 2], [3, 4]]]])).data.item() == 4

    def test_constant_tie_rule(self):
        x = t64(np.full((1, 1, 4, 4), 2.0), grad=True)
        out = K.max_pool2d(x)
        tsum(out).backward()
        assert np.all(out.data == 2.0)
        expected = np.zeros((4, 4))
        expected[::2, ::2] = 1
        assert np.array_equal(x.grad[0, 0], expected)

    @pytest.mark.parametrize("shape,k,s", [((2, 3, 6, 7), 2, 2), ((1, 2, 5, 5), 3, 1), ((1, 1, 7, 6), 3, 2)])
    def test_scan_oracle(self, shape, k, s):
        rng = np.random.default_rng(sum(shape))
        # integer values force plenty of ties
        x = t64(rng.integers(0, 3, size=shape).astype(float), grad=True)
        out = K.max_pool2d(x, (k, k), (s, s))
        tsum(out).backward()
        ref, ref_grad = maxpool_scan(x.data, k, s)
        assert np.array_equal(out.data, ref)
        assert np.array_equal(x.grad, ref_grad)

    def test_window_too_large(self):
        with pytest.raises(InvalidShape):
            K.max_pool2d(t64(np.zeros((1, 1, 1, 4))))

    def test_global_max(self):
        assert K.global_max_pool(t64([[[[7.5]]]])).data.item() == 7.5
        assert K.global_max_pool(t64(np.arange(9.0).reshape(1, 1, 3, 3))).data.item() == 8

    def test_global_max_matches_full_window(self):
        x = np.random.default_rng(1).normal(size=(2, 3, 4, 5))
        full = K.max_pool2d(t64(x), (4, 5), (4, 5)).data[:, :, 0, 0]
        assert np.array_equal(K.global_max_pool(t64(x)).data, full)

    def test_global_max_tie_goes_first(self):
        x = t64(np.ones((1, 1, 2, 2)), grad=True)
        tsum(K.global_max_pool(x)).backward()
        assert x.grad.reshape(-1).tolist() == [1, 0, 0, 0]

    def test_global_avg(self):
        x = np.random.default_rng(2).normal(size=(2, 3, 4, 5))
        assert np.allclose(K.global_avg_pool(t64(x)).data, x.mean(axis=(2, 3)), atol=1e-12)


# Batch norm --------------------------------------------------------------------

class TestBatchNorm:
    def test_constant_channel_train(self):
        stats = K.RunningStats(1, dtype=np.float64)
        out = K.batch_norm(t64(np.full((2, 1, 3, 3), 4.0)), t64([1.0]), t64([0.0]), stats, True)
        assert np.all(out.data == 0)

    def test_eval_identity(self):
        x = np.random.default_rng(3).normal(size=(2, 2, 3, 3))
        stats = K.RunningStats(2, dtype=np.float64)
        out = K.batch_norm(t64(x), t64([1.0, 1.0]), t64([0.0, 0.0]), stats, False)
        assert np.allclose(out.data, x / np.sqrt(1 + K.BN_EPS), atol=1e-12)

    def test_train_oracle_and_running_update(self):
        rng = np.random.default_rng(4)
        x = rng.normal(2.0, 3.0, size=(4, 3, 2, 5))
        g, b = rng.normal(size=3), rng.normal(size=3)
        stats = K.RunningStats(3, dtype=np.float64)
        out = K.batch_norm(t64(x), t64(g), t64(b), stats, True).data
        mu, var = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
        ref = (x - mu[None, :, None, None]) / np.sqrt(var[None, :, None, None] + K.BN_EPS)
        ref = ref * g[None, :, None, None] + b[None, :, None, None]
        assert np.allclose(out, ref, atol=1e-12)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        assert np.allclose(stats.mean, 0.1 * mu, atol=1e-12)
        assert np.allclose(stats.var, 0.9 + 0.1 * var * m / (m - 1), atol=1e-12)

    def test_degenerate_batch(self):
        with pytest.raises(DegenerateBatch):
            K.batch_norm(t64(np.zeros((1, 2, 1, 1))), t64([1.0, 1.0]), t64([0.0, 0.0]),
                         K.RunningStats(2, dtype=np.float64), True)


# Fully connected and loss ------------------------------------------------------

class TestFullyConnected:
    def test_identity_weight(self):
        x = np.random.default_rng(5).normal(size=(3, 4))
        assert np.array_equal(K.fully_connected(t64(x), t64(np.eye(4)), t64(np.zeros(4))).data, x)

    def test_zero_weight_gives_bias(self):
        out = K.fully_connected(t64(np.ones((3, 4))), t64(np.zeros((2, 4))), t64([1.5, -2.0])).data
        assert np.array_equal(out, np.tile([1.5, -2.0], (3, 1)))

    def test_dot_product_oracle(self):
        rng = np.random.default_rng(6)
        x, w, b = rng.normal(size=(5, 6)), rng.normal(size=(3, 6)), rng.normal(size=3)
        ref = np.array([[sum(x[i, d] * w[k, d] for d in range(6)) + b[k] for k in range(3)] for i in range(5)])
        assert np.abs(K.fully_connected(t64(x), t64(w), t64(b)).data - ref).max() <= 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(InvalidShape):
            K.fully_connected(t64(np.zeros((2, 3))), t64(np.zeros((4, 5))), t64(np.zeros(4)))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = K.softmax_cross_entropy(t64(np.zeros((3, 7))), [0, 3, 6]).item()
        assert loss == pytest.approx(math.log(7), abs=1e-12)
        assert round(loss, 6) == 1.945910

    def test_saturated(self):
        logits = np.zeros((2, 7))
        logits[0, 2] = logits[1, 5] = 50
        assert K.softmax_cross_entropy(t64(logits), [2, 5]).item() <= 1e-9

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(7)
        z = t64(rng.normal(size=(4, 7)), grad=True)
        labels = np.array([0, 6, 3, 3])
        K.softmax_cross_entropy(z, labels).backward()
        p = np.exp(z.data - z.data.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(4), labels] -= 1
        assert np.allclose(z.grad, p / 4, atol=1e-14)

    def test_invalid_label(self):
        with pytest.raises(InvalidLabel):
            K.softmax_cross_entropy(t64(np.zeros((2, 7))), [0, 7])
        with pytest.raises(InvalidLabel):
            K.softmax_cross_entropy(t64(np.zeros((1, 7))), [-1])

    @given(st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(0, 20, size=(3, 5))
        assert K.softmax_cross_entropy(t64(z), rng.integers(0, 5, size=3)).item() >= 0


# Resize and spatial transformer ------------------------------------------------

class TestBilinearResize:
    def test_identity_size_bitwise(self):
        x = np.random.default_rng(8).normal(size=(2, 3, 5, 4))
        assert np.array_equal(K.bilinear_resize(t64(x), (5, 4)).data, x)

    def test_midpoint_blend(self):
        out = K.bilinear_resize(t64([[[[0, 2], [4, 6]]]]), (3, 3)).data[0, 0]
        assert out[1, 1] == 3

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 7), st.integers(1, 7), st.integers(1, 9), st.integers(1, 9),
           st.floats(-5, 5, allow_nan=False))
    def test_constant_survives_any_size(self, h, w, ho, wo, c):
        x = t64(np.full((1, 2, h, w), c))
        out = K.bilinear_resize(t64(K.bilinear_resize(x, (ho, wo)).data), (h, w))
        assert np.array_equal(out.data, x.data)

    @pytest.mark.parametrize("src,dst", [((4, 5), (7, 9)), ((6, 6), (3, 2)), ((3, 4), (1, 1)), ((1, 3), (4, 5))])
    def test_pointwise_oracle(self, src, dst):
        img = np.random.default_rng(sum(src + dst)).normal(size=src)
        got = K.bilinear_resize(t64(img[None, None]), dst).data[0, 0]
        assert np.abs(got - resize_oracle(img, *dst)).max() <= 1e-12


class TestGrid:
    def identity(self, n=1):
        return t64(np.tile(np.array([[1.0, 0, 0], [0, 1.0, 0]]), (n, 1, 1)))

    def test_identity_grid_row(self):
        g = K.grid_generate(self.identity(), (3, 3)).data[0]
        assert g[0, :, 0].tolist() == [-1, 0, 1]
        assert g[:, 0, 1].tolist() == [-1, 0, 1]

    def test_translation(self):
        th = self.identity().data.copy()
        th[0, 0, 2] = 1
        g0 = K.grid_generate(self.identity(), (4, 5)).data
        g1 = K.grid_generate(t64(th), (4, 5)).data
        assert np.allclose(g1[..., 0], g0[..., 0] + 1) and np.array_equal(g1[..., 1], g0[..., 1])

    def test_scale(self):
        g = K.grid_generate(t64([[[0.5, 0, 0], [0, 0.5, 0]]]), (5, 5)).data
        assert g.min() == -0.5 and g.max() == 0.5

    def test_single_extent_center(self):
        g = K.grid_generate(self.identity(), (1, 1)).data
        assert g.reshape(-1).tolist() == [0, 0]

    def test_identity_warp(self):
        x = np.random.default_rng(9).normal(size=(2, 3, 6, 7))
        out = K.grid_sample(t64(x), K.grid_generate(self.identity(2), (6, 7))).data
        assert np.abs(out - x).max() <= 1e-6

    def test_zero_padding(self):
        grid = t64(np.full((1, 4, 4, 2), -3.0))
        assert np.all(K.grid_sample(t64(np.ones((1, 2, 5, 5))), grid).data == 0)

    def test_pointwise_oracle(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(2, 2, 5, 6))
        grid = rng.uniform(-1.4, 1.4, size=(2, 3, 4, 2))
        got = K.grid_sample(t64(x), t64(grid)).data
        for n in range(2):
            for c in range(2):
                for i in range(3):
                    for j in range(4):
                        px = (grid[n, i, j, 0] + 1) * 5 / 2
                        py = (grid[n, i, j, 1] + 1) * 4 / 2
                        assert abs(got[n, c, i, j] - bilinear_point(x[n, c], py, px)) <= 1e-6

    def test_batch_mismatch(self):
        with pytest.raises(InvalidShape):
            K.grid_sample(t64(np.zeros((2, 1, 3, 3))), t64(np.zeros((1, 3, 3, 2))))


# Crop and paste ----------------------------------------------------------------

class TestCropPaste:
    def test_crop_then_paste_identity(self):
        x = np.random.default_rng(11).normal(size=(2, 3, 6, 5))
        rects = [(0, 3, 0, 5), (3, 6, 0, 2), (3, 6, 2, 5)]
        tiles = [K.crop(t64(x), r) for r in rects]
        assert np.array_equal(K.paste(tiles, rects, (6, 5)).data, x)

    def test_overlap_mean_and_fill(self):
        a, b = t64(np.full((1, 1, 2, 2), 2.0)), t64(np.full((1, 1, 2, 2), 4.0))
        out = K.paste([a, b], [(0, 2, 0, 2), (1, 3, 1, 3)], (3, 4), fill=-1.0).data[0, 0]
        assert out[1, 1] == 3.0 and out[0, 0] == 2.0 and out[2, 2] == 4.0 and out[0, 3] == -1.0

    def test_crop_out_of_bounds(self):
        with pytest.raises(InvalidShape):
            K.crop(t64(np.zeros((1, 1, 4, 4))), (0, 5, 0, 2))


# Finite-difference checks -----------------------------------------------------

CASES = gradient_cases(0)


@pytest.mark.parametrize("case", CASES, ids=[c[0] for c in CASES])
def test_gradient_suite_case(case):
    name, fn, inputs, kw = case
    assert grad_check(fn, inputs, op_name=name, **kw).max_rel_error <= 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_shapes_grad_check(seed):
    """Every kernel at random sizes, double precision, rel err <= 1e-5."""
    rng = np.random.default_rng(seed)
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    x = t64(rng.normal(size=(n, c, h, w)), grad=True)

    def weighted(fn, *args):
        out = fn(*args)
        r = t64(np.random.default_rng(seed + 1).normal(size=out.shape))
        return tsum(mul(out, r))

    wt = t64(rng.normal(size=(2, c, 3, 3)), grad=True)
    assert grad_check(lambda x, w: weighted(K.conv2d, x, w, None, 1, 1), [x, wt]).max_rel_error <= 1e-5
    assert grad_check(lambda x: weighted(K.max_pool2d, x), [x]).max_rel_error <= 1e-5
    out = (int(rng.integers(1, 9)), int(rng.integers(1, 9)))
    assert grad_check(lambda x: weighted(K.bilinear_resize, x, out), [x]).max_rel_error <= 1e-5
    if n * h * w >= 2:
        g, b = t64(rng.uniform(0.5, 1.5, size=c), grad=True), t64(rng.normal(size=c), grad=True)
        stats = K.RunningStats(c, dtype=np.float64)
        rep = grad_check(lambda x, g, b: weighted(K.batch_norm, x, g, b, stats, True), [x, g, b])
        assert rep.max_rel_error <= 1e-5
    px = rng.integers(-1, max(h, w), size=(n, 3, 4, 2)) + rng.uniform(0.2, 0.8, size=(n, 3, 4, 2))
    grid = t64(2 * px / (np.array([w, h]) - 1) - 1, grad=True)
    assert grad_check(lambda x, g: weighted(K.grid_sample, x, g), [x, grid]).max_rel_error <= 1e-5
