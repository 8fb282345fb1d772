"""Finite-difference checks for every differentiable operation, in double precision."""
from __future__ import annotations

from typing import Callable, List, Tuple

import numpy as np

from . import kernels as K
from .model import BackboneConfig, Variant, build_model, mdim_forward, pcnn_forward
from .regions import compute_regions, stitch_features
from .tensor import GradReport, Tensor, add, grad_check, mul, relu, tsum

F64 = np.float64
# narrow enough for the 2x1x16x16 end-to-end check to stay well under a minute
SMALL_BACKBONE = BackboneConfig(stem_channels=4, stage_channels=(4, 8), stage_strides=(1, 2))


def _leaf(rng, shape, scale=1.0, shift=0.0) -> Tensor:
    return Tensor(rng.normal(shift, scale, size=shape).astype(F64), requires_grad=True)


def _weighted(rng, fn: Callable[..., Tensor], out_shape) -> Callable[..., Tensor]:
    """Reduce an op's output to a scalar through a fixed random projection."""
    r = Tensor(rng.normal(size=out_shape).astype(F64))
    return lambda *xs: tsum(mul(fn(*xs), r))


def perturb_locnet(model, rng, scale: float = 0.05) -> None:
    """Move the location network off the identity so sample points avoid the integer lattice."""
    fc = model.locnet.fc
    fc.weight.data[...] = rng.normal(0, scale, size=fc.weight.shape)
    fc.bias.data[...] = np.array([1, 0, 0, 0, 1, 0], dtype=fc.bias.dtype) + rng.normal(0, scale, size=6)


def gradient_cases(seed: int = 0) -> List[Tuple[str, Callable, list, dict]]:
    rng = np.random.default_rng(seed)
    cases = []

    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
    cases.append(("add", _weighted(rng, add, (2, 3)), [a, b], {}))
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
    cases.append(("mul", _weighted(rng, mul, (2, 3)), [a, b], {}))
    x = Tensor(np.sign(rng.normal(size=(3, 4))) * rng.uniform(0.1, 1.0, size=(3, 4)), requires_grad=True)
    cases.append(("relu", _weighted(rng, relu, (3, 4)), [x], {}))

    for stride, pad, k in ((1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)):
        x, w, bias = _leaf(rng, (2, 3, 7, 6)), _leaf(rng, (4, 3, k, k)), _leaf(rng, (4,))
        ho, wo = (7 + 2 * pad - k) // stride + 1, (6 + 2 * pad - k) // stride + 1
        fn = _weighted(rng, lambda x, w, b, s=stride, p=pad: K.conv2d(x, w, b, s, p), (2, 4, ho, wo))
        cases.append((f"conv2d k{k} s{stride} p{pad}", fn, [x, w, bias], {}))

    x = _leaf(rng, (2, 3, 6, 7))
    cases.append(("max_pool2d", _weighted(rng, K.max_pool2d, (2, 3, 3, 3)), [x], {}))
    x = _leaf(rng, (2, 3, 4, 5))
    cases.append(("global_max_pool", _weighted(rng, K.global_max_pool, (2, 3)), [x], {}))
    x = _leaf(rng, (2, 3, 4, 5))
    cases.append(("global_avg_pool", _weighted(rng, K.global_avg_pool, (2, 3)), [x], {}))

    for training in (True, False):
        x, g, be = _leaf(rng, (3, 2, 4, 3)), _leaf(rng, (2,), 0.5, 1.0), _leaf(rng, (2,))
        stats = K.RunningStats(2, dtype=F64)
        stats.mean[...] = rng.normal(size=2)
        stats.var[...] = rng.uniform(0.5, 2.0, size=2)
        fn = _weighted(rng, lambda x, g, be, st=stats, t=training: K.batch_norm(x, g, be, st, t), (3, 2, 4, 3))
        cases.append((f"batch_norm {'train' if training else 'eval'}", fn, [x, g, be], {}))

    x, w, bias = _leaf(rng, (4, 5)), _leaf(rng, (3, 5)), _leaf(rng, (3,))
    cases.append(("fully_connected", _weighted(rng, K.fully_connected, (4, 3)), [x, w, bias], {}))
    logits = _leaf(rng, (5, 7), 2.0)
    labels = rng.integers(0, 7, size=5)
    cases.append(("softmax_cross_entropy", lambda z: K.softmax_cross_entropy(z, labels), [logits], {}))

    for size in ((7, 9), (3, 2), (1, 4)):
        x = _leaf(rng, (2, 2, 4, 5))
        cases.append((f"bilinear_resize {size[0]}x{size[1]}",
                      _weighted(rng, lambda x, s=size: K.bilinear_resize(x, s), (2, 2) + size), [x], {}))

    # jittered so no sample point lands on the integer lattice, where bilinear sampling has a kink
    theta = Tensor(np.array([[[0.9, 0.2, 0.11], [-0.15, 1.1, 0.07]],
                             [[1.2, -0.1, -0.3], [0.05, 0.8, 0.21]]]) + rng.normal(0, 0.01, size=(2, 2, 3)),
                   requires_grad=True)
    cases.append(("grid_generate", _weighted(rng, lambda t: K.grid_generate(t, (3, 4)), (2, 3, 4, 2)), [theta], {}))
    x = _leaf(rng, (2, 3, 5, 6))
    theta2 = Tensor(theta.data.copy(), requires_grad=True)
    fn = _weighted(rng, lambda x, t: K.grid_sample(x, K.grid_generate(t, (4, 5))), (2, 3, 4, 5))
    cases.append(("grid_sample", fn, [x, theta2], {}))
    x = _leaf(rng, (2, 3, 5, 6))
    # pixel positions off the lattice, some of them outside the image
    px = rng.integers(-2, 7, size=(2, 4, 3, 2)) + rng.uniform(0.2, 0.8, size=(2, 4, 3, 2))
    grid = Tensor(2 * px / (np.array([6, 5]) - 1) - 1, requires_grad=True)
    cases.append(("grid_sample (free grid)", _weighted(rng, K.grid_sample, (2, 3, 4, 3)), [x, grid], {}))

    regions = compute_regions(20, 20)
    feats = [_leaf(rng, (2, 3, rng.integers(1, 4), rng.integers(1, 5))) for _ in range(5)]
    fn = _weighted(rng, lambda *fs: stitch_features(list(fs), regions, (10, 10)), (2, 3, 10, 10))
    cases.append(("crop+stitch_features", fn, feats, {}))

    model = build_model(SMALL_BACKBONE, seed=seed, dtype=F64, input_size=(16, 16))
    perturb_locnet(model, rng)
    o_g = Tensor(np.abs(rng.normal(size=(2, 8, 4, 4))), requires_grad=True)
    o_l = Tensor(np.abs(rng.normal(size=(2, 8, 4, 4))), requires_grad=True)
    loc_params = [p for _, p in model.locnet.named_parameters()]
    fn = _weighted(rng, lambda g, l, *_: mdim_forward(model, g, l, training=True), (2, 8, 4, 4))
    cases.append(("mdim_forward", fn, [o_g, o_l] + loc_params, {"max_coords": 12}))

    cases.append(pcnn_case(seed))
    return cases


def pcnn_case(seed: int = 0, variant: Variant = Variant()):
    """End-to-end combined loss on a 2 x 1 x 16 x 16 batch w.r.t. images and every parameter."""
    rng = np.random.default_rng([seed, 7])
    model = build_model(SMALL_BACKBONE, variant=variant, seed=seed, dtype=F64, input_size=(16, 16))
    if model.locnet is not None:
        perturb_locnet(model, rng)
    # keep logits O(1): a saturated softmax leaves gradients below finite-difference resolution
    for head in (model.gpn, model.lpn):
        if head is not None:
            head.fc.weight.data *= 0.1
    images = Tensor(rng.uniform(0, 1, size=(2, 1, 16, 16)), requires_grad=True)
    labels = np.array([3, 5])
    params = model.parameters()
    fn = lambda img, *_: pcnn_forward(model, img, labels, training=True).loss
    return (f"pcnn_forward[{variant}]", fn, [images] + params, {"max_coords": 4})


def run_gradient_suite(seed: int = 0, eps: float = 1e-6) -> List[GradReport]:
    reports = []
    for name, fn, inputs, kw in gradient_cases(seed):
        reports.append(grad_check(fn, inputs, eps=eps, op_name=name, seed=seed, **kw))
    return reports
