import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcnn.errors import ImageTooSmall, InvalidShape, TargetTooSmall
from pcnn.kernels import paste
from pcnn.regions import REGION_NAMES, RegionSpec, compute_regions, crop_regions, stitch_features
from pcnn.tensor import Tensor, add, scale, tsum

from oracles import stitch_oracle


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class TestComputeRegions:
    def test_h20_example(self):
        r = compute_regions(20, 20)
        assert list(r) == [(0, 10, 0, 10), (0, 10, 10, 20), (10, 13, 0, 10), (10, 13, 10, 20), (13, 20, 0, 20)]

    def test_h32_example(self):
        r = compute_regions(32, 32)
        assert list(r) == [(0, 16, 0, 16), (0, 16, 16, 32), (16, 20, 0, 16), (16, 20, 16, 32), (20, 32, 0, 32)]

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            compute_regions(7, 20)
        with pytest.raises(ImageTooSmall):
            compute_regions(20, 7)

    def test_degenerate_band(self):
        with pytest.raises(ImageTooSmall):
            compute_regions(8, 8, RegionSpec(0.5, 0.55))

    def test_exhaustive_tiling(self):
        for h in range(8, 65):
            for w in range(8, 65):
                r = compute_regions(h, w)
                assert len(r) == 5
                assert sum((r1 - r0) * (c1 - c0) for r0, r1, c0, c1 in r) == h * w
                assert r.is_tiling()
                assert r[4][2:] == (0, w)
                assert all(r1 > r0 and c1 > c0 for r0, r1, c0, c1 in r)

    def test_scale_consistency(self):
        spec = RegionSpec()
        for hf in range(8, 33):
            assert list(compute_regions(32, 32, spec).scaled(hf, hf)) == list(compute_regions(hf, hf, spec))

    def test_from_heights(self):
        assert list(compute_regions(20, 20, RegionSpec.from_heights(20, 10, 17)))[4] == (17, 20, 0, 20)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            RegionSpec(0.6, 0.5)
        with pytest.raises(ValueError):
            RegionSpec(wsplit=1.0)

    def test_index_image(self):
        img = compute_regions(20, 20).index_image()
        assert img[0, 0] == 1 and img[0, 19] == 2 and img[11, 0] == 3 and img[11, 19] == 4 and img[19, 5] == 5
        assert REGION_NAMES[4] == "mouth"


class TestCrop:
    def test_row_index_image(self):
        rows = np.repeat(np.arange(20.0)[:, None], 20, axis=1)[None, None]
        crops = crop_regions(t64(rows), compute_regions(20, 20))
        assert crops[4].data.min() >= 13
        assert sum(c.data.size for c in crops) == 20 * 20

    def test_paste_back_bitwise(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 24, 19))
        r = compute_regions(24, 19)
        assert np.array_equal(paste(crop_regions(t64(x), r), list(r), (24, 19)).data, x)

    def test_mismatch(self):
        with pytest.raises(InvalidShape):
            crop_regions(t64(np.zeros((1, 1, 16, 16))), compute_regions(20, 20))

    def test_gradient_scatters_back(self):
        x = t64(np.zeros((1, 1, 20, 20)), grad=True)
        crops = crop_regions(x, compute_regions(20, 20))
        total = tsum(crops[0])
        for k, cr in enumerate(crops[1:], start=2):
            total = add(total, scale(tsum(cr), float(k)))
        total.backward()
        assert np.array_equal(x.grad[0, 0], compute_regions(20, 20).index_image().astype(float))


class TestStitch:
    def test_constants_piecewise(self):
        r = compute_regions(32, 32)
        feats = [t64(np.full((1, 2, 3, 4), float(k))) for k in range(1, 6)]
        out = stitch_features(feats, r, (8, 8)).data
        assert np.array_equal(out[0, 0], compute_regions(8, 8).index_image().astype(float))

    def test_pure_paste_at_scaled_sizes(self):
        r = compute_regions(32, 32)
        layout = r.scaled(8, 8)
        rng = np.random.default_rng(1)
        feats = [rng.normal(size=(2, 3, r1 - r0, c1 - c0)) for r0, r1, c0, c1 in layout]
        out = stitch_features([t64(f) for f in feats], r, (8, 8)).data
        for f, (r0, r1, c0, c1) in zip(feats, layout):
            assert np.array_equal(out[:, :, r0:r1, c0:c1], f)

    def test_target_too_small(self):
        feats = [t64(np.zeros((1, 1, 2, 2))) for _ in range(5)]
        with pytest.raises(TargetTooSmall):
            stitch_features(feats, compute_regions(32, 32), (4, 4))

    def test_feature_count_mismatch(self):
        with pytest.raises(InvalidShape):
            stitch_features([t64(np.zeros((1, 1, 2, 2)))] * 4, compute_regions(32, 32), (8, 8))

    def test_random_oracle_with_sentinel(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            spec = RegionSpec(rng.uniform(0.3, 0.5), rng.uniform(0.55, 0.8), rng.uniform(0.3, 0.7))
            h, w = (int(v) for v in rng.integers(16, 48, size=2))
            try:
                regions = compute_regions(h, w, spec)
            except ImageTooSmall:
                continue
            hf, wf = (int(v) for v in rng.integers(6, 14, size=2))
            feats = [rng.normal(size=(2, 2, int(rng.integers(1, 6)), int(rng.integers(1, 6)))) for _ in range(5)]
            try:
                got = stitch_features([t64(f) for f in feats], regions, (hf, wf), fill=np.nan).data
            except TargetTooSmall:
                continue
            ref = stitch_oracle(feats, spec, (hf, wf))
            assert not np.isnan(got).any()
            assert np.abs(got - ref).max() <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(8, 64), st.integers(8, 64), st.floats(0.2, 0.45), st.floats(0.55, 0.85), st.floats(0.25, 0.75))
def test_tiling_any_spec(h, w, b1, b2, c):
    try:
        r = compute_regions(h, w, RegionSpec(b1, b2, c))
    except ImageTooSmall:
        return
    assert r.is_tiling()
