import numpy as np
import pytest

from dualfusion import conditioning as C
from dualfusion import tensor as T
from dualfusion.data import ToyCorpusSpec, corpus_arrays, read_manifest
from dualfusion.tensor import Rng, ShapeError, Tensor

from fdcheck import fd_grad, max_rel_err


class TestExtractor:
    def test_feature_length_arithmetic(self):
        ex = C.StyleExtractor(channels=(8, 16, 32, 64, 128))
        assert ex.feature_length() == 2 * 248 == 496

    def test_deterministic_across_instances(self):
        img = Rng(3).normal((3, 16, 16))
        a = C.StyleExtractor(seed=5).extract(Tensor(img))
        b = C.StyleExtractor(seed=5).extract(Tensor(img))
        assert np.array_equal(a, b)

    def test_constant_image_stats(self):
        # pointwise kernels keep constant inputs constant at every level, so
        # variances vanish and means equal each filter's constant response
        ex = C.StyleExtractor(channels=(4, 8), kernel=1, seed=9)
        gray = 0.25
        f = ex.extract(Tensor(np.full((3, 16, 16), gray)))
        means1, vars1 = f[0:4], f[4:8]
        vars2 = f[16:24]
        assert np.allclose(vars1, 0.0, atol=1e-20)
        assert np.allclose(vars2, 0.0, atol=1e-20)
        resp = ex.weights[0].data @ np.full(3, gray)
        resp = resp / (1.0 + np.exp(-resp))
        assert np.allclose(means1, resp)

    def test_wrong_channel_count_rejected(self):
        ex = C.StyleExtractor()
        with pytest.raises(ShapeError):
            ex.extract(Tensor(np.zeros((1, 16, 16))))

    def test_batched_matches_single(self):
        ex = C.StyleExtractor(channels=(4, 8), seed=2)
        imgs = Rng(4).normal((3, 3, 16, 16))
        batched = ex.extract(Tensor(imgs))
        singles = np.stack([ex.extract(Tensor(im)) for im in imgs])
        assert np.allclose(batched, singles)

    def test_pixel_permutation_invariance_k1(self):
        # with 1x1 kernels each output pixel depends on its input pixel only,
        # so permuting pixels permutes responses and stats are unchanged
        ex = C.StyleExtractor(channels=(4,), kernel=1, seed=7)
        img = Rng(8).normal((3, 8, 8))
        perm = np.random.default_rng(0).permutation(64)
        shuffled = img.reshape(3, -1)[:, perm].reshape(3, 8, 8)
        fa = ex.extract(Tensor(img))
        fb = ex.extract(Tensor(shuffled))
        assert np.allclose(fa, fb, atol=1e-12)

    def test_variance_entries_nonnegative(self):
        ex = C.StyleExtractor(channels=(4, 8), seed=3)
        f = ex.extract(Tensor(Rng(5).normal((3, 16, 16))))
        n1, n2 = 4, 8
        variances = np.concatenate([f[n1 : 2 * n1], f[2 * n1 + n2 :]])
        assert np.all(variances >= 0)


class TestStyleDistance:
    def test_identical_zero(self):
        f = Rng(1).normal(20)
        assert C.style_stat_distance(f, f) == 0.0

    def test_symmetric(self):
        a, b = Rng(2).normal(20), Rng(3).normal(20)
        assert np.isclose(C.style_stat_distance(a, b), C.style_stat_distance(b, a))

    def test_corpus_family_separation(self):
        spec = ToyCorpusSpec(count=48, size=32, n_styles=12, seed=5)
        imgs = corpus_arrays(spec)
        ex = C.StyleExtractor(seed=101)
        feats = ex.extract(Tensor(imgs))
        fam = [i % len(spec.families) for i in range(len(imgs))]
        within, between = [], []
        for i in range(len(imgs)):
            for j in range(i + 1, len(imgs)):
                d = C.style_stat_distance(feats[i], feats[j])
                (within if fam[i] == fam[j] else between).append(d)
        assert np.mean(within) < np.mean(between)

    def test_stripe_vs_checker_level1_differs(self):
        spec = ToyCorpusSpec(count=6, size=32, n_styles=3, seed=9)
        imgs = corpus_arrays(spec)
        rows_fam = [spec.families[i % 3] for i in range(6)]
        ex = C.StyleExtractor(seed=101)
        i_stripe = rows_fam.index("stripes")
        i_checker = rows_fam.index("checker")
        f_a = ex.extract(Tensor(imgs[i_stripe]))
        f_b = ex.extract(Tensor(imgs[i_checker]))
        assert C.style_stat_distance(f_a, f_b) > 0


class TestRefiner:
    def test_channel_compression_shapes(self):
        r = C.ContentRefiner(16, 12, Rng(1))
        out = r.forward(Tensor(np.zeros((2, 16, 16, 16))))
        assert out.shape == (2, 12, 16, 16)

    def test_spatial_extent_preserved(self):
        r = C.ContentRefiner(3, 2, Rng(2))
        out = r.forward(Tensor(np.zeros((1, 3, 16, 16))))
        assert out.shape[2:] == (16, 16)

    def test_compression_sweep_constructible(self):
        for cr in (4, 8, 12):
            C.ContentRefiner(16, cr, Rng(3))
        C.ContentRefiner(16, 16, Rng(3), allow_equal=True)
        with pytest.raises(ValueError):
            C.ContentRefiner(16, 16, Rng(3))
        with pytest.raises(ValueError):
            C.ContentRefiner(16, 20, Rng(3))

    def test_channel_mismatch_rejected(self):
        r = C.ContentRefiner(16, 12, Rng(4))
        with pytest.raises(ShapeError):
            r.forward(Tensor(np.zeros((1, 8, 4, 4))))

    def test_gradients_flow_to_input_and_params(self):
        r = C.ContentRefiner(4, 3, Rng(5))
        z = Tensor(Rng(6).normal((1, 4, 4, 4)), requires_grad=True)

        def loss():
            out = r.forward(z)
            return T.tsum(T.mul(out, out))

        loss().backward()
        assert z.grad is not None and np.any(z.grad != 0)

        w = r.params["refiner.conv2.w"]
        analytic = w.grad.copy()

        def f(v):
            saved = w.data
            w.data = v
            val = loss().item()
            w.data = saved
            return val

        num = fd_grad(f, w.data.copy())
        assert max_rel_err(analytic, num) < 1e-4


class TestDropout:
    def make_nulls(self):
        return C.NullConditions.build(10, 2, Rng(7))

    def test_all_dual_when_zero(self):
        nulls = self.make_nulls()
        rng = Rng(1)
        f = np.ones(10)
        z = Tensor(np.ones((2, 4, 4)))
        for _ in range(50):
            _, _, mode = C.apply_condition_dropout(rng, 0.0, 0.0, f, z, nulls)
            assert mode == C.DUAL

    def test_always_content_only(self):
        nulls = self.make_nulls()
        rng = Rng(2)
        z = Tensor(np.ones((2, 4, 4)))
        for _ in range(50):
            style, content, mode = C.apply_condition_dropout(rng, 1.0, 0.0, np.ones(10), z, nulls)
            assert mode == C.CONTENT_ONLY
            assert style is nulls.null_style
            assert content is z

    def test_style_only_nulls_content(self):
        nulls = self.make_nulls()
        style, content, mode = C.apply_condition_dropout(
            Rng(3), 0.0, 1.0, np.ones(10), Tensor(np.ones((2, 4, 4))), nulls
        )
        assert mode == C.STYLE_ONLY
        assert np.array_equal(content.data, np.zeros((2, 4, 4)))

    def test_mode_frequencies(self):
        rng = Rng(11)
        n = 100_000
        counts = {C.CONTENT_ONLY: 0, C.STYLE_ONLY: 0, C.DUAL: 0}
        for _ in range(n):
            counts[C.draw_condition_mode(rng, 0.1, 0.5)] += 1
        for mode, p in ((C.CONTENT_ONLY, 0.1), (C.STYLE_ONLY, 0.5), (C.DUAL, 0.4)):
            se = np.sqrt(p * (1 - p) / n)
            assert abs(counts[mode] / n - p) < 3 * se, mode

    def test_probability_bounds_rejected(self):
        with pytest.raises(ValueError):
            C.draw_condition_mode(Rng(1), 0.6, 0.6)

    def test_null_content_is_exactly_zero(self):
        nulls = self.make_nulls()
        assert np.count_nonzero(nulls.null_content(4, 4).data) == 0

    def test_null_style_is_trainable(self):
        nulls = self.make_nulls()
        assert nulls.null_style.requires_grad
