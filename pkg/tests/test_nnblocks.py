"""Block-level oracles: dense attention equivalence, residual identity,
MAC scaling, fusion bookkeeping, and gradient checks."""

import numpy as np
import pytest

from vesselnext.core import ShapeError, Tensor, functional as F, meter
from vesselnext.nnblocks import (
    AttentionConfig,
    EfficientMHSA,
    GlobalMultiScaleFusion,
    PureConvBlock,
    TransNeXtBlock,
    Upsample,
    downsample,
)
from gradcheck import check_gradients


def conv1x1_ref(x, w, b):
    return np.einsum("oi,bihw->bohw", w[:, :, 0, 0], x) + b[None, :, None, None]


def dense_attention_ref(x, attn: EfficientMHSA):
    """Plain-numpy dense softmax(Q K^T / sqrt(d)) V using the module weights."""
    q = conv1x1_ref(x, attn.to_q.w.data, attn.to_q.b.data)
    k = conv1x1_ref(x, attn.to_k.w.data, attn.to_k.b.data)
    v = conv1x1_ref(x, attn.to_v.w.data, attn.to_v.b.data)
    B, C, H, W = x.shape
    heads = attn.cfg.heads
    d = C // heads
    out = np.empty((B, C, H * W))
    for b in range(B):
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            Q = q[b, sl].reshape(d, -1).T          # n x d
            K = k[b, sl].reshape(d, -1).T
            V = v[b, sl].reshape(d, -1).T
            scores = Q @ K.T / np.sqrt(d)          # n x n
            scores -= scores.max(axis=1, keepdims=True)
            w_ = np.exp(scores)
            w_ /= w_.sum(axis=1, keepdims=True)
            out[b, sl] = (w_ @ V).T
    out = out.reshape(B, C, H, W)
    return conv1x1_ref(out, attn.proj.w.data, attn.proj.b.data)


class TestEfficientMHSA:
    def test_matches_dense_reference_with_identity_subsampling(self, rng):
        # k >= n skips the key/value reduction, so the efficient path must
        # agree with a dense reference to near machine precision
        for trial in range(10):
            heads = int(rng.choice([1, 2, 4]))
            d = int(rng.choice([1, 2, 4]))
            C = heads * d
            H, W = int(rng.integers(2, 6)), int(rng.integers(2, 6))
            attn = EfficientMHSA(rng, C, AttentionConfig(heads=heads, subsample_k=H * W))
            x = Tensor(rng.normal(size=(2, C, H, W)))
            got = attn(x).data
            want = dense_attention_ref(x.data, attn)
            assert np.max(np.abs(got - want)) < 1e-10

    def test_single_token(self, rng):
        attn = EfficientMHSA(rng, 4, AttentionConfig(heads=4, subsample_k=1))
        x = Tensor(rng.normal(size=(1, 4, 1, 1)))
        # softmax over one key is 1, so attention passes V through
        v = conv1x1_ref(x.data, attn.to_v.w.data, attn.to_v.b.data)
        want = conv1x1_ref(v, attn.proj.w.data, attn.proj.b.data)
        assert np.allclose(attn(x).data, want, atol=1e-12)

    def test_mac_count_matches_closed_form(self, rng):
        heads, d = 4, 4
        C = heads * d
        H = W = 8
        n, k = H * W, 16
        attn = EfficientMHSA(rng, C, AttentionConfig(heads=heads, subsample_k=k))
        x = Tensor(rng.normal(size=(1, C, H, W)))
        with meter.MacCounter() as counter:
            attn(x)
        convs = 6 * n * C * C            # q, k, v, two sub-sample projections, out
        attend = 2 * heads * n * k * d   # scores and weighted sum
        assert counter.total == convs + attend

    def test_macs_linear_in_n(self, rng):
        heads, d, k = 4, 4, 64
        C = heads * d
        cfg = AttentionConfig(heads=heads, subsample_k=k)
        totals = []
        for side in (16, 32, 64):
            attn = EfficientMHSA(rng, C, cfg)
            x = Tensor(rng.normal(size=(1, C, side, side)))
            with meter.MacCounter() as counter:
                attn(x)
            totals.append(counter.total)
        n = np.array([16 * 16, 32 * 32, 64 * 64], dtype=float)
        y = np.array(totals, dtype=float)
        slope, intercept = np.polyfit(n, y, 1)
        fitted = slope * n + intercept
        r2 = 1 - np.sum((y - fitted) ** 2) / np.sum((y - y.mean()) ** 2)
        assert r2 > 0.999

    def test_channels_not_divisible_by_heads(self, rng):
        with pytest.raises(ShapeError, match="divisible"):
            EfficientMHSA(rng, 6, AttentionConfig(heads=4))

    def test_gradient(self, rng):
        attn = EfficientMHSA(rng, 4, AttentionConfig(heads=2, subsample_k=4))
        x = Tensor(rng.uniform(-1, 1, (1, 4, 4, 4)), requires_grad=True)
        probe = Tensor(rng.uniform(-1, 1, (1, 4, 4, 4)))
        tensors = [x] + attn.parameters()
        err = check_gradients(lambda: F.sum(F.mul(attn(x), probe)), tensors,
                              tol=1e-4, rng=rng, max_elements=12)
        assert err < 1e-4


class TestCrossMHSA:
    def test_reduces_to_self_attention(self, rng):
        attn = EfficientMHSA(rng, 4, AttentionConfig(heads=2, subsample_k=64))
        x = Tensor(rng.normal(size=(1, 4, 3, 3)))
        assert np.array_equal(attn(x).data, attn(x, kv=x).data)

    def test_output_matches_query_shape(self, rng):
        attn = EfficientMHSA(rng, 4, AttentionConfig(heads=2, subsample_k=16))
        for qs, kvs in [((2, 4, 3, 5), (2, 4, 8, 8)), ((1, 4, 6, 2), (1, 4, 2, 2))]:
            out = attn(Tensor(np.zeros(qs)), kv=Tensor(np.zeros(kvs)))
            assert out.shape == qs

    def test_channel_mismatch_rejected(self, rng):
        attn = EfficientMHSA(rng, 4, AttentionConfig(heads=2))
        with pytest.raises(ShapeError, match="channels"):
            attn(Tensor(np.zeros((1, 4, 3, 3))), kv=Tensor(np.zeros((1, 8, 3, 3))))

    def test_gradient_reaches_both_inputs(self, rng):
        attn = EfficientMHSA(rng, 4, AttentionConfig(heads=2, subsample_k=4))
        q = Tensor(rng.uniform(-1, 1, (1, 4, 3, 3)), requires_grad=True)
        kv = Tensor(rng.uniform(-1, 1, (1, 4, 4, 4)), requires_grad=True)
        probe = Tensor(rng.uniform(-1, 1, (1, 4, 3, 3)))
        err = check_gradients(lambda: F.sum(F.mul(attn(q, kv=kv), probe)),
                              [q, kv], tol=1e-4, rng=rng, max_elements=20)
        assert err < 1e-4


class TestPureConvBlock:
    def test_preserves_resolution(self, rng):
        block = PureConvBlock(rng, 2, 5)
        for h, w in [(3, 3), (7, 4), (10, 11)]:
            assert block(Tensor(np.zeros((1, 2, h, w)))).shape == (1, 5, h, w)

    def test_zero_parameters_give_beta_broadcast(self, rng):
        block = PureConvBlock(rng, 2, 3)
        for p in block.parameters():
            p.data[...] = 0.0
        out = block(Tensor(rng.normal(size=(1, 2, 4, 4))))
        # zero convs feed zeros into the norm; zero gamma/beta keep zeros
        assert np.array_equal(out.data, np.zeros((1, 3, 4, 4)))

    def test_gradient(self, rng):
        block = PureConvBlock(rng, 2, 2)
        x = Tensor(rng.uniform(-1, 1, (1, 2, 8, 8)), requires_grad=True)
        probe = Tensor(rng.uniform(-1, 1, (1, 2, 8, 8)))
        tensors = [x] + block.parameters()
        err = check_gradients(lambda: F.sum(F.mul(block(x), probe)), tensors,
                              tol=1e-4, rng=rng, max_elements=10)
        assert err < 1e-4


class TestTransNeXtBlock:
    def test_zeroed_block_is_identity(self, rng):
        block = TransNeXtBlock(rng, 4, AttentionConfig(heads=4, subsample_k=64))
        for p in block.parameters():
            p.data[...] = 0.0
        x = Tensor(rng.normal(size=(2, 4, 5, 5)))
        assert np.array_equal(block(x).data, x.data)

    def test_shape_preserved(self, rng):
        block = TransNeXtBlock(rng, 8, AttentionConfig(heads=4, subsample_k=16))
        for shape in [(1, 8, 4, 4), (2, 8, 6, 10), (1, 8, 12, 3)]:
            assert block(Tensor(np.zeros(shape))).shape == shape

    def test_expansion_is_four_fold(self, rng):
        block = TransNeXtBlock(rng, 8, AttentionConfig(heads=4))
        assert block.pw1.w.shape[0] == 32 and block.pw2.w.shape[1] == 32
        assert block.pw3.w.shape[0] == 32 and block.pw4.w.shape[1] == 32

    def test_gradient(self, rng):
        block = TransNeXtBlock(rng, 4, AttentionConfig(heads=4, subsample_k=9))
        x = Tensor(rng.uniform(-1, 1, (1, 4, 8, 8)), requires_grad=True)
        probe = Tensor(rng.uniform(-1, 1, (1, 4, 8, 8)))
        tensors = [x] + block.parameters()
        err = check_gradients(lambda: F.sum(F.mul(block(x), probe)), tensors,
                              tol=1e-4, rng=rng, max_elements=6)
        assert err < 1e-4


class TestUpDownsample:
    def test_maxpool_by_hand(self):
        out = downsample(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out.data.tolist() == [[[[4.0]]]]

    def test_constant_preserved(self, rng):
        x = Tensor(np.full((1, 2, 4, 4), 3.3))
        assert np.allclose(downsample(x).data, 3.3)

    def test_down_up_shape_roundtrip(self, rng):
        up = Upsample(rng, 2, 2)
        x = Tensor(rng.normal(size=(1, 2, 8, 8)))
        assert up(downsample(x)).shape == (1, 2, 8, 8)

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError):
            downsample(Tensor(np.zeros((1, 1, 5, 4))))


class TestGlobalMultiScaleFusion:
    def scales(self, rng, batch=1):
        return [Tensor(rng.normal(size=(batch, 2, 4, 4))),
                Tensor(rng.normal(size=(batch, 4, 2, 2)))]

    def test_shape_roundtrip(self, rng):
        fusion = GlobalMultiScaleFusion(rng, [2, 4], AttentionConfig(heads=2, subsample_k=8))
        outs = fusion(self.scales(rng))
        assert [o.shape for o in outs] == [(1, 2, 4, 4), (1, 4, 2, 2)]

    def test_empty_and_inconsistent_batch_rejected(self, rng):
        fusion = GlobalMultiScaleFusion(rng, [2, 4], AttentionConfig(heads=2))
        with pytest.raises(ShapeError):
            fusion([])
        with pytest.raises(ShapeError, match="batch"):
            fusion([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((2, 4, 2, 2)))])

    def test_identity_attention_preserves_token_order(self, rng):
        # zeroing the attention output projection and the MLP contraction
        # leaves only the pointwise in/out projections plus the embedding,
        # so permuting pixels must permute outputs identically
        fusion = GlobalMultiScaleFusion(rng, [3], AttentionConfig(heads=1, subsample_k=10_000))
        block = fusion.blocks[0]
        for p in (block.proj.w, block.proj.b, block.mlp2.w, block.mlp2.b):
            p.data[...] = 0.0
        x = rng.normal(size=(1, 3, 4, 4))
        out = fusion([Tensor(x)])[0].data
        perm = rng.permutation(16)
        xp = x.reshape(1, 3, 16)[:, :, perm].reshape(1, 3, 4, 4)
        out_p = fusion([Tensor(xp)])[0].data
        assert np.allclose(out.reshape(1, -1, 16)[:, :, perm], out_p.reshape(1, -1, 16),
                           atol=1e-12)

    def test_scale_permutation_consistency(self, rng):
        # swapping the two scales (with their projections and embeddings)
        # and unswapping the outputs reproduces the original result
        fusion = GlobalMultiScaleFusion(rng, [2, 4], AttentionConfig(heads=2, subsample_k=8))
        maps = self.scales(rng)
        base = [o.data.copy() for o in fusion(maps)]

        fusion.channel_list.reverse()
        fusion.proj_in.reverse()
        fusion.proj_out.reverse()
        fusion.scale_emb.reverse()
        swapped = fusion([maps[1], maps[0]])
        assert np.allclose(swapped[1].data, base[0], atol=1e-10)
        assert np.allclose(swapped[0].data, base[1], atol=1e-10)

    def test_gradient_reaches_every_scale(self, rng):
        fusion = GlobalMultiScaleFusion(rng, [2, 4], AttentionConfig(heads=2, subsample_k=8))
        a = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (1, 4, 2, 2)), requires_grad=True)
        pa = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
        pb = Tensor(rng.uniform(-1, 1, (1, 4, 2, 2)))

        def loss():
            oa, ob = fusion([a, b])
            return F.add(F.sum(F.mul(oa, pa)), F.sum(F.mul(ob, pb)))

        err = check_gradients(loss, [a, b], tol=1e-4, rng=rng, max_elements=16)
        assert err < 1e-4
