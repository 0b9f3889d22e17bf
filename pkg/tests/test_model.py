import numpy as np
import pytest

from oracles import gelu_exact, grad_check, huber_scalar, naive_extract
from strep import diffcore as dc
from strep.diffcore import Tensor
from strep.embedding import Embedding, apply_mask, cross_time_concat, latest_visible
from strep.encoder import Encoder, EncoderLayer
from strep.heads import (
    LossWeights,
    PredDecoder,
    ReconDecoder,
    check_kernels,
    multiscale_loss,
    total_loss,
)
from strep.model import ModelConfig, STReP, parameter_census

F64 = np.float64


# ------------------------------------------------------------ masking and embedding


@pytest.mark.parametrize("r,expect", [(0.0, 0), (0.25, 3), (0.5, 6), (0.99, 11)])
def test_mask_counts(r, expect):
    m = apply_mask((4, 7, 12), r, True, seed=3)
    assert np.all(m.counts() == expect)


def test_mask_inference_and_errors():
    assert not apply_mask((5, 12), 0.25, False, seed=1).grid.any()
    with pytest.raises(ValueError):
        apply_mask((5, 12), 1.0, True, seed=1)


def test_mask_is_per_node_and_seeded():
    a = apply_mask((50, 12), 0.25, True, seed=9).grid
    b = apply_mask((50, 12), 0.25, True, seed=9).grid
    assert np.array_equal(a, b)
    assert len({row.tobytes() for row in a}) > 1


def test_latest_visible_rules():
    mask = np.zeros((3, 6), dtype=bool)
    assert np.all(latest_visible(mask) == 5)
    mask[1, 5] = True
    mask[2, [3, 4, 5]] = True
    np.testing.assert_array_equal(latest_visible(mask), [5, 4, 2])
    mask[0] = True
    with pytest.raises(ValueError, match="fully masked"):
        latest_visible(mask)


def test_cross_time_concat_values():
    x = np.arange(12.0).reshape(2, 6, 1)
    mask = np.zeros((2, 6), dtype=bool)
    mask[1, 4:] = True
    out = cross_time_concat(x, mask)
    assert out.shape == (2, 6, 2)
    np.testing.assert_array_equal(out[0, :, 1], 5.0)
    np.testing.assert_array_equal(out[1, :, 1], 9.0)
    np.testing.assert_array_equal(out[..., 0], x[..., 0])


def _emb_inputs(rng, B=2, N=4, T=12):
    x = rng.standard_normal((B, N, T, 1))
    tod = np.tile(np.arange(T), (B, 1))
    dow = np.zeros((B, T), dtype=int)
    return x, tod, dow


def test_embedding_shape_and_symmetry():
    rng = np.random.default_rng(0)
    emb = Embedding(4, 288, 1, 64, 3, rng, dtype=F64)
    x, tod, dow = _emb_inputs(rng)
    x[:, 1] = x[:, 0]
    emb.spt.data[1] = emb.spt.data[0]
    mask = np.zeros(x.shape[:-1], dtype=bool)
    E = emb(x, mask, tod, dow)
    assert E.shape == (2, 4, 12, 64)
    np.testing.assert_array_equal(E.data[:, 0], E.data[:, 1])


def test_masked_positions_ignore_values():
    rng = np.random.default_rng(1)
    emb = Embedding(4, 288, 1, 16, 3, rng, dtype=F64)
    x, tod, dow = _emb_inputs(rng)
    mask = apply_mask(x, 0.25, True, seed=2).grid
    h1 = emb.hidden(x, mask, tod, dow).data
    x2 = x.copy()
    x2[mask] += 100.0
    h2 = emb.hidden(x2, mask, tod, dow).data
    # visible positions anchor on visible steps only, so nothing moves at all
    np.testing.assert_array_equal(h1, h2)
    x3 = x.copy()
    x3[~mask] += 1.0
    h3 = emb.hidden(x3, mask, tod, dow).data
    np.testing.assert_array_equal(h1[mask], h3[mask])
    assert not np.allclose(h1[~mask], h3[~mask])


def test_spatial_table_row_is_local():
    rng = np.random.default_rng(2)
    emb = Embedding(4, 288, 1, 16, 3, rng, dtype=F64)
    x, tod, dow = _emb_inputs(rng)
    mask = np.zeros(x.shape[:-1], dtype=bool)
    a = emb(x, mask, tod, dow).data
    emb.spt.data[2] += 1.0
    b = emb(x, mask, tod, dow).data
    changed = np.abs(a - b).reshape(2, 4, -1).max(axis=(0, 2)) > 0
    np.testing.assert_array_equal(changed, [False, False, True, False])


def test_embedding_index_range():
    rng = np.random.default_rng(3)
    emb = Embedding(4, 288, 1, 8, 3, rng)
    x, tod, dow = _emb_inputs(rng)
    with pytest.raises(IndexError):
        emb(x, np.zeros(x.shape[:-1], bool), tod + 288, dow)


# ------------------------------------------------------------ encoder


def _layer(N=16, d=16, heads=4, seed=0):
    rng = np.random.default_rng(seed)
    layer = EncoderLayer(T=12, p=3, m=8, d=d, heads=heads, rng=rng, dtype=F64)
    for _, p in layer.named_parameters():
        p.data += rng.standard_normal(p.shape) * 0.05
    return layer


def test_compress_decompress_shapes_and_zero():
    layer = EncoderLayer(T=12, p=3, m=8, d=64, heads=4, rng=np.random.default_rng(0), dtype=F64)
    E = Tensor(np.zeros((307, 12, 64)), dtype=F64)
    Ec = layer.compress(E)
    assert Ec.shape == (307, 3, 64) and not Ec.data.any()
    assert layer.decompress(Ec).shape == (307, 12, 64)
    assert not layer.decompress(Ec).data.any()
    with pytest.raises(ValueError):
        layer.compress(Tensor(np.zeros((2, 11, 64))))


def test_extract_matches_dense_oracle():
    layer = _layer()
    Ec = np.random.default_rng(5).standard_normal((16, 3, 16))
    got = layer.extract(Tensor(Ec, dtype=F64)).data
    np.testing.assert_allclose(got, naive_extract(Ec, layer), rtol=1e-9, atol=1e-5)


def test_extract_single_node():
    layer = _layer()
    Ec = np.random.default_rng(6).standard_normal((1, 3, 16))
    got = layer.extract(Tensor(Ec, dtype=F64)).data
    assert got.shape == (1, 3, 16)
    np.testing.assert_allclose(got, naive_extract(Ec, layer), rtol=1e-9, atol=1e-9)


def test_decompress_mixes_all_steps():
    layer = _layer()
    E = Tensor(np.random.default_rng(7).standard_normal((2, 12, 16)), requires_grad=True, dtype=F64)
    first_step = np.zeros((2, 12, 16))
    first_step[:, 0] = 1.0
    # d(output at step 0) / d(input at every step)
    dc.backward(dc.sum_all(dc.mul(layer.decompress(layer.compress(E)), Tensor(first_step, dtype=F64))))
    assert np.all(np.abs(E.grad).sum(axis=(0, 2)) > 0)


def test_residual_identity_bitwise():
    rng = np.random.default_rng(8)
    enc = Encoder(3, rng, T=12, p=3, m=8, d=16, heads=4)
    for p in enc.parameters():
        p.data[...] = 0.0
    E = rng.standard_normal((2, 5, 12, 16)).astype(np.float32)
    Z = enc(Tensor(E)).data
    assert Z.tobytes() == E.tobytes()


def test_permutation_equivariance():
    rng = np.random.default_rng(9)
    enc = Encoder(2, rng, T=12, p=3, m=8, d=16, heads=4, dtype=F64)
    E = rng.standard_normal((2, 7, 12, 16))
    Z = enc(Tensor(E, dtype=F64)).data
    for _ in range(5):
        perm = rng.permutation(7)
        Zp = enc(Tensor(E[:, perm], dtype=F64)).data
        np.testing.assert_allclose(Zp, Z[:, perm], atol=1e-5)


def test_layer_validation():
    with pytest.raises(ValueError):
        EncoderLayer(T=12, p=12)
    with pytest.raises(ValueError):
        EncoderLayer(d=10, heads=4)
    with pytest.raises(ValueError):
        Encoder(0)


# ------------------------------------------------------------ decoders and losses


def test_recon_decoder_hand_composition():
    dec = ReconDecoder(1, 1, np.random.default_rng(0), dtype=F64)
    dec.w1.data[...] = 0.0
    dec.w2.data[...] = 1.0
    dec.b1.data[...] = 0.0
    dec.b2.data[...] = 0.0
    z = np.linspace(-3, 3, 13).reshape(1, 13, 1)
    np.testing.assert_allclose(dec(Tensor(z, dtype=F64)).data, gelu_exact(z), rtol=1e-12)


def test_decoders_zero_and_shapes():
    rng = np.random.default_rng(1)
    rec = ReconDecoder(64, 1, rng, dtype=F64)
    pred = PredDecoder(12, 12, 64, 1, rng, dtype=F64)
    Z = Tensor(np.zeros((5, 12, 64)), dtype=F64)
    assert rec(Z).shape == (5, 12, 1) and not rec(Z).data.any()
    assert pred(Z).shape == (5, 12, 1) and not pred(Z).data.any()
    Zr = Tensor(rng.standard_normal((5, 12, 64)), dtype=F64)
    np.testing.assert_array_equal(pred(Zr, training=False).data, pred(Zr, training=False).data)


def test_multiscale_hand_example():
    pred = np.array([1.0, 1.0, 3.0, 3.0]).reshape(1, 4, 1)
    true = np.ones((1, 4, 1))
    assert multiscale_loss(Tensor(pred, dtype=F64), true, (2,), 1.0).item() == 0.75


def test_multiscale_identity_kernel_is_huber():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((3, 24, 1)) * 2, rng.standard_normal((3, 24, 1))
    want = np.mean([huber_scalar(e) for e in (a - b).ravel()])
    assert multiscale_loss(Tensor(a, dtype=F64), b, (1,)).item() == pytest.approx(want, rel=1e-12)


def test_multiscale_is_plain_sum_over_kernels():
    from oracles import avg_pool_loop

    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((24, 1)), rng.standard_normal((24, 1))
    want = sum(np.mean([huber_scalar(e) for e in (avg_pool_loop(a, k) - avg_pool_loop(b, k)).ravel()])
               for k in (2, 4, 8, 16))
    got = multiscale_loss(Tensor(a[None], dtype=F64), b[None], (2, 4, 8, 16)).item()
    assert got == pytest.approx(want, rel=1e-12)


def test_kernel_bounds():
    with pytest.raises(ValueError):
        check_kernels((2, 32), 24)


def test_loss_weights():
    w = LossWeights(0.5, 0.5)
    assert w.gamma == 0.0
    assert LossWeights(0.3, 0.3).without("ms") == LossWeights(0.5, 0.5)
    with pytest.raises(ValueError):
        LossWeights(0.7, 0.5)


def test_total_loss_recombines_and_zero():
    rng = np.random.default_rng(4)
    xc, xt = rng.standard_normal((2, 3, 12, 1)), rng.standard_normal((2, 3, 12, 1))
    hc, ht = Tensor(rng.standard_normal(xc.shape), dtype=F64), Tensor(rng.standard_normal(xt.shape), dtype=F64)
    w = LossWeights(0.2, 0.5)
    tot, c = total_loss(hc, xc, ht, xt, w)
    assert abs(c["total"] - (0.2 * c["recon"] + 0.5 * c["pred"] + 0.3 * c["ms"])) < 1e-12
    zero, _ = total_loss(Tensor(xc, dtype=F64), xc, Tensor(xt, dtype=F64), xt)
    assert zero.item() == 0.0


def test_total_loss_missing_head_rejected():
    x = np.zeros((1, 2, 12, 1))
    with pytest.raises(ValueError):
        total_loss(None, x, Tensor(x), x, LossWeights(0.3, 0.3))


def test_recon_masked_only_mode():
    x = np.zeros((1, 1, 4, 1))
    h = Tensor(np.array([0.0, 0.0, 1.0, 0.0]).reshape(1, 1, 4, 1), dtype=F64)
    mask = np.array([[[False, False, True, False]]])
    _, all_pos = total_loss(h, x, None, None, LossWeights(1.0, 0.0), kernels=())
    _, masked = total_loss(h, x, None, None, LossWeights(1.0, 0.0), kernels=(), recon_mask=mask)
    assert all_pos["recon"] == pytest.approx(0.125)
    assert masked["recon"] == pytest.approx(0.5)


# ------------------------------------------------------------ full model


def micro_model(seed=0):
    cfg = ModelConfig(num_nodes=4, steps_per_day=24, T=8, F=8, d=8, p=2, m=2, L=2, heads=2)
    return cfg, STReP(cfg, seed=seed, dtype=F64)


def test_all_parameter_groups_receive_gradient():
    cfg, model = micro_model()
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((3, 4, 8, 1)), rng.standard_normal((3, 4, 8, 1))
    tod, dow = np.tile(np.arange(8), (3, 1)), np.zeros((3, 8), int)
    mask = apply_mask(x, 0.25, True, seed=1).grid
    out = model(x, mask, tod, dow, training=True, rng=np.random.default_rng(2))
    loss, _ = total_loss(out["x_curr_hat"], x, out["x_tgt_hat"], y, kernels=(2, 4, 8, 16))
    dc.backward(loss)
    for name, p in model.named_parameters():
        assert np.abs(p.grad).sum() > 0, name


def test_micro_model_gradients():
    cfg, model = micro_model(seed=3)
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal((2, 4, 8, 1)), rng.standard_normal((2, 4, 8, 1))
    tod, dow = np.tile(np.arange(8) + 5, (2, 1)), np.full((2, 8), 2)
    mask = apply_mask(x, 0.25, True, seed=5).grid

    def loss():
        out = model(x, mask, tod, dow, training=True, rng=np.random.default_rng(6))
        return total_loss(out["x_curr_hat"], x, out["x_tgt_hat"], y, kernels=(2, 4, 8, 16))[0]

    assert grad_check(loss, model.parameters(), max_entries=24) < 1e-4


def test_parameter_census_matches_counter():
    for kw in ({}, {"prenorm": True}, {"use_encoder": False, "use_pred": False}):
        cfg = ModelConfig(num_nodes=13, **kw)
        assert STReP(cfg).num_parameters() == parameter_census(cfg)["total"]


def test_mask_count_exact_for_round_off_products():
    # 0.29 * 100 evaluates to 28.999999999999996 in binary floating point
    assert np.all(apply_mask((3, 100), 0.29, True, seed=0).counts() == 29)
