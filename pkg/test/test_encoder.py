import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from salvit import numcore as nc
from salvit.encoder import (Ablation, EncoderConfig, EncoderTrace, TokenGrid, backbone, encode, init_params,
                            salvit_block, square_pad)
from salvit.errors import DimensionError
from salvit.msa import AttentionConfig
from salvit.saliency import SaliencyMap, downscale


def image(rng, side=32):
    sal = np.zeros((side, side))
    sal[side // 4: 3 * side // 4, side // 4: 3 * side // 4] = 1.0
    return rng.uniform(size=(3, side, side)), sal


def test_config_consistency():
    with pytest.raises(ValidationError):
        EncoderConfig(image=30, patch=8)
    with pytest.raises(ValidationError):
        EncoderConfig(d_raw=32)
    with pytest.raises(ValidationError):
        EncoderConfig(d_vit=63, T=2)


def test_backbone_zero_weights(encoder_cfg, rng):
    cfg = encoder_cfg()
    params = {k: np.zeros_like(v) for k, v in nc.scope(init_params(cfg, rng), "backbone").items()}
    out = backbone(rng.uniform(size=(3, 32, 32)), params, cfg)
    assert out.shape == (cfg.n, cfg.d_raw)
    assert_array_equal(out.data, 0.0)
    with pytest.raises(DimensionError):
        backbone(rng.uniform(size=(3, 32, 24)), params, cfg)


def test_fresh_block_is_identity(encoder_cfg, rng):
    cfg = encoder_cfg()
    block = nc.scope(init_params(cfg, rng), "block0")
    Z = rng.normal(size=(cfg.n, cfg.d_raw))
    out, _ = salvit_block(Z, rng.uniform(size=cfg.n), cfg.attention, block)
    assert_allclose(out.data, Z, atol=1e-15)


def test_full_saliency_block_equals_vanilla_block(encoder_cfg, rng):
    cfg = encoder_cfg(attention=AttentionConfig(heads=2, head_dim=4, J=5.0))
    block = {k: rng.normal(0.0, 0.5, v.shape) for k, v in nc.scope(init_params(cfg, rng), "block0").items()}
    Z = rng.normal(size=(cfg.n, cfg.d_raw))
    masked, _ = salvit_block(Z, np.ones(cfg.n), cfg.attention, block)
    plain, _ = salvit_block(Z, None, cfg.attention, block)
    assert np.abs(masked.data - plain.data).max() <= 1e-12


def test_block_gradient(rng):
    from salvit.episodes.experiments import gradient_cases
    f, point = gradient_cases()["salvit_block"](rng)
    assert nc.grad_check(f, point) < 1e-4


@pytest.mark.parametrize("ablation,dim", [
    (Ablation.full, 16), (Ablation.no_ml, 16), (Ablation.no_pe, 16),
    (Ablation.vit_only, 8), (Ablation.cnn_only, 8), (Ablation.vanilla_vit, 16),
])
def test_encode_shapes_per_ablation(encoder_cfg, rng, ablation, dim):
    cfg = encoder_cfg(ablation=ablation)
    assert cfg.out_dim == dim
    rgb, sal = image(rng)
    trace = EncoderTrace()
    E = encode(rgb, sal, cfg, init_params(cfg, rng), trace=trace)
    assert isinstance(E, TokenGrid)
    assert E.data.shape == (cfg.n, dim)
    assert len(trace.thetas) == (cfg.T if cfg.learns_morphology else 0)
    if ablation is not Ablation.cnn_only:
        assert len(trace.attentions) == cfg.T


def test_no_pe_drops_the_table(encoder_cfg, rng):
    params = init_params(encoder_cfg(ablation=Ablation.no_pe), rng)
    assert not any(k.endswith("attn.pe") for k in params)
    assert any(k.endswith("attn.pe") for k in init_params(encoder_cfg(), rng))


def test_cascaded_blocks(encoder_cfg, rng):
    cfg = encoder_cfg(T=2)
    rgb, sal = image(rng)
    trace = EncoderTrace()
    E = encode(rgb, sal, cfg, init_params(cfg, rng), trace=trace)
    assert E.d == cfg.d_raw + cfg.d_vit
    assert len(trace.thetas) == 2


def test_no_ml_masks_with_downscaled_saliency(encoder_cfg, rng):
    cfg = encoder_cfg(ablation=Ablation.no_ml)
    rgb, sal = image(rng)
    trace = EncoderTrace()
    encode(rgb, sal, cfg, init_params(cfg, rng), trace=trace)
    assert_array_equal(trace.masks[0], downscale(SaliencyMap(sal), cfg.l))


def test_fixed_theta_one_equals_no_ml(encoder_cfg, rng):
    rgb, sal = image(rng)
    fixed, plain = encoder_cfg(fixed_theta=1.0), encoder_cfg(ablation=Ablation.no_ml)
    a = encode(rgb, sal, fixed, init_params(fixed, np.random.default_rng(0)))
    b = encode(rgb, sal, plain, init_params(plain, np.random.default_rng(0)))
    assert_allclose(a.data.data, b.data.data, atol=1e-15)


def test_initial_theta_tilde_is_identity_morphology(encoder_cfg, rng):
    cfg = encoder_cfg()
    rgb, sal = image(rng)
    trace = EncoderTrace()
    encode(rgb, sal, cfg, init_params(cfg, rng), trace=trace)
    assert trace.thetas[0].item() == pytest.approx(cfg.morph.rho1 / 2)


def test_raw_keep_zeroes_backbone_tokens(encoder_cfg, rng):
    cfg = encoder_cfg(ablation=Ablation.cnn_only)
    rgb, sal = image(rng)
    keep = np.ones(cfg.n)
    keep[[0, 5]] = 0.0
    E = encode(rgb, sal, cfg, init_params(cfg, rng), raw_keep=keep)
    assert_array_equal(E.data.data[[0, 5]], 0.0)


def test_encode_rejects_mismatched_saliency(encoder_cfg, rng):
    cfg = encoder_cfg()
    rgb, _ = image(rng)
    with pytest.raises(DimensionError):
        encode(rgb, np.zeros((16, 16)), cfg, init_params(cfg, rng))


def test_square_pad():
    rgb, sal = np.ones((3, 20, 32)), np.ones((20, 32))
    prgb, psal = square_pad(rgb, sal)
    assert prgb.shape == (3, 32, 32) and psal.shape == (32, 32)
    assert_array_equal(psal[20:], 0.0)
    assert_array_equal(prgb[:, :20], 1.0)
    with pytest.raises(DimensionError):
        square_pad(rgb, sal, side=24)


def test_token_grid_validation():
    with pytest.raises(DimensionError):
        TokenGrid(3, nc.Tensor(np.zeros((8, 2))))
    grid = TokenGrid(2, nc.Tensor(np.arange(8.0).reshape(4, 2)))
    assert grid.grid()[1, 0].tolist() == [4.0, 5.0]


def randomized(cfg, seed):
    rng = np.random.default_rng(seed)
    return {k: rng.normal(0.0, 0.5, v.shape) for k, v in init_params(cfg, rng).items()}


def test_vanilla_vit_ignores_saliency(encoder_cfg, rng):
    cfg = encoder_cfg(ablation=Ablation.vanilla_vit)
    params = randomized(cfg, 5)
    rgb, sal = image(rng)
    a = encode(rgb, sal, cfg, params)
    b = encode(rgb, rng.uniform(size=sal.shape), cfg, params)
    c = encode(rgb, np.zeros_like(sal), cfg, params)
    assert_array_equal(a.data.data, b.data.data)
    assert_array_equal(a.data.data, c.data.data)


def test_encode_is_equivariant_to_whole_patch_shifts(encoder_cfg, rng):
    cfg = encoder_cfg(attention=AttentionConfig(heads=2, head_dim=4, use_pe=False))
    params = randomized(cfg, 6)
    # constant theta so the pooled morphology descriptor drops out
    params.update({k: np.zeros_like(v) for k, v in params.items() if k.endswith(".w2") and k.startswith("mpg")})
    p, side = cfg.patch, cfg.image
    rgb, sal = np.zeros((3, side, side)), np.zeros((side, side))
    rgb[:, :side - p, :side - p] = rng.uniform(size=(3, side - p, side - p))
    sal[2:side - p - 2, 2:side - p - 2] = 1.0
    moved_rgb, moved_sal = np.zeros_like(rgb), np.zeros_like(sal)
    moved_rgb[:, p:, p:] = rgb[:, :side - p, :side - p]
    moved_sal[p:, p:] = sal[:side - p, :side - p]
    out = encode(rgb, sal, cfg, params).grid()
    moved = encode(moved_rgb, moved_sal, cfg, params).grid()
    assert_allclose(moved[1:, 1:], out[:-1, :-1], atol=1e-10)


def test_encode_is_bitwise_repeatable(encoder_cfg, rng):
    cfg = encoder_cfg()
    params = randomized(cfg, 7)
    rgb, sal = image(rng)
    first = encode(rgb, sal, cfg, params).data.data
    for _ in range(3):
        assert_array_equal(encode(rgb, sal, cfg, params).data.data, first)
