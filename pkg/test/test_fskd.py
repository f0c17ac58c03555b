import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from salvit import numcore as nc
from salvit.encoder import TokenGrid
from salvit.episodes.sampler import EpisodeSpec, SpeciesSplit, sample_episode
from salvit.errors import ContractError, DimensionError, NumericError
from salvit.fskd import (HeadConfig, Keypoint, KeypointDetector, LocalizationOutput, decode, decode_position,
                         descriptor, encode_target, init_head, localize, losses, modulate, pool_weights, precision,
                         prototypes, skr, skr_batch)
from salvit.numcore import Tensor

IDENTITY_LATENT = np.array([1.0, 1.0, 1.0, -1.0])  # d_v = 2, Q Q^T / 2 = I


def grid(l=2, d=3, seed=0):
    return TokenGrid(l, Tensor(np.random.default_rng(seed).normal(size=(l * l, d))))


def single_scale(S, cell, offset=(0.0, 0.0), latent=IDENTITY_LATENT, N=1):
    logits = np.zeros((N, S * S))
    logits[:, cell] = 50.0
    offsets = np.zeros((N, S * S, 2))
    offsets[:, cell] = offset
    lat = np.tile(latent, (N, S * S, 1))
    return LocalizationOutput([S], [Tensor(logits)], [nc.softmax(logits, axis=-1)], [Tensor(offsets)], [Tensor(lat)])


def test_skr_examples():
    const = TokenGrid(3, Tensor(np.tile([0.5, -2.0], (9, 1))))
    assert_allclose(skr(const, Keypoint(7.0, 19.0), 1.0, 8).data, [0.5, -2.0])
    E = grid()
    assert_allclose(skr(E, Keypoint(8.0, 8.0), 1.0, 8).data, E.data.data.mean(axis=0))
    assert_allclose(skr(E, Keypoint(12.0, 3.0), 0.0, 8).data, E.data.data[1])
    with pytest.raises(ContractError):
        skr(E, Keypoint(1.0, 1.0, visible=False), 1.0, 8)


def test_pool_weights_sum_to_one():
    w = pool_weights(4, np.array([1.3, 2.9]), 0.7)
    assert w.sum() == pytest.approx(1.0)
    assert int(np.argmax(w)) == 2 * 4 + 1
    assert_array_equal(pool_weights(4, np.array([-3.0, 9.0]), 0.0), np.eye(16)[12])


def test_prototypes_examples():
    skrs = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    ids, c = prototypes(skrs, np.ones((2, 1), dtype=bool), [7])
    assert ids == [7]
    assert_allclose(c.data, [[0.5, 0.5]])
    ids, c = prototypes(skrs[:1], np.ones((1, 1), dtype=bool), [7])
    assert_allclose(c.data, skrs[0])


def test_prototypes_drop_unseen_types():
    skrs = np.arange(12.0).reshape(2, 3, 2)
    visible = np.array([[True, False, True], [False, False, True]])
    ids, c = prototypes(skrs, visible, [4, 5, 6])
    assert ids == [4, 6]
    assert_allclose(c.data, [skrs[0, 0], skrs[:, 2].mean(axis=0)])
    with pytest.raises(ContractError):
        prototypes(skrs, np.zeros((2, 3), dtype=bool), [4, 5, 6])
    with pytest.raises(DimensionError):
        prototypes(skrs, np.ones((3, 3), dtype=bool), [4, 5, 6])


def test_modulate_examples():
    E = grid()
    assert_allclose(modulate(E, np.ones(3)).data[0], E.data.data)
    assert_array_equal(modulate(E, np.zeros((2, 3))).data, 0.0)
    with pytest.raises(DimensionError):
        modulate(E, np.ones(4))


def test_descriptor_zero_weights_and_gradient(rng):
    cfg = HeadConfig(scales=[2], desc_channels=3, desc_convs=1)
    params = {k[5:]: np.zeros_like(v) for k, v in init_head(cfg, 4, 4, rng).items() if k.startswith("desc.")}
    assert_array_equal(descriptor(rng.normal(size=(2, 16, 4)), 4, params, 1).data, 0.0)
    from salvit.episodes.experiments import gradient_cases
    f, point = gradient_cases()["descriptor"](rng)
    assert nc.grad_check(f, point) < 1e-4


def test_fresh_head_is_uniform_with_identity_precision(rng):
    cfg = HeadConfig(scales=[2, 3], d_v=4, desc_channels=3)
    params = init_head(cfg, 4, 4, rng)
    out = localize(np.zeros((2, 3 * 4)), cfg, params)
    for S, P, latent in zip(out.scales, out.probs, out.latent):
        assert_allclose(P.data, np.full((2, S * S), 1.0 / (S * S)))
        assert_allclose(precision(latent, cfg.d_v).data, np.broadcast_to(np.eye(2), (2, S * S, 2, 2)))


def test_precision_example():
    assert_allclose(precision(IDENTITY_LATENT, 2).data, np.eye(2))


def test_encode_target_examples():
    g, o = encode_target(np.array([112.0, 176.0]), 12, 384.0)
    assert_array_equal(g, [3, 5])
    assert_array_equal(o, [0.0, 0.0])
    g, o = encode_target(np.array([48.0, 16.0]), 12, 384.0)
    assert_array_equal(o, [0.0, 0.0])


def test_encode_decode_round_trip():
    xs = np.random.default_rng(0).uniform(0.0, 384.0, size=(200, 2))
    for S in (8, 12, 16):
        for x in xs:
            g, o = encode_target(x, S, 384.0)
            assert np.abs(decode_position(g, o, S, 384.0) - x).max() < 1e-9


def test_losses_examples():
    out = single_scale(12, 5 * 12 + 3, offset=(1.0, 0.0))
    l_cls, l_os = losses(out, np.array([[112.0, 176.0]]), np.array([True]), 384.0, 2, stabilizer=0.0)
    assert l_cls.item() == pytest.approx(0.0, abs=1e-12)
    assert l_os.item() == pytest.approx(0.5)


def test_uniform_logits_cross_entropy():
    logits = np.zeros((3, 144))
    out = LocalizationOutput([12], [Tensor(logits)], [nc.softmax(logits)], [Tensor(np.zeros((3, 144, 2)))],
                             [Tensor(np.tile(IDENTITY_LATENT, (3, 144, 1)))])
    l_cls, _ = losses(out, np.full((3, 2), 100.0), np.ones(3, dtype=bool), 384.0, 2)
    assert l_cls.item() == pytest.approx(math.log(144))


def test_losses_ignore_invisible_and_reject_singular_precision():
    out = single_scale(4, 0, latent=np.zeros(4), N=2)
    l_cls, l_os = losses(out, np.zeros((2, 2)), np.zeros(2, dtype=bool), 32.0, 2)
    assert l_cls.item() == 0.0 and l_os.item() == 0.0
    with pytest.raises(NumericError):
        losses(out, np.ones((2, 2)), np.ones(2, dtype=bool), 32.0, 2, stabilizer=0.0)


def test_offset_gradient_vanishes_at_the_target(rng):
    target = np.array([[100.0, 200.0]])
    g, o_hat = encode_target(target[0], 12, 384.0)
    offsets = rng.uniform(-1.0, 1.0, (1, 144, 2))
    offsets[0, g[1] * 12 + g[0]] = o_hat
    logits = rng.normal(size=(1, 144))
    leaves = {"o": Tensor(offsets, requires_grad=True), "lat": Tensor(rng.normal(size=(1, 144, 4)), requires_grad=True)}
    out = LocalizationOutput([12], [Tensor(logits)], [nc.softmax(logits, axis=-1)], [leaves["o"]], [leaves["lat"]])
    _, l_os = losses(out, target, np.array([True]), 384.0, 2)
    grads = nc.backward(l_os, leaves)
    assert_array_equal(grads["o"], 0.0)
    assert np.abs(grads["lat"]).max() > 0.0


@pytest.mark.parametrize("which", ["L_cls", "L_os"])
def test_loss_gradients(which, rng):
    from salvit.episodes.experiments import gradient_cases
    f, point = gradient_cases()[which](rng)
    assert nc.grad_check(f, point) < 1e-4


def test_decode_examples():
    pred = decode(single_scale(12, 5 * 12 + 3), 0, 384.0, 2)
    assert_allclose(pred.x, [112.0, 176.0])
    assert_allclose(pred.sigma, 256.0 * np.eye(2))
    assert pred.score == pytest.approx(1.0)


def test_decode_scales_voting_alike():
    # both scales point at (24, 24): cell (1, 1) of 2x2, and cell (2, 2) of 4x4 pushed to its corner
    coarse, fine = single_scale(2, 3), single_scale(4, 10, offset=(1.0, 1.0))
    out = LocalizationOutput([2, 4], coarse.logits + fine.logits, coarse.probs + fine.probs,
                             coarse.offsets + fine.offsets, coarse.latent + fine.latent)
    pred = decode(out, 0, 32.0, 2)
    assert_allclose(pred.x, [24.0, 24.0])
    assert pred.score == pytest.approx(float(out.probs[1].data[0].max()))


def test_decode_degenerate_precision_sentinel():
    pred = decode(single_scale(4, 0, latent=np.zeros(4)), 0, 32.0, 2)
    assert_allclose(pred.sigma, 32.0 ** 2 * np.eye(2))


def test_decode_ties_take_lowest_index():
    logits = np.zeros((1, 9))
    out = LocalizationOutput([3], [Tensor(logits)], [nc.softmax(logits)], [Tensor(np.zeros((1, 9, 2)))],
                             [Tensor(np.tile(IDENTITY_LATENT, (1, 9, 1)))])
    assert_allclose(decode(out, 0, 30.0, 2).x, [5.0, 5.0])


def test_detector_predicts_one_point_per_prototype(model_cfg, dataset, rng):
    model = KeypointDetector(model_cfg(), seed=0)
    episode = sample_episode(dataset, EpisodeSpec(K=2, Z=2), SpeciesSplit.rotating(5), rng)
    ids, c, skrs = model.episode_prototypes(episode)
    assert skrs.shape == (2, len(episode.type_ids), model.cfg.encoder.out_dim)
    preds = model.detect_episode(episode)
    assert len(preds) == 2
    for per_query in preds:
        assert [p.type_id for p in per_query] == ids
        for p in per_query:
            assert p.x.shape == (2,) and p.sigma.shape == (2, 2)
            assert 0.0 <= p.x.min() and p.x.max() <= model.l0
