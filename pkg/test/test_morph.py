import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from salvit import numcore as nc
from salvit.errors import DimensionError, ParameterError
from salvit.morph import MorphConfig, init_mpg, init_sem, mcm_power, morph_reg, mpg_theta, sem_embed
from salvit.numcore import Tensor

CFG = MorphConfig()


def test_config_ordering():
    with pytest.raises(ValidationError):
        MorphConfig(rho1=1.0, rho2=1.5)


def test_sem_zero_weights_give_zero_embeddings():
    params = {k: np.zeros_like(v) for k, v in init_sem(CFG, 4, np.random.default_rng(0)).items()}
    rng = np.random.default_rng(1)
    out = sem_embed(rng.uniform(size=(3, 16, 16)), rng.uniform(size=(16, 16)), params, 4)
    assert out.shape == (16, CFG.d_e)
    assert_array_equal(out.data, 0.0)


def test_sem_shape_mismatch():
    params = init_sem(CFG, 4, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        sem_embed(np.zeros((3, 8, 8)), np.zeros((8, 4)), params, 4)


def test_sem_gradient():
    cfg = MorphConfig(d_e=2, sem_hidden=2)
    rng = np.random.default_rng(2)
    point = {k: rng.normal(0, 0.4, v.shape) for k, v in init_sem(cfg, 2, rng).items()}
    rgb, sal = rng.uniform(size=(3, 4, 4)), rng.uniform(size=(4, 4))
    assert nc.grad_check(lambda t: (sem_embed(rgb, sal, t, 2) ** 2).sum(), point) < 1e-4


def test_mpg_zero_params_returns_output_bias():
    params = {k: np.zeros_like(v) for k, v in init_mpg(CFG, 8, np.random.default_rng(0)).items()}
    params["b2"] = np.array([0.37])
    rng = np.random.default_rng(3)
    theta = mpg_theta(rng.normal(size=(9, 8)), rng.normal(size=(9, CFG.d_e)), params)
    assert theta.shape == ()
    assert theta.item() == pytest.approx(0.37)


def test_mpg_initial_theta_is_zero():
    params = init_mpg(CFG, 8, np.random.default_rng(4))
    rng = np.random.default_rng(5)
    assert mpg_theta(rng.normal(size=(4, 8)), rng.normal(size=(4, CFG.d_e)), params).item() == 0.0
    with pytest.raises(DimensionError):
        mpg_theta(np.zeros((4, 8)), np.zeros((3, CFG.d_e)), params)


def test_mcm_examples():
    M = np.random.default_rng(6).uniform(size=9)
    m, theta_tilde = mcm_power(M, Tensor(0.0), CFG)
    assert theta_tilde.item() == 1.0
    assert_allclose(m.data, M)
    m, theta_tilde = mcm_power(np.array([0.25]), Tensor(math.log(1.0 / 3.0)), CFG)
    assert theta_tilde.item() == pytest.approx(0.5)
    assert_allclose(m.data, [0.5])
    with pytest.raises(ParameterError):
        mcm_power(np.array([1.2]), Tensor(0.0), CFG)


def test_theta_tilde_stays_in_range():
    thetas = np.random.default_rng(7).normal(0.0, 50.0, 100_000)
    _, theta_tilde = mcm_power(np.array([0.5]), Tensor(thetas), CFG)
    assert theta_tilde.data.min() >= 0.0 and theta_tilde.data.max() <= CFG.rho1


def test_dilation_and_erosion_are_monotone():
    rng = np.random.default_rng(8)
    for _ in range(20):
        M = rng.uniform(size=16)
        dilated, _ = mcm_power(M, Tensor(-1.0), CFG)
        eroded, _ = mcm_power(M, Tensor(1.5), CFG)
        assert (dilated.data >= M - 1e-15).all()
        assert (eroded.data <= M + 1e-15).all()
        assert (eroded.data <= dilated.data).all()


def test_morph_reg_dead_zone():
    half_width = math.sqrt(CFG.rho3)
    assert morph_reg([Tensor(0.7)], CFG).item() == 0.0
    assert morph_reg([Tensor(0.7 + half_width)], CFG).item() == 0.0
    assert morph_reg([Tensor(0.7 - half_width)], CFG).item() == 0.0
    assert morph_reg([Tensor(1.0)], CFG).item() == pytest.approx(0.04)
    assert morph_reg([Tensor(1.0), Tensor(0.7)], CFG).item() == pytest.approx(0.02)
    assert morph_reg([], CFG).item() == 0.0
    assert morph_reg(np.array([1.0, 1.0]), CFG).item() == pytest.approx(0.04)


def test_full_morphology_chain_gradient():
    from salvit.episodes.experiments import gradient_cases
    f, point = gradient_cases()["sem_mpg_mcm"](np.random.default_rng(9))
    assert nc.grad_check(f, point) < 1e-4


def test_sem_is_equivariant_to_whole_patch_shifts():
    # zero biases: empty tokens embed to 0, the same as the convolutions' zero padding
    params = init_sem(CFG, 4, np.random.default_rng(2))
    rng = np.random.default_rng(3)
    rgb, sal = np.zeros((3, 16, 16)), np.zeros((16, 16))
    rgb[:, :12, :12] = rng.uniform(size=(3, 12, 12))
    sal[2:10, 2:10] = rng.uniform(size=(8, 8))
    moved_rgb, moved_sal = np.zeros_like(rgb), np.zeros_like(sal)
    moved_rgb[:, 4:, 4:] = rgb[:, :12, :12]
    moved_sal[4:, 4:] = sal[:12, :12]
    out = sem_embed(rgb, sal, params, 4).data.reshape(4, 4, -1)
    moved = sem_embed(moved_rgb, moved_sal, params, 4).data.reshape(4, 4, -1)
    assert np.abs(out).max() > 0.0
    assert_allclose(moved[1:, 1:], out[:-1, :-1], atol=1e-12)


def test_mpg_ignores_token_order():
    rng = np.random.default_rng(4)
    params = {k: rng.normal(0.0, 0.5, v.shape) for k, v in init_mpg(CFG, 6, rng).items()}
    P, F_sal = rng.normal(size=(9, 6)), rng.normal(size=(9, CFG.d_e))
    theta = mpg_theta(P, F_sal, params).item()
    for _ in range(5):
        perm = rng.permutation(9)
        assert mpg_theta(P[perm], F_sal[perm], params).item() == pytest.approx(theta, abs=1e-12)
