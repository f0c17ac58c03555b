import csv

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from salvit import numcore as nc
from salvit.errors import DimensionError, NumericError, ParameterError
from salvit.msa import (AttentionConfig, Kernel, SimVariant, attention_mask, export_attention_csv, hard_msa_oracle,
                        init_params, positional_bias, relative_index, sim, soft_msa, vanilla_sa)


def random_case(seed, heads=2, head_dim=3, l=3, **cfg_kw):
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(heads=heads, head_dim=head_dim, **cfg_kw)
    params = {k: rng.normal(0.0, 0.5, v.shape) for k, v in init_params(cfg, cfg.dim, l, rng).items()}
    X = rng.normal(size=(l * l, cfg.dim))
    return cfg, params, X, rng


def test_sim_examples():
    for variant in SimVariant:
        assert_array_equal(sim(np.ones(2), variant).data, np.ones((2, 2)))
    assert_allclose(sim(np.array([1.0, 0.0]), "harmonic").data, [[1.0, 0.0], [0.0, 0.0]], atol=1e-12)
    half = np.array([0.5, 0.5])
    assert_allclose(sim(half, "dot").data, np.full((2, 2), 0.25))
    assert_allclose(sim(half, "harmonic").data, np.full((2, 2), 0.5))
    assert_allclose(sim(half, "arithmetic").data, np.full((2, 2), 0.5))


def test_sim_is_symmetric_and_bounded():
    m = np.random.default_rng(0).uniform(size=7)
    for variant in SimVariant:
        s = sim(m, variant).data
        assert_allclose(s, s.T)
        assert s.min() >= 0.0 and s.max() <= 1.0


def test_sim_rejects_out_of_range():
    with pytest.raises(ParameterError):
        sim(np.array([0.2, 1.3]))
    with pytest.raises(DimensionError):
        sim(np.ones((2, 2)))


def test_attention_mask_examples():
    assert_array_equal(attention_mask(np.ones(3)).data, np.ones((3, 3)))
    assert_allclose(attention_mask(np.zeros(3)).data, np.eye(3))
    assert_allclose(attention_mask(np.array([1.0, 0.0]), "harmonic").data, np.eye(2), atol=1e-12)


def test_epsilon_is_validated():
    with pytest.raises(ValidationError):
        AttentionConfig(epsilon=1e-3)
    with pytest.raises(ValidationError):
        AttentionConfig(epsilon=0.0)


def test_relative_position_bias_indexing():
    dy, dx = relative_index(2)
    assert dy[0, 3] == 2 and dx[0, 3] == 2
    assert dy[3, 0] == 0 and dx[3, 0] == 0
    table = np.arange(2 * 3 * 3, dtype=float).reshape(2, 3, 3)
    bias = positional_bias(4, table).data
    assert bias.shape == (2, 4, 4)
    assert_array_equal(np.diagonal(bias, axis1=1, axis2=2), np.tile(table[:, 1, 1][:, None], (1, 4)))
    with pytest.raises(DimensionError):
        positional_bias(5, table)
    with pytest.raises(DimensionError):
        positional_bias(9, table)


@pytest.mark.parametrize("kernel", list(Kernel))
def test_full_saliency_recovers_vanilla_attention(kernel):
    for seed in range(20):
        cfg, params, X, _ = random_case(seed, kernel=kernel, J=3.0)
        Z, A = soft_msa(X, np.ones(len(X)), cfg, params)
        Zv, Av = vanilla_sa(X, cfg, params)
        assert np.abs(Z.data - Zv.data).max() <= 1e-12
        assert np.abs(A.data - Av.data).max() <= 1e-12


def test_zero_saliency_learns_no_relations():
    masses = []
    for J in (0.0, 1.0, 10.0, 100.0, 1e4):
        cfg, params, X, _ = random_case(1, J=J)
        _, A = soft_msa(X, np.zeros(len(X)), cfg, params)
        off = A.data.sum(axis=-1) - np.diagonal(A.data, axis1=1, axis2=2)
        masses.append(off.max())
    assert masses[-1] < 1e-3
    assert all(b <= a + 1e-15 for a, b in zip(masses, masses[1:]))


def test_zero_saliency_copies_values():
    cfg, params, X, _ = random_case(2, J=1e4)
    Z, _ = soft_msa(X, np.zeros(len(X)), cfg, params)
    assert_allclose(Z.data, X @ params["w_v"] @ params["w_o"], atol=1e-10)


def test_two_token_zero_projection_example():
    cfg = AttentionConfig(heads=1, head_dim=2, J=1.0, use_pe=False)
    params = {"w_q": np.zeros((2, 2)), "w_k": np.zeros((2, 2)), "w_v": np.eye(2), "w_o": np.eye(2)}
    _, A = soft_msa(np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2), cfg, params)
    assert_allclose(A.data[0], [[0.7311, 0.2689], [0.2689, 0.7311]], atol=1e-4)


def test_large_J_matches_hard_mask_oracle():
    for seed in range(50):
        cfg, params, X, rng = random_case(100 + seed, J=1e4)
        m = (rng.uniform(size=len(X)) < 0.5).astype(float)
        Z, _ = soft_msa(X, m, cfg, params)
        assert np.abs(Z.data - hard_msa_oracle(X, m, cfg, params)).max() < 1e-3


def test_oracle_rejects_soft_or_rbf_inputs():
    cfg, params, X, _ = random_case(3)
    with pytest.raises(ParameterError):
        hard_msa_oracle(X, np.full(len(X), 0.5), cfg, params)
    rbf = cfg.model_copy(update={"kernel": Kernel.rbf})
    with pytest.raises(ParameterError):
        hard_msa_oracle(X, np.ones(len(X)), rbf, params)


def test_zero_position_table_is_a_no_op():
    cfg, params, X, rng = random_case(4)
    params["pe"] = np.zeros_like(params["pe"])
    m = rng.uniform(size=len(X))
    with_pe, _ = soft_msa(X, m, cfg, params)
    without, _ = soft_msa(X, m, cfg.model_copy(update={"use_pe": False}), params)
    assert_array_equal(with_pe.data, without.data)


def test_gradient_through_table_and_saliency():
    cfg, params, X, rng = random_case(5, J=2.0)
    point = {**{f"p.{k}": v for k, v in params.items()}, "X": X, "m": rng.uniform(0.1, 0.9, len(X))}

    def f(t):
        Z, _ = soft_msa(t["X"], t["m"], cfg, nc.scope(t, "p"))
        return Z.sum()
    assert nc.grad_check(f, point) < 1e-4


def test_rbf_and_normalized_qk_gradients():
    cfg, params, X, rng = random_case(6, kernel=Kernel.rbf, normalize_qk=True, rbf_normalize=True)
    point = {**{f"p.{k}": v for k, v in params.items()}, "m": rng.uniform(0.1, 0.9, len(X))}
    f = lambda t: (soft_msa(X, t["m"], cfg, nc.scope(t, "p"))[0] ** 2).sum()
    assert nc.grad_check(f, point) < 1e-4


def test_nan_logits_name_the_head():
    cfg, params, X, _ = random_case(7)
    params["w_q"][:, cfg.head_dim:] = np.nan
    with pytest.raises(NumericError) as err:
        soft_msa(X, np.ones(len(X)), cfg, params)
    assert err.value.head == 1


def test_shape_errors():
    cfg, params, X, _ = random_case(8)
    with pytest.raises(DimensionError):
        soft_msa(X[:, :-1], None, cfg, params)
    with pytest.raises(DimensionError):
        soft_msa(X, np.ones(len(X) + 1), cfg, params)
    with pytest.raises(DimensionError):
        init_params(cfg, cfg.dim + 1, 3, np.random.default_rng(0))


def test_export_attention_csv(tmp_path):
    A = np.random.default_rng(9).uniform(size=(2, 3, 3))
    path = tmp_path / "att" / "attention.csv"
    export_attention_csv(path, A, tag="q0")
    export_attention_csv(path, A, tag="q1")
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 2 * 18
    assert rows[0]["tag"] == "q0" and float(rows[5]["value"]) == pytest.approx(A.reshape(-1)[5], rel=1e-7)


def test_sim_is_permutation_equivariant():
    rng = np.random.default_rng(10)
    m = rng.uniform(size=6)
    perm = rng.permutation(6)
    for variant in SimVariant:
        assert_allclose(sim(m[perm], variant).data, sim(m, variant).data[np.ix_(perm, perm)], atol=1e-15)


@pytest.mark.parametrize("rbf_normalize", [False, True])
def test_rbf_attention_stays_in_unit_interval_with_position_bias(rbf_normalize):
    cfg, params, X, rng = random_case(11, l=2, kernel=Kernel.rbf, rbf_normalize=rbf_normalize)
    params["pe"] = np.full_like(params["pe"], 0.5)
    for m in (np.ones(len(X)), None, rng.uniform(size=len(X))):
        _, A = soft_msa(X, m, cfg, params)
        assert A.data.min() > 0.0
        assert A.data.max() <= 1.0
    params["pe"] = rng.normal(0.0, 3.0, params["pe"].shape)
    _, A = soft_msa(X, None, cfg, params)
    assert 0.0 < A.data.min() and A.data.max() <= 1.0


def test_rbf_position_bias_gradient():
    cfg, params, X, _ = random_case(12, kernel=Kernel.rbf)
    point = {f"p.{k}": v for k, v in params.items()}
    f = lambda t: (soft_msa(X, None, cfg, nc.scope(t, "p"))[0] ** 2).sum()
    assert nc.grad_check(f, point) < 1e-4


@pytest.mark.parametrize("kernel", list(Kernel))
def test_output_is_continuous_in_saliency(kernel):
    cfg, params, X, rng = random_case(13, kernel=kernel, J=10.0)
    m = rng.uniform(0.05, 0.95, len(X))
    Z, _ = soft_msa(X, m, cfg, params)
    for i in range(len(X)):
        moved = m.copy()
        moved[i] += 1e-6
        Zd, _ = soft_msa(X, moved, cfg, params)
        assert np.abs(Zd.data - Z.data).max() < 1e-3
