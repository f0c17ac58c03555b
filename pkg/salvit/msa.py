"""Saliency-masked multi-head self-attention.

The token saliency vector m is turned into a pairwise mask M~ (`attention_mask`),
and attention logits are pushed down by (1 - M~) * J. With m = 1 the bias vanishes
and the layer is plain self-attention; with m = 0 and large J every token only
attends to itself.
"""
from __future__ import annotations
import csv
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator

from . import numcore as nc
from .errors import DimensionError, NumericError, ParameterError
from .numcore import Tensor, TensorLike

logger = logging.getLogger(__name__)


class SimVariant(str, Enum):
    dot = "dot"
    harmonic = "harmonic"
    arithmetic = "arithmetic"


class Kernel(str, Enum):
    softmax = "softmax"
    rbf = "rbf"


class AttentionConfig(BaseModel):
    kernel: Kernel = Field(Kernel.softmax, description="softmax (row-normalised) or rbf (exp of negative distance).")
    heads: int = Field(4, ge=1)
    head_dim: int = Field(16, ge=1)
    beta: float = Field(1.0, gt=0, description="Temperature of the similarity kernel.")
    J: float = Field(1.0, ge=0, description="Degree of masking; scales the (1 - M~) logit bias.")
    use_pe: bool = Field(True, description="Add the learnable relative-position bias to the logits.")
    sim: SimVariant = Field(SimVariant.harmonic, description="How token saliencies combine pairwise.")
    epsilon: float = Field(1e-8, description="Harmonic-mean guard for pairs with zero total saliency.")
    normalize_qk: bool = Field(False, description="l2-normalise queries and keys before the kernel.")
    rbf_normalize: bool = Field(False, description="Row-normalise rbf attention; off keeps exp(logits) as is.")

    @field_validator("epsilon")
    @classmethod
    def _small_eps(cls, v: float) -> float:
        if not 0 < v <= 1e-6:
            raise ValueError("epsilon must lie in (0, 1e-6]")
        return v

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim


def _check_saliency(m: Tensor) -> None:
    if m.ndim != 1:
        raise DimensionError(f"token saliency must be a vector, got shape {m.shape}")
    if m.size and (m.data.min() < 0.0 or m.data.max() > 1.0 or not np.isfinite(m.data).all()):
        raise ParameterError("token saliency must lie in [0, 1]")


def sim(m: TensorLike, variant: SimVariant | str = SimVariant.harmonic, epsilon: float = 1e-8) -> Tensor:
    """Saliency interaction matrix over all token pairs."""
    m = nc.as_tensor(m)
    _check_saliency(m)
    variant = SimVariant(variant)
    n = m.shape[0]
    col = m.reshape(n, 1)
    row = m.reshape(1, n)
    if variant is SimVariant.dot:
        return col * row
    total = col + row
    if variant is SimVariant.arithmetic:
        return total * 0.5
    # epsilon only enters where both saliencies are 0, where the product is 0 anyway
    guard = np.where(total.data == 0.0, epsilon, 0.0)
    return (col * row * 2.0) / (total + guard)


def attention_mask(m: TensorLike, variant: SimVariant | str = SimVariant.harmonic, epsilon: float = 1e-8) -> Tensor:
    """M~ = SIM + I - Diag(m).

    For harmonic and arithmetic the SIM diagonal equals m, so the diagonal is set
    to exactly 1; the dot variant keeps m^2 + 1 - m there.
    """
    m = nc.as_tensor(m)
    s = sim(m, variant, epsilon)
    n = m.shape[0]
    eye = np.eye(n)
    if SimVariant(variant) is SimVariant.dot:
        return s + eye - m.reshape(n, 1) * eye
    return s * (1.0 - eye) + eye


def grid_side(n: int) -> int:
    l = math.isqrt(n)
    if l * l != n:
        raise DimensionError(f"token count {n} is not a perfect square")
    return l


def relative_index(l: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.divmod(np.arange(l * l), l)
    dy = ys[None, :] - ys[:, None] + l - 1
    dx = xs[None, :] - xs[:, None] + l - 1
    return dy, dx


def positional_bias(n: int, table: TensorLike) -> Tensor:
    """Per-head bias B[h, i, j] = table[h, dy + l - 1, dx + l - 1] for the displacement i -> j."""
    table = nc.as_tensor(table)
    l = grid_side(n)
    if table.ndim != 3 or table.shape[1:] != (2 * l - 1, 2 * l - 1):
        raise DimensionError(f"position table {table.shape} does not fit a {l}x{l} grid")
    dy, dx = relative_index(l)
    return table[:, dy, dx]


def init_params(cfg: AttentionConfig, dim: int, l: int, rng: np.random.Generator, zero_out: bool = False) -> nc.Params:
    if dim != cfg.dim:
        raise DimensionError(f"heads x head_dim = {cfg.dim} but token dim is {dim}")
    params = {
        "w_q": nc.trunc_normal(rng, (dim, dim)),
        "w_k": nc.trunc_normal(rng, (dim, dim)),
        "w_v": nc.trunc_normal(rng, (dim, dim)),
        "w_o": np.zeros((dim, dim)) if zero_out else nc.trunc_normal(rng, (dim, dim)),
    }
    if cfg.use_pe:
        params["pe"] = np.zeros((cfg.heads, 2 * l - 1, 2 * l - 1))
    return params


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _l2(x: Tensor) -> Tensor:
    return x / nc.sqrt((x * x).sum(axis=-1, keepdims=True) + 1e-12)


def soft_msa(X: TensorLike, m: Optional[TensorLike], cfg: AttentionConfig,
             params: Mapping[str, TensorLike]) -> tuple[Tensor, Tensor]:
    """Masked multi-head self-attention; m=None is the unmasked layer.

    Returns the output tokens (n, d) and the attention weights (heads, n, n).
    """
    X = nc.as_tensor(X)
    if X.ndim != 2:
        raise DimensionError(f"tokens must be (n, d), got {X.shape}")
    n, d = X.shape
    if d != cfg.dim:
        raise DimensionError(f"token dim {d} != heads x head_dim {cfg.dim}")
    h, dh = cfg.heads, cfg.head_dim
    Q = _split_heads(nc.linear(X, params["w_q"]), h)
    K = _split_heads(nc.linear(X, params["w_k"]), h)
    V = _split_heads(nc.linear(X, params["w_v"]), h)
    if cfg.normalize_qk:
        Q, K = _l2(Q), _l2(K)
    scale = cfg.beta * math.sqrt(dh)
    if cfg.kernel is Kernel.softmax:
        logits = nc.matmul(Q, K.transpose(0, 2, 1)) / scale
    else:
        diff = Q.reshape(h, n, 1, dh) - K.reshape(h, 1, n, dh)
        dist = nc.sqrt((diff * diff).sum(axis=-1) + 1e-12)
        logits = dist * (-1.0 / (2.0 * scale))
    if cfg.use_pe:
        table = nc.as_tensor(params["pe"])
        if cfg.kernel is Kernel.rbf and table.ndim == 3 and table.shape[0] == h:
            # non-positive per head so exp(logits) stays in (0, 1]
            table = table - nc.amax(table.reshape(h, -1), axis=1).reshape(h, 1, 1)
        logits = logits + positional_bias(n, table)
    if m is not None:
        m = nc.as_tensor(m)
        if m.shape != (n,):
            raise DimensionError(f"saliency vector {m.shape} does not match {n} tokens")
        logits = logits - (1.0 - attention_mask(m, cfg.sim, cfg.epsilon)) * cfg.J
    bad = np.isnan(logits.data).any(axis=(1, 2))
    if bad.any():
        head = int(np.flatnonzero(bad)[0])
        raise NumericError(f"NaN attention logits in head {head}", head=head)
    if cfg.kernel is Kernel.softmax:
        A = nc.softmax(logits, axis=-1)
    else:
        A = nc.exp(logits)
        if cfg.rbf_normalize:
            A = A / A.sum(axis=-1, keepdims=True)
    mixed = nc.matmul(A, V).transpose(1, 0, 2).reshape(n, d)
    return nc.linear(mixed, params["w_o"]), A


def vanilla_sa(X: TensorLike, cfg: AttentionConfig, params: Mapping[str, TensorLike]) -> tuple[Tensor, Tensor]:
    return soft_msa(X, None, cfg, params)


def hard_msa_oracle(X: np.ndarray, m_binary: np.ndarray, cfg: AttentionConfig,
                    params: Mapping[str, np.ndarray]) -> np.ndarray:
    """Reference output of hard masking: salient tokens attend among salient tokens, the rest copy themselves."""
    if cfg.kernel is not Kernel.softmax:
        raise ParameterError("the hard-masking reference is defined for the softmax kernel")
    m_binary = np.asarray(m_binary, dtype=np.float64)
    if not np.isin(m_binary, (0.0, 1.0)).all():
        raise ParameterError("hard masking needs a binary saliency vector")
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    h, dh = cfg.heads, cfg.head_dim
    split = lambda y: y.reshape(n, h, dh).transpose(1, 0, 2)
    Q = split(X @ params["w_q"])
    K = split(X @ params["w_k"])
    V = split(X @ params["w_v"])
    if cfg.normalize_qk:
        Q = Q / np.sqrt((Q * Q).sum(-1, keepdims=True) + 1e-12)
        K = K / np.sqrt((K * K).sum(-1, keepdims=True) + 1e-12)
    logits = Q @ K.transpose(0, 2, 1) / (cfg.beta * math.sqrt(dh))
    if cfg.use_pe:
        dy, dx = relative_index(grid_side(n))
        logits = logits + np.asarray(params["pe"])[:, dy, dx]
    fg = m_binary > 0.5
    A = np.zeros_like(logits)
    for i in range(n):
        if fg[i]:
            row = logits[:, i, fg]
            w = np.exp(row - row.max(axis=-1, keepdims=True))
            A[:, i, fg] = w / w.sum(axis=-1, keepdims=True)
        else:
            A[:, i, i] = 1.0
    mixed = (A @ V).transpose(1, 0, 2).reshape(n, d)
    return mixed @ params["w_o"]


def export_attention_csv(path: Path, attention: np.ndarray, tag: str = "") -> None:
    """Append (tag, head, i, j, value) rows for every attention entry."""
    attention = np.asarray(attention)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if fresh:
            writer.writerow(["tag", "head", "i", "j", "value"])
        for (head, i, j), value in np.ndenumerate(attention):
            writer.writerow([tag, head, i, j, f"{value:.8g}"])
