"""Few-shot keypoint head.

Support keypoints are Gaussian-pooled from the support feature maps (SKRs) and
averaged per keypoint type into prototypes. A query feature map is modulated by
each prototype, reduced by the descriptor net and fed to per-scale heads that
predict a grid probability map, an in-cell offset field and a precision field.
"""
from __future__ import annotations
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, field_validator

from . import numcore as nc
from .encoder import EncoderConfig, EncoderTrace, TokenGrid, encode, init_params as init_encoder
from .errors import ContractError, DimensionError, NumericError
from .numcore import Tensor, TensorLike

logger = logging.getLogger(__name__)


class HeadConfig(BaseModel):
    scales: list[int] = Field(default_factory=lambda: [8, 12, 16], description="Grid sides S of the localisation heads.")
    d_v: int = Field(4, ge=2, description="Columns of the latent precision factor.")
    desc_channels: int = Field(32, ge=1)
    desc_convs: int = Field(1, ge=0, description="Stride-2 3x3 convolutions after the 1x1 reduction.")
    pool_sigma: float = Field(1.0, ge=0, description="Gaussian pooling bandwidth in grid cells; 0 picks the cell.")
    stabilizer: float = Field(1e-6, ge=0, description="epsilon * I added to the precision matrix.")

    @field_validator("scales")
    @classmethod
    def _scales(cls, v: list[int]) -> list[int]:
        if not v or any(s < 1 for s in v):
            raise ValueError("scales must be a non-empty list of positive grid sides")
        return sorted(v)


class ModelConfig(BaseModel):
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    head: HeadConfig = Field(default_factory=HeadConfig)


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visible: bool = True

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass(frozen=True)
class Prototype:
    type_id: int
    c: np.ndarray


@dataclass
class Sample:
    """One square-padded image with its model-ready saliency and every keypoint of the schema."""
    rgb: np.ndarray         # (3, l0, l0) in [0, 1]
    saliency: np.ndarray    # (l0, l0) in [0, 1]
    points: np.ndarray      # (n_types, 2) as (x, y) pixels
    visible: np.ndarray     # (n_types,) bool
    box: np.ndarray         # (x0, y0, x1, y1)
    species: int = 0
    id: int = 0

    @property
    def side(self) -> int:
        return self.rgb.shape[-1]


@dataclass
class Episode:
    supports: list[Sample]
    queries: list[Sample]
    type_ids: list[int]
    support_points: np.ndarray   # (K, N, 2)
    support_visible: np.ndarray  # (K, N)
    query_points: np.ndarray     # (Z, N, 2)
    query_visible: np.ndarray    # (Z, N)
    id: int = 0

    @property
    def K(self) -> int:
        return len(self.supports)


@dataclass
class LocalizationOutput:
    """Per-scale head outputs for N keypoint types, indexed like `scales`."""
    scales: list[int]
    logits: list[Tensor]   # (N, S*S)
    probs: list[Tensor]    # (N, S*S)
    offsets: list[Tensor]  # (N, S*S, 2) in (-1, 1)
    latent: list[Tensor]   # (N, S*S, 2*d_v)


@dataclass
class KeypointPrediction:
    x: np.ndarray          # (2,) pixels
    sigma: np.ndarray      # (2, 2) pixels^2
    score: float
    type_id: int = -1
    probs: list[np.ndarray] = field(default_factory=list)


def pool_weights(l: int, point: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian weights over the l*l cell centres (row-major) around `point` in grid units."""
    if sigma <= 0:
        gx, gy = (min(max(int(np.floor(c)), 0), l - 1) for c in point)
        w = np.zeros(l * l)
        w[gy * l + gx] = 1.0
        return w
    ys, xs = np.divmod(np.arange(l * l), l)
    d2 = (xs + 0.5 - point[0]) ** 2 + (ys + 0.5 - point[1]) ** 2
    w = np.exp(-(d2 - d2.min()) / (2.0 * sigma * sigma))
    return w / w.sum()


def skr(E: TokenGrid, kp: Keypoint, pool_sigma: float, patch: int) -> Tensor:
    if not kp.visible:
        raise ContractError("cannot pool a representation at an invisible keypoint")
    return nc.matmul(pool_weights(E.l, kp.xy / patch, pool_sigma), E.data)


def skr_batch(E: TokenGrid, points: np.ndarray, pool_sigma: float, patch: int) -> Tensor:
    W = np.stack([pool_weights(E.l, p / patch, pool_sigma) for p in np.asarray(points, dtype=np.float64)])
    return nc.matmul(W, E.data)


def prototypes(skrs: TensorLike, visible: np.ndarray, type_ids: Sequence[int]) -> tuple[list[int], Tensor]:
    """Mean SKR per type over the visible shots; types with no visible shot are dropped.

    skrs is (K, N, d), visible (K, N).
    """
    skrs = nc.as_tensor(skrs)
    visible = np.asarray(visible, dtype=bool)
    if skrs.ndim != 3 or visible.shape != skrs.shape[:2]:
        raise DimensionError(f"SKRs {skrs.shape} and visibility {visible.shape} disagree")
    counts = visible.sum(axis=0)
    keep = np.flatnonzero(counts > 0)
    if keep.size == 0:
        raise ContractError("no keypoint type has a visible support shot")
    weights = visible[:, keep] / counts[keep]
    c = (skrs[:, keep] * weights[:, :, None]).sum(axis=0)
    return [int(type_ids[i]) for i in keep], c


def modulate(E_q: TokenGrid, c: TensorLike) -> Tensor:
    """Channel-wise product of the query map with each prototype: (N, n, d)."""
    c = nc.as_tensor(c)
    if c.ndim == 1:
        c = c.reshape(1, -1)
    if c.shape[-1] != E_q.d:
        raise DimensionError(f"prototype dim {c.shape[-1]} != feature dim {E_q.d}")
    return E_q.data.reshape(1, E_q.l * E_q.l, E_q.d) * c.reshape(c.shape[0], 1, E_q.d)


def descriptor_side(l: int, convs: int) -> int:
    for _ in range(convs):
        l = (l - 1) // 2 + 1
    return l


def init_head(cfg: HeadConfig, d: int, l: int, rng: np.random.Generator) -> nc.Params:
    C = cfg.desc_channels
    p: nc.Params = {"desc.c0_w": nc.he_normal(rng, (C, d, 1, 1)), "desc.c0_b": np.zeros(C)}
    for i in range(1, cfg.desc_convs + 1):
        p[f"desc.c{i}_w"] = nc.he_normal(rng, (C, C, 3, 3))
        p[f"desc.c{i}_b"] = np.zeros(C)
    D = C * descriptor_side(l, cfg.desc_convs) ** 2
    # latent bias chosen so the precision starts at the identity
    factor = np.stack([np.ones(cfg.d_v), np.where(np.arange(cfg.d_v) % 2, -1.0, 1.0)])
    for S in cfg.scales:
        cells = S * S
        p[f"s{S}.cls_w"] = np.zeros((D, cells))
        p[f"s{S}.cls_b"] = np.zeros(cells)
        p[f"s{S}.off_w"] = nc.trunc_normal(rng, (D, cells * 2))
        p[f"s{S}.off_b"] = np.zeros(cells * 2)
        p[f"s{S}.cov_w"] = nc.trunc_normal(rng, (D, cells * 2 * cfg.d_v))
        p[f"s{S}.cov_b"] = np.tile(factor.reshape(-1), cells)
    return p


def descriptor(F_att: TensorLike, l: int, params: Mapping[str, TensorLike], convs: int) -> Tensor:
    """(N, n, d) attentive maps to flat (N, D) descriptors."""
    F_att = nc.as_tensor(F_att)
    N, n, d = F_att.shape
    if n != l * l:
        raise DimensionError(f"{n} tokens do not fill a {l}x{l} grid")
    x = F_att.reshape(N, l, l, d).transpose(0, 3, 1, 2)
    x = nc.relu(nc.conv2d(x, params["c0_w"], params["c0_b"]))
    for i in range(1, convs + 1):
        x = nc.relu(nc.conv2d(x, params[f"c{i}_w"], params[f"c{i}_b"], stride=2, padding=1))
    return x.reshape(N, -1)


def localize(psi: TensorLike, cfg: HeadConfig, params: Mapping[str, TensorLike]) -> LocalizationOutput:
    psi = nc.as_tensor(psi)
    N = psi.shape[0]
    out = LocalizationOutput(list(cfg.scales), [], [], [], [])
    for S in cfg.scales:
        logits = nc.linear(psi, params[f"s{S}.cls_w"], params[f"s{S}.cls_b"])
        out.logits.append(logits)
        out.probs.append(nc.softmax(logits, axis=-1))
        out.offsets.append(nc.tanh(nc.linear(psi, params[f"s{S}.off_w"], params[f"s{S}.off_b"])).reshape(N, S * S, 2))
        out.latent.append(nc.linear(psi, params[f"s{S}.cov_w"], params[f"s{S}.cov_b"]).reshape(N, S * S, 2 * cfg.d_v))
    return out


def precision(latent: TensorLike, d_v: int) -> Tensor:
    """Omega = Q Q^T / d_v with Q the (2, d_v) reshape of each latent vector; (..., 2, 2)."""
    latent = nc.as_tensor(latent)
    Q = latent.reshape(latent.shape[:-1] + (2, d_v))
    axes = tuple(range(Q.ndim - 2)) + (Q.ndim - 1, Q.ndim - 2)
    return nc.matmul(Q, Q.transpose(*axes)) / float(d_v)


def encode_target(x_hat: np.ndarray, S: int, l0: float) -> tuple[np.ndarray, np.ndarray]:
    """Grid cell (gx, gy) containing x_hat at scale S and its offset in [-1, 1)."""
    u = np.asarray(x_hat, dtype=np.float64) * S / l0
    g = np.clip(np.floor(u), 0, S - 1).astype(int)
    return g, 2.0 * (u - g - 0.5)


def decode_position(g: np.ndarray, o: np.ndarray, S: int, l0: float) -> np.ndarray:
    return (l0 / S) * (np.asarray(g, dtype=np.float64) + 0.5 + 0.5 * np.asarray(o, dtype=np.float64))


def losses(out: LocalizationOutput, targets: np.ndarray, visible: np.ndarray, l0: float,
           d_v: int, stabilizer: float = 1e-6) -> tuple[Tensor, Tensor]:
    """Grid cross-entropy and Mahalanobis offset loss at the ground-truth cell, averaged over scales.

    Offsets are compared in offset units, where the precision also lives.
    """
    vis = np.flatnonzero(np.asarray(visible, dtype=bool))
    if vis.size == 0:
        return Tensor(0.0), Tensor(0.0)
    targets = np.asarray(targets, dtype=np.float64)[vis]
    l_cls, l_os = [], []
    for i, S in enumerate(out.scales):
        cells, o_hat = zip(*(encode_target(t, S, l0) for t in targets))
        idx = np.array([g[1] * S + g[0] for g in cells])
        o_hat = np.stack(o_hat)
        logp = nc.log_softmax(out.logits[i][vis], axis=-1)[np.arange(vis.size), idx]
        l_cls.append(-logp.mean())
        r = out.offsets[i][vis, idx] - o_hat
        omega = precision(out.latent[i][vis, idx], d_v) + stabilizer * np.eye(2)
        det = omega[:, 0, 0] * omega[:, 1, 1] - omega[:, 0, 1] * omega[:, 1, 0]
        if (det.data <= 0).any():
            raise NumericError(f"singular precision at scale {S}; raise the stabilizer")
        quad = nc.matmul(nc.matmul(r.reshape(vis.size, 1, 2), omega), r.reshape(vis.size, 2, 1)).reshape(vis.size)
        l_os.append(((quad - nc.log(det)) * 0.5).mean())
    return nc.stack(l_cls).mean(), nc.stack(l_os).mean()


def decode(out: LocalizationOutput, j: int, l0: float, d_v: int, stabilizer: float = 1e-6,
           type_id: int = -1) -> KeypointPrediction:
    """Multi-scale vote for keypoint type j: mean position and mean scaled covariance.

    The stabilizer is only added at scales whose precision determinant is at or below it.
    If every scale is degenerate, the covariance is the sentinel l0^2 * I.
    """
    xs, sigmas, degenerate = [], [], 0
    for i, S in enumerate(out.scales):
        P = out.probs[i].data[j]
        g_idx = int(np.argmax(P))
        g = np.array([g_idx % S, g_idx // S])
        xs.append(decode_position(g, out.offsets[i].data[j, g_idx], S, l0))
        omega = precision(out.latent[i].data[j, g_idx], d_v).data
        if np.linalg.det(omega) <= stabilizer:
            degenerate += 1
            omega = omega + stabilizer * np.eye(2)
        cov = np.linalg.inv(omega)
        sigmas.append((l0 / S) ** 2 * 0.5 * (cov + cov.T))
    x = np.mean(xs, axis=0)
    if degenerate == len(out.scales):
        sigma = (l0 ** 2) * np.eye(2)
    else:
        sigma = np.sum(sigmas, axis=0) / (4.0 * len(out.scales))
    finest = int(np.argmax(out.scales))
    return KeypointPrediction(x=x, sigma=sigma, score=float(out.probs[finest].data[j].max()), type_id=type_id,
                              probs=[p.data[j].copy() for p in out.probs])


def decode_all(out: LocalizationOutput, type_ids: Sequence[int], l0: float, d_v: int,
               stabilizer: float = 1e-6) -> list[KeypointPrediction]:
    return [decode(out, j, l0, d_v, stabilizer, type_id=t) for j, t in enumerate(type_ids)]


class KeypointDetector:
    """Encoder plus head with one flat parameter dict ("enc.*", "head.*")."""

    def __init__(self, cfg: ModelConfig, params: Optional[nc.Params] = None, seed: int = 0):
        self.cfg = cfg
        if params is None:
            rng = np.random.default_rng(seed)
            enc = init_encoder(cfg.encoder, rng)
            head = init_head(cfg.head, cfg.encoder.out_dim, cfg.encoder.l, rng)
            params = {**{f"enc.{k}": v for k, v in enc.items()}, **{f"head.{k}": v for k, v in head.items()}}
        self.params = params

    @property
    def l0(self) -> int:
        return self.cfg.encoder.image

    def leaves(self) -> dict[str, Tensor]:
        return nc.leaves(self.params)

    def _p(self, params: Optional[Mapping[str, TensorLike]]) -> Mapping[str, TensorLike]:
        return self.params if params is None else params

    def encode(self, rgb: np.ndarray, sal: np.ndarray, params: Optional[Mapping[str, TensorLike]] = None,
               raw_keep: Optional[np.ndarray] = None, trace: Optional[EncoderTrace] = None) -> TokenGrid:
        return encode(rgb, sal, self.cfg.encoder, nc.scope(self._p(params), "enc"), raw_keep=raw_keep, trace=trace)

    def support_skrs(self, supports: Sequence[TokenGrid], points: np.ndarray) -> Tensor:
        """(K, N, d) SKRs; invisible points are pooled too and left to `prototypes` to mask."""
        h = self.cfg.head
        return nc.stack([skr_batch(E, pts, h.pool_sigma, self.cfg.encoder.patch) for E, pts in zip(supports, points)])

    def localize(self, E_q: TokenGrid, protos: TensorLike,
                 params: Optional[Mapping[str, TensorLike]] = None) -> LocalizationOutput:
        head = nc.scope(self._p(params), "head")
        F_att = modulate(E_q, protos)
        psi = descriptor(F_att, E_q.l, nc.scope(head, "desc"), self.cfg.head.desc_convs)
        return localize(psi, self.cfg.head, head)

    def episode_prototypes(self, episode: Episode) -> tuple[list[int], Tensor, Tensor]:
        """(kept type ids, prototypes (N', d), SKRs (K, N, d))."""
        feats = [self.encode(s.rgb, s.saliency) for s in episode.supports]
        skrs = self.support_skrs(feats, episode.support_points)
        ids, c = prototypes(skrs, episode.support_visible, episode.type_ids)
        return ids, c, skrs

    def detect_episode(self, episode: Episode, protos: Optional[tuple[list[int], np.ndarray]] = None
                       ) -> list[list[KeypointPrediction]]:
        """Predictions per query, one per prototype; `protos` overrides the inductive prototypes."""
        if protos is None:
            ids, c, _ = self.episode_prototypes(episode)
        else:
            ids, c = protos[0], nc.as_tensor(protos[1])
        h = self.cfg.head
        results = []
        for q in episode.queries:
            out = self.localize(self.encode(q.rgb, q.saliency), c)
            results.append(decode_all(out, ids, q.side, h.d_v, h.stabilizer))
        return results
