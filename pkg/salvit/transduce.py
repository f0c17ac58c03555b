"""Transductive prototype refinement from confident query predictions."""
from __future__ import annotations
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.special import softmax

from .episodes.metrics import pck
from .errors import ContractError, ParameterError
from .fskd import Episode, KeypointDetector, KeypointPrediction, decode_position, pool_weights

logger = logging.getLogger(__name__)


class Strategy(str, Enum):
    inductive = "inductive"
    avg = "avg"
    soft = "soft"
    gt = "gt"


class TransductiveConfig(BaseModel):
    W: int = Field(2, ge=1, description="Top grid cells harvested per query and type.")
    eta: int = Field(20, ge=1, description="Candidates kept per type.")
    kappa: float = Field(0.8, ge=0, le=1, description="Weight of the support SKRs against the candidates.")
    sigma: float = Field(0.05, gt=0, description="Bandwidth of the soft assignment.")
    Z: int = Field(20, ge=1, description="Unlabelled queries per test episode.")
    normalize: bool = Field(True, description="l2-normalise features before the soft assignment.")

    @model_validator(mode="after")
    def _eta_fits(self):
        if self.eta > self.Z * self.W:
            raise ValueError(f"eta={self.eta} exceeds Z*W={self.Z * self.W}")
        return self


@dataclass(frozen=True)
class Candidate:
    feature: np.ndarray
    score: float
    query: int
    type_id: int
    rank: int
    x: np.ndarray


def harvest(episode: Episode, model: KeypointDetector, protos: tuple[list[int], np.ndarray], W: int
            ) -> dict[int, list[Candidate]]:
    """Top-W cells of the finest probability map per query and type, with features pooled at the decoded spots."""
    if W < 1:
        raise ParameterError("W must be at least 1")
    ids, c = protos
    head = model.cfg.head
    finest = int(np.argmax(head.scales))
    S = head.scales[finest]
    patch = model.cfg.encoder.patch
    found: dict[int, list[Candidate]] = {t: [] for t in ids}
    for z, q in enumerate(episode.queries):
        E = model.encode(q.rgb, q.saliency)
        out = model.localize(E, c)
        P = out.probs[finest].data
        O = out.offsets[finest].data
        for j, t in enumerate(ids):
            top = np.argsort(-P[j], kind="stable")[:W]
            for w, idx in enumerate(top):
                g = np.array([idx % S, idx // S])
                x = decode_position(g, O[j, idx], S, q.side)
                feat = pool_weights(E.l, x / patch, head.pool_sigma) @ E.data.data
                found[t].append(Candidate(feat, float(P[j, idx]), z, t, w, x))
    return found


def select_top_eta(candidates: Sequence[Candidate], eta: int) -> tuple[list[Candidate], np.ndarray]:
    """The eta best-scoring candidates and their 0/1 indicator over the input order.

    Ties go to the lower (query, rank).
    """
    if eta > len(candidates):
        logger.warning("eta=%d exceeds the %d candidates available; keeping all", eta, len(candidates))
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i].score, candidates[i].query, candidates[i].rank))
    chosen = order[:eta]
    indicator = np.zeros(len(candidates), dtype=bool)
    indicator[chosen] = True
    return [candidates[i] for i in chosen], indicator


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def assign_prob(feature: np.ndarray, protos: np.ndarray, sigma: float) -> np.ndarray:
    """softmax_i(-||feature - c_i|| / (2 sigma^2)); the distance is not squared."""
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    dist = np.linalg.norm(np.asarray(protos) - np.asarray(feature), axis=-1)
    return softmax(-dist / (2.0 * sigma * sigma))


def refine(protos: np.ndarray, ids: Sequence[int], skrs: dict[int, np.ndarray], selected: dict[int, list[Candidate]],
           kappa: float, sigma: float, normalize: bool = True) -> np.ndarray:
    """Blend each prototype's SKRs with its soft-assigned candidates.

    Assignment probabilities are taken against the prototypes before refinement.
    """
    if not 0.0 <= kappa <= 1.0:
        raise ParameterError("kappa must lie in [0, 1]")
    protos = np.asarray(protos, dtype=np.float64)
    anchors = _unit(protos) if normalize else protos
    refined = protos.copy()
    for n, t in enumerate(ids):
        S = skrs.get(t)
        if S is None or len(S) == 0:
            raise ContractError(f"keypoint type {t} has no support representation")
        Q = selected.get(t, [])
        if kappa == 1.0 or not Q:
            continue
        feats = np.stack([cand.feature for cand in Q])
        views = _unit(feats) if normalize else feats
        p = np.array([assign_prob(f, anchors, sigma)[n] for f in views])
        num = kappa * np.sum(S, axis=0) + (1.0 - kappa) * (p[:, None] * feats).sum(axis=0)
        den = kappa * len(S) + (1.0 - kappa) * p.sum()
        if den <= 0.0:
            logger.warning("type %s: candidate weights vanished; using the support mean", t)
            refined[n] = np.mean(S, axis=0)
            continue
        refined[n] = num / den
    return refined


def refine_avg_baseline(protos: np.ndarray, ids: Sequence[int], skrs: dict[int, np.ndarray],
                        selected: dict[int, list[Candidate]]) -> np.ndarray:
    refined = np.asarray(protos, dtype=np.float64).copy()
    for n, t in enumerate(ids):
        Q = selected.get(t, [])
        if Q:
            refined[n] = np.concatenate([skrs[t], np.stack([cand.feature for cand in Q])]).mean(axis=0)
    return refined


def correct_only(selected: dict[int, list[Candidate]], episode: Episode, tau: float = 0.1) -> dict[int, list[Candidate]]:
    """Keep candidates whose location is PCK-correct against the query's ground truth."""
    column = {t: j for j, t in enumerate(episode.type_ids)}
    kept: dict[int, list[Candidate]] = {}
    for t, cands in selected.items():
        j = column[t]
        kept[t] = [
            cand for cand in cands
            if episode.query_visible[cand.query, j]
            and pck(cand.x, episode.query_points[cand.query, j], episode.queries[cand.query].box, tau)
        ]
    return kept


def refine_gt_oracle(protos: np.ndarray, ids: Sequence[int], skrs: dict[int, np.ndarray],
                     selected: dict[int, list[Candidate]], episode: Episode, kappa: float, sigma: float,
                     normalize: bool = True, tau: float = 0.1) -> np.ndarray:
    return refine(protos, ids, skrs, correct_only(selected, episode, tau), kappa, sigma, normalize)


def transductive_detect(model: KeypointDetector, episode: Episode, cfg: TransductiveConfig,
                        strategy: Strategy | str = Strategy.soft, tau: float = 0.1
                        ) -> list[list[KeypointPrediction]]:
    """Detect, refine the prototypes with the queries' own predictions, then detect again."""
    strategy = Strategy(strategy)
    ids, c, skr_t = model.episode_prototypes(episode)
    protos = c.data
    if strategy is Strategy.inductive:
        return model.detect_episode(episode, (ids, protos))
    column = {t: j for j, t in enumerate(episode.type_ids)}
    skrs = {t: skr_t.data[episode.support_visible[:, column[t]], column[t]] for t in ids}
    found = harvest(episode, model, (ids, protos), cfg.W)
    selected = {t: select_top_eta(found[t], cfg.eta)[0] for t in ids}
    if strategy is Strategy.avg:
        refined = refine_avg_baseline(protos, ids, skrs, selected)
    elif strategy is Strategy.gt:
        refined = refine_gt_oracle(protos, ids, skrs, selected, episode, cfg.kappa, cfg.sigma, cfg.normalize, tau)
    else:
        refined = refine(protos, ids, skrs, selected, cfg.kappa, cfg.sigma, cfg.normalize)
    return model.detect_episode(episode, (ids, refined))
