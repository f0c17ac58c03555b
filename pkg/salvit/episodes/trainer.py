"""Episodic training and evaluation."""
from __future__ import annotations
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator, Mapping, Optional

import numpy as np

from .. import numcore as nc
from ..checkpoint import save_checkpoint
from ..config import RunConfig
from ..encoder import EncoderTrace
from ..errors import NumericError
from ..fskd import Episode, KeypointDetector, KeypointPrediction, losses, prototypes
from ..morph import morph_reg
from ..numcore import Tensor
from ..robust import AlignArtifacts, AlignMode, MAAConfig, align_loss, init_recon, mask_train, patch_pixels, total_loss
from ..utils import atomic_write, derive_rng
from .metrics import MetricsLog, PredictionLog, harmonic, ne, pck, pck_score
from .sampler import EpisodeSpec, KeypointSet, SpeciesPool, SpeciesSplit, sample_episode
from .synth import Dataset, load_dataset

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"


class Adam:
    """Per-parameter adaptive first-order optimiser without weight decay."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EpisodeLoss:
    total: Tensor
    l_cls: float
    l_os: float
    l_reg: float
    l_aln: float
    thetas: list[float]
    traces: list[EncoderTrace]

    def stats(self) -> dict[str, float]:
        return {"loss": self.total.item(), "L_cls": self.l_cls, "L_os": self.l_os,
                "L_ms": self.l_cls + self.l_os, "L_reg": self.l_reg, "L_aln": self.l_aln}


def episode_loss(model: KeypointDetector, episode: Episode, params: Mapping[str, Tensor], maa: MAAConfig,
                 rng: np.random.Generator) -> EpisodeLoss:
    """lambda1 * L_ms on the (possibly masked) queries + lambda2 * L_reg + lambda3 * L_aln."""
    enc, head = model.cfg.encoder, model.cfg.head
    traces: list[EncoderTrace] = []

    def encode(rgb, sal, raw_keep=None):
        trace = EncoderTrace()
        traces.append(trace)
        return model.encode(rgb, sal, params, raw_keep=raw_keep, trace=trace)

    feats = [encode(s.rgb, s.saliency) for s in episode.supports]
    skrs = model.support_skrs(feats, episode.support_points)
    ids, c = prototypes(skrs, episode.support_visible, episode.type_ids)
    cols = [episode.type_ids.index(t) for t in ids]

    l_cls, l_os, l_aln = [], [], []
    for z, q in enumerate(episode.queries):
        view = mask_train(q.rgb, q.saliency, maa.mask, enc.patch, rng)
        E_occ = encode(view.rgb, view.saliency, view.raw_keep)
        out_occ = model.localize(E_occ, c, params)
        targets, vis = episode.query_points[z][cols], episode.query_visible[z][cols]
        lc, lo = losses(out_occ, targets, vis, q.side, head.d_v, head.stabilizer)
        l_cls.append(lc)
        l_os.append(lo)
        if maa.align is AlignMode.none:
            continue
        art = AlignArtifacts(occ_probs=out_occ.probs, occ_feat=E_occ.data)
        if maa.align is AlignMode.recon:
            art.recon_pred = nc.linear(E_occ.data[view.cells], params["maa.recon_w"], params["maa.recon_b"])
            art.recon_target = patch_pixels(q.rgb, view.cells, enc.patch)
        else:
            E = encode(q.rgb, q.saliency)
            out = model.localize(E, c, params)
            art.clean_probs, art.clean_feat = out.probs, E.data
            if maa.align is AlignMode.non_occl_loss:
                lc_clean, lo_clean = losses(out, targets, vis, q.side, head.d_v, head.stabilizer)
                art.clean_loss = lc_clean + lo_clean
        l_aln.append(align_loss(maa.align, art, maa.detach_clean))

    L_cls, L_os = nc.stack(l_cls).mean(), nc.stack(l_os).mean()
    thetas = [t for tr in traces for t in tr.thetas]
    L_reg = morph_reg(thetas, enc.morph)
    L_aln = nc.stack(l_aln).mean() if l_aln else Tensor(0.0)
    total = total_loss(L_cls + L_os, L_reg, L_aln, maa.lambda1, maa.lambda2, maa.lambda3)
    return EpisodeLoss(total, L_cls.item(), L_os.item(), L_reg.item(), L_aln.item(),
                       [t.item() for t in thetas], traces)


def diagnostics(result: EpisodeLoss, step: int) -> dict:
    masks = [m for tr in result.traces for m in tr.masks]
    atts = [a for tr in result.traces for a in tr.attentions]

    def summary(arrays):
        if not arrays:
            return {}
        flat = np.concatenate([np.ravel(a) for a in arrays])
        return {"min": float(np.nanmin(flat)) if np.isfinite(flat).any() else None,
                "max": float(np.nanmax(flat)) if np.isfinite(flat).any() else None,
                "nan": int(np.isnan(flat).sum())}
    return {"step": step, "losses": result.stats(), "theta_tilde": result.thetas,
            "mask": summary(masks), "attention": summary(atts)}


def _dataset(cfg: RunConfig) -> Dataset:
    return load_dataset(cfg.data.root, cfg.saliency, cfg.data.saliency_dir)


def _split(ds: Dataset, cfg: RunConfig) -> SpeciesSplit:
    return SpeciesSplit.rotating(int(ds.species.max()) + 1, cfg.data.unseen)


def train(cfg: RunConfig, ds: Optional[Dataset] = None, log: Optional[MetricsLog] = None,
          checkpoint: Optional[Path] = None) -> tuple[KeypointDetector, Path]:
    ds = ds if ds is not None else _dataset(cfg)
    run_hash = cfg.config_hash()
    log = log or MetricsLog(cfg.out / "metrics.csv", run_hash, "train")
    model = KeypointDetector(cfg.model, seed=cfg.seed)
    if cfg.maa.align is AlignMode.recon:
        rec = init_recon(cfg.model.encoder.out_dim, cfg.model.encoder.patch, derive_rng(cfg.seed, 5))
        model.params.update({f"maa.{k}": v for k, v in rec.items()})
    tc = cfg.train
    opt = Adam(tc.lr, tc.beta1, tc.beta2, tc.eps)
    spec = EpisodeSpec(K=tc.K, keypoints=KeypointSet.base, species=SpeciesPool.seen, Z=tc.Z, aux=tc.aux)
    split = _split(ds, cfg)
    sample_rng, mask_rng = derive_rng(cfg.seed, 2), derive_rng(cfg.seed, 4)
    fixed = sample_episode(ds, spec, split, sample_rng) if tc.fixed_episode else None

    for step in range(tc.episodes):
        episode = fixed if fixed is not None else sample_episode(ds, spec, split, sample_rng, episode_id=step)
        leaves = model.leaves()
        result = episode_loss(model, episode, leaves, cfg.maa, mask_rng)
        if not np.isfinite(result.total.item()):
            diag = diagnostics(result, step)
            atomic_write(cfg.out / "nan_diagnostics.json", json.dumps(diag, indent=2).encode())
            raise NumericError(f"non-finite loss at step {step}", diagnostics=diag)
        grads = nc.backward(result.total, leaves)
        opt.step(model.params, grads)
        if not nc.all_finite(model.params):
            diag = {**diagnostics(result, step),
                    "bad_params": sorted(k for k, v in model.params.items() if not np.isfinite(v).all())}
            atomic_write(cfg.out / "nan_diagnostics.json", json.dumps(diag, indent=2).encode())
            raise NumericError(f"non-finite parameters after step {step}", diagnostics=diag)
        if step % tc.log_every == 0 or step == tc.episodes - 1:
            log.log_many(result.stats(), step=step, episode=episode.id)
            for i, theta in enumerate(result.thetas):
                log.log("theta_tilde", theta, step=step, episode=i)
            logger.info("step %d loss %.4f L_ms %.4f", step, result.total.item(), result.l_cls + result.l_os)
        else:
            logger.debug("step %d loss %.4f", step, result.total.item())

    path = checkpoint or cfg.out / CHECKPOINT_NAME
    meta = {"model": cfg.model.model_dump(mode="json"), "run_hash": run_hash, "seed": cfg.seed, "steps": tc.episodes}
    save_checkpoint(path, model.params, meta, cfg.backup_dir)
    logger.info("saved checkpoint %s", path)
    return model, path


Transform = Callable[[Episode, np.random.Generator], Episode]
Detector = Callable[[KeypointDetector, Episode], list[list[KeypointPrediction]]]


@dataclass
class EvalResult:
    flags: list[bool]
    errors: list[float]

    @property
    def pck(self) -> float:
        return pck_score(self.flags)

    @property
    def ne(self) -> float:
        return float(np.mean(self.errors)) if self.errors else 0.0


def score_episode(episode: Episode, preds: list[list[KeypointPrediction]], tau: float = 0.1,
                  pred_log: Optional[PredictionLog] = None) -> EvalResult:
    res = EvalResult([], [])
    column = {t: j for j, t in enumerate(episode.type_ids)}
    for z, (q, row) in enumerate(zip(episode.queries, preds)):
        for p in row:
            j = column[p.type_id]
            if not episode.query_visible[z, j]:
                continue
            gt = episode.query_points[z, j]
            ok = pck(p.x, gt, q.box, tau)
            res.flags.append(ok)
            res.errors.append(ne(p.x, gt, q.side, q.side))
            if pred_log is not None:
                pred_log.log(episode.id, z, p.type_id, p.x, p.sigma, p.score, ok)
    return res


def eval_episodes(ds: Dataset, cfg: RunConfig, keypoints: KeypointSet, Z: Optional[int] = None,
                  count: Optional[int] = None) -> Iterator[Episode]:
    """The fixed evaluation stream: same seed, same episodes, whatever model is scored."""
    ec = cfg.eval
    spec = EpisodeSpec(K=ec.K, keypoints=keypoints, species=SpeciesPool.unseen, Z=Z or ec.Z)
    rng = derive_rng(cfg.seed, 3, 0 if keypoints is KeypointSet.novel else 1)
    split = _split(ds, cfg)
    for e in range(count or ec.episodes):
        yield sample_episode(ds, spec, split, rng, episode_id=e)


def evaluate_set(model: KeypointDetector, episodes: Iterator[Episode], tau: float = 0.1,
                 transform: Optional[Transform] = None, detect: Optional[Detector] = None,
                 rng: Optional[np.random.Generator] = None, log: Optional[MetricsLog] = None,
                 pred_log: Optional[PredictionLog] = None, tag: str = "pck") -> EvalResult:
    total = EvalResult([], [])
    rng = rng or np.random.default_rng(0)
    for episode in episodes:
        if transform is not None:
            episode = transform(episode, rng)
        preds = detect(model, episode) if detect else model.detect_episode(episode)
        res = score_episode(episode, preds, tau, pred_log)
        total.flags += res.flags
        total.errors += res.errors
        if log is not None:
            log.log(tag, res.pck, episode=episode.id)
    return total


def evaluate(cfg: RunConfig, model: KeypointDetector, ds: Optional[Dataset] = None,
             log: Optional[MetricsLog] = None, pred_log: Optional[PredictionLog] = None) -> dict[str, float]:
    """Novel-keypoint PCK and NE on the unseen species, plus base PCK and the harmonic mean."""
    ds = ds if ds is not None else _dataset(cfg)
    novel = evaluate_set(model, eval_episodes(ds, cfg, KeypointSet.novel), cfg.eval.tau,
                         log=log, pred_log=pred_log, tag="pck_novel")
    results = {"pck_novel": novel.pck, "ne_novel": novel.ne}
    if cfg.eval.with_base:
        base = evaluate_set(model, eval_episodes(ds, cfg, KeypointSet.base), cfg.eval.tau, log=log, tag="pck_base")
        results.update(pck_base=base.pck, ne_base=base.ne, harmonic=harmonic(novel.pck, base.pck))
    if log is not None:
        log.log_many(results)
    return results


def with_queries(episode: Episode, rgbs: list[np.ndarray], sals: list[np.ndarray]) -> Episode:
    queries = [replace(q, rgb=r, saliency=s) for q, r, s in zip(episode.queries, rgbs, sals)]
    return replace(episode, queries=queries)
