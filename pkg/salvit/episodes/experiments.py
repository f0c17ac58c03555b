"""Drivers behind the ablate, transduce, occlude-eval, saliency-sweep and gradcheck commands."""
from __future__ import annotations
import csv
import io
import logging
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .. import numcore as nc
from ..config import RunConfig
from ..encoder import Ablation, salvit_block
from ..fskd import HeadConfig, KeypointDetector, LocalizationOutput, descriptor, init_head, losses
from ..morph import MorphConfig, init_mpg, init_sem, mcm_power, mpg_theta, sem_embed
from ..msa import AttentionConfig, Kernel, init_params as init_attention, soft_msa
from ..robust import (AlignArtifacts, AlignMode, OcclusionSpec, OcclusionType, align_loss, median_bandwidth, mmd2,
                      occlude_query)
from ..saliency import FailureMode, SaliencyMap, simulate_failure
from ..transduce import Strategy, TransductiveConfig, transductive_detect
from ..utils import atomic_write, derive_rng
from .metrics import MetricsLog
from .sampler import KeypointSet
from .synth import Dataset
from .trainer import eval_episodes, evaluate, evaluate_set, train, with_queries

logger = logging.getLogger(__name__)


def write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write(Path(path), buf.getvalue().encode())
    return Path(path)


def ablate(cfg: RunConfig, ds: Dataset, variants: Sequence[Ablation], seeds: Sequence[int],
           log: Optional[MetricsLog] = None) -> dict[str, list[float]]:
    """Train and score each encoder variant under each seed; novel PCK per (variant, seed)."""
    scores: dict[str, list[float]] = {}
    rows = []
    for variant in variants:
        for seed in seeds:
            enc = cfg.model.encoder.model_copy(update={"ablation": Ablation(variant)})
            run = cfg.model_copy(update={
                "seed": seed,
                "out": cfg.out / f"{Ablation(variant).value}-s{seed}",
                "backup_dir": None,
                "model": cfg.model.model_copy(update={"encoder": enc}),
            }, deep=True).resolve()
            model, _ = train(run, ds)
            res = evaluate(run, model, ds)
            scores.setdefault(Ablation(variant).value, []).append(res["pck_novel"])
            rows.append([Ablation(variant).value, seed, f"{res['pck_novel']:.4f}",
                         f"{res.get('pck_base', float('nan')):.4f}", f"{res.get('harmonic', float('nan')):.4f}"])
            if log is not None:
                log.log(f"pck_novel/{Ablation(variant).value}", res["pck_novel"], episode=seed)
    write_rows(cfg.out / "ablation.csv", ["variant", "seed", "pck_novel", "pck_base", "harmonic"], rows)
    return scores


def transduce_table(cfg: RunConfig, model: KeypointDetector, ds: Dataset,
                    strategies: Sequence[Strategy] = tuple(Strategy), log: Optional[MetricsLog] = None
                    ) -> dict[str, float]:
    """Novel PCK per prototype refinement strategy, over the same test episodes."""
    tcfg: TransductiveConfig = cfg.transductive
    results = {}
    for s in strategies:
        detect: Callable = lambda m, e, s=s: transductive_detect(m, e, tcfg, s, cfg.eval.tau)
        res = evaluate_set(model, eval_episodes(ds, cfg, KeypointSet.novel, Z=tcfg.Z), cfg.eval.tau, detect=detect)
        results[Strategy(s).value] = res.pck
        logger.info("transductive %s: PCK %.2f", Strategy(s).value, res.pck)
    if log is not None:
        log.log_many({f"pck/{k}": v for k, v in results.items()})
    write_rows(cfg.out / "transduce.csv", ["strategy", "pck"], [[k, f"{v:.4f}"] for k, v in results.items()])
    return results


def occluder(spec: OcclusionSpec) -> Callable:
    def transform(episode, rng):
        rgbs, sals = [], []
        for z, q in enumerate(episode.queries):
            rgb, sal = occlude_query(q.rgb, q.saliency, episode.query_points[z], episode.query_visible[z],
                                     q.box, spec, rng)
            rgbs.append(rgb)
            sals.append(sal)
        return with_queries(episode, rgbs, sals)
    return transform


def occlusion_eval(cfg: RunConfig, model: KeypointDetector, ds: Dataset,
                   types: Sequence[OcclusionType] = tuple(OcclusionType), levels: Optional[Sequence[float]] = None,
                   log: Optional[MetricsLog] = None, name: str = "occlusion.csv") -> dict[tuple[str, float], float]:
    results = {}
    for kind in types:
        for p in levels or cfg.eval.occlusion_levels:
            spec = cfg.occlusion.model_copy(update={"type": OcclusionType(kind), "p": p})
            res = evaluate_set(model, eval_episodes(ds, cfg, KeypointSet.novel), cfg.eval.tau,
                               transform=occluder(spec), rng=derive_rng(cfg.seed, 6))
            results[(OcclusionType(kind).value, p)] = res.pck
            if log is not None:
                log.log(f"pck/{OcclusionType(kind).value}/p={p}", res.pck)
    write_rows(cfg.out / name, ["occlusion", "p", "pck"], [[k, p, f"{v:.4f}"] for (k, p), v in results.items()])
    return results


def failing_saliency(mode: FailureMode, threshold: float) -> Callable:
    def transform(episode, rng):
        sals = [simulate_failure(SaliencyMap(q.saliency), mode, threshold).values for q in episode.queries]
        return with_queries(episode, [q.rgb for q in episode.queries], sals)
    return transform


def saliency_sweep(cfg: RunConfig, model: KeypointDetector, ds: Dataset, log: Optional[MetricsLog] = None
                   ) -> list[tuple[str, float, float]]:
    """Novel PCK with the query saliency thresholded at increasing levels, then reversed."""
    clean = evaluate_set(model, eval_episodes(ds, cfg, KeypointSet.novel), cfg.eval.tau)
    rows = [("clean", float("nan"), clean.pck)]
    for t in sorted(cfg.eval.sweep_thresholds):
        res = evaluate_set(model, eval_episodes(ds, cfg, KeypointSet.novel), cfg.eval.tau,
                           transform=failing_saliency(FailureMode.threshold, t))
        rows.append((FailureMode.threshold.value, t, res.pck))
    res = evaluate_set(model, eval_episodes(ds, cfg, KeypointSet.novel), cfg.eval.tau,
                       transform=failing_saliency(FailureMode.reverse, 0.0))
    rows.append((FailureMode.reverse.value, float("nan"), res.pck))
    if log is not None:
        for mode, t, v in rows:
            log.log(f"pck/{mode}/{t}", v)
    write_rows(cfg.out / "saliency_sweep.csv", ["mode", "threshold", "pck"], [[m, t, f"{v:.4f}"] for m, t, v in rows])
    return rows


# gradient suite: tiny shapes so every entry can be finite-differenced

def _msa_case(rng: np.random.Generator, kernel: Kernel = Kernel.softmax):
    cfg = AttentionConfig(kernel=kernel, heads=2, head_dim=2, J=1.0, use_pe=True)
    params = init_attention(cfg, 4, 2, rng)
    params = {k: rng.normal(0, 0.5, v.shape) for k, v in params.items()}
    point = {**{f"p.{k}": v for k, v in params.items()},
             "X": rng.normal(0, 1, (4, 4)), "m": rng.uniform(0.05, 0.95, 4)}

    def f(t):
        Z, _ = soft_msa(t["X"], t["m"], cfg, nc.scope(t, "p"))
        return (Z * Z).sum()
    return f, point


def _morph_case(rng: np.random.Generator):
    mcfg = MorphConfig(d_e=2, sem_hidden=2, mpg_hidden=3)
    acfg = AttentionConfig(heads=1, head_dim=3, use_pe=False)
    sem = {k: rng.normal(0, 0.3, v.shape) for k, v in init_sem(mcfg, 4, rng).items()}
    mpg = {k: rng.normal(0, 0.3, v.shape) for k, v in init_mpg(mcfg, 3, rng).items()}
    att = {k: rng.normal(0, 0.5, v.shape) for k, v in init_attention(acfg, 3, 2, rng).items()}
    rgb, sal = rng.uniform(0, 1, (3, 8, 8)), rng.uniform(0.05, 0.95, (8, 8))
    M_down = rng.uniform(0.05, 0.95, 4)
    point = {**{f"sem.{k}": v for k, v in sem.items()}, **{f"mpg.{k}": v for k, v in mpg.items()},
             **{f"att.{k}": v for k, v in att.items()}, "P": rng.normal(0, 1, (4, 3))}

    def f(t):
        F_sal = sem_embed(rgb, sal, nc.scope(t, "sem"), 4)
        theta = mpg_theta(t["P"], F_sal, nc.scope(t, "mpg"))
        m, _ = mcm_power(M_down, theta, mcfg)
        Z, _ = soft_msa(t["P"], m, acfg, nc.scope(t, "att"))
        return (Z * Z).sum()
    return f, point


def _block_case(rng: np.random.Generator):
    acfg = AttentionConfig(heads=2, head_dim=2, use_pe=True)
    att = {f"attn.{k}": rng.normal(0, 0.5, v.shape) for k, v in init_attention(acfg, 4, 2, rng).items()}
    block = {"ln1_g": rng.normal(1, 0.1, 4), "ln1_b": rng.normal(0, 0.1, 4),
             "ln2_g": rng.normal(1, 0.1, 4), "ln2_b": rng.normal(0, 0.1, 4),
             "ffn.w1": rng.normal(0, 0.5, (4, 5)), "ffn.b1": rng.normal(0, 0.1, 5),
             "ffn.w2": rng.normal(0, 0.5, (5, 4)), "ffn.b2": rng.normal(0, 0.1, 4), **att}
    point = {**block, "Z": rng.normal(0, 1, (4, 4))}
    m = rng.uniform(0.05, 0.95, 4)

    def f(t):
        out, _ = salvit_block(t["Z"], m, acfg, t)
        return (out * out).sum()
    return f, point


def _descriptor_case(rng: np.random.Generator):
    hcfg = HeadConfig(desc_channels=2, desc_convs=1, scales=[2])
    head = init_head(hcfg, 3, 4, rng)
    point = {k: rng.normal(0, 0.5, v.shape) for k, v in head.items() if k.startswith("desc.")}
    point["F"] = rng.normal(0, 1, (2, 16, 3))

    def f(t):
        psi = descriptor(t["F"], 4, nc.scope(t, "desc"), hcfg.desc_convs)
        return (psi * psi).sum()
    return f, point


def _loss_case(rng: np.random.Generator, which: str):
    scales, N, d_v, l0 = [2, 3], 2, 2, 12.0
    point = {}
    for S in scales:
        point[f"logits{S}"] = rng.normal(0, 1, (N, S * S))
        point[f"offsets{S}"] = rng.uniform(-0.9, 0.9, (N, S * S, 2))
        point[f"latent{S}"] = rng.normal(0, 1, (N, S * S, 2 * d_v))
    targets = rng.uniform(0.5, l0 - 0.5, (N, 2))

    def f(t):
        out = LocalizationOutput(scales, [t[f"logits{S}"] for S in scales],
                                 [nc.softmax(t[f"logits{S}"], axis=-1) for S in scales],
                                 [t[f"offsets{S}"] for S in scales], [t[f"latent{S}"] for S in scales])
        l_cls, l_os = losses(out, targets, np.ones(N, dtype=bool), l0, d_v, 1e-6)
        return l_cls if which == "cls" else l_os
    return f, point


def _align_case(rng: np.random.Generator, mode: AlignMode):
    point = {"clean": rng.normal(0, 1, (3, 4)), "occ": rng.normal(0, 1, (3, 4)),
             "clean_logits": rng.normal(0, 1, (2, 9)), "occ_logits": rng.normal(0, 1, (2, 9)),
             "pred": rng.normal(0, 1, (2, 6)), "loss": rng.normal(0, 1, ())}
    target = rng.normal(0, 1, (2, 6))
    bw = median_bandwidth(point["clean"], point["occ"])

    def f(t):
        if mode is AlignMode.feat_mmd:
            return mmd2(t["clean"], t["occ"], bandwidth=bw)
        art = AlignArtifacts(clean_probs=[nc.softmax(t["clean_logits"], axis=-1)],
                             occ_probs=[nc.softmax(t["occ_logits"], axis=-1)],
                             clean_feat=t["clean"], occ_feat=t["occ"], recon_pred=t["pred"], recon_target=target,
                             clean_loss=t["loss"] * t["loss"])
        return align_loss(mode, art)
    return f, point


def gradient_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, dict]]]:
    cases: dict[str, Callable] = {
        "soft_msa": _msa_case,
        "soft_msa_rbf": lambda r: _msa_case(r, Kernel.rbf),
        "sem_mpg_mcm": _morph_case,
        "salvit_block": _block_case,
        "descriptor": _descriptor_case,
        "L_cls": lambda r: _loss_case(r, "cls"),
        "L_os": lambda r: _loss_case(r, "os"),
    }
    for mode in AlignMode:
        if mode is not AlignMode.none:
            cases[f"align_{mode.value}"] = lambda r, mode=mode: _align_case(r, mode)
    return cases


def gradcheck_suite(seed: int = 0, points: int = 10, names: Optional[Sequence[str]] = None,
                    h: float = 1e-5) -> dict[str, float]:
    """Worst relative error per case over `points` random draws."""
    cases = gradient_cases()
    worst = {}
    for name in names or list(cases):
        errs = []
        for k in range(points):
            f, point = cases[name](derive_rng(seed, 7, k))
            errs.append(nc.grad_check(f, point, h))
        worst[name] = max(errs)
        logger.info("gradcheck %s: %.3e", name, worst[name])
    return worst
