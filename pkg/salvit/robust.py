"""Occlusion at test time, random foreground masking at train time, and the view-alignment losses."""
from __future__ import annotations
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.ndimage import label

from . import numcore as nc
from .errors import ParameterError
from .numcore import Tensor, TensorLike
from .saliency import FOREGROUND, SaliencyMap, downscale

logger = logging.getLogger(__name__)

GRAY = 0.5
KL_CLAMP = 1e-12


class OcclusionType(str, Enum):
    gray_box = "gray_box"
    avg_pixel_box = "avg_pixel_box"
    background_crop = "background_crop"


class AlignMode(str, Enum):
    none = "none"
    prob_kl = "prob_kl"
    feat_l1 = "feat_l1"
    feat_l2 = "feat_l2"
    feat_mmd = "feat_mmd"
    recon = "recon"
    non_occl_loss = "non_occl_loss"


class OcclusionSpec(BaseModel):
    type: OcclusionType = OcclusionType.gray_box
    area_min: float = Field(0.01, ge=0.01, le=0.04)
    area_max: float = Field(0.04, ge=0.01, le=0.04)
    aspect_min: float = Field(0.7, ge=0.7, le=1.4)
    aspect_max: float = Field(1.4, ge=0.7, le=1.4)
    p: float = Field(1.0, ge=0, le=1, description="Probability of occluding each visible query keypoint.")
    gray: float = Field(GRAY, ge=0, le=1)

    @model_validator(mode="after")
    def _ordered(self):
        if self.area_min > self.area_max or self.aspect_min > self.aspect_max:
            raise ValueError("range minimum exceeds maximum")
        return self


class MaskStrategy(BaseModel):
    mask_rgb: bool = False
    mask_sal: bool = False
    mask_feat: bool = False
    min_patches: int = Field(2, ge=0)
    max_patches: int = Field(12, ge=0)
    gray: float = Field(GRAY, ge=0, le=1)

    @model_validator(mode="after")
    def _ordered(self):
        if self.min_patches > self.max_patches:
            raise ValueError("min_patches exceeds max_patches")
        return self

    @property
    def enabled(self) -> bool:
        return self.mask_rgb or self.mask_sal or self.mask_feat


class MAAConfig(BaseModel):
    mask: MaskStrategy = Field(default_factory=MaskStrategy)
    align: AlignMode = AlignMode.none
    lambda1: float = Field(0.5, ge=0, description="Weight of the localisation loss on the occluded view.")
    lambda2: float = Field(0.5, ge=0, description="Weight of the morphology regulariser.")
    lambda3: float = Field(0.1, ge=0, description="Weight of the alignment loss.")
    detach_clean: bool = Field(False, description="Stop gradients through the clean view in alignment.")

    @model_validator(mode="after")
    def _needs_mask(self):
        if self.align is not AlignMode.none and not self.mask.enabled:
            raise ValueError("an alignment mode needs at least one masking flag")
        return self


@dataclass
class MaskedView:
    rgb: np.ndarray
    saliency: np.ndarray
    raw_keep: Optional[np.ndarray] = None
    cells: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


@dataclass
class AlignArtifacts:
    clean_probs: Sequence[Tensor] = ()
    occ_probs: Sequence[Tensor] = ()
    clean_feat: Optional[Tensor] = None
    occ_feat: Optional[Tensor] = None
    recon_pred: Optional[Tensor] = None
    recon_target: Optional[np.ndarray] = None
    clean_loss: Optional[Tensor] = None


def sample_box(spec: OcclusionSpec, obj_box: Sequence[float], rng: np.random.Generator) -> tuple[float, float]:
    """Width and height of an occluder whose area is a fraction of the object box."""
    x0, y0, x1, y1 = obj_box
    area = rng.uniform(spec.area_min, spec.area_max) * (x1 - x0) * (y1 - y0)
    aspect = rng.uniform(spec.aspect_min, spec.aspect_max)
    return float(np.sqrt(area * aspect)), float(np.sqrt(area / aspect))


def _region(centre: np.ndarray, w: float, h: float, side_h: int, side_w: int) -> tuple[slice, slice]:
    x0 = int(np.clip(np.round(centre[0] - w / 2), 0, side_w))
    x1 = int(np.clip(np.round(centre[0] + w / 2), 0, side_w))
    y0 = int(np.clip(np.round(centre[1] - h / 2), 0, side_h))
    y1 = int(np.clip(np.round(centre[1] + h / 2), 0, side_h))
    return slice(y0, max(y1, y0 + 1)), slice(x0, max(x1, x0 + 1))


def background_window(sal: np.ndarray, h: int, w: int, rng: np.random.Generator) -> Optional[tuple[slice, slice]]:
    """A random h x w window inside the largest connected background region, if one fits."""
    labels, count = label(sal < FOREGROUND)
    if count == 0:
        return None
    sizes = np.bincount(labels.ravel())[1:]
    region = labels == (int(np.argmax(sizes)) + 1)
    H, W = region.shape
    if h > H or w > W:
        return None
    integral = np.pad(region.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    inside = (integral[h:, w:] - integral[:-h, w:] - integral[h:, :-w] + integral[:-h, :-w]) == h * w
    tops = np.argwhere(inside)
    if tops.size == 0:
        return None
    y, x = tops[rng.integers(len(tops))]
    return slice(int(y), int(y) + h), slice(int(x), int(x) + w)


def occlude_test(rgb: np.ndarray, sal: np.ndarray, kp: np.ndarray, obj_box: Sequence[float], spec: OcclusionSpec,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Occlude one box centred at the keypoint; returns new (rgb, saliency) arrays."""
    rgb, sal = rgb.copy(), sal.copy()
    w, h = sample_box(spec, obj_box, rng)
    ys, xs = _region(np.asarray(kp, dtype=np.float64), w, h, sal.shape[0], sal.shape[1])
    kind = spec.type
    if kind is OcclusionType.background_crop:
        src = background_window(sal, ys.stop - ys.start, xs.stop - xs.start, rng)
        if src is None:
            logger.warning("no background region fits a %dx%d crop; filling gray", ys.stop - ys.start, xs.stop - xs.start)
            kind = OcclusionType.gray_box
        else:
            rgb[:, ys, xs] = rgb[:, src[0], src[1]]
            sal[ys, xs] = sal[src[0], src[1]]
            return rgb, sal
    if kind is OcclusionType.gray_box:
        rgb[:, ys, xs] = spec.gray
    else:
        rgb[:, ys, xs] = rgb.reshape(3, -1).mean(axis=1)[:, None, None]
    sal[ys, xs] = 0.0
    return rgb, sal


def occlude_query(rgb: np.ndarray, sal: np.ndarray, points: np.ndarray, visible: np.ndarray, obj_box: Sequence[float],
                  spec: OcclusionSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Occlude each visible keypoint independently with probability spec.p."""
    for kp, vis in zip(points, visible):
        hit = rng.random() < spec.p
        if vis and hit:
            rgb, sal = occlude_test(rgb, sal, kp, obj_box, spec, rng)
    return rgb, sal


def mask_train(rgb: np.ndarray, sal: np.ndarray, strategy: MaskStrategy, patch: int,
               rng: np.random.Generator) -> MaskedView:
    """Mask a random number of salient patches in RGB (gray), saliency (zero) or backbone tokens (zero)."""
    if not strategy.enabled:
        return MaskedView(rgb, sal)
    side = sal.shape[0]
    if side % patch:
        raise ParameterError(f"image side {side} is not a multiple of patch {patch}")
    l = side // patch
    fg = np.flatnonzero(downscale(SaliencyMap(sal), l) >= FOREGROUND)
    count = min(int(rng.integers(strategy.min_patches, strategy.max_patches + 1)), fg.size)
    cells = np.sort(rng.choice(fg, size=count, replace=False)) if count else np.zeros(0, dtype=int)
    rgb, sal = rgb.copy(), sal.copy()
    raw_keep = None
    for c in cells:
        gy, gx = divmod(int(c), l)
        ys, xs = slice(gy * patch, (gy + 1) * patch), slice(gx * patch, (gx + 1) * patch)
        if strategy.mask_rgb:
            rgb[:, ys, xs] = strategy.gray
        if strategy.mask_sal:
            sal[ys, xs] = 0.0
    if strategy.mask_feat:
        raw_keep = np.ones(l * l)
        raw_keep[cells] = 0.0
    return MaskedView(rgb, sal, raw_keep, cells)


def patch_pixels(rgb: np.ndarray, cells: np.ndarray, patch: int) -> np.ndarray:
    """(len(cells), 3 * patch * patch) pixel rows of the given grid cells."""
    l = rgb.shape[-1] // patch
    rows = []
    for c in cells:
        gy, gx = divmod(int(c), l)
        rows.append(rgb[:, gy * patch:(gy + 1) * patch, gx * patch:(gx + 1) * patch].reshape(-1))
    return np.stack(rows) if rows else np.zeros((0, 3 * patch * patch))


def init_recon(d: int, patch: int, rng: np.random.Generator) -> nc.Params:
    return {"recon_w": nc.trunc_normal(rng, (d, 3 * patch * patch)), "recon_b": np.full(3 * patch * patch, GRAY)}


def _maybe_detach(t: Tensor, detach: bool) -> Tensor:
    return Tensor(t.data) if detach else t


def prob_kl(P: TensorLike, P_occ: TensorLike) -> Tensor:
    """sum_g P log(P / P_occ) per row, averaged over rows; both sides clamped at 1e-12."""
    P, P_occ = nc.as_tensor(P), nc.as_tensor(P_occ)
    terms = P * (nc.log(nc.clamp_min(P, KL_CLAMP)) - nc.log(nc.clamp_min(P_occ, KL_CLAMP)))
    return terms.sum(axis=-1).mean()


def median_bandwidth(X: np.ndarray, Y: np.ndarray) -> float:
    """Median pairwise distance of the pooled tokens; 1 when every distance is 0."""
    pooled = np.concatenate([X, Y])
    dist = np.sqrt(((pooled[:, None, :] - pooled[None, :, :]) ** 2).sum(-1))
    off = dist[~np.eye(len(pooled), dtype=bool)]
    bw = float(np.median(off)) if off.size else 0.0
    return bw if bw > 0 else 1.0


def mmd2(X: TensorLike, Y: TensorLike, bandwidth: Optional[float] = None) -> Tensor:
    """Biased squared MMD with a Gaussian kernel; the bandwidth is held constant under differentiation."""
    X, Y = nc.as_tensor(X), nc.as_tensor(Y)
    bw = bandwidth if bandwidth is not None else median_bandwidth(X.data, Y.data)

    def gram(A: Tensor, B: Tensor) -> Tensor:
        diff = A.reshape(A.shape[0], 1, A.shape[1]) - B.reshape(1, B.shape[0], B.shape[1])
        return nc.exp((diff * diff).sum(axis=-1) * (-1.0 / (2.0 * bw * bw)))
    return gram(X, X).mean() + gram(Y, Y).mean() - gram(X, Y).mean() * 2.0


def align_loss(mode: AlignMode | str, artifacts: AlignArtifacts, detach_clean: bool = False) -> Tensor:
    mode = AlignMode(mode)
    a = artifacts
    if mode is AlignMode.none:
        return Tensor(0.0)
    if mode is AlignMode.prob_kl:
        terms = [prob_kl(_maybe_detach(p, detach_clean), q) for p, q in zip(a.clean_probs, a.occ_probs)]
        return nc.stack(terms).mean() if terms else Tensor(0.0)
    if mode in (AlignMode.feat_l1, AlignMode.feat_l2, AlignMode.feat_mmd):
        clean = _maybe_detach(a.clean_feat, detach_clean)
        if mode is AlignMode.feat_mmd:
            return mmd2(clean, a.occ_feat)
        diff = clean - a.occ_feat
        return (nc.absolute(diff) if mode is AlignMode.feat_l1 else diff * diff).mean()
    if mode is AlignMode.recon:
        if a.recon_pred is None or a.recon_pred.shape[0] == 0:
            return Tensor(0.0)
        return nc.absolute(a.recon_pred - a.recon_target).mean()
    return a.clean_loss if a.clean_loss is not None else Tensor(0.0)


def total_loss(L_ms_occ: TensorLike, L_reg: TensorLike, L_aln: TensorLike,
               lambda1: float = 0.5, lambda2: float = 0.5, lambda3: float = 0.1) -> Tensor:
    return nc.as_tensor(L_ms_occ) * lambda1 + nc.as_tensor(L_reg) * lambda2 + nc.as_tensor(L_aln) * lambda3
