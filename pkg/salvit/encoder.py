"""Feature encoder: a small strided CNN for raw tokens followed by saliency-guided transformer blocks."""
from __future__ import annotations
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator

from . import numcore as nc
from .errors import DimensionError
from .morph import MorphConfig, init_mpg, init_sem, mcm_power, mpg_theta, sem_embed
from .msa import AttentionConfig, init_params as init_attention, soft_msa
from .numcore import Tensor, TensorLike
from .saliency import SaliencyMap, downscale

logger = logging.getLogger(__name__)


class Ablation(str, Enum):
    full = "full"
    no_ml = "no_ml"
    no_pe = "no_pe"
    vit_only = "vit_only"
    cnn_only = "cnn_only"
    vanilla_vit = "vanilla_vit"


class EncoderConfig(BaseModel):
    image: int = Field(96, description="Side of the square-padded input image in pixels.")
    patch: int = Field(16, description="Pixels per token side.")
    d_raw: int = Field(64, ge=1, description="Backbone token channels.")
    d_vit: int = Field(64, ge=1, description="Channels contributed by the transformer blocks in total.")
    T: int = Field(1, ge=1, description="Number of cascaded saliency-guided blocks.")
    ablation: Ablation = Ablation.full
    backbone_hidden: int = Field(32, ge=1)
    stem: int = Field(4, ge=1, description="Stride of the first backbone convolution.")
    ffn_hidden: int = Field(128, ge=1)
    normalize_raw: bool = Field(False, description="Layer-normalise backbone tokens before concatenation.")
    fixed_theta: Optional[float] = Field(None, gt=0, description="Constant theta~ replacing the learned one.")
    attention: AttentionConfig = Field(default_factory=AttentionConfig)
    morph: MorphConfig = Field(default_factory=MorphConfig)

    @model_validator(mode="after")
    def _consistent(self):
        if self.image % self.patch:
            raise ValueError(f"image side {self.image} is not a multiple of patch {self.patch}")
        if self.patch % self.stem:
            raise ValueError(f"patch {self.patch} is not a multiple of stem stride {self.stem}")
        if self.d_vit % self.T:
            raise ValueError(f"d_vit {self.d_vit} is not divisible by T={self.T}")
        if self.attention.dim != self.d_raw:
            raise ValueError(f"attention heads x head_dim = {self.attention.dim} must equal d_raw {self.d_raw}")
        return self

    @property
    def l(self) -> int:
        return self.image // self.patch

    @property
    def n(self) -> int:
        return self.l * self.l

    @property
    def out_dim(self) -> int:
        if self.ablation is Ablation.cnn_only:
            return self.d_raw
        if self.ablation is Ablation.vit_only:
            return self.d_vit
        return self.d_raw + self.d_vit

    def block_attention(self) -> AttentionConfig:
        if self.ablation is Ablation.no_pe:
            return self.attention.model_copy(update={"use_pe": False})
        return self.attention

    @property
    def learns_morphology(self) -> bool:
        return self.ablation in (Ablation.full, Ablation.no_pe, Ablation.vit_only) and self.fixed_theta is None


@dataclass
class TokenGrid:
    l: int
    data: Tensor  # (l*l, d), row-major over the grid

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] != self.l * self.l:
            raise DimensionError(f"token data {self.data.shape} does not fill a {self.l}x{self.l} grid")

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def grid(self) -> np.ndarray:
        return self.data.data.reshape(self.l, self.l, self.d)


@dataclass
class EncoderTrace:
    thetas: list[Tensor] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    attentions: list[np.ndarray] = field(default_factory=list)


def square_pad(rgb: np.ndarray, sal: np.ndarray, side: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad bottom and right so the image is square with edge `side` (default: the longer edge)."""
    _, h, w = rgb.shape
    side = side or max(h, w)
    if side < max(h, w):
        raise DimensionError(f"cannot pad a {h}x{w} image down to side {side}")
    pad = ((0, side - h), (0, side - w))
    return np.pad(rgb, ((0, 0),) + pad), np.pad(sal, pad)


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> nc.Params:
    params: nc.Params = {
        "backbone.c0_w": nc.he_normal(rng, (cfg.backbone_hidden, 3, cfg.stem, cfg.stem)),
        "backbone.c0_b": np.zeros(cfg.backbone_hidden),
        "backbone.c1_w": nc.he_normal(rng, (cfg.d_raw, cfg.backbone_hidden, cfg.patch // cfg.stem, cfg.patch // cfg.stem)),
        "backbone.c1_b": np.zeros(cfg.d_raw),
    }
    if cfg.normalize_raw:
        params["raw_ln.g"] = np.ones(cfg.d_raw)
        params["raw_ln.b"] = np.zeros(cfg.d_raw)
    if cfg.ablation is Ablation.cnn_only:
        return params
    if cfg.learns_morphology:
        params.update({f"sem.{k}": v for k, v in init_sem(cfg.morph, cfg.patch, rng).items()})
    att = cfg.block_attention()
    d, part = cfg.d_raw, cfg.d_vit // cfg.T
    for t in range(cfg.T):
        block = {
            "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
            "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
            "ffn.w1": nc.trunc_normal(rng, (d, cfg.ffn_hidden)), "ffn.b1": np.zeros(cfg.ffn_hidden),
            "ffn.w2": np.zeros((cfg.ffn_hidden, d)), "ffn.b2": np.zeros(d),
            "out_ln_g": np.ones(d), "out_ln_b": np.zeros(d),
            "out_w": nc.trunc_normal(rng, (d, part)), "out_b": np.zeros(part),
        }
        block.update({f"attn.{k}": v for k, v in init_attention(att, d, cfg.l, rng, zero_out=True).items()})
        params.update({f"block{t}.{k}": v for k, v in block.items()})
        if cfg.learns_morphology:
            params.update({f"mpg{t}.{k}": v for k, v in init_mpg(cfg.morph, d, rng).items()})
    return params


def backbone(rgb: TensorLike, params: Mapping[str, TensorLike], cfg: EncoderConfig) -> Tensor:
    """Raw tokens (n, d_raw) from two strided convolutions: stem, then patch / stem."""
    rgb = nc.as_tensor(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise DimensionError(f"expected a (3, H, W) image, got {rgb.shape}")
    _, h, w = rgb.shape
    if h != w or h % cfg.patch:
        raise DimensionError(f"image must be square with side divisible by {cfg.patch}, got {h}x{w}")
    x = nc.relu(nc.conv2d(rgb, params["c0_w"], params["c0_b"], stride=cfg.stem))
    x = nc.conv2d(x, params["c1_w"], params["c1_b"], stride=cfg.patch // cfg.stem)
    d, l, _ = x.shape
    return x.reshape(d, l * l).transpose()


def salvit_block(Z: TensorLike, m: Optional[TensorLike], cfg: AttentionConfig,
                 params: Mapping[str, TensorLike]) -> tuple[Tensor, Tensor]:
    Z = nc.as_tensor(Z)
    attended, A = soft_msa(nc.layer_norm(Z, params["ln1_g"], params["ln1_b"]), m, cfg, nc.scope(params, "attn"))
    Z = attended + Z
    return nc.ffn(nc.layer_norm(Z, params["ln2_g"], params["ln2_b"]), nc.scope(params, "ffn")) + Z, A


def encode(rgb: TensorLike, sal: SaliencyMap | np.ndarray, cfg: EncoderConfig, params: Mapping[str, TensorLike],
           raw_keep: Optional[np.ndarray] = None, trace: Optional[EncoderTrace] = None) -> TokenGrid:
    """E(I): backbone tokens concatenated with the per-block transformer outputs.

    `raw_keep` is a per-token 0/1 multiplier applied to the backbone tokens.
    """
    sal_values = sal.values if isinstance(sal, SaliencyMap) else np.asarray(sal, dtype=np.float64)
    l = cfg.l
    F_raw = backbone(rgb, nc.scope(params, "backbone"), cfg)
    if raw_keep is not None:
        F_raw = F_raw * np.asarray(raw_keep, dtype=np.float64).reshape(-1, 1)
    if cfg.ablation is Ablation.cnn_only:
        return TokenGrid(l, F_raw)

    if sal_values.shape != tuple(nc.as_tensor(rgb).shape[1:]):
        raise DimensionError(f"saliency {sal_values.shape} does not match the image")
    M_down = downscale(SaliencyMap(sal_values), l)
    F_sal = sem_embed(rgb, sal_values, nc.scope(params, "sem"), cfg.patch) if cfg.learns_morphology else None
    att = cfg.block_attention()

    Z = F_raw
    parts = []
    for t in range(cfg.T):
        block = nc.scope(params, f"block{t}")
        theta_tilde: Optional[Tensor] = None
        if cfg.ablation is Ablation.vanilla_vit:
            m = None
        elif cfg.ablation is Ablation.no_ml:
            m = Tensor(M_down)
        elif cfg.fixed_theta is not None:
            theta_tilde = Tensor(cfg.fixed_theta)
            m = nc.power(M_down, theta_tilde)
        else:
            theta = mpg_theta(Z, F_sal, nc.scope(params, f"mpg{t}"))
            m, theta_tilde = mcm_power(M_down, theta, cfg.morph)
        Z, A = salvit_block(Z, m, att, block)
        parts.append(nc.linear(nc.layer_norm(Z, block["out_ln_g"], block["out_ln_b"]), block["out_w"], block["out_b"]))
        if trace is not None:
            if theta_tilde is not None:
                trace.thetas.append(theta_tilde)
            trace.masks.append(np.ones(cfg.n) if m is None else m.data.copy())
            trace.attentions.append(A.data.copy())

    F_vit = nc.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    if cfg.ablation is Ablation.vit_only:
        return TokenGrid(l, F_vit)
    if cfg.normalize_raw:
        F_raw = nc.layer_norm(F_raw, params["raw_ln.g"], params["raw_ln.b"])
    return TokenGrid(l, nc.concat([F_raw, F_vit], axis=1))
