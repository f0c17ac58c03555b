"""Morphology learner: predicts a power exponent that dilates or erodes the token saliency."""
from __future__ import annotations
import logging
from typing import Mapping, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from . import numcore as nc
from .errors import DimensionError, ParameterError
from .numcore import Tensor, TensorLike

logger = logging.getLogger(__name__)

# |theta~ - rho2|^2 - rho3 at or below this counts as inside the dead zone
DEAD_ZONE_TOL = 1e-12


class MorphConfig(BaseModel):
    rho1: float = Field(2.0, description="Upper bound of theta~.")
    rho2: float = Field(0.7, description="Desired morphology centre.")
    rho3: float = Field(0.05, ge=0, description="Squared half-width of the regulariser dead zone.")
    d_e: int = Field(32, ge=1, description="Saliency embedding channels.")
    sem_hidden: int = Field(16, ge=1, description="Channels of the intermediate SEM convolutions.")
    mpg_hidden: int = Field(32, ge=1, description="Hidden width of the parameter generator.")

    @model_validator(mode="after")
    def _ordering(self):
        if self.rho1 <= 0 or not 0 < self.rho2 < self.rho1:
            raise ValueError("need rho1 > 0 and 0 < rho2 < rho1")
        return self


def init_sem(cfg: MorphConfig, patch: int, rng: np.random.Generator) -> nc.Params:
    h = cfg.sem_hidden
    p = {"c0_w": nc.he_normal(rng, (h, 4, patch, patch)), "c0_b": np.zeros(h)}
    for i in (1, 2, 3):
        p[f"c{i}_w"] = nc.he_normal(rng, (h, h, 3, 3))
        p[f"c{i}_b"] = np.zeros(h)
    p["c4_w"] = nc.trunc_normal(rng, (cfg.d_e, h, 1, 1))
    p["c4_b"] = np.zeros(cfg.d_e)
    return p


def init_mpg(cfg: MorphConfig, d_tokens: int, rng: np.random.Generator) -> nc.Params:
    # zero output layer: theta = 0 and theta~ = rho1 / 2 at start
    return {
        "w1": nc.trunc_normal(rng, (cfg.d_e + d_tokens, cfg.mpg_hidden)),
        "b1": np.zeros(cfg.mpg_hidden),
        "w2": np.zeros((cfg.mpg_hidden, 1)),
        "b2": np.zeros(1),
    }


def sem_embed(rgb: TensorLike, sal: TensorLike, params: Mapping[str, TensorLike], patch: int) -> Tensor:
    """Embed the stacked [saliency; rgb] image to one d_e vector per token, row-major."""
    rgb, sal = nc.as_tensor(rgb), nc.as_tensor(sal)
    if rgb.ndim != 3 or rgb.shape[0] != 3 or sal.shape != rgb.shape[1:]:
        raise DimensionError(f"rgb {rgb.shape} and saliency {sal.shape} do not describe one image")
    x = nc.concat([sal.reshape((1,) + sal.shape), rgb], axis=0)
    x = nc.relu(nc.conv2d(x, params["c0_w"], params["c0_b"], stride=patch))
    for i in (1, 2, 3):
        x = nc.relu(nc.conv2d(x, params[f"c{i}_w"], params[f"c{i}_b"], stride=1, padding=1))
    x = nc.conv2d(x, params["c4_w"], params["c4_b"])
    d_e, l, _ = x.shape
    return x.reshape(d_e, l * l).transpose()


def mpg_theta(P: TensorLike, F_sal: TensorLike, params: Mapping[str, TensorLike]) -> Tensor:
    """Scalar theta from the pooled [F_sal; P] descriptor through a GELU MLP."""
    P, F_sal = nc.as_tensor(P), nc.as_tensor(F_sal)
    if P.ndim != 2 or F_sal.ndim != 2 or P.shape[0] != F_sal.shape[0]:
        raise DimensionError(f"token rows differ: P {P.shape} vs F_sal {F_sal.shape}")
    pooled = nc.concat([F_sal, P], axis=1).mean(axis=0)
    hidden = nc.gelu(nc.linear(pooled, params["w1"], params["b1"]))
    return nc.linear(hidden, params["w2"], params["b2"]).reshape(())


def mcm_power(M_down: TensorLike, theta: TensorLike, cfg: MorphConfig) -> tuple[Tensor, Tensor]:
    M_down = nc.as_tensor(M_down)
    if M_down.size and (M_down.data.min() < 0.0 or M_down.data.max() > 1.0):
        raise ParameterError("downscaled saliency must lie in [0, 1]")
    theta_tilde = nc.sigmoid(theta) * cfg.rho1
    return nc.power(M_down, theta_tilde), theta_tilde


def morph_reg(theta_tildes: Sequence[TensorLike] | TensorLike, cfg: MorphConfig) -> Tensor:
    """Mean of max((theta~ - rho2)^2 - rho3, 0) over every image and block supplied."""
    if isinstance(theta_tildes, (list, tuple)):
        if not theta_tildes:
            return Tensor(0.0)
        t = nc.stack([nc.as_tensor(v).reshape(()) for v in theta_tildes])
    else:
        t = nc.as_tensor(theta_tildes).reshape(-1)
    centred = t - cfg.rho2
    excess = centred * centred - cfg.rho3
    outside = (excess.data > DEAD_ZONE_TOL).astype(np.float64)
    return (excess * outside).mean()
