"""Saliency maps: preprocessing, token-level downscaling, failure simulation, IoU and the SAL file format."""
from __future__ import annotations
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy.ndimage import distance_transform_cdt, distance_transform_edt, gaussian_filter

from .errors import DimensionError, ParameterError
from .utils import atomic_write

logger = logging.getLogger(__name__)

FOREGROUND = 0.5
SAL_DTYPE = np.dtype("<f4")


class SaliencyConfig(BaseModel):
    diffusion_scale: float = Field(8.0, description="Pixels over which saliency decays away from the foreground.")
    blur_sigma: float = Field(2.0, description="Gaussian blur sigma in pixels; 0 disables the blur.")
    approximate: bool = Field(False, description="Use the two-pass chessboard distance instead of exact Euclidean.")

    @field_validator("diffusion_scale")
    @classmethod
    def _positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("diffusion_scale must be positive")
        return v

    @field_validator("blur_sigma")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("blur_sigma must be non-negative")
        return v


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray  # (height, width)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionError(f"saliency map must be 2-d, got shape {v.shape}")
        if not np.isfinite(v).all() or v.min(initial=0.0) < 0.0 or v.max(initial=0.0) > 1.0:
            raise ParameterError("saliency values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class BinaryMask:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or not np.isin(v, (0, 1)).all():
            raise ParameterError("binary mask must be a 2-d grid of 0/1")
        object.__setattr__(self, "values", v.astype(bool))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


class FailureMode(str, Enum):
    threshold = "threshold"
    reverse = "reverse"


def preprocess(raw: SaliencyMap, diffusion_scale: float = 8.0, blur_sigma: float = 2.0,
               approximate: bool = False) -> SaliencyMap:
    """Diffuse the thresholded foreground outward with exp(-distance / scale), then blur.

    Foreground pixels (raw >= 0.5) keep a value of at least 0.5.
    """
    if diffusion_scale <= 0:
        raise ParameterError("diffusion_scale must be positive")
    if blur_sigma < 0:
        raise ParameterError("blur_sigma must be non-negative")
    fg = raw.values >= FOREGROUND
    if fg.all():
        return SaliencyMap(np.ones_like(raw.values))
    if not fg.any():
        return SaliencyMap(np.zeros_like(raw.values))
    if approximate:
        dist = distance_transform_cdt(~fg, metric="chessboard").astype(np.float64)
    else:
        dist = distance_transform_edt(~fg)
    out = np.exp(-dist / diffusion_scale)
    if blur_sigma > 0:
        out = gaussian_filter(out, sigma=blur_sigma, mode="nearest")
    out = np.clip(out, 0.0, 1.0)
    out = np.where(fg, np.maximum(out, FOREGROUND), out)
    return SaliencyMap(out)


def downscale(sal: SaliencyMap, l: int) -> np.ndarray:
    """Mean-pool to an l x l grid, returned row-major as a length l*l vector.

    Sides not divisible by l are padded by symmetric reflection first.
    """
    if l <= 0:
        raise ParameterError("grid side must be positive")
    v = sal.values
    h, w = v.shape
    ph, pw = -(-h // l) * l, -(-w // l) * l
    if (ph, pw) != (h, w):
        v = np.pad(v, ((0, ph - h), (0, pw - w)), mode="symmetric")
    cells = v.reshape(l, ph // l, l, pw // l).mean(axis=(1, 3))
    return np.clip(cells, 0.0, 1.0).reshape(-1)


def simulate_failure(sal: SaliencyMap, mode: FailureMode | str, threshold: float = 0.5) -> SaliencyMap:
    mode = FailureMode(mode)
    if mode is FailureMode.reverse:
        return SaliencyMap(1.0 - sal.values)
    if not 0.0 <= threshold <= 1.0:
        raise ParameterError("threshold must lie in [0, 1]")
    return SaliencyMap((sal.values >= threshold).astype(np.float64))


def binarize(sal: SaliencyMap, threshold: float = FOREGROUND) -> BinaryMask:
    return BinaryMask((sal.values >= threshold).astype(np.uint8))


def mean_iou(a: BinaryMask, b: BinaryMask) -> float:
    if a.values.shape != b.values.shape:
        raise DimensionError(f"mask shapes differ: {a.values.shape} vs {b.values.shape}")
    union = np.logical_or(a.values, b.values).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a.values, b.values).sum() / union)


def encode_sal(sal: SaliencyMap) -> bytes:
    header = f"SAL {sal.width} {sal.height}\n".encode("ascii")
    return header + sal.values.astype(SAL_DTYPE).tobytes(order="C")


def decode_sal(blob: bytes) -> SaliencyMap:
    head, sep, payload = blob.partition(b"\n")
    parts = head.decode("ascii", errors="replace").split()
    if not sep or len(parts) != 3 or parts[0] != "SAL":
        raise ParameterError("not a SAL file: bad header")
    try:
        w, h = int(parts[1]), int(parts[2])
    except ValueError:
        raise ParameterError(f"not a SAL file: bad size in header {head!r}") from None
    if w <= 0 or h <= 0:
        raise ParameterError(f"SAL header {head!r} has a non-positive size")
    if len(payload) != w * h * SAL_DTYPE.itemsize:
        raise DimensionError(f"SAL payload holds {len(payload)} bytes, expected {w * h * SAL_DTYPE.itemsize}")
    values = np.frombuffer(payload, dtype=SAL_DTYPE).astype(np.float64).reshape(h, w)
    return SaliencyMap(np.clip(values, 0.0, 1.0))


def write_sal(path: Path, sal: SaliencyMap) -> None:
    atomic_write(Path(path), encode_sal(sal))


def read_sal(path: Path) -> SaliencyMap:
    return decode_sal(Path(path).read_bytes())
