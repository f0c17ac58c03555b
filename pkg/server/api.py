from __future__ import annotations
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field, ValidationError
from pathlib import Path
from typing import Optional
import logging
import os

import numpy as np

# Load environment variables from .env file
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass  # python-dotenv not installed, skip loading

from salvit.checkpoint import load_detector
from salvit.encoder import square_pad
from salvit.episodes.synth import model_saliency
from salvit.errors import DimensionError, SalViTError
from salvit.fskd import Episode, KeypointDetector, Sample
from salvit.saliency import SaliencyConfig

logger = logging.getLogger(__name__)

app = FastAPI(title="SalViT keypoint detector", version="0.1.0")


class ImageIn(BaseModel):
    rgb: list = Field(..., description="(3, H, W) values in [0, 1].")
    saliency: list = Field(..., description="(H, W) values in [0, 1].")


class SupportIn(ImageIn):
    points: list[list[float]] = Field(..., description="(N, 2) keypoints as (x, y) pixels.")
    visible: Optional[list[bool]] = None


class DetectIn(BaseModel):
    supports: list[SupportIn] = Field(..., min_length=1)
    queries: list[ImageIn] = Field(..., min_length=1)
    type_ids: Optional[list[int]] = None
    preprocess_saliency: bool = Field(True, description="Diffuse and blur raw masks before encoding.")


class KeypointOut(BaseModel):
    type_id: int
    x: float
    y: float
    sigma: list[list[float]]
    score: float


def _image(img: ImageIn, side: int, sal_cfg: Optional[SaliencyConfig]) -> tuple[np.ndarray, np.ndarray]:
    rgb, sal = np.asarray(img.rgb, dtype=np.float64), np.asarray(img.saliency, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3 or sal.shape != rgb.shape[1:]:
        raise DimensionError(f"rgb {rgb.shape} and saliency {sal.shape} do not describe one image")
    rgb, sal = square_pad(rgb, sal, side)
    return rgb, model_saliency(sal, sal_cfg).astype(np.float64)


def build_episode(inp: DetectIn, side: int) -> Episode:
    sal_cfg = SaliencyConfig() if inp.preprocess_saliency else None
    N = len(inp.supports[0].points)
    if any(len(s.points) != N for s in inp.supports):
        raise DimensionError("every support must carry the same number of keypoints")
    type_ids = inp.type_ids if inp.type_ids is not None else list(range(N))
    if len(type_ids) != N:
        raise DimensionError(f"{len(type_ids)} type ids for {N} keypoints")
    supports, points, visible = [], [], []
    for s in inp.supports:
        rgb, sal = _image(s, side, sal_cfg)
        pts = np.asarray(s.points, dtype=np.float64).reshape(N, 2)
        vis = np.asarray(s.visible if s.visible is not None else [True] * N, dtype=bool)
        supports.append(Sample(rgb, sal, pts, vis, np.array([0.0, 0.0, side, side])))
        points.append(pts)
        visible.append(vis)
    queries = []
    for q in inp.queries:
        rgb, sal = _image(q, side, sal_cfg)
        queries.append(Sample(rgb, sal, np.zeros((N, 2)), np.zeros(N, dtype=bool), np.array([0.0, 0.0, side, side])))
    Z = len(queries)
    return Episode(supports, queries, type_ids, np.stack(points), np.stack(visible),
                   np.zeros((Z, N, 2)), np.zeros((Z, N), dtype=bool))


@app.on_event("startup")
def startup():
    path = os.environ.get("SALVIT_CHECKPOINT")
    app.state.model = load_detector(Path(path)) if path else None
    if app.state.model is None:
        logger.warning("SALVIT_CHECKPOINT is not set; /detect will refuse requests")


@app.post("/detect")
def detect(inp: DetectIn) -> dict:
    model: Optional[KeypointDetector] = app.state.model
    if model is None:
        raise HTTPException(503, detail="no checkpoint loaded")
    try:
        episode = build_episode(inp, model.l0)
        preds = model.detect_episode(episode)
    except (SalViTError, ValidationError) as e:
        raise HTTPException(400, detail=str(e))
    return {"predictions": [[KeypointOut(type_id=p.type_id, x=float(p.x[0]), y=float(p.x[1]),
                                         sigma=p.sigma.tolist(), score=p.score).model_dump() for p in per_query]
                            for per_query in preds]}


@app.get("/health")
def health():
    return {"ok": True, "model": app.state.model is not None if hasattr(app.state, "model") else False}
