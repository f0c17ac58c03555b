"""Procedural four-legged animals with part-exact saliency and keypoints.

Each species fixes body proportions and a palette; each image draws a pose. The
ground-truth saliency is the union of the rendered parts.
"""
from __future__ import annotations
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..errors import ParameterError
from ..fskd import Sample
from ..saliency import SaliencyConfig, SaliencyMap, preprocess, read_sal, write_sal
from ..utils import atomic_write, derive_rng

logger = logging.getLogger(__name__)

KEYPOINT_NAMES = [
    "left_eye", "right_eye", "left_ear", "right_ear", "nose",
    "front_left_knee", "front_right_knee", "back_left_knee", "back_right_knee",
    "front_left_paw", "front_right_paw", "back_left_paw", "back_right_paw",
    "front_left_leg", "front_right_leg", "back_left_leg", "back_right_leg",
]
N_KEYPOINTS = len(KEYPOINT_NAMES)
NOVEL_IDS = (0, 1, 5, 6, 7, 8)
BASE_IDS = tuple(i for i in range(N_KEYPOINTS) if i not in NOVEL_IDS)
# leg tops to paws, nose to each ear
DEFAULT_PATHS = ((13, 9), (14, 10), (15, 11), (16, 12), (4, 2), (4, 3))
DEFAULT_NODES = (0.25, 0.5, 0.75)
AUX_BASE_ID = N_KEYPOINTS


@dataclass(frozen=True)
class SyntheticSpecies:
    id: int
    body_aspect: float      # semi-minor / semi-major
    head_ratio: float       # head radius / body semi-major
    leg_ratio: float        # leg length / body semi-major
    leg_width: float        # capsule radius / body semi-major
    body_color: np.ndarray
    head_color: np.ndarray
    leg_color: np.ndarray
    background: np.ndarray

    @classmethod
    def draw(cls, seed: int, species: int) -> "SyntheticSpecies":
        rng = derive_rng(seed, 0, species)
        body = rng.uniform(0.2, 0.9, 3)
        return cls(
            id=species,
            body_aspect=float(rng.uniform(0.38, 0.6)),
            head_ratio=float(rng.uniform(0.38, 0.55)),
            leg_ratio=float(rng.uniform(0.8, 1.15)),
            leg_width=float(rng.uniform(0.1, 0.15)),
            body_color=body,
            head_color=np.clip(body + rng.uniform(-0.2, 0.2, 3), 0, 1),
            leg_color=np.clip(body * rng.uniform(0.6, 0.9), 0, 1),
            background=rng.uniform(0.1, 0.9, 3),
        )


@dataclass
class Dataset:
    rgb: np.ndarray          # (N, 3, side, side) uint8
    gt_saliency: np.ndarray  # (N, side, side) uint8 part union
    saliency: np.ndarray     # (N, side, side) float32, model-ready
    points: np.ndarray       # (N, N_KEYPOINTS, 2)
    visible: np.ndarray      # (N, N_KEYPOINTS) bool
    boxes: np.ndarray        # (N, 4) x0, y0, x1, y1
    species: np.ndarray      # (N,)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.species)

    @property
    def side(self) -> int:
        return self.rgb.shape[-1]

    def sample(self, i: int) -> Sample:
        return Sample(
            rgb=self.rgb[i].astype(np.float64) / 255.0,
            saliency=self.saliency[i].astype(np.float64),
            points=self.points[i].astype(np.float64),
            visible=self.visible[i].copy(),
            box=self.boxes[i].astype(np.float64),
            species=int(self.species[i]),
            id=i,
        )

    def indices(self, species: Sequence[int]) -> np.ndarray:
        return np.flatnonzero(np.isin(self.species, list(species)))


def _rotate(v: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _capsule(xx: np.ndarray, yy: np.ndarray, p: np.ndarray, q: np.ndarray, r: float) -> np.ndarray:
    d = q - p
    t = np.clip(((xx - p[0]) * d[0] + (yy - p[1]) * d[1]) / max(float(d @ d), 1e-12), 0.0, 1.0)
    return (xx - p[0] - t * d[0]) ** 2 + (yy - p[1] - t * d[1]) ** 2 <= r * r


def render(species: SyntheticSpecies, rng: np.random.Generator, side: int = 96
           ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One posed animal: (rgb (3, side, side) float, part union (side, side) bool, points (17, 2), box)."""
    ys, xs = np.mgrid[0:side, 0:side]
    xx, yy = xs + 0.5, ys + 0.5
    a = side * rng.uniform(0.2, 0.26)
    b = a * species.body_aspect
    r = a * species.head_ratio
    leg = a * species.leg_ratio
    w = a * species.leg_width
    facing = 1.0 if rng.random() < 0.5 else -1.0
    tilt = rng.uniform(-0.12, 0.12)
    front = a + 1.6 * r + 1.0
    back = max(a, 0.55 * a + 0.65 * leg) + w + 1.0
    lo, hi = (back, side - front) if facing > 0 else (front, side - back)
    centre = np.array([
        rng.uniform(lo, hi),
        rng.uniform(0.85 * b + r + 5.0, side - 0.6 * b - leg - w - 5.0),
    ])

    def body_point(u: float, v: float) -> np.ndarray:
        return centre + _rotate(np.array([u * facing, v]), tilt)

    head = body_point(a + 0.55 * r, -0.85 * b)
    pts = np.zeros((N_KEYPOINTS, 2))
    pts[0] = head + np.array([facing * 0.35 * r, -0.2 * r])
    pts[1] = head + np.array([facing * 0.1 * r, -0.25 * r])
    pts[2] = head + _rotate(np.array([0.0, -0.8 * r]), -0.35 * facing)
    pts[3] = head + _rotate(np.array([0.0, -0.8 * r]), 0.2 * facing)
    pts[4] = head + np.array([facing * 0.85 * r, 0.15 * r])
    tops = [body_point(0.55 * a, 0.55 * b), body_point(0.3 * a, 0.6 * b),
            body_point(-0.55 * a, 0.55 * b), body_point(-0.3 * a, 0.6 * b)]
    for k, top in enumerate(tops):
        swing = rng.uniform(-0.35, 0.35)
        bend = rng.uniform(0.0, 0.3) * (1 if k < 2 else -1) * facing
        knee = top + _rotate(np.array([0.0, 0.5 * leg]), swing)
        paw = knee + _rotate(np.array([0.0, 0.5 * leg]), swing + bend)
        pts[13 + k], pts[5 + k], pts[9 + k] = top, knee, paw

    body_mask = ((((xx - centre[0]) * np.cos(tilt) + (yy - centre[1]) * np.sin(tilt)) / a) ** 2
                 + ((-(xx - centre[0]) * np.sin(tilt) + (yy - centre[1]) * np.cos(tilt)) / b) ** 2) <= 1.0
    head_mask = (xx - head[0]) ** 2 + (yy - head[1]) ** 2 <= r * r
    leg_masks = [_capsule(xx, yy, pts[13 + k], pts[5 + k], w) | _capsule(xx, yy, pts[5 + k], pts[9 + k], w)
                 for k in range(4)]

    img = np.empty((side, side, 3))
    img[:] = species.background
    for _ in range(int(rng.integers(2, 5))):
        cx, cy = rng.uniform(0, side, 2)
        rad = rng.uniform(3, 10)
        img[(xx - cx) ** 2 + (yy - cy) ** 2 <= rad * rad] = rng.uniform(0, 1, 3)
    for k in (2, 3, 0, 1):  # far legs first
        img[leg_masks[k]] = species.leg_color * (0.85 if k % 2 else 1.0)
    img[body_mask] = species.body_color
    img[head_mask] = species.head_color
    img = np.clip(img + rng.normal(0.0, 0.02, img.shape), 0.0, 1.0)

    fg = body_mask | head_mask | np.logical_or.reduce(leg_masks)
    rows, cols = np.nonzero(fg)
    x0 = min(cols.min(), np.floor(pts[:, 0].min()))
    y0 = min(rows.min(), np.floor(pts[:, 1].min()))
    x1 = max(cols.max() + 1, np.ceil(pts[:, 0].max()))
    y1 = max(rows.max() + 1, np.ceil(pts[:, 1].max()))
    return img.transpose(2, 0, 1), fg, pts, np.array([x0, y0, x1, y1], dtype=np.float64)


def model_saliency(raw: np.ndarray, sal_cfg: Optional[SaliencyConfig]) -> np.ndarray:
    sal = SaliencyMap(np.asarray(raw, dtype=np.float64))
    if sal_cfg is None:
        return sal.values.astype(np.float32)
    return preprocess(sal, sal_cfg.diffusion_scale, sal_cfg.blur_sigma, sal_cfg.approximate).values.astype(np.float32)


def gen_dataset(seed: int, species_count: int = 5, per_species: int = 200, side: int = 96,
                sal_cfg: Optional[SaliencyConfig] = None) -> Dataset:
    if species_count < 1 or per_species < 1:
        raise ParameterError("species count and images per species must be at least 1")
    n = species_count * per_species
    rgb = np.empty((n, 3, side, side), dtype=np.uint8)
    gt = np.empty((n, side, side), dtype=np.uint8)
    points = np.empty((n, N_KEYPOINTS, 2))
    boxes = np.empty((n, 4))
    species_ids = np.repeat(np.arange(species_count), per_species)
    for s in range(species_count):
        kind = SyntheticSpecies.draw(seed, s)
        for k in range(per_species):
            i = s * per_species + k
            img, fg, pts, box = render(kind, derive_rng(seed, 1, s, k), side)
            rgb[i] = np.round(img * 255.0).astype(np.uint8)
            gt[i] = fg
            points[i], boxes[i] = pts, box
    visible = (points >= 0).all(axis=-1) & (points < side).all(axis=-1)
    saliency = np.stack([model_saliency(g, sal_cfg) for g in gt])
    logger.info("generated %d images over %d species (seed %d)", n, species_count, seed)
    return Dataset(rgb, gt, saliency, points, visible, boxes, species_ids, seed)


def aux_keypoints(points: np.ndarray, visible: np.ndarray, paths: Sequence[tuple[int, int]] = DEFAULT_PATHS,
                  nodes: Sequence[float] = DEFAULT_NODES) -> tuple[np.ndarray, np.ndarray]:
    """(1 - t) u1 + t u2 for each path and node; paths with an invisible endpoint come back invisible."""
    points = np.asarray(points, dtype=np.float64)
    out = np.zeros((len(paths) * len(nodes), 2))
    vis = np.zeros(len(paths) * len(nodes), dtype=bool)
    for p, (a, b) in enumerate(paths):
        ok = bool(visible[a] and visible[b])
        for k, t in enumerate(nodes):
            out[p * len(nodes) + k] = (1.0 - t) * points[a] + t * points[b]
            vis[p * len(nodes) + k] = ok
    return out, vis


def random_paths(rng: np.random.Generator, ids: Sequence[int] = BASE_IDS, count: int = 6) -> list[tuple[int, int]]:
    paths = []
    for _ in range(count):
        a, b = rng.choice(len(ids), size=2, replace=False)
        paths.append((int(ids[a]), int(ids[b])))
    return paths


def save_dataset(ds: Dataset, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    buf = io.BytesIO()
    np.savez_compressed(buf, rgb=ds.rgb, gt_saliency=ds.gt_saliency, points=ds.points, visible=ds.visible,
                        boxes=ds.boxes, species=ds.species, seed=np.array(ds.seed))
    atomic_write(out_dir / "dataset.npz", buf.getvalue())
    for i in range(len(ds)):
        write_sal(out_dir / "saliency" / f"{i:05d}.sal", SaliencyMap(ds.gt_saliency[i].astype(np.float64)))
    return out_dir


def load_dataset(data_dir: Path, sal_cfg: Optional[SaliencyConfig] = None,
                 saliency_dir: Optional[Path] = None) -> Dataset:
    """Load images and keypoints; saliency comes from SAL files (an external directory if given)."""
    data_dir = Path(data_dir)
    with np.load(data_dir / "dataset.npz") as z:
        arrays = {k: z[k] for k in z.files}
    sal_dir = Path(saliency_dir) if saliency_dir else data_dir / "saliency"
    raws = []
    for i, gt in enumerate(arrays["gt_saliency"]):
        path = sal_dir / f"{i:05d}.sal"
        if path.exists():
            raws.append(read_sal(path).values)
        else:
            logger.warning("missing saliency file %s; using the rendered part union", path)
            raws.append(gt.astype(np.float64))
    saliency = np.stack([model_saliency(r, sal_cfg) for r in raws])
    return Dataset(arrays["rgb"], arrays["gt_saliency"], saliency, arrays["points"], arrays["visible"],
                   arrays["boxes"], arrays["species"], int(arrays["seed"]))
