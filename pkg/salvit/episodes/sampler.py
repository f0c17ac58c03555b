from __future__ import annotations
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field

from ..errors import ContractError
from ..fskd import Episode
from .synth import AUX_BASE_ID, BASE_IDS, DEFAULT_NODES, DEFAULT_PATHS, NOVEL_IDS, Dataset, aux_keypoints, random_paths

logger = logging.getLogger(__name__)


class KeypointSet(str, Enum):
    base = "base"
    novel = "novel"


class SpeciesPool(str, Enum):
    seen = "seen"
    unseen = "unseen"


class AuxMode(str, Enum):
    none = "none"
    default = "default"
    random = "random"


class EpisodeSpec(BaseModel):
    K: int = Field(1, ge=1, description="Support images per episode.")
    keypoints: KeypointSet = KeypointSet.base
    species: SpeciesPool = SpeciesPool.seen
    Z: int = Field(1, ge=1, description="Query images per episode.")
    aux: AuxMode = AuxMode.none
    aux_nodes: list[float] = Field(default_factory=lambda: list(DEFAULT_NODES))


@dataclass(frozen=True)
class SpeciesSplit:
    seen: tuple[int, ...]
    unseen: tuple[int, ...]

    @classmethod
    def rotating(cls, species_count: int, unseen: int = 4) -> "SpeciesSplit":
        held = unseen % species_count
        return cls(tuple(s for s in range(species_count) if s != held), (held,))

    def check(self) -> None:
        if set(self.seen) & set(self.unseen):
            raise ContractError(f"seen and unseen species overlap: {sorted(set(self.seen) & set(self.unseen))}")
        if set(BASE_IDS) & set(NOVEL_IDS):
            raise ContractError("base and novel keypoint sets overlap")


def keypoint_ids(which: KeypointSet) -> list[int]:
    return list(BASE_IDS if KeypointSet(which) is KeypointSet.base else NOVEL_IDS)


def sample_episode(ds: Dataset, spec: EpisodeSpec, split: SpeciesSplit, rng: np.random.Generator,
                   episode_id: int = 0) -> Episode:
    """K supports and Z queries of one species from the requested pool, restricted to one keypoint set."""
    split.check()
    pool = split.seen if spec.species is SpeciesPool.seen else split.unseen
    if not pool:
        raise ContractError(f"the {spec.species.value} species pool is empty")
    species = int(rng.choice(pool))
    members = ds.indices([species])
    if members.size == 0:
        raise ContractError(f"species {species} has no images")
    need = spec.K + spec.Z
    replace = members.size < need
    if replace:
        logger.warning("species %d has %d images for a %d-image episode; drawing with replacement",
                       species, members.size, need)
    picked = rng.choice(members, size=need, replace=replace)
    forbidden = set(split.unseen if spec.species is SpeciesPool.seen else split.seen)
    if any(int(ds.species[i]) in forbidden for i in picked):
        raise ContractError("episode drew an image from the held-out species pool")

    ids = keypoint_ids(spec.keypoints)
    paths: Optional[list[tuple[int, int]]] = None
    if spec.aux is AuxMode.default:
        paths = list(DEFAULT_PATHS)
    elif spec.aux is AuxMode.random:
        paths = random_paths(rng)

    points, visible = [], []
    for i in picked:
        pts, vis = ds.points[i][ids], ds.visible[i][ids]
        if paths is not None:
            aux, aux_vis = aux_keypoints(ds.points[i], ds.visible[i], paths, spec.aux_nodes)
            pts, vis = np.concatenate([pts, aux]), np.concatenate([vis, aux_vis])
        points.append(pts)
        visible.append(vis)
    type_ids = list(ids)
    if paths is not None:
        type_ids += [AUX_BASE_ID + k for k in range(len(paths) * len(spec.aux_nodes))]

    samples = [ds.sample(int(i)) for i in picked]
    points_arr, visible_arr = np.stack(points), np.stack(visible).astype(bool)
    return Episode(
        supports=samples[:spec.K],
        queries=samples[spec.K:],
        type_ids=type_ids,
        support_points=points_arr[:spec.K],
        support_visible=visible_arr[:spec.K],
        query_points=points_arr[spec.K:],
        query_visible=visible_arr[spec.K:],
        id=episode_id,
    )
