from __future__ import annotations
import json
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, Field

from .episodes.sampler import AuxMode, KeypointSet
from .errors import ParameterError
from .fskd import ModelConfig
from .robust import MAAConfig, OcclusionSpec
from .saliency import SaliencyConfig
from .transduce import TransductiveConfig
from .utils import short_hash


class DataConfig(BaseModel):
    root: Path = Field(Path("data"), description="Dataset directory (dataset.npz + saliency/).")
    saliency_dir: Optional[Path] = Field(None, description="External SAL directory replacing the rendered saliency.")
    species: int = Field(5, ge=1)
    per_species: int = Field(200, ge=1)
    unseen: int = Field(4, ge=0, description="Index of the held-out species.")


class TrainConfig(BaseModel):
    episodes: int = Field(3000, ge=1)
    lr: float = Field(1e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    K: int = Field(1, ge=1)
    Z: int = Field(1, ge=1, description="Query images per training episode.")
    aux: AuxMode = AuxMode.default
    log_every: int = Field(50, ge=1)
    fixed_episode: bool = Field(False, description="Reuse the first sampled episode for every step (overfit check).")


class EvalConfig(BaseModel):
    episodes: int = Field(200, ge=1)
    K: int = Field(1, ge=1)
    Z: int = Field(1, ge=1)
    keypoints: KeypointSet = KeypointSet.novel
    with_base: bool = Field(True, description="Also score base keypoints and report the harmonic mean.")
    tau: float = Field(0.1, gt=0)
    occlusion_levels: list[float] = Field(default_factory=lambda: [0.0, 0.3, 0.5, 1.0])
    sweep_thresholds: list[float] = Field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])


class RunConfig(BaseModel):
    seed: int = 0
    out: Path = Field(Path("runs"), description="Directory receiving metrics, predictions and checkpoints.")
    backup_dir: Optional[Path] = None
    model: ModelConfig = Field(default_factory=ModelConfig)
    saliency: SaliencyConfig = Field(default_factory=SaliencyConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    transductive: TransductiveConfig = Field(default_factory=TransductiveConfig)
    occlusion: OcclusionSpec = Field(default_factory=OcclusionSpec)
    maa: MAAConfig = Field(default_factory=MAAConfig)

    def resolve(self):
        self.out = self.out.resolve()
        self.data.root = self.data.root.resolve()
        if self.backup_dir is None:
            self.backup_dir = self.out / ".backups"
        self.out.mkdir(parents=True, exist_ok=True)
        return self

    def config_hash(self) -> str:
        return short_hash(self.model_dump(mode="json", exclude={"out", "backup_dir"}))


def parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def parse_lines(text: str) -> dict[str, Any]:
    """`dotted.key = value` lines into a nested dict; later keys win."""
    tree: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ParameterError(f"config line {n}: expected `key = value`")
        node = tree
        *parents, leaf = key.split(".")
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ParameterError(f"config line {n}: {part} is already a value")
            node = child
        node[leaf] = parse_value(value.strip())
    return tree


def load_config(path: Optional[Path] = None, seed: Optional[int] = None, out: Optional[Path] = None) -> RunConfig:
    tree = parse_lines(Path(path).read_text()) if path else {}
    if seed is not None:
        tree["seed"] = seed
    if out is not None:
        tree["out"] = str(out)
    return RunConfig.model_validate(tree)
