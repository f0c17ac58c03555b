import numpy as np
import pytest

from salvit.config import DataConfig, EvalConfig, RunConfig, TrainConfig
from salvit.encoder import EncoderConfig
from salvit.episodes.synth import gen_dataset
from salvit.fskd import HeadConfig, ModelConfig
from salvit.morph import MorphConfig
from salvit.msa import AttentionConfig
from salvit.saliency import SaliencyConfig

SIDE = 32
SAL = SaliencyConfig(diffusion_scale=2.0, blur_sigma=1.0)


def small_encoder(**overrides) -> EncoderConfig:
    base = dict(image=SIDE, patch=8, stem=2, d_raw=8, d_vit=8, backbone_hidden=4, ffn_hidden=8,
                attention=AttentionConfig(heads=2, head_dim=4),
                morph=MorphConfig(d_e=4, sem_hidden=4, mpg_hidden=4))
    base.update(overrides)
    return EncoderConfig(**base)


def small_model(**encoder_overrides) -> ModelConfig:
    return ModelConfig(encoder=small_encoder(**encoder_overrides),
                       head=HeadConfig(scales=[2, 4], d_v=2, desc_channels=4, desc_convs=1))


@pytest.fixture
def encoder_cfg():
    return small_encoder


@pytest.fixture
def model_cfg():
    return small_model


@pytest.fixture(scope="session")
def dataset():
    return gen_dataset(seed=0, species_count=5, per_species=6, side=SIDE, sal_cfg=SAL)


@pytest.fixture
def run_cfg(tmp_path):
    return RunConfig(
        seed=0,
        out=tmp_path / "run",
        model=small_model(),
        saliency=SAL,
        data=DataConfig(root=tmp_path / "data", species=5, per_species=6),
        train=TrainConfig(episodes=3, log_every=1, lr=1e-3),
        eval=EvalConfig(episodes=2),
    ).resolve()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
