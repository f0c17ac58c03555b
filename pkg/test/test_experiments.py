import csv
import math

import pytest

from salvit.encoder import Ablation
from salvit.episodes.experiments import (ablate, gradcheck_suite, gradient_cases, occlusion_eval, saliency_sweep,
                                         transduce_table, write_rows)
from salvit.fskd import KeypointDetector
from salvit.robust import OcclusionType
from salvit.transduce import Strategy, TransductiveConfig


def read(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_gradient_suite_covers_every_differentiable_piece():
    names = set(gradient_cases())
    assert {"soft_msa", "soft_msa_rbf", "sem_mpg_mcm", "salvit_block", "descriptor", "L_cls", "L_os"} <= names
    assert {"align_prob_kl", "align_feat_mmd", "align_recon"} <= names
    assert "align_none" not in names


def test_gradient_suite_passes():
    worst = gradcheck_suite(seed=0, points=10)
    assert set(worst) == set(gradient_cases())
    assert all(err < 1e-4 for err in worst.values()), worst


def test_gradient_suite_subset():
    assert set(gradcheck_suite(points=1, names=["L_os"])) == {"L_os"}


def test_write_rows(tmp_path):
    path = write_rows(tmp_path / "x" / "t.csv", ["a", "b"], [[1, "q"], [2, "r"]])
    assert read(path) == [{"a": "1", "b": "q"}, {"a": "2", "b": "r"}]


def test_saliency_sweep_rows(run_cfg, model_cfg, dataset):
    model = KeypointDetector(model_cfg(), seed=0)
    rows = saliency_sweep(run_cfg, model, dataset)
    assert [r[0] for r in rows] == ["clean"] + ["threshold"] * 5 + ["reverse"]
    assert [r[1] for r in rows[1:-1]] == [0.1, 0.3, 0.5, 0.7, 0.9]
    table = read(run_cfg.out / "saliency_sweep.csv")
    assert len(table) == 7
    assert not any(math.isnan(float(r["pck"])) for r in table)


def test_zero_occlusion_matches_clean_scores(run_cfg, model_cfg, dataset):
    model = KeypointDetector(model_cfg(), seed=0)
    results = occlusion_eval(run_cfg, model, dataset, types=[OcclusionType.gray_box, OcclusionType.background_crop],
                             levels=[0.0, 1.0])
    assert results[("gray_box", 0.0)] == results[("background_crop", 0.0)]
    assert len(read(run_cfg.out / "occlusion.csv")) == 4


def test_transduce_table(run_cfg, model_cfg, dataset):
    cfg = run_cfg.model_copy(update={"transductive": TransductiveConfig(Z=3, W=2, eta=4)})
    results = transduce_table(cfg, KeypointDetector(model_cfg(), seed=0), dataset)
    assert set(results) == {s.value for s in Strategy}
    assert [r["strategy"] for r in read(cfg.out / "transduce.csv")] == ["inductive", "avg", "soft", "gt"]


@pytest.mark.parametrize("variants", [[Ablation.full, Ablation.cnn_only]])
def test_ablate_writes_one_row_per_run(run_cfg, dataset, variants):
    scores = ablate(run_cfg, dataset, variants, seeds=[0])
    assert set(scores) == {"full", "cnn_only"}
    rows = read(run_cfg.out / "ablation.csv")
    assert [(r["variant"], r["seed"]) for r in rows] == [("full", "0"), ("cnn_only", "0")]
    assert (run_cfg.out / "full-s0" / "model.ckpt").exists()
