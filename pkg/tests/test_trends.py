"""Desk-scale trend checks over three seeds.

Each strategy starts from the same pretrained encoder pair. These runs take hours
on a CPU and are deselected by default; run them with ``pytest -m slow``.
"""
from dartfx.slad.experiment import load_config, load_pretrain_config, run_seeds
from dartfx.slad.pretrain import write_pretrained
from pathlib import Path
import numpy as np
import pytest

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).parent.parent / "configs"
SEEDS = [0, 1, 2]
METHODS = {
    "finetune": "desk_finetune.yaml",
    "lora": "desk_lora.yaml",
    "slad": "desk_slad.yaml",
    "two_step_lora": "desk_two_step_lora.yaml",
    "two_step_probe": "desk_two_step_probe.yaml",
}


@pytest.fixture(scope="module")
def summaries(tmp_path_factory):
    root = tmp_path_factory.mktemp("trends")
    write_pretrained(load_pretrain_config(CONFIGS / "desk_pretrain.yaml"), root / "pair")
    checkpoints = {"teacher_checkpoint": str(root / "pair" / "teacher.ckpt"),
                   "student_checkpoint": str(root / "pair" / "student.ckpt")}
    results = {}
    for method, filename in METHODS.items():
        config = load_config(CONFIGS / filename, checkpoints)
        runs = run_seeds(config, SEEDS, root / "runs")
        assert all(r.status == 0 for r in runs)
        results[method] = [r.summary for r in runs]
    return results


def mean(summaries, pick):
    return float(np.mean([pick(s) for s in summaries]))


def test_representation_drift_ordering(summaries):
    drift = {m: mean(summaries[m], lambda s: s["cka"]["mean_aligned_delta"]) for m in ("finetune", "lora", "slad")}
    assert drift["finetune"] - drift["lora"] >= 0.005
    assert drift["lora"] - drift["slad"] >= 0.005
    assert drift["slad"] >= 0.0


def test_slad_student_keeps_up_with_two_step_students(summaries):
    slad = mean(summaries["slad"], lambda s: s["test_accuracy"]["student"])
    for method in ("two_step_lora", "two_step_probe"):
        assert slad >= mean(summaries[method], lambda s: s["test_accuracy"]["student"]) - 0.005


def test_slad_is_cheaper_than_two_step(summaries):
    assert mean(summaries["slad"], lambda s: s["total_passes"]) < mean(summaries["two_step_lora"], lambda s: s["total_passes"])
    assert mean(summaries["slad"], lambda s: s["wall_clock"]) <= 0.8 * mean(summaries["two_step_lora"], lambda s: s["wall_clock"])
