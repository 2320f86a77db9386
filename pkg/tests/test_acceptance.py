"""Acceptance criteria 1-9, one PASS/FAIL line each.

Criteria 1-4, 7 and 9 re-run the relevant unit suites in a subprocess and
check their wall-clock budget. Criteria 5, 6 and 8 read the cached artifacts
of the full phantom experiment from ``$SEGDIFF_ACCEPTANCE_DIR`` (default
``/root/work/acceptance``). Set ``SEGDIFF_RUN_PIPELINE=1`` to train any
missing stage here instead (about two hours on one CPU).
"""
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from segdiff.pipeline import Experiment, ExperimentConfig
from segdiff.train import read_loss_tsv

TESTS = Path(__file__).parent
ACCEPTANCE_DIR = Path(os.environ.get("SEGDIFF_ACCEPTANCE_DIR", "/root/work/acceptance"))


@pytest.fixture
def report(request):
    reporter = request.config.pluginmanager.getplugin("terminalreporter")

    def emit(number: int, ok: bool, detail: str) -> None:
        line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} {detail}"
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        print(line)

    return emit


def run_suite(node_ids: list[str]) -> tuple[int, float, str]:
    start = time.time()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *node_ids],
                          cwd=TESTS.parent, capture_output=True, text=True)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    return proc.returncode, time.time() - start, tail


SUITES = {
    1: (["tests/test_autodiff.py::TestGradientChecks",
         "tests/test_unet.py::TestUNet::test_float64_network_gradient_check"], 120.0),
    2: (["tests/test_diffusion.py::TestForwardMoments"], 60.0),
    3: (["tests/test_diffusion.py::TestSampler::test_telescoping",
         "tests/test_diffusion.py::TestSampler::test_ddim_bit_reproducible",
         "tests/test_diffusion.py::TestDDPMStep::test_final_step_ignores_noise",
         "tests/test_diffusion.py::TestDDIMStep::test_zero_prediction"], 60.0),
    4: (["tests/test_ablation.py::TestAblation::test_conservation_on_many_masks",
         "tests/test_ablation.py::TestAblation::test_background_unchanged",
         "tests/test_ablation.py::TestAblation::test_pattern_uniformity",
         "tests/test_ablation.py::TestPatterns::test_enumeration_size"], 60.0),
    7: (["tests/test_metrics.py::TestFrechet", "tests/test_metrics.py::TestJacobi"], 60.0),
    9: (["tests/test_cli.py::TestGenData::test_same_seed_is_byte_identical",
         "tests/test_cli.py::TestTrain::test_single_thread_run_is_byte_identical",
         "tests/test_cli.py::TestSample::test_determinism",
         "tests/test_phantom.py::TestDataset::test_regeneration_is_byte_identical",
         "tests/test_checkpoint.py::TestRoundTrip::test_forward_bit_exact"], None),
}


class TestPropertySuites:
    @pytest.mark.parametrize("number", sorted(SUITES))
    def test_criterion(self, number, report):
        nodes, budget = SUITES[number]
        code, seconds, tail = run_suite(nodes)
        ok = code == 0 and (budget is None or seconds < budget)
        limit = f" (budget {budget:.0f}s)" if budget else ""
        report(number, ok, f"{tail}; {seconds:.1f}s{limit}")
        assert code == 0, tail
        assert budget is None or seconds < budget


@pytest.fixture(scope="module")
def experiment():
    """The full phantom experiment, loaded from cache (or trained on request)."""
    have_results = (ACCEPTANCE_DIR / "results.tsv").exists()
    if not have_results and os.environ.get("SEGDIFF_RUN_PIPELINE") != "1":
        pytest.skip(f"no experiment artifacts in {ACCEPTANCE_DIR}; run "
                    f"`python3 -m segdiff.pipeline {ACCEPTANCE_DIR}` or set SEGDIFF_RUN_PIPELINE=1")
    exp = Experiment(ACCEPTANCE_DIR, None if have_results else ExperimentConfig())
    exp.run_all()
    return exp


@pytest.mark.slow
class TestPhantomExperiment:
    def test_setup_matches_criteria(self, experiment):
        cfg = experiment.config
        ds = experiment.dataset()
        assert len(ds.indices("train")) >= 2000
        assert ds.manifest.config.image_size == 32
        assert experiment.denoiser("guided-ablated").schedule.T == 200
        assert cfg.n_eval == 200 and len(ds.indices("test")) >= 200

    def test_training_loss_decreases(self, experiment):
        for mode in ("guided-ablated", "unconditional"):
            history = read_loss_tsv(experiment.root / mode / "loss.tsv")
            epochs = np.array([r.epoch for r in history])
            losses = np.array([r.loss for r in history])
            assert losses[epochs == epochs.max()].mean() < losses[epochs == 0].mean()

    def test_criterion_5_faithfulness(self, experiment, report):
        guided = experiment.faithfulness("guided-ablated").metrics["dice_gen_vs_mask"]
        uncond = experiment.faithfulness("unconditional").metrics["dice_gen_vs_mask"]
        ok = guided >= 0.70 and guided - uncond >= 0.30
        report(5, ok, f"Dice(gen, mask) guided-ablated {guided:.4f} (>= 0.70), "
                      f"unconditional {uncond:.4f}, margin {guided - uncond:.4f} (>= 0.30)")
        assert guided >= 0.70
        assert guided - uncond >= 0.30

    def test_criterion_6_quality(self, experiment, report):
        m = experiment.quality().metrics
        ok = m["gap"] <= 0.10
        report(6, ok, f"test Dice real-trained {m['dice_real_trained']:.4f}, synthetic-trained "
                      f"{m['dice_synthetic_trained']:.4f}, gap {m['gap']:.4f} (<= 0.10)")
        assert m["gap"] <= 0.10

    def test_criterion_8_empty_mask(self, experiment, report):
        m = experiment.empty_mask().metrics
        ok = m["fid_ablated"] <= m["fid_unconditional"]
        flag = "" if ok else " [FLAGGED: direction not reproduced]"
        report(8, ok, f"feature FID ablated {m['fid_ablated']:.4f} vs unconditional "
                      f"{m['fid_unconditional']:.4f} over {int(m['n'])} samples{flag}")
        assert m["n"] == 200
        assert m["fid_ablated"] <= m["fid_unconditional"]
