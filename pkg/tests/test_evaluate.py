import numpy as np
import pytest

from segdiff.checkpoint import ModelCheckpoint
from segdiff.diffusion import SamplerConfig, desk_schedule
from segdiff.evaluate import (
    DiffusionGenerator, EvalReport, EvaluationError, FeatureEncoder, NoiseGenerator, OracleGenerator,
    eval_empty_mask, eval_faithfulness, eval_quality, feature_fid, organ_found_fraction,
)
from segdiff.phantom import PhantomConfig, PhantomDataset
from segdiff.train import SegmenterConfig, train_segmenter
from segdiff.unet import UNet, UNetConfig

FAST_SEG = SegmenterConfig(epochs=2, batch_size=8, base_channels=8)


@pytest.fixture(scope="module")
def dataset():
    return PhantomDataset.from_config(PhantomConfig(seed=21), 120)


@pytest.fixture(scope="module")
def segmenter(dataset):
    x, m = dataset.split("train")
    vx, vm = dataset.split("validation")
    return train_segmenter(x, m, vx, vm, 4, SegmenterConfig(epochs=8, base_lr=3e-3)).segmenter()


def denoiser_checkpoint(mode="guided", seed=0):
    net = UNet(UNetConfig.denoiser(base_channels=8, channel_multipliers=(1, 2), time_embed_dim=16),
               np.random.default_rng(seed))
    net.params["conv_out.weight"].data[:] = 0.02
    return ModelCheckpoint.from_model(net, schedule=desk_schedule(), mode=mode)


class TestFaithfulness:
    def test_oracle_generator_agrees_with_real(self, dataset, segmenter):
        x, m = dataset.split("test")
        report = eval_faithfulness(OracleGenerator(x), segmenter, x, m, 4)
        assert report.metrics["dice_gen_vs_realpred"] == 1.0
        assert report.metrics["dice_gen_vs_mask"] > 0.5

    def test_noise_generator_scores_low(self, dataset, segmenter):
        x, m = dataset.split("test")
        report = eval_faithfulness(NoiseGenerator(), segmenter, x, m, 4)
        assert report.metrics["dice_gen_vs_mask"] < 0.2

    def test_missing_real_images(self, dataset, segmenter):
        x, m = dataset.split("test")
        with pytest.raises(EvaluationError, match="paired"):
            eval_faithfulness(OracleGenerator(x), segmenter, x[:-1], m, 4)

    def test_per_class_entries(self, dataset, segmenter):
        x, m = dataset.split("test")
        report = eval_faithfulness(OracleGenerator(x), segmenter, x, m, 4)
        assert {f"dice_gen_vs_mask.class{c}" for c in (1, 2, 3)} <= set(report.metrics)


class TestQuality:
    def test_oracle_gap_is_zero(self, dataset):
        held_x, _ = dataset.split("heldout")
        report = eval_quality(dataset, OracleGenerator(held_x), FAST_SEG, dataset.indices("train"))
        assert report.metrics["gap"] == 0.0

    def test_overlapping_generator_split(self, dataset):
        held_x, _ = dataset.split("heldout")
        with pytest.raises(EvaluationError, match="overlap"):
            eval_quality(dataset, OracleGenerator(held_x), FAST_SEG, dataset.indices("heldout")[:3])


class TestFeatureFID:
    def test_encoder_dimension(self, segmenter):
        assert FeatureEncoder(segmenter).dim == 32

    def test_identical_sets(self, dataset, segmenter):
        x, _ = dataset.split("train")
        assert abs(feature_fid(FeatureEncoder(segmenter), x[:60], x[:60])) <= 1e-6

    def test_noise_is_far_from_real(self, dataset, segmenter):
        x, m = dataset.split("train")
        enc = FeatureEncoder(segmenter)
        noise = NoiseGenerator()(m[:60], 0)
        assert feature_fid(enc, x[:60], noise) > feature_fid(enc, x[:40], x[40:80])


class TestEmptyMask:
    def test_zero_samples(self, dataset, segmenter):
        report = eval_empty_mask(None, None, segmenter, dataset.split("test")[0], 0, (32, 32))
        assert report.metrics == {"n": 0}

    def test_real_images_have_organ(self, dataset, segmenter):
        assert organ_found_fraction(segmenter, dataset.split("test")[0]) == 1.0

    def test_report_fields(self, dataset, segmenter):
        x = dataset.split("train")[0]

        def real(labels, seed=None):
            return x[:len(labels)]

        report = eval_empty_mask(real, NoiseGenerator(), segmenter, dataset.split("train")[0][40:], 40, (32, 32))
        assert report.metrics["fid_ablated"] < report.metrics["fid_unconditional"]
        assert report.metrics["ablated_not_worse"] == 1.0
        assert "not comparable" in report.to_text()


class TestGenerator:
    def test_thread_count_does_not_change_output(self, dataset):
        ckpt = denoiser_checkpoint()
        m = dataset.masks[:7]
        a = DiffusionGenerator(ckpt, SamplerConfig("ddim", 5, 1), batch_size=3)(m)
        b = DiffusionGenerator(ckpt, SamplerConfig("ddim", 5, 1), batch_size=3, threads=3)(m)
        assert a.tobytes() == b.tobytes()

    def test_unconditional_ignores_masks(self, dataset):
        gen = DiffusionGenerator(denoiser_checkpoint("unconditional"), SamplerConfig("ddim", 4, 0))
        a = gen(dataset.masks[:3])
        b = gen(np.zeros_like(dataset.masks[:3]))
        assert a.tobytes() == b.tobytes()

    def test_conditional_uses_masks(self, dataset):
        gen = DiffusionGenerator(denoiser_checkpoint("guided"), SamplerConfig("ddim", 4, 0))
        assert gen(dataset.masks[:3]).tobytes() != gen(np.zeros_like(dataset.masks[:3])).tobytes()

    def test_rejects_segmenter(self):
        net = UNet(UNetConfig.segmenter(4))
        with pytest.raises(EvaluationError):
            DiffusionGenerator(ModelCheckpoint.from_model(net, kind="segmenter", mode="segmenter"))


class TestReport:
    def test_text_and_tsv(self, tmp_path):
        report = EvalReport("demo", {"dice_x": 0.5, "n": 3}, {"seed": "1"}, ["hello"])
        report.write(tmp_path)
        text = (tmp_path / "report.txt").read_text()
        assert "dice_x = 0.500000" in text and "provenance.seed = 1" in text
        rows = (tmp_path / "report.tsv").read_text().splitlines()
        assert rows[0] == "metric\tvalue" and rows[1] == "dice_x\t0.5"

    def test_out_of_range_dice(self):
        with pytest.raises(EvaluationError):
            EvalReport("bad", {"dice_x": 1.5}).check()
