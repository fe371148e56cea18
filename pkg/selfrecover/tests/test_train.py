import json

import pytest
import torch

from conftest import tiny_config_dict
from modules.degrade import DegradationSpec, apply_degradation
from modules.errors import CheckpointError, ConfigurationError, TrainingHalted
from selfrecover_config import LossWeights, RunConfig
from selfrecover_train import (
    FORMAT_VERSION, ImageFolderDataset, SelfRecoveryPipeline, Trainer, load_checkpoint, loss_e, loss_total, loss_w,
    pipeline_from_checkpoint, save_checkpoint, smoothed, split_paths,
)
from selfrecover_utils import list_images, smooth_corpus
from test_core_inn import randomize

UNIT_TOTAL = 150 + 10 + 10 + 10 + 20 + 1


@pytest.fixture
def rng() -> torch.Generator:
    return torch.Generator().manual_seed(3)


@pytest.fixture
def dataset(tiny_config, image_dir) -> ImageFolderDataset:
    train, _ = split_paths(tiny_config)
    return ImageFolderDataset(train, tiny_config.data.image_size)


def unit_components(value: float = 1.0) -> dict[str, torch.Tensor]:
    return {name: torch.tensor(value) for name in ("w", "e", "tv", "wg", "ie", "tl")}


class TestLosses:
    def test_loss_w_identical(self, rng):
        img = torch.rand(2, 3, 8, 8, generator=rng)
        assert loss_w(img, img).item() == 0.0

    def test_loss_w_uniform_offset(self):
        assert loss_w(torch.full((1, 3, 4, 4), 0.5), torch.zeros(1, 3, 4, 4)).item() == pytest.approx(0.25)

    def test_loss_w_adds_weighted_hook(self, rng):
        a, b = torch.rand(1, 3, 4, 4, generator=rng), torch.rand(1, 3, 4, 4, generator=rng)
        plain = loss_w(a, b)
        hooked = loss_w(a, b, perceptual=lambda x, y: torch.tensor(0.5), weight=10.0)
        assert hooked.item() == pytest.approx(plain.item() + 5.0)

    def test_loss_e_ignores_tampered_pixels(self, rng):
        secret = torch.rand(1, 3, 8, 8, generator=rng)
        estimate = secret.clone()
        mask = torch.zeros(1, 1, 8, 8)
        mask[..., :4, :] = 1
        estimate[..., :4, :] += 5.0
        assert loss_e(secret, estimate, mask).item() == 0.0

    def test_loss_e_is_mean_over_kept_pixels(self):
        secret = torch.zeros(1, 3, 4, 4)
        estimate = torch.full((1, 3, 4, 4), 0.5)
        mask = torch.zeros(1, 1, 4, 4)
        mask[..., :2, :] = 1
        assert loss_e(secret, estimate, mask).item() == pytest.approx(0.25)
        assert loss_e(secret, estimate, torch.zeros(4, 4)).item() == pytest.approx(0.25)

    def test_loss_e_fully_masked(self, caplog):
        secret, estimate = torch.zeros(1, 3, 4, 4), torch.ones(1, 3, 4, 4)
        assert loss_e(secret, estimate, torch.ones(1, 1, 4, 4)).item() == 0.0
        assert "whole image" in caplog.text

    def test_total_of_unit_components(self):
        assert loss_total(unit_components(), LossWeights()).item() == pytest.approx(UNIT_TOTAL)
        assert loss_total(unit_components(0.0), LossWeights()).item() == 0.0

    def test_total_is_weighted_sum(self, rng):
        weights = LossWeights()
        values = torch.rand(6, generator=rng, dtype=torch.float64)
        components = dict(zip(("w", "e", "tv", "wg", "ie", "tl"), values))
        expected = sum(getattr(weights, name) * float(v) for name, v in components.items())
        assert loss_total(components, weights).item() == pytest.approx(expected, rel=1e-12)

    def test_total_is_linear_in_each_component(self):
        weights = LossWeights()
        base = loss_total(unit_components(), weights).item()
        for name in ("w", "e", "tv", "wg", "ie", "tl"):
            bumped = unit_components()
            bumped[name] = torch.tensor(3.0)
            assert loss_total(bumped, weights).item() - base == pytest.approx(2 * getattr(weights, name))

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")], ids=["nan", "inf"])
    def test_non_finite_component_halts(self, bad):
        components = unit_components()
        components["tl"] = torch.tensor(bad)
        with pytest.raises(TrainingHalted) as info:
            loss_total(components, LossWeights())
        assert info.value.component == "tl"

    def test_unknown_component(self):
        with pytest.raises(ConfigurationError):
            loss_total({"style": torch.tensor(1.0)}, LossWeights())


class TestPipeline:
    def test_untrained_container_equals_cover(self, tiny_config, rng):
        pipeline = SelfRecoveryPipeline(tiny_config)
        img = torch.rand(2, 3, 16, 16, generator=rng)
        with torch.no_grad():
            marked = pipeline.watermark(img)
        assert (marked.container - img).abs().max().item() < 1e-6

    def test_ablation_children(self, tmp_path):
        data = tiny_config_dict(str(tmp_path))
        data["model"].update(scramble="none", use_wg=False, use_ie=False)
        pipeline = SelfRecoveryPipeline(RunConfig.model_validate(data))
        assert {name for name, _ in pipeline.named_children()} == {"iw", "noise", "ie", "tl"}
        assert list(pipeline.ie.parameters()) == []

    def test_restore_with_truth_mask(self, tiny_config, rng):
        pipeline = SelfRecoveryPipeline(tiny_config).eval()
        attacked = torch.rand(1, 3, 16, 16, generator=rng)
        truth = torch.zeros(1, 1, 16, 16)
        with torch.no_grad():
            outputs = pipeline.recover(attacked)
            restored = pipeline.restore(attacked, outputs, mode="truth", truth=truth)
        assert torch.equal(restored, attacked)
        with pytest.raises(ConfigurationError):
            pipeline.restore(attacked, outputs, mode="truth")

    def test_gradients_match_finite_differences(self):
        """Embed, blur, extract, localize and refine a 4x4 image with every loss term attached."""
        data = {
            "data": {"image_size": 4},
            "model": {
                "iw_blocks": 1, "iw_width": 2, "noise_estimator": "zero", "use_wg": False,
                "shuffle_key": {"seed": 0, "patch": 2},
                "enhancer": {"blocks": 1, "width": 2},
                "localizer": {"levels": 1, "base": 2},
            },
        }
        pipeline = randomize(SelfRecoveryPipeline(RunConfig.model_validate(data)), std=0.1, seed=4).double().eval()
        truth = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
        truth[..., :2, :2] = 1
        blur = DegradationSpec(kind="gaussian_filter", params={"kernel": 3, "sigma": 1.0}, differentiable=True)

        def total(x):
            marked = pipeline.watermark(x)
            rec = pipeline.recover(apply_degradation(marked.container, blur))
            components = {
                "w": loss_w(marked.container, x),
                "e": loss_e(marked.scrambled_secret, rec.scrambled_secret_estimate, truth),
                "ie": loss_w(rec.enhanced, x),
                "tl": torch.nn.functional.binary_cross_entropy(rec.soft_mask, truth),
            }
            return loss_total(components, LossWeights())

        img = (torch.rand(1, 3, 4, 4, generator=torch.Generator().manual_seed(8), dtype=torch.float64) * 0.6 + 0.2)
        assert torch.autograd.gradcheck(total, (img.requires_grad_(),), eps=1e-6, atol=1e-5, rtol=1e-3)


class TestTrainer:
    def test_split_paths(self, tiny_config, image_dir):
        train, heldout = split_paths(tiny_config)
        images = list_images(image_dir)
        assert train == images[:6]
        assert heldout == images[6:8]

    def test_split_from_lists(self, tmp_path, image_dir):
        (tmp_path / "train.txt").write_text("img_03.png\nimg_01.png\n")
        data = tiny_config_dict(str(image_dir))
        data["data"]["train_list"] = str(tmp_path / "train.txt")
        train, _ = split_paths(RunConfig.model_validate(data))
        assert [p.name for p in train] == ["img_03.png", "img_01.png"]

    def test_training_step(self, tiny_config, dataset):
        trainer = Trainer(tiny_config, dataset)
        record = trainer.training_step(next(iter(trainer.loader())))
        assert record.iteration == 1
        assert record.total > 0
        assert record.noise is None
        assert record.degradation in {"gaussian_noise", "jpeg", "gaussian_filter", "median_filter"}
        for name in ("iw", "wg", "ie", "tl"):
            grads = [p.grad for p in getattr(trainer.pipeline, name).parameters() if p.grad is not None]
            assert grads and all(torch.isfinite(g).all() for g in grads)
            assert any(g.abs().sum() > 0 for g in grads)

    def test_noise_supervision_term(self, tmp_path, dataset):
        data = tiny_config_dict(str(tmp_path))
        data["model"]["noise_supervision"] = True
        trainer = Trainer(RunConfig.model_validate(data), dataset)
        record = trainer.training_step(next(iter(trainer.loader())))
        assert record.noise is not None and record.noise >= 0

    def test_same_seed_same_run(self, tiny_config, dataset):
        runs = []
        for _ in range(2):
            trainer = Trainer(tiny_config, dataset)
            batches = iter(trainer.loader())
            records = [trainer.training_step(next(batches)) for _ in range(2)]
            runs.append((records, trainer.pipeline.state_dict()))
        (records_a, state_a), (records_b, state_b) = runs
        assert records_a == records_b
        assert all(torch.equal(state_a[k], state_b[k]) for k in state_a)

    def test_non_finite_loss_leaves_parameters(self, tiny_config, dataset):
        trainer = Trainer(tiny_config, dataset, perceptual=lambda a, b: torch.tensor(float("nan")))
        before = {k: v.detach().clone() for k, v in trainer.pipeline.named_parameters()}
        with pytest.raises(TrainingHalted) as info:
            trainer.training_step(next(iter(trainer.loader())))
        assert info.value.component == "w"
        assert info.value.iteration == 0
        assert all(torch.equal(before[k], v) for k, v in trainer.pipeline.named_parameters())

    def test_run_writes_log_and_checkpoint(self, tiny_config, dataset):
        trainer = Trainer(tiny_config, dataset)
        records = trainer.run(tiny_config.io.out_dir, show_progress=False)
        log = (tiny_config.io.checkpoint_path.parent / tiny_config.io.log_name).read_text().splitlines()
        assert len(records) == len(log) == 4
        first = json.loads(log[0])
        assert first["iteration"] == 1
        assert "noise" not in first and "degradation_specs" not in first
        assert load_checkpoint(tiny_config.io.checkpoint_path).iteration == 4

    def test_run_saves_halted_state(self, tiny_config, dataset):
        trainer = Trainer(tiny_config, dataset, perceptual=lambda a, b: torch.tensor(float("inf")))
        with pytest.raises(TrainingHalted):
            trainer.run(tiny_config.io.out_dir, iterations=1, show_progress=False)
        assert load_checkpoint(tiny_config.io.checkpoint_path.parent / "halted.pt").iteration == 0

    def test_debug_records_parameters(self, tiny_config, dataset):
        trainer = Trainer(tiny_config, dataset, debug=True)
        record = trainer.training_step(next(iter(trainer.loader())))
        assert record.degradation_specs and "params" in record.degradation_specs[0]


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tiny_config, tmp_path):
        pipeline = randomize(SelfRecoveryPipeline(tiny_config), std=0.05, seed=2)
        path = save_checkpoint(tmp_path / "model.pt", pipeline, tiny_config, iteration=7)
        checkpoint = load_checkpoint(path)
        assert checkpoint.iteration == 7
        assert checkpoint.format_version == FORMAT_VERSION
        assert checkpoint.shuffle_key == tiny_config.model.shuffle_key
        assert checkpoint.config == tiny_config
        restored = pipeline_from_checkpoint(checkpoint)
        original = pipeline.state_dict()
        assert all(torch.equal(original[k], v) for k, v in restored.state_dict().items())

    def test_inference_replays_after_load(self, tiny_config, tmp_path):
        pipeline = randomize(SelfRecoveryPipeline(tiny_config), std=0.05, seed=2).eval()
        restored = pipeline_from_checkpoint(load_checkpoint(save_checkpoint(tmp_path / "m.pt", pipeline, tiny_config)))
        img = smooth_corpus(1, 16, seed=3)[0][None]
        with torch.no_grad():
            a, b = pipeline.watermark(img), restored.watermark(img)
            ra, rb = pipeline.recover(a.container), restored.recover(b.container)
        assert torch.equal(a.container, b.container)
        assert torch.equal(ra.enhanced, rb.enhanced)
        assert torch.equal(ra.soft_mask, rb.soft_mask)

    def test_optimizer_state_saved(self, tiny_config, dataset, tmp_path):
        trainer = Trainer(tiny_config, dataset)
        trainer.training_step(next(iter(trainer.loader())))
        checkpoint = load_checkpoint(trainer.save(tmp_path / "c.pt"))
        assert checkpoint.optimizer is not None and checkpoint.iteration == 1

    def test_wrong_version_rejected(self, tiny_config, tmp_path):
        path = save_checkpoint(tmp_path / "m.pt", SelfRecoveryPipeline(tiny_config), tiny_config)
        payload = torch.load(path, weights_only=True)
        payload["format_version"] = FORMAT_VERSION + 1
        torch.save(payload, path)
        with pytest.raises(CheckpointError, match="format version"):
            load_checkpoint(path)

    def test_unreadable_file(self, tmp_path):
        path = tmp_path / "broken.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing.pt")

    def test_mismatched_modules(self, tiny_config, tmp_path):
        path = save_checkpoint(tmp_path / "m.pt", SelfRecoveryPipeline(tiny_config), tiny_config)
        checkpoint = load_checkpoint(path)
        del checkpoint.modules["tl"]
        with pytest.raises(CheckpointError):
            pipeline_from_checkpoint(checkpoint)


def test_smoothed():
    assert smoothed([1.0, 3.0, 5.0], window=2) == [1.0, 2.0, 4.0]


@pytest.mark.slow
def test_desk_training_lowers_loss(tmp_path):
    from selfrecover_utils import save_image

    for k, img in enumerate(smooth_corpus(200, 64, seed=0)):
        save_image(tmp_path / "images" / f"{k:03d}.png", img)
    config = RunConfig.model_validate({"data": {"image_dir": str(tmp_path / "images")}, "io": {"out_dir": str(tmp_path / "run")}})
    train, _ = split_paths(config)
    records = Trainer(config, ImageFolderDataset(train, 64)).run(config.io.out_dir, show_progress=False)
    curve = smoothed([r.total for r in records])
    assert curve[-1] < curve[99]
