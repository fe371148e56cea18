import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from modules.degrade import DegradationSpec, MaskSpec, apply_degradation, generate_mask, load_presets, random_degradation, splice
from modules.errors import (
    CheckpointError, ConfigurationError, DataError, MissingPairsError, OutputError, ShapeError, TrainingHalted,
)
from modules.localize import binarize
from modules.metrics import ImageMetrics, MetricReport, auc, f1, iou, psnr, ssim
from modules.shuffle import ShuffleKey, fft_magnitude_spectrum, high_frequency_ratio, shuffle
from selfrecover_config import RunConfig, apply_overrides, config_to_json, load_config
from selfrecover_train import (
    ImageFolderDataset, SelfRecoveryPipeline, Trainer, load_checkpoint, pipeline_from_checkpoint, split_paths,
)
from selfrecover_utils import (
    echo_config, ensure_output_dir, load_image, quantize, resolve_inputs, save_image, save_mask, smooth_corpus,
    write_to_file,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_HALTED = 1
EXIT_DATA = 2
EXIT_OUTPUT = 3
EXIT_CONFIG = 4
EXIT_SIZE = 5
EXIT_PAIRS = 6

DEFAULT_PATCH_SIZES = [16, 8, 4, 2, 1]

console = Console()


def _spec_label(spec: DegradationSpec) -> str:
    params = "_".join(f"{k}{v:g}" for k, v in sorted(spec.params.items()))
    return f"{spec.kind}_{params}" if params else spec.kind


class SelfRecoveryRunner:
    """Runs one CLI workflow against a resolved configuration."""

    def __init__(self, args: argparse.Namespace, config: RunConfig):
        """Initialize the runner.

        Args:
            args: Parsed command line arguments
            config: Configuration with command-line overrides applied
        """
        self.args = args
        self.config = config
        self.out_dir = Path(config.io.out_dir)
        self.debug = getattr(args, "debug", False)

    def _prepare_out(self, directory: Path | None = None) -> Path:
        out = ensure_output_dir(directory or self.out_dir)
        echo_config(config_to_json(self.config), out)
        return out

    def _load_pipeline(self) -> SelfRecoveryPipeline:
        """Load the configured checkpoint; its ``model`` section replaces the one in the run config."""
        checkpoint = load_checkpoint(self.config.io.checkpoint_path)
        merged = self.config.model_dump(mode="json")
        merged["model"] = checkpoint.config.model.model_dump(mode="json")
        self.config = RunConfig.model_validate(merged)
        logger.debug(f"Loaded checkpoint from iteration {checkpoint.iteration}")
        return pipeline_from_checkpoint(checkpoint)

    def _images(self, path: str) -> list[tuple[Path, torch.Tensor]]:
        size = self.config.data.image_size
        resize = self.args.resize or self.config.data.resize
        return [(p, load_image(p, size, resize)) for p in resolve_inputs(path)]

    def train(self) -> None:
        out = self._prepare_out()
        train_paths, _ = split_paths(self.config)
        dataset = ImageFolderDataset(train_paths, self.config.data.image_size, self.config.data.resize)
        logger.info(f"Training on {len(dataset)} images for {self.config.train.iterations} iterations")
        trainer = Trainer(self.config, dataset, debug=self.debug)
        trainer.run(out, show_progress=not self.args.quiet)

    @torch.no_grad()
    def embed(self) -> None:
        pipeline = self._load_pipeline()
        out = self._prepare_out()
        table = Table(title="Containers")
        table.add_column("image")
        table.add_column("PSNR (dB)", justify="right")
        for path, img in self._images(self.args.inputs):
            marked = pipeline.watermark(img[None])
            container = quantize(marked.container)
            save_image(out / f"{path.stem}.png", container)
            if self.args.emit_intermediates:
                save_image(out / f"{path.stem}_secret.png", marked.secret)
                save_image(out / f"{path.stem}_secret_scrambled.png", marked.scrambled_secret)
            table.add_row(path.name, f"{psnr(container, img[None]):.2f}")
        console.print(table)

    @torch.no_grad()
    def recover(self) -> None:
        pipeline = self._load_pipeline()
        out = self._prepare_out()
        threshold = self.config.eval.threshold
        mode = "soft" if self.config.eval.composite_mask == "soft" else "binary"
        if self.config.eval.composite_mask == "truth":
            logger.warning("recover has no ground-truth mask; compositing with the binary predicted mask instead")
        for path, attacked in self._images(self.args.inputs):
            batch = attacked[None]
            rec = pipeline.recover(batch)
            restored = pipeline.restore(batch, rec, threshold, mode)
            save_image(out / f"{path.stem}_recovered.png", restored)
            save_mask(out / f"{path.stem}_mask.png", binarize(rec.soft_mask, threshold))
            if self.args.emit_intermediates:
                save_image(out / f"{path.stem}_scrambled_secret_est.png", rec.scrambled_secret_estimate)
                save_image(out / f"{path.stem}_secret_est.png", rec.secret_estimate)
                save_image(out / f"{path.stem}_original_est.png", rec.original_estimate)
                save_image(out / f"{path.stem}_enhanced.png", rec.enhanced)
            logger.info(f"Recovered {path.name}: {float(rec.soft_mask.mean()):.3f} of pixels flagged")

    def _eval_pairs(self) -> list[tuple[str, torch.Tensor, torch.Tensor | None]]:
        """(name, original, saved container or None) for every evaluation image."""
        size = self.config.data.image_size
        resize = self.args.resize or self.config.data.resize
        if self.args.images:
            originals = resolve_inputs(self.args.images)
        else:
            _, originals = split_paths(self.config)
        if not originals:
            raise MissingPairsError("No original images to evaluate")
        containers = {}
        if self.args.containers:
            containers = {p.stem: p for p in resolve_inputs(self.args.containers)}
            missing = sorted(set(containers) - {p.stem for p in originals})
            if missing:
                raise MissingPairsError(f"Containers without an original: {', '.join(missing)}")
        pairs = []
        for path in originals:
            if not path.exists():
                raise MissingPairsError(f"Original {path} does not exist")
            original = load_image(path, size, resize)
            container = load_image(containers[path.stem], size, resize) if path.stem in containers else None
            if containers and container is None:
                raise MissingPairsError(f"No container for original {path.name}")
            pairs.append((path.stem, original, container))
        if len(pairs) == 1 and self.config.eval.attack == "splice":
            logger.warning(f"Only one evaluation image: {pairs[0][0]} is spliced with itself and the splice changes nothing")
        return pairs

    def _evaluate_once(self, pipeline: SelfRecoveryPipeline, pairs: list, name: str, mask_spec: MaskSpec,
                       fixed: DegradationSpec | None) -> MetricReport:
        cfg = self.config.eval
        presets = load_presets(Path(self.config.degrade.preset_file) if self.config.degrade.preset_file else None)
        torch_rng = torch.Generator().manual_seed(cfg.seed)
        mask_rng = np.random.default_rng(cfg.seed)
        report = MetricReport(name=name, threshold=cfg.threshold, composite_mask=cfg.composite_mask)
        size = self.config.data.image_size
        for index, (stem, original, saved) in enumerate(pairs):
            org = original[None]
            container = saved[None] if saved is not None else pipeline.watermark(org).container
            container = quantize(container) if cfg.quantize_containers else container.clamp(0.0, 1.0)
            if cfg.attack == "splice":
                truth = torch.from_numpy(generate_mask(mask_spec, size, size, mask_rng))[None, None]
                donor = pairs[(index + 1) % len(pairs)][1][None]
                tampered = splice(container, donor, truth)
            else:
                truth = torch.zeros((1, 1, size, size))
                tampered = container
            if fixed is not None:
                attacked, specs = apply_degradation(tampered, fixed, torch_rng), [fixed]
            else:
                attacked, specs = random_degradation(tampered, cfg.preset, torch_rng, presets)
            rec = pipeline.recover(attacked)
            restored = pipeline.restore(attacked, rec, cfg.threshold, cfg.composite_mask, truth)
            predicted = binarize(rec.soft_mask, cfg.threshold)
            report.images.append(ImageMetrics(
                image=stem,
                container_psnr=psnr(container, org),
                container_ssim=ssim(container, org),
                attacked_psnr=psnr(attacked, org),
                recovered_psnr=psnr(restored, org),
                recovered_ssim=ssim(restored, org),
                m_psnr=psnr(restored, org, truth),
                iou=iou(predicted, truth),
                f1=f1(predicted, truth),
                auc=auc(rec.soft_mask, truth),
                attacks=[{"attack": cfg.attack}] + [spec.model_dump() for spec in specs],
            ))
        return report

    def _write_report(self, report: MetricReport, directory: Path) -> None:
        out = self._prepare_out(directory)
        write_to_file(out / "report.json", report.model_dump_json(indent=2), quiet=True)
        write_to_file(out / "report.tsv", report.to_tsv(), quiet=True)
        table = Table(title=f"{report.name} (n={len(report.images)})")
        table.add_column("metric")
        table.add_column("mean", justify="right")
        for metric, value in report.means.items():
            table.add_row(metric, "NA" if value is None else f"{value:.4f}")
        console.print(table)

    @torch.no_grad()
    def evaluate(self) -> None:
        pipeline = self._load_pipeline()
        pairs = self._eval_pairs()
        cfg = self.config.eval
        mask_spec = self.config.degrade.mask
        self._write_report(self._evaluate_once(pipeline, pairs, cfg.preset, mask_spec, None), self.out_dir)
        for spec in cfg.degradations or []:
            label = _spec_label(spec)
            self._write_report(self._evaluate_once(pipeline, pairs, label, mask_spec, spec), self.out_dir / label)
        for ratio in cfg.mask_ratios or []:
            label = f"ratio_{ratio:.2f}"
            ratio_spec = mask_spec.model_copy(update={"strategy": "shapes", "target_ratio": ratio})
            self._write_report(self._evaluate_once(pipeline, pairs, label, ratio_spec, None), self.out_dir / label)

    def analyze_spectrum(self) -> None:
        out = self._prepare_out()
        if self.args.synthetic:
            size = self.config.data.image_size
            corpus = smooth_corpus(self.args.synthetic, size, self.config.train.seed)
            images = [(f"smooth_{k:03d}", img) for k, img in enumerate(corpus)]
        elif self.args.inputs:
            images = [(p.stem, load_image(p)) for p in resolve_inputs(self.args.inputs)]
        else:
            raise DataError("analyze-spectrum needs an image path or --synthetic N")
        patches = self.args.patch_sizes
        rows = ["image\tpatch\tratio\tunshuffled"]
        sums = {p: 0.0 for p in patches}
        for name, img in images:
            batch = img[None]
            baseline = high_frequency_ratio(batch)
            for patch in patches:
                key = ShuffleKey(seed=self.config.model.shuffle_key.seed, patch=patch)
                shuffled = shuffle(batch, key)
                ratio = high_frequency_ratio(shuffled)
                sums[patch] += ratio
                rows.append(f"{name}\t{patch}\t{ratio:.6f}\t{baseline:.6f}")
                spectrum = fft_magnitude_spectrum(shuffled, log=True)
                spectrum = spectrum / spectrum.max().clamp_min(1e-12)
                save_image(out / f"{name}_p{patch}.png", spectrum[None].expand(3, -1, -1))
        table = Table(title="Mean high-frequency ratio")
        table.add_column("patch", justify="right")
        table.add_column("ratio", justify="right")
        for patch in patches:
            table.add_row(str(patch), f"{sums[patch] / len(images):.4f}")
        console.print(table)
        write_to_file(out / "ratios.tsv", "\n".join(rows) + "\n", quiet=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Self-recovering neural image watermarking")
    parser.add_argument("--config", type=str, help="Path to a JSON run configuration (defaults to the desk profile)")
    parser.add_argument("--seed", type=int, help="Override the training and evaluation seed")
    parser.add_argument("--checkpoint", type=str, help="Checkpoint to write (train) or read (other commands)")
    parser.add_argument("--out", type=str, help="Output directory")
    parser.add_argument("--workers", type=int, help="Data loading workers")
    parser.add_argument("--debug", action="store_true", help="Verbose logging and per-step degradation specs in the training log")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Train every pipeline module jointly")
    train.add_argument("--quiet", action="store_true", help="Hide the progress bar")

    for name, help_text in (("embed", "Embed the self-recovery watermark into images"),
                            ("recover", "Localize tampering and restore attacked images")):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("inputs", type=str, help="Image file or directory")
        cmd.add_argument("--emit-intermediates", action="store_true", help="Also write intermediate images")
        cmd.add_argument("--resize", action="store_true", help="Center-crop and resize images of another size")

    evaluate = sub.add_parser("evaluate", help="Attack containers, recover them and report metrics")
    evaluate.add_argument("--images", type=str, help="Original images (defaults to the held-out split)")
    evaluate.add_argument("--containers", type=str, help="Saved containers, paired with originals by file name")
    evaluate.add_argument("--resize", action="store_true", help="Center-crop and resize images of another size")

    spectrum = sub.add_parser("analyze-spectrum", help="Spectra and high-frequency ratios of shuffled images")
    spectrum.add_argument("inputs", type=str, nargs="?", help="Image file or directory")
    spectrum.add_argument("--patch-sizes", type=int, nargs="+", default=DEFAULT_PATCH_SIZES, help="Shuffle patch sizes")
    spectrum.add_argument("--synthetic", type=int, default=0, help="Analyze N generated smooth images instead")
    return parser


def configure_logging(debug: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if debug else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def main(argv: list[str] | None = None) -> int:
    """Main entry point. Returns the process exit code."""
    args = build_parser().parse_args(argv)
    configure_logging(args.debug)
    try:
        config = apply_overrides(load_config(args.config), args.seed, args.checkpoint, args.out, args.workers)
        runner = SelfRecoveryRunner(args, config)
        {
            "train": runner.train,
            "embed": runner.embed,
            "recover": runner.recover,
            "evaluate": runner.evaluate,
            "analyze-spectrum": runner.analyze_spectrum,
        }[args.command]()
    except TrainingHalted as e:
        logger.error(str(e))
        return EXIT_HALTED
    except MissingPairsError as e:
        logger.error(str(e))
        return EXIT_PAIRS
    except (DataError, CheckpointError) as e:
        logger.error(str(e))
        return EXIT_DATA
    except OutputError as e:
        logger.error(str(e))
        return EXIT_OUTPUT
    except (ConfigurationError, ValidationError) as e:
        logger.error(str(e))
        return EXIT_CONFIG
    except ShapeError as e:
        logger.error(str(e))
        return EXIT_SIZE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
