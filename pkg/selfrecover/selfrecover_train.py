"""Loss assembly, the end-to-end pipeline graph, the joint training loop and checkpoints."""

import logging
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from modules.degrade import PresetTable, generate_mask_batch, load_presets, random_degradation, splice
from modules.enhance import build_enhancer
from modules.errors import CheckpointError, ConfigurationError, NumericError, TrainingHalted
from modules.generator import WatermarkGenerator, tv_loss
from modules.localize import TamperLocalizer, bce_loss, binarize, composite
from modules.shuffle import Scrambler, ShuffleKey
from modules.watermark import InvertibleWatermarker, NoiseEstimator
from selfrecover_config import LossWeights, RunConfig, config_to_json
from selfrecover_utils import list_images, load_image, read_file_content, write_to_file

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

PerceptualHook = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

LOSS_COMPONENTS = ("w", "e", "tv", "wg", "ie", "tl", "noise")


def loss_w(container: torch.Tensor, cover: torch.Tensor, perceptual: PerceptualHook | None = None,
           weight: float = 10.0) -> torch.Tensor:
    """Mean squared error between container and cover, plus ``weight * perceptual`` when a hook is given."""
    loss = F.mse_loss(container, cover)
    if perceptual is not None:
        loss = loss + weight * perceptual(container, cover)
    return loss


def loss_ie(enhanced: torch.Tensor, original: torch.Tensor, perceptual: PerceptualHook | None = None,
            weight: float = 10.0) -> torch.Tensor:
    return loss_w(enhanced, original, perceptual, weight)


def loss_e(secret: torch.Tensor, secret_estimate: torch.Tensor, tamper_mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over untampered pixels (mask 0), all channels.

    The mask is broadcast over channels. A mask covering every pixel gives 0.
    """
    mask = tamper_mask
    while mask.dim() < secret.dim():
        mask = mask.unsqueeze(0) if mask.dim() < 3 else mask.unsqueeze(1)
    keep = (1.0 - mask.to(secret.dtype)).expand_as(secret)
    count = keep.sum()
    sq = (secret - secret_estimate) ** 2 * keep
    if count <= 0:
        logger.warning("Tamper mask covers the whole image; extraction loss is 0")
        return sq.sum() * 0.0
    return sq.sum() / count


def loss_total(components: dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the given loss components.

    Raises:
        TrainingHalted: If a component is NaN or infinite
    """
    total = None
    for name, value in components.items():
        if name not in LOSS_COMPONENTS:
            raise ConfigurationError(f"Unknown loss component: {name}")
        value = torch.as_tensor(value)
        if not torch.isfinite(value).all():
            raise TrainingHalted(name)
        term = getattr(weights, name) * value
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


@dataclass
class WatermarkOutputs:
    secret: torch.Tensor
    scrambled_secret: torch.Tensor
    container: torch.Tensor
    noise: torch.Tensor


@dataclass
class RecoveryOutputs:
    noise_estimate: torch.Tensor
    cover_estimate: torch.Tensor
    scrambled_secret_estimate: torch.Tensor
    secret_estimate: torch.Tensor
    original_estimate: torch.Tensor
    enhanced: torch.Tensor
    soft_mask: torch.Tensor


class SelfRecoveryPipeline(nn.Module):
    """Every trainable part of the pipeline plus the secret scrambler.

    Children are stored under the names used in checkpoints: ``iw``, ``wg``
    (only with ``use_wg``), ``noise``, ``ie`` and ``tl``.
    """

    def __init__(self, config: RunConfig):
        super().__init__()
        m = config.model
        self.use_wg = m.use_wg
        self.iw = InvertibleWatermarker(num_blocks=m.iw_blocks, width=m.iw_width)
        if m.use_wg:
            self.wg = WatermarkGenerator(num_blocks=m.wg.blocks, patch=m.wg.patch, embed_dim=m.wg.embed_dim,
                                         heads=m.wg.heads, depth=m.wg.depth)
        self.noise = NoiseEstimator(mode=m.noise_estimator, width=m.iw_width)
        if m.use_ie:
            self.ie = build_enhancer(m.enhancer.architecture, blocks=m.enhancer.blocks, width=m.enhancer.width)
        else:
            self.ie = build_enhancer("identity")
        self.tl = TamperLocalizer(levels=m.localizer.levels, base=m.localizer.base)
        self.scrambler = Scrambler(m.scramble, m.shuffle_key)

    def make_secret(self, original: torch.Tensor) -> torch.Tensor:
        return self.wg(original) if self.use_wg else original

    def watermark(self, original: torch.Tensor) -> WatermarkOutputs:
        """Secret generation, scrambling and embedding. The container is not clipped."""
        secret = self.make_secret(original)
        scrambled = self.scrambler.scramble(secret)
        container, noise = self.iw.embed(original, scrambled)
        return WatermarkOutputs(secret=secret, scrambled_secret=scrambled, container=container, noise=noise)

    def recover(self, attacked: torch.Tensor) -> RecoveryOutputs:
        noise_estimate = self.noise(attacked)
        cover_estimate, scrambled_estimate = self.iw.extract(attacked, noise_estimate)
        secret_estimate = self.scrambler.unscramble(scrambled_estimate)
        original_estimate = self.wg.inverse(secret_estimate) if self.use_wg else secret_estimate
        return RecoveryOutputs(
            noise_estimate=noise_estimate,
            cover_estimate=cover_estimate,
            scrambled_secret_estimate=scrambled_estimate,
            secret_estimate=secret_estimate,
            original_estimate=original_estimate,
            enhanced=self.ie(original_estimate),
            soft_mask=self.tl(attacked, scrambled_estimate),
        )

    def restore(self, attacked: torch.Tensor, outputs: RecoveryOutputs, threshold: float = 0.5,
                mode: str = "binary", truth: torch.Tensor | None = None) -> torch.Tensor:
        """Composite the enhanced image into the attacked one under the chosen mask."""
        if mode == "binary":
            mask = binarize(outputs.soft_mask, threshold)
        elif mode == "soft":
            mask = outputs.soft_mask
        elif mode == "truth":
            if truth is None:
                raise ConfigurationError("Ground-truth compositing needs the tamper mask")
            mask = truth
        else:
            raise ConfigurationError(f"Unknown composite mask mode: {mode}")
        return composite(outputs.enhanced.clamp(0.0, 1.0), attacked, mask)

    def module_states(self) -> dict[str, dict]:
        return {name: child.state_dict() for name, child in self.named_children()}

    def load_module_states(self, states: dict[str, dict]) -> None:
        expected = {name for name, _ in self.named_children()}
        if set(states) != expected:
            raise CheckpointError(f"Checkpoint holds modules {sorted(states)}, pipeline expects {sorted(expected)}")
        for name, child in self.named_children():
            child.load_state_dict(states[name])


class StepRecord(BaseModel):
    """One line of the training log."""
    model_config = ConfigDict(extra="forbid")

    iteration: int
    w: float
    e: float
    tv: float
    wg: float
    ie: float
    tl: float
    noise: float | None = None
    total: float
    degradation: str
    degradation_specs: list[dict] | None = None


@dataclass
class PipelineCheckpoint:
    config: RunConfig
    shuffle_key: ShuffleKey
    iteration: int
    modules: dict[str, dict]
    optimizer: dict | None = None
    format_version: int = FORMAT_VERSION


def save_checkpoint(path: str | Path, pipeline: SelfRecoveryPipeline, config: RunConfig, iteration: int = 0,
                    optimizer: torch.optim.Optimizer | None = None) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "config": config_to_json(config),
        "shuffle_key": {"seed": config.model.shuffle_key.seed, "patch": config.model.shuffle_key.patch},
        "iteration": iteration,
        "modules": pipeline.module_states(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    torch.save(payload, target)
    logger.debug(f"Saved checkpoint at iteration {iteration} to {target}")
    return target


def load_checkpoint(path: str | Path) -> PipelineCheckpoint:
    """Read a checkpoint written by ``save_checkpoint``.

    Raises:
        CheckpointError: If the file is missing, unreadable or has another format version
    """
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a pipeline checkpoint")
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"Checkpoint format version {payload['format_version']} != supported {FORMAT_VERSION}")
    try:
        config = RunConfig.model_validate_json(payload["config"])
        key = ShuffleKey(**payload["shuffle_key"])
    except ValueError as e:
        raise CheckpointError(f"Checkpoint {path} carries an invalid configuration: {e}") from e
    return PipelineCheckpoint(
        config=config, shuffle_key=key, iteration=int(payload["iteration"]),
        modules=payload["modules"], optimizer=payload.get("optimizer"),
    )


def pipeline_from_checkpoint(checkpoint: PipelineCheckpoint) -> SelfRecoveryPipeline:
    pipeline = SelfRecoveryPipeline(checkpoint.config)
    pipeline.load_module_states(checkpoint.modules)
    pipeline.eval()
    return pipeline


class ImageFolderDataset(Dataset):
    """Images of one split, loaded on access as ``(3, S, S)`` tensors."""

    def __init__(self, paths: list[Path], size: int, resize: bool = False):
        self.paths = paths
        self.size = size
        self.resize = resize

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, index: int) -> torch.Tensor:
        return load_image(self.paths[index], self.size, self.resize)


def _read_list(list_file: str, image_dir: Path) -> list[Path]:
    names = [line.strip() for line in read_file_content(list_file).splitlines() if line.strip()]
    return [image_dir / name for name in names]


def split_paths(config: RunConfig) -> tuple[list[Path], list[Path]]:
    """Training and held-out image paths. Lists win over counts on the sorted directory listing."""
    data = config.data
    image_dir = Path(data.image_dir)
    images = list_images(image_dir)
    train = _read_list(data.train_list, image_dir) if data.train_list else images[: data.train_count]
    if data.heldout_list:
        heldout = _read_list(data.heldout_list, image_dir)
    else:
        heldout = images[data.train_count: data.train_count + data.heldout_count]
    return train, heldout


def _infinite(loader: DataLoader) -> Iterator[torch.Tensor]:
    while True:
        yield from loader


@dataclass
class Trainer:
    """Joint training of every pipeline module with a single Adam optimizer.

    Degradations draw from a ``torch.Generator`` and masks from a numpy generator,
    both seeded from ``config.train.seed``, so runs repeat exactly in single-worker mode.
    """
    config: RunConfig
    dataset: Dataset
    perceptual: PerceptualHook | None = None
    debug: bool = False
    presets: PresetTable | None = None
    pipeline: SelfRecoveryPipeline = field(init=False)
    optimizer: torch.optim.Optimizer = field(init=False)
    iteration: int = field(init=False, default=0)

    def __post_init__(self):
        seed = self.config.train.seed
        torch.manual_seed(seed)
        self.pipeline = SelfRecoveryPipeline(self.config)
        self.optimizer = torch.optim.Adam(
            self.pipeline.parameters(), lr=self.config.train.learning_rate, betas=self.config.train.betas,
        )
        self.torch_rng = torch.Generator().manual_seed(seed)
        self.mask_rng = np.random.default_rng(seed)
        if self.presets is None:
            preset_file = self.config.degrade.preset_file
            self.presets = load_presets(Path(preset_file) if preset_file else None)

    def _donors(self, batch: torch.Tensor) -> torch.Tensor:
        indices = self.mask_rng.integers(0, len(self.dataset), size=batch.shape[0])
        return torch.stack([self.dataset[int(i)] for i in indices]).to(batch)

    def training_step(self, batch: torch.Tensor) -> StepRecord:
        """One forward pass through the full graph and one optimizer update.

        Raises:
            TrainingHalted: If any loss component is not finite; parameters are left untouched
        """
        cfg = self.config
        weights = cfg.train.weights
        b, _, h, w = batch.shape
        self.pipeline.train()
        self.optimizer.zero_grad(set_to_none=True)
        try:
            marked = self.pipeline.watermark(batch)
            container = marked.container.clamp(0.0, 1.0)
            if cfg.degrade.attack == "splice":
                mask = generate_mask_batch(cfg.degrade.mask, b, h, w, self.mask_rng).to(batch)
                tampered = splice(container, self._donors(batch), mask)
            else:
                mask = torch.zeros((b, 1, h, w), dtype=batch.dtype, device=batch.device)
                tampered = container
            attacked, specs = random_degradation(
                tampered, cfg.degrade.train_preset, self.torch_rng, self.presets, cfg.degrade.differentiable,
            )
            rec = self.pipeline.recover(attacked)
        except NumericError as e:
            raise TrainingHalted("forward", self.iteration) from e

        zero = batch.sum() * 0.0
        components = {
            "w": loss_w(marked.container, batch, self.perceptual, weights.perceptual),
            "e": loss_e(marked.scrambled_secret, rec.scrambled_secret_estimate, mask),
            "tv": tv_loss(marked.scrambled_secret, reduction="mean") if cfg.model.use_wg else zero,
            "wg": F.mse_loss(rec.original_estimate, batch) if cfg.model.use_wg else zero,
            "ie": loss_ie(rec.enhanced, batch, self.perceptual, weights.perceptual),
            "tl": bce_loss(rec.soft_mask, mask),
        }
        if cfg.model.noise_supervision:
            components["noise"] = F.mse_loss(rec.noise_estimate, marked.noise.detach())
        try:
            total = loss_total(components, weights)
        except TrainingHalted as e:
            raise TrainingHalted(e.component, self.iteration) from e
        if not torch.isfinite(total):
            raise TrainingHalted("total", self.iteration)
        total.backward()
        self.optimizer.step()
        self.iteration += 1

        values = {name: float(value.detach()) for name, value in components.items()}
        return StepRecord(
            iteration=self.iteration,
            w=values["w"], e=values["e"], tv=values["tv"], wg=values["wg"], ie=values["ie"], tl=values["tl"],
            noise=values.get("noise"),
            total=float(total.detach()),
            degradation="+".join(spec.kind for spec in specs),
            degradation_specs=[spec.model_dump() for spec in specs] if self.debug else None,
        )

    def loader(self) -> DataLoader:
        cfg = self.config.train
        return DataLoader(
            self.dataset, batch_size=cfg.batch_size, shuffle=True, num_workers=cfg.workers,
            generator=torch.Generator().manual_seed(cfg.seed), drop_last=len(self.dataset) >= cfg.batch_size,
        )

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.pipeline, self.config, self.iteration, self.optimizer)

    def run(self, out_dir: str | Path, iterations: int | None = None, show_progress: bool = True) -> list[StepRecord]:
        """Train for ``iterations`` steps, appending to the JSON-lines log in ``out_dir``.

        Checkpoints go to the configured checkpoint path every ``checkpoint_every``
        steps and at the end. On a non-finite loss the pre-step state is written to
        ``halted.pt`` and ``TrainingHalted`` propagates.
        """
        out = Path(out_dir)
        steps = iterations if iterations is not None else self.config.train.iterations
        checkpoint_path = self.config.io.checkpoint_path
        log_path = out / self.config.io.log_name
        write_to_file(log_path, "", quiet=True)
        records = []
        batches = _infinite(self.loader())
        with open(log_path, "a", encoding="utf-8") as log, tqdm(total=steps, disable=not show_progress, desc="train") as bar:
            for _ in range(steps):
                batch = next(batches)
                try:
                    record = self.training_step(batch)
                except TrainingHalted:
                    halted = self.save(out / "halted.pt")
                    logger.error(f"Training halted; pre-step state saved to {halted}")
                    raise
                log.write(record.model_dump_json(exclude_none=True) + "\n")
                records.append(record)
                bar.update(1)
                bar.set_postfix(total=f"{record.total:.4f}")
                if self.iteration % self.config.train.checkpoint_every == 0:
                    self.save(checkpoint_path)
        self.save(checkpoint_path)
        logger.info(f"Finished {steps} iterations; checkpoint at {checkpoint_path}")
        return records


def smoothed(values: list[float], window: int = 50) -> list[float]:
    """Trailing moving average used to compare loss levels across a run."""
    result, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        result.append(acc / min(i + 1, window))
    return result
