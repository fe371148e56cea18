"""Run configuration: pydantic models validated from a JSON document.

Every field has a default; the defaults form the desk profile (64x64 images,
200 training images, 50 held-out images, 2000 iterations).
"""

import json
import logging
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from modules.degrade import DegradationSpec, MaskSpec
from modules.enhance import EnhancerArchitecture
from modules.errors import ConfigurationError
from modules.shuffle import ScrambleMode, ShuffleKey
from modules.watermark import NoiseMode

logger = logging.getLogger(__name__)

CONFIG_ECHO_NAME = "config.resolved.json"

DESK_MASK = MaskSpec(
    strategy="mixed",
    strokes=(1, 5),
    stroke_width=(5, 12),
    stroke_length=(10, 30),
    max_turns=4,
    boxes=(1, 3),
    box_edge=(12, 37),
    margin=2,
    coverage=(0.1, 0.5),
)


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(Section):
    """Where images come from and how they are split.
    image_dir: Directory of 8-bit PNG/JPEG images.
    train_list: Optional text file of image names (one per line) for training.
    heldout_list: Optional text file of image names for evaluation.
    train_count: Training images taken from the sorted directory listing when no list is given.
    heldout_count: Held-out images taken after the training images when no list is given.
    image_size: Edge length every image must have.
    resize: Center-crop and resize images of other sizes instead of rejecting them.
    """
    image_dir: str = "data/images"
    train_list: str | None = None
    heldout_list: str | None = None
    train_count: int = Field(default=200, ge=1)
    heldout_count: int = Field(default=50, ge=1)
    image_size: int = Field(default=64, ge=4)
    resize: bool = False

    @model_validator(mode="after")
    def _even_size(self):
        if self.image_size % 2:
            raise ValueError(f"image_size must be even for the Haar transform, got {self.image_size}")
        return self


class GeneratorConfig(Section):
    blocks: int = Field(default=3, ge=1)
    patch: int = Field(default=4, ge=2)
    embed_dim: int = Field(default=192, ge=4)
    heads: int = Field(default=6, ge=1)
    depth: int = Field(default=1, ge=1)


class EnhancerConfig(Section):
    architecture: EnhancerArchitecture = "residual"
    blocks: int = Field(default=8, ge=1)
    width: int = Field(default=32, ge=1)


class LocalizerConfig(Section):
    levels: int = Field(default=3, ge=1)
    base: int = Field(default=16, ge=1)


class ModelConfig(Section):
    """Network sizes and the component switches.
    scramble: How the secret is scrambled before embedding.
    use_wg: Derive the secret with the watermark generator; otherwise the secret is the image itself.
    use_ie: Refine the recovered original; otherwise the enhancer is the identity.
    noise_supervision: Add an MSE term between estimated and true noise tensors.
    """
    iw_blocks: int = Field(default=12, ge=1)
    iw_width: int = Field(default=32, ge=1)
    noise_estimator: NoiseMode = "learned"
    noise_supervision: bool = False
    scramble: ScrambleMode = "shuffle"
    shuffle_key: ShuffleKey = ShuffleKey(seed=0, patch=1)
    use_wg: bool = True
    use_ie: bool = True
    wg: GeneratorConfig = GeneratorConfig()
    enhancer: EnhancerConfig = EnhancerConfig()
    localizer: LocalizerConfig = LocalizerConfig()


class LossWeights(Section):
    """Weights of the total loss. ``perceptual`` scales an optional perceptual term inside L_W and L_IE."""
    perceptual: float = Field(default=10.0, ge=0)
    w: float = Field(default=150.0, ge=0)
    e: float = Field(default=10.0, ge=0)
    tv: float = Field(default=10.0, ge=0)
    wg: float = Field(default=10.0, ge=0)
    ie: float = Field(default=20.0, ge=0)
    tl: float = Field(default=1.0, ge=0)
    noise: float = Field(default=1.0, ge=0)


class TrainConfig(Section):
    batch_size: int = Field(default=8, ge=1)
    iterations: int = Field(default=2000, ge=1)
    learning_rate: float = Field(default=2e-4, gt=0)
    betas: tuple[float, float] = (0.9, 0.5)
    seed: int = Field(default=0, ge=0)
    checkpoint_every: int = Field(default=500, ge=1)
    workers: int = Field(default=0, ge=0)
    weights: LossWeights = LossWeights()


class DegradeConfig(Section):
    """Training attacks.
    preset_file: Optional path to an edited copy of the degradation preset table.
    differentiable: Use gradient-friendly surrogates during training.
    attack: ``splice`` pastes donor content under a random mask before the degradation.
    """
    preset_file: str | None = None
    train_preset: str = "train"
    differentiable: bool = True
    attack: Literal["splice", "none"] = "splice"
    mask: MaskSpec = DESK_MASK


class EvalConfig(Section):
    """Evaluation protocol.
    preset: Degradation preset applied after the attack.
    degradations: Fixed degradations, each evaluated as a separate report.
    mask_ratios: Masking ratios, each evaluated as a separate report with ``shapes`` masks.
    composite_mask: Mask used for the final composite: thresholded prediction, soft prediction or ground truth.
    quantize_containers: Round containers to 8 bits before attacking, as if they were saved.
    """
    preset: str = "eval_combo"
    attack: Literal["splice", "none"] = "splice"
    threshold: float = Field(default=0.5, gt=0, lt=1)
    composite_mask: Literal["binary", "soft", "truth"] = "binary"
    degradations: list[DegradationSpec] | None = None
    mask_ratios: list[float] | None = None
    quantize_containers: bool = True
    seed: int = Field(default=1234, ge=0)

    @model_validator(mode="after")
    def _ratios_in_range(self):
        for ratio in self.mask_ratios or []:
            if not 0.0 < ratio < 1.0:
                raise ValueError(f"mask ratios must lie in (0, 1), got {ratio}")
        return self


class IOConfig(Section):
    out_dir: str = "runs/default"
    checkpoint: str | None = None
    log_name: str = "train_log.jsonl"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "checkpoint.pt"


class RunConfig(Section):
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    degrade: DegradeConfig = DegradeConfig()
    eval: EvalConfig = EvalConfig()
    io: IOConfig = IOConfig()

    @model_validator(mode="after")
    def _key_fits_images(self):
        size = self.data.image_size
        if self.model.scramble == "shuffle" and size % self.model.shuffle_key.patch:
            raise ValueError(f"shuffle patch {self.model.shuffle_key.patch} does not divide image size {size}")
        if self.model.use_wg and size % self.model.wg.patch:
            raise ValueError(f"generator patch {self.model.wg.patch} does not divide image size {size}")
        if size % 2 ** self.model.localizer.levels:
            raise ValueError(f"image size {size} is not divisible by 2^{self.model.localizer.levels} localizer levels")
        return self


def load_config(path: str | Path | None = None) -> RunConfig:
    """Load and validate a run configuration; ``None`` gives the desk profile."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"Cannot read config {path}: {e}") from e
    try:
        return RunConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid config {path}:\n{e}") from e


def apply_overrides(config: RunConfig, seed: int | None = None, checkpoint: str | None = None,
                    out: str | None = None, workers: int | None = None) -> RunConfig:
    """Return a copy of ``config`` with command-line values applied and revalidated."""
    data = config.model_dump(mode="json")
    if seed is not None:
        data["train"]["seed"] = seed
        data["eval"]["seed"] = seed
    if checkpoint is not None:
        data["io"]["checkpoint"] = checkpoint
    if out is not None:
        data["io"]["out_dir"] = out
    if workers is not None:
        data["train"]["workers"] = workers
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid override:\n{e}") from e


def config_to_json(config: RunConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True)
