import pytest

from modules.degrade import MaskSpec
from selfrecover_config import RunConfig
from selfrecover_utils import save_image, smooth_corpus

TINY_SIZE = 16
TINY_MASK = MaskSpec(
    strategy="mixed",
    strokes=(1, 2),
    stroke_width=(2, 4),
    stroke_length=(3, 6),
    boxes=(1, 2),
    box_edge=(3, 6),
    margin=1,
    coverage=(0.1, 0.5),
)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_config_dict(image_dir: str = "data/images", out_dir: str = "runs/test") -> dict:
    """A pipeline small enough to train for a few steps on 16x16 images in a test."""
    return {
        "data": {"image_dir": image_dir, "train_count": 6, "heldout_count": 2, "image_size": TINY_SIZE},
        "model": {
            "iw_blocks": 2,
            "iw_width": 4,
            "shuffle_key": {"seed": 0, "patch": 4},
            "wg": {"blocks": 1, "patch": 4, "embed_dim": 8, "heads": 2, "depth": 1},
            "enhancer": {"architecture": "residual", "blocks": 1, "width": 4},
            "localizer": {"levels": 2, "base": 4},
        },
        "train": {"batch_size": 3, "iterations": 4, "checkpoint_every": 2, "seed": 0},
        "degrade": {"mask": TINY_MASK.model_dump(mode="json")},
        "eval": {"preset": "eval"},
        "io": {"out_dir": out_dir},
    }


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    return RunConfig.model_validate(tiny_config_dict(str(tmp_path / "images"), str(tmp_path / "out")))


@pytest.fixture
def image_dir(tmp_path):
    """Eight smooth 16x16 PNG images."""
    directory = tmp_path / "images"
    for k, img in enumerate(smooth_corpus(8, TINY_SIZE, seed=1)):
        save_image(directory / f"img_{k:02d}.png", img)
    return directory
