import os

import pytest

from modules.errors import ConfigurationError
from selfrecover_config import ModelConfig, RunConfig, load_config

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")
PROFILES = sorted(name for name in os.listdir(CONFIG_DIR) if name.endswith(".json"))


def test_default_shuffle_is_pixel_level():
    assert ModelConfig().shuffle_key.patch == 1
    assert RunConfig().model.shuffle_key.patch == 1


@pytest.mark.parametrize("name", PROFILES)
def test_shipped_profiles_shuffle_pixels(name):
    config = load_config(os.path.join(CONFIG_DIR, name))
    assert config.model.shuffle_key.patch == 1


def test_patch_must_divide_image_size():
    with pytest.raises(ValueError):
        RunConfig.model_validate({"data": {"image_size": 64}, "model": {"shuffle_key": {"seed": 0, "patch": 6}}})


def test_removed_exp_clamp_is_rejected(tmp_path):
    path = tmp_path / "clamp.json"
    path.write_text('{"model": {"clamp": 8.0}}')
    with pytest.raises(ConfigurationError):
        load_config(path)
