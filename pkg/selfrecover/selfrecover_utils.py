import logging
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageOps

from modules.errors import DataError, OutputError, ShapeError
from selfrecover_config import CONFIG_ECHO_NAME

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def write_to_file(filepath: str | Path, content: str, quiet: bool = False) -> None:
    """Write text to a file, replacing existing contents.

    Args:
        filepath: Path to the file to write
        content: Content to write to the file
        quiet: Log at debug level only
    """
    path = Path(filepath)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
    except OSError as e:
        raise OutputError(f"Cannot write {path}: {e}") from e
    (logger.debug if quiet else logger.info)(f"Wrote {path}")


def read_file_content(file_path: str | Path) -> str:
    """Read and return the content of a text file.

    Raises:
        DataError: If the file cannot be read
    """
    try:
        return Path(file_path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"Error reading file {file_path}: {e}") from e


def ensure_output_dir(directory: str | Path) -> Path:
    """Create ``directory`` if needed and check that files can be written into it."""
    path = Path(directory)
    try:
        path.mkdir(parents=True, exist_ok=True)
        marker = path / ".write_check"
        marker.write_bytes(b"")
        marker.unlink()
    except OSError as e:
        raise OutputError(f"Output directory {path} is not writable: {e}") from e
    return path


def echo_config(config_json: str, directory: str | Path) -> Path:
    """Write the resolved configuration next to the outputs of a command."""
    target = Path(directory) / CONFIG_ECHO_NAME
    write_to_file(target, config_json, quiet=True)
    return target


def list_images(directory: str | Path) -> list[Path]:
    """Sorted image files directly inside ``directory``.

    Raises:
        DataError: If the directory does not exist or holds no images
    """
    path = Path(directory)
    if not path.is_dir():
        raise DataError(f"Image directory {path} does not exist")
    images = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise DataError(f"No PNG or JPEG images found in {path}")
    return images


def resolve_inputs(path: str | Path) -> list[Path]:
    """A single image file, or every image in a directory."""
    p = Path(path)
    if p.is_file():
        return [p]
    return list_images(p)


def load_image(path: str | Path, size: int | None = None, resize: bool = False) -> torch.Tensor:
    """Load an 8-bit image as a ``(3, H, W)`` float32 tensor in [0, 1].

    Args:
        path: Image file
        size: Required edge length, or None to accept any size
        resize: Center-crop and resize mismatched images instead of raising

    Raises:
        DataError: If the file cannot be decoded
        ShapeError: If the size differs and ``resize`` is off
    """
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
    except OSError as e:
        raise DataError(f"Cannot read image {path}: {e}") from e
    if size is not None and im.size != (size, size):
        if not resize:
            raise ShapeError(f"Image {path} is {im.size[0]}x{im.size[1]}, expected {size}x{size} (use --resize)")
        logger.warning(f"Resizing {path} from {im.size[0]}x{im.size[1]} to {size}x{size}")
        im = ImageOps.fit(im, (size, size), method=Image.Resampling.BICUBIC)
    array = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(array.transpose(2, 0, 1).copy())


def to_uint8(img: torch.Tensor | np.ndarray) -> np.ndarray:
    """Clip to [0, 1], scale by 255 and round half away from zero."""
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().to(torch.float64).numpy()
    scaled = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def quantize(img: torch.Tensor) -> torch.Tensor:
    """Same rounding as ``to_uint8``, kept as a tensor in [0, 1]."""
    return torch.floor(img.clamp(0.0, 1.0) * 255.0 + 0.5) / 255.0


def save_image(path: str | Path, img: torch.Tensor) -> Path:
    """Save a ``(3, H, W)`` or ``(1, 3, H, W)`` tensor as an 8-bit PNG."""
    while img.dim() > 3:
        img = img[0]
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(img).transpose(1, 2, 0), mode="RGB").save(target)
    except OSError as e:
        raise OutputError(f"Cannot write image {target}: {e}") from e
    return target


def save_mask(path: str | Path, mask: torch.Tensor) -> Path:
    """Save a binary mask as a single-channel PNG, 255 = tampered."""
    m = mask.detach().cpu()
    while m.dim() > 2:
        m = m[0]
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray((m.numpy() >= 0.5).astype(np.uint8) * 255, mode="L").save(target)
    except OSError as e:
        raise OutputError(f"Cannot write mask {target}: {e}") from e
    return target


def load_mask(path: str | Path) -> torch.Tensor:
    """Inverse of ``save_mask``: ``(H, W)`` float tensor of zeros and ones."""
    try:
        with Image.open(path) as im:
            array = np.asarray(im.convert("L"))
    except OSError as e:
        raise DataError(f"Cannot read mask {path}: {e}") from e
    return torch.from_numpy((array >= 128).astype(np.float32))


def smooth_corpus(count: int, size: int, seed: int = 0) -> list[torch.Tensor]:
    """Deterministic smooth synthetic RGB images of shape ``(3, size, size)``.

    Cycles through radial gradients, low-frequency cosine mixtures and linear ramps,
    with colours and placement drawn from a numpy generator seeded by ``seed``.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size), indexing="ij")
    images = []
    for k in range(count):
        low, high = rng.uniform(0.05, 0.35, 3), rng.uniform(0.65, 0.95, 3)
        kind = k % 3
        if kind == 0:
            cy, cx = rng.uniform(0.2, 0.8, 2)
            t = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / math.sqrt(2.0)
        elif kind == 1:
            t = np.zeros_like(xx)
            for _ in range(3):
                fy, fx = rng.uniform(0.2, 1.5, 2)
                phase = rng.uniform(0.0, 2.0 * math.pi)
                t += np.cos(2.0 * math.pi * (fy * yy + fx * xx) + phase)
            t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
        else:
            angle = rng.uniform(0.0, 2.0 * math.pi)
            t = math.cos(angle) * xx + math.sin(angle) * yy
            t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
        planes = low[:, None, None] + (high - low)[:, None, None] * np.clip(t, 0.0, 1.0)[None]
        images.append(torch.from_numpy(planes.astype(np.float32)))
    return images
