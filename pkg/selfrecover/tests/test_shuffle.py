import math

import pytest
import torch
from pydantic import ValidationError

from modules.errors import ConfigurationError, ShapeError
from modules.shuffle import (
    Scrambler, ShuffleKey, SplitMix64, build_permutation, fft_magnitude_spectrum, fisher_yates,
    high_frequency_ratio, inverse_permutation, shift, shuffle, unshift, unshuffle,
)
from selfrecover_utils import smooth_corpus

SPLITMIX64_SEED0 = [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
GOLDEN_SEED0_2X2 = [2, 1, 0, 3]
GOLDEN_SEED0_4X4 = [2, 10, 14, 11, 6, 1, 5, 13, 8, 3, 4, 7, 12, 9, 0, 15]
PATCH_SIZES = [1, 2, 4, 8, 16]


@pytest.fixture
def image() -> torch.Tensor:
    return torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(3))


class TestPermutation:
    def test_splitmix64_reference_outputs(self):
        rng = SplitMix64(0)
        assert [rng() for _ in SPLITMIX64_SEED0] == SPLITMIX64_SEED0

    def test_golden_two_by_two(self):
        assert fisher_yates(4, 0) == GOLDEN_SEED0_2X2

    def test_golden_four_by_four(self):
        key = ShuffleKey(seed=0, patch=2)
        assert build_permutation(key, 8, 8).tolist() == GOLDEN_SEED0_4X4

    def test_inverse(self):
        perm = build_permutation(ShuffleKey(seed=11, patch=1), 6, 6)
        inv = inverse_permutation(perm)
        assert torch.equal(perm[inv], torch.arange(36))

    def test_patch_must_divide_size(self):
        with pytest.raises(ConfigurationError):
            build_permutation(ShuffleKey(seed=0, patch=3), 8, 8)

    @pytest.mark.parametrize("fields", [{"seed": -1}, {"seed": 2 ** 64}, {"patch": 0}], ids=["negative", "too-large", "zero-patch"])
    def test_key_validation(self, fields):
        with pytest.raises(ValidationError):
            ShuffleKey(**fields)


class TestShuffle:
    @pytest.mark.parametrize("patch", PATCH_SIZES, ids=[f"patch{p}" for p in PATCH_SIZES])
    @pytest.mark.parametrize("seed", [0, 1, 2 ** 64 - 1], ids=["seed0", "seed1", "seed-max"])
    def test_round_trip_exact(self, image, patch, seed):
        key = ShuffleKey(seed=seed, patch=patch)
        assert torch.equal(unshuffle(shuffle(image, key), key), image)

    def test_pixel_multiset_preserved(self, image):
        out = shuffle(image, ShuffleKey(seed=5, patch=4))
        assert torch.equal(out.flatten(1).sort(dim=1).values, image.flatten(1).sort(dim=1).values)

    def test_slot_k_takes_patch_perm_k(self):
        img = torch.arange(16, dtype=torch.float32).reshape(1, 1, 4, 4)
        out = shuffle(img, ShuffleKey(seed=0, patch=2))
        patches = [img[0, 0, 0:2, 0:2], img[0, 0, 0:2, 2:4], img[0, 0, 2:4, 0:2], img[0, 0, 2:4, 2:4]]
        assert torch.equal(out[0, 0, 0:2, 0:2], patches[GOLDEN_SEED0_2X2[0]])
        assert torch.equal(out[0, 0, 0:2, 2:4], patches[GOLDEN_SEED0_2X2[1]])
        assert torch.equal(out[0, 0, 2:4, 0:2], patches[GOLDEN_SEED0_2X2[2]])
        assert torch.equal(out[0, 0, 2:4, 2:4], patches[GOLDEN_SEED0_2X2[3]])

    def test_channels_move_together(self, image):
        out = shuffle(image, ShuffleKey(seed=9, patch=1))
        perm = build_permutation(ShuffleKey(seed=9, patch=1), 32, 32)
        flat = image.flatten(2)
        assert torch.equal(out.flatten(2), flat[:, :, perm])

    def test_whole_image_patch_is_identity(self, image):
        assert torch.equal(shuffle(image, ShuffleKey(seed=4, patch=32)), image)

    def test_key_does_not_fit(self, image):
        with pytest.raises(ShapeError):
            shuffle(image, ShuffleKey(seed=0, patch=5))


class TestScrambler:
    @pytest.mark.parametrize("mode", ["shuffle", "shift", "none"])
    def test_round_trip(self, image, mode):
        scrambler = Scrambler(mode, ShuffleKey(seed=1, patch=4))
        assert torch.equal(scrambler.unscramble(scrambler.scramble(image)), image)

    def test_shift_is_half_roll(self):
        img = torch.arange(16, dtype=torch.float32).reshape(1, 1, 4, 4)
        assert shift(img)[0, 0, 2, 2].item() == 0.0
        assert torch.equal(unshift(shift(img)), img)

    def test_none_is_identity(self, image):
        assert Scrambler("none", ShuffleKey()).scramble(image) is image

    def test_unknown_mode(self):
        with pytest.raises(ConfigurationError):
            Scrambler("rotate", ShuffleKey())


class TestFrequencyAnalysis:
    def test_constant_image_has_no_high_frequencies(self):
        assert high_frequency_ratio(torch.full((3, 16, 16), 0.4)) == 0.0

    def test_checkerboard_is_all_high_frequency(self):
        yy, xx = torch.meshgrid(torch.arange(16), torch.arange(16), indexing="ij")
        board = ((yy + xx) % 2).to(torch.float64)
        assert high_frequency_ratio(board) == pytest.approx(1.0)

    @pytest.mark.parametrize("cutoff", [0.0, 1.0, -0.2])
    def test_cutoff_range(self, cutoff):
        with pytest.raises(ConfigurationError):
            high_frequency_ratio(torch.rand(8, 8), cutoff=cutoff)

    def test_spectrum_is_centered(self):
        spectrum = fft_magnitude_spectrum(torch.full((1, 3, 8, 8), 1.0))
        assert spectrum[4, 4].item() == pytest.approx(64.0)
        assert spectrum.sum().item() == pytest.approx(64.0)

    def test_ratio_rises_with_finer_patches(self):
        corpus = smooth_corpus(20, 64, seed=0)
        means = []
        for patch in [16, 8, 4, 2, 1]:
            key = ShuffleKey(seed=0, patch=patch)
            ratios = [high_frequency_ratio(shuffle(img[None], key)) for img in corpus]
            means.append(sum(ratios) / len(ratios))
        assert all(a < b for a, b in zip(means, means[1:]))

    @pytest.mark.parametrize("k", [1, 3, 7])
    def test_horizontal_cosine_peaks(self, k):
        size = 32
        xx = torch.arange(size, dtype=torch.float64)
        wave = torch.cos(2 * math.pi * k * xx / size).expand(size, size).clone()
        spectrum = fft_magnitude_spectrum(wave)
        center = size // 2
        assert spectrum[center, center + k].item() == pytest.approx(size * size / 2)
        assert spectrum[center, center - k].item() == pytest.approx(size * size / 2)
        rest = spectrum.clone()
        rest[center, center + k] = 0.0
        rest[center, center - k] = 0.0
        assert rest.max().item() < 1e-9

    def test_white_noise_matches_area_fraction(self):
        size, cutoff = 64, 0.5
        freqs = torch.arange(-size // 2, size // 2, dtype=torch.float64) / (size // 2)
        radius = torch.sqrt(freqs[:, None] ** 2 + freqs[None, :] ** 2)
        expected = (radius > cutoff).sum().item() / (size * size - 1)
        gen = torch.Generator().manual_seed(12)
        ratios = [high_frequency_ratio(torch.rand(size, size, generator=gen, dtype=torch.float64), cutoff)
                  for _ in range(20)]
        assert sum(ratios) / len(ratios) == pytest.approx(expected, abs=0.02)

    @pytest.mark.parametrize("patch", [1, 4])
    def test_shuffle_keeps_spectral_energy(self, image, patch):
        img = image[:1]
        before = fft_magnitude_spectrum(img).pow(2).sum().item()
        after = fft_magnitude_spectrum(shuffle(img, ShuffleKey(seed=21, patch=patch))).pow(2).sum().item()
        gray = img.to(torch.float64).mean(dim=1)
        assert after == pytest.approx(before, rel=1e-9)
        assert before == pytest.approx(32 * 32 * gray.pow(2).sum().item(), rel=1e-9)

    def test_radial_gradient_orders_by_patch(self):
        size = 64
        yy, xx = torch.meshgrid(torch.arange(size, dtype=torch.float64), torch.arange(size, dtype=torch.float64), indexing="ij")
        cone = torch.sqrt((yy - size / 2) ** 2 + (xx - size / 2) ** 2)
        img = (cone / cone.max()).expand(1, 3, size, size).clone()
        pixel = high_frequency_ratio(shuffle(img, ShuffleKey(seed=0, patch=1)))
        block = high_frequency_ratio(shuffle(img, ShuffleKey(seed=0, patch=8)))
        plain = high_frequency_ratio(img)
        assert pixel > block > plain
