import math

import pytest
import torch

from modules.errors import ShapeError
from modules.localize import BCE_EPSILON, TamperLocalizer, bce_loss, binarize, composite, predict_mask


@pytest.fixture
def gen() -> torch.Generator:
    return torch.Generator().manual_seed(12)


@pytest.fixture
def pair(gen) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.rand(2, 3, 32, 32, generator=gen), torch.rand(2, 3, 32, 32, generator=gen)


class TestTamperLocalizer:
    def test_soft_mask_shape_and_range(self, pair):
        attacked, secret = pair
        mask = predict_mask(attacked, secret, TamperLocalizer(levels=2, base=4))
        assert mask.shape == (2, 1, 32, 32)
        assert ((mask > 0) & (mask < 1)).all()

    def test_shape_mismatch(self, pair):
        attacked, _ = pair
        with pytest.raises(ShapeError):
            TamperLocalizer(levels=2, base=4)(attacked, torch.rand(2, 3, 16, 16))


class TestBinarize:
    def test_threshold_is_inclusive(self):
        mask = torch.tensor([0.2, 0.5, 0.7])
        assert binarize(mask).tolist() == [0.0, 1.0, 1.0]
        assert binarize(mask, 0.6).tolist() == [0.0, 0.0, 1.0]


class TestComposite:
    def test_zero_mask_keeps_attacked(self, pair):
        enhanced, attacked = pair
        assert torch.equal(composite(enhanced, attacked, torch.zeros(2, 1, 32, 32)), attacked)

    def test_full_mask_takes_enhanced(self, pair):
        enhanced, attacked = pair
        assert torch.equal(composite(enhanced, attacked, torch.ones(2, 1, 32, 32)), enhanced)

    def test_binary_mask_partitions_pixels(self, pair, gen):
        enhanced, attacked = pair
        mask = (torch.rand(2, 1, 32, 32, generator=gen) > 0.5).float()
        out = composite(enhanced, attacked, mask)
        inside = mask.expand_as(out).bool()
        assert torch.equal(out[inside], enhanced[inside])
        assert torch.equal(out[~inside], attacked[~inside])

    def test_soft_mask_blend(self, pair):
        enhanced, attacked = pair
        mask = torch.full((32, 32), 0.25)
        assert torch.allclose(composite(enhanced, attacked, mask), 0.25 * enhanced + 0.75 * attacked)

    def test_half_mask_gives_midpoint(self, pair):
        enhanced = torch.full((1, 3, 4, 4), 0.75)
        attacked = torch.full((1, 3, 4, 4), 0.25)
        out = composite(enhanced, attacked, torch.full((1, 4, 4), 0.5))
        assert torch.equal(out, torch.full((1, 3, 4, 4), 0.5))
        a, b = pair
        assert torch.allclose(composite(a, b, torch.full((2, 32, 32), 0.5)), (a + b) / 2, atol=1e-7)

    def test_identical_sources(self, pair, gen):
        image, _ = pair
        mask = torch.rand(2, 32, 32, generator=gen)
        assert torch.equal(composite(image, image, mask), image)

    def test_gradients_match_finite_differences(self, gen):
        e = torch.rand(1, 2, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        a = torch.rand(1, 2, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        m = torch.rand(1, 1, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(composite, (e, a, m), eps=1e-6, atol=1e-8, rtol=1e-3)

    def test_mask_shape_mismatch(self, pair):
        enhanced, attacked = pair
        with pytest.raises(ShapeError):
            composite(enhanced, attacked, torch.zeros(2, 1, 16, 16))


class TestBCELoss:
    def test_perfect_prediction_is_near_zero(self):
        truth = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
        assert bce_loss(truth.clone(), truth).item() == pytest.approx(-math.log1p(-BCE_EPSILON), rel=1e-6)

    def test_half_prediction_is_ln2(self, gen):
        truth = (torch.rand(2, 1, 8, 8, generator=gen) > 0.5).to(torch.float64)
        loss = bce_loss(torch.full_like(truth, 0.5), truth)
        assert loss.item() == pytest.approx(math.log(2), rel=1e-12)

    def test_matches_formula(self):
        soft = torch.tensor([0.2, 0.9, 0.5], dtype=torch.float64)
        truth = torch.tensor([0.0, 1.0, 1.0], dtype=torch.float64)
        expected = -(math.log(0.8) + math.log(0.9) + math.log(0.5)) / 3
        assert bce_loss(soft, truth).item() == pytest.approx(expected, rel=1e-9)

    def test_saturated_prediction_stays_finite(self):
        loss = bce_loss(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0]))
        assert torch.isfinite(loss)

    def test_gradients_match_finite_differences(self, gen):
        soft = (torch.rand(1, 1, 4, 4, generator=gen, dtype=torch.float64) * 0.8 + 0.1).requires_grad_()
        truth = (torch.rand(1, 1, 4, 4, generator=gen, dtype=torch.float64) > 0.5).double()
        assert torch.autograd.gradcheck(lambda s: bce_loss(s, truth), (soft,), eps=1e-6, atol=1e-8, rtol=1e-3)
