"""Unit tests for the segmentation losses.

Tests cover:
- dice_loss / ce_loss hand-computed values and shape errors
- pseudo_target hardening and gradient isolation
- cross_prompting_loss and pcr_loss: compositional oracle, symmetry, target isolation
- degenerate-sample masking
- supervised_loss weight census and compositional oracle
- total_loss weighting and non-finite detection
- analytic gradients against central finite differences
"""

import math

import pytest
import torch
from pytest_mock import MockerFixture

from crossprompt_seg.core.config import LossConfig, PseudoLabelMode
from crossprompt_seg.core.errors import InvalidInputError, NonFiniteLossError, ShapeMismatchError
from crossprompt_seg.core.losses import (
    ce_loss,
    cross_prompting_loss,
    dice_loss,
    one_hot,
    pcr_loss,
    pseudo_target,
    supervised_loss,
    total_loss,
)

EPS = 1e-5


# ---------------------------------------------------------------------------
# Fixtures and oracles
# ---------------------------------------------------------------------------


def random_map(seed: int, num_classes: int = 2, batch: int = 2, size: int = 4) -> torch.Tensor:
    """Softmax of seeded Gaussian logits, float64."""
    generator = torch.Generator().manual_seed(seed)
    logits = torch.randn(batch, num_classes, size, size, generator=generator, dtype=torch.float64)
    return torch.softmax(logits, dim=1)


def hard(prob: torch.Tensor) -> torch.Tensor:
    return one_hot(prob.argmax(dim=1), prob.shape[1]).to(prob.dtype)


def oracle_dice(pred: torch.Tensor, target: torch.Tensor) -> float:
    """Hand-rolled Dice loss over foreground classes."""
    scores = []
    for class_id in range(1, pred.shape[1]):
        p, t = pred[:, class_id], target[:, class_id]
        scores.append((2 * float((p * t).sum()) + EPS) / (float(p.sum()) + float(t.sum()) + EPS))
    return 1.0 - sum(scores) / len(scores)


def oracle_ce(pred: torch.Tensor, target: torch.Tensor) -> float:
    pixels = pred.shape[0] * pred.shape[2] * pred.shape[3]
    return -float((target * torch.log(pred.clamp_min(1e-7))).sum()) / pixels


def square_one_hot(top: int, left: int, size: int = 4) -> torch.Tensor:
    """(1, 2, size, size) one-hot map with a 2x2 foreground square."""
    labels = torch.zeros(1, size, size, dtype=torch.long)
    labels[0, top : top + 2, left : left + 2] = 1
    return one_hot(labels, 2).double()


@pytest.fixture()
def fixtures_c2() -> dict[str, torch.Tensor]:
    """Four random 2-class maps with foreground present in every argmax."""
    maps = {name: random_map(seed) for seed, name in enumerate(("p1", "p2", "ph1", "ph2"))}
    for value in maps.values():
        assert bool((value.argmax(dim=1) == 1).any())
    return maps


# ---------------------------------------------------------------------------
# dice_loss
# ---------------------------------------------------------------------------


class TestDiceLoss:
    """Soft Dice over foreground classes."""

    def test_identity_is_zero(self) -> None:
        """pred = target = one-hot gives 0."""
        target = square_one_hot(0, 0)
        assert float(dice_loss(target, target)) < 1e-6

    def test_disjoint_is_one(self) -> None:
        """Disjoint equal-area masks give a loss of about 1."""
        assert float(dice_loss(square_one_hot(0, 0), square_one_hot(2, 2))) == pytest.approx(1.0, abs=1e-5)

    def test_half_overlap(self) -> None:
        """Two 2x2 squares sharing 2 pixels give 0.5."""
        assert float(dice_loss(square_one_hot(0, 0), square_one_hot(0, 1))) == pytest.approx(0.5, abs=1e-5)

    def test_matches_oracle(self) -> None:
        """Random 4-class maps match the hand-rolled formula."""
        pred, target = random_map(1, num_classes=4), random_map(2, num_classes=4)
        assert float(dice_loss(pred, target)) == pytest.approx(oracle_dice(pred, target), rel=1e-9)

    def test_range(self) -> None:
        """Values stay in [0, 1]."""
        for seed in range(20):
            value = float(dice_loss(random_map(seed), hard(random_map(seed + 100))))
            assert 0.0 <= value <= 1.0

    def test_shape_mismatch(self) -> None:
        """Different shapes raise ShapeMismatchError."""
        with pytest.raises(ShapeMismatchError):
            dice_loss(random_map(0, num_classes=2), random_map(0, num_classes=3))

    def test_skip_empty_all_absent_is_zero(self) -> None:
        """With every foreground class absent and skipped the loss is zero."""
        background = one_hot(torch.zeros(1, 4, 4, dtype=torch.long), 2).double()
        assert float(dice_loss(background, background, skip_empty=True)) == 0.0


# ---------------------------------------------------------------------------
# ce_loss
# ---------------------------------------------------------------------------


class TestCeLoss:
    """Mean per-pixel cross-entropy."""

    def test_one_hot_is_zero(self) -> None:
        """pred equal to the one-hot target gives 0."""
        target = square_one_hot(1, 1)
        assert float(ce_loss(target, target)) < 1e-6

    def test_uniform_two_classes(self) -> None:
        """A uniform prediction over 2 classes gives log 2 for any target."""
        pred = torch.full((1, 2, 4, 4), 0.5, dtype=torch.float64)
        assert float(ce_loss(pred, square_one_hot(0, 0))) == pytest.approx(math.log(2), rel=1e-9)

    def test_single_pixel(self) -> None:
        """pred (0.8, 0.2) against target (1, 0) gives -log 0.8."""
        pred = torch.tensor([0.8, 0.2], dtype=torch.float64).view(1, 2, 1, 1)
        target = torch.tensor([1.0, 0.0], dtype=torch.float64).view(1, 2, 1, 1)
        assert float(ce_loss(pred, target)) == pytest.approx(0.2231435513, rel=1e-8)

    def test_clamps_zero_probabilities(self) -> None:
        """A zero probability on the target class stays finite."""
        pred = torch.tensor([0.0, 1.0], dtype=torch.float64).view(1, 2, 1, 1)
        target = torch.tensor([1.0, 0.0], dtype=torch.float64).view(1, 2, 1, 1)
        assert float(ce_loss(pred, target)) == pytest.approx(-math.log(1e-7))


# ---------------------------------------------------------------------------
# pseudo_target
# ---------------------------------------------------------------------------


class TestPseudoTarget:
    """Target hardening and isolation."""

    def test_hard_is_one_hot_and_detached(self) -> None:
        """Hard targets hold exactly one active class per pixel and no graph."""
        prob = random_map(4).requires_grad_(True)
        target = pseudo_target(prob)
        assert not target.requires_grad
        assert torch.equal(target.sum(dim=1), torch.ones_like(target.sum(dim=1)))
        assert torch.equal(target.argmax(dim=1), prob.argmax(dim=1))

    def test_soft_keeps_values(self) -> None:
        """Soft targets equal the detached map."""
        prob = random_map(5).requires_grad_(True)
        target = pseudo_target(prob, PseudoLabelMode.SOFT)
        assert not target.requires_grad
        assert torch.equal(target, prob.detach())


# ---------------------------------------------------------------------------
# cross_prompting_loss
# ---------------------------------------------------------------------------


class TestCrossPromptingLoss:
    """Symmetric cross prompting loss."""

    def test_zero_when_predictions_match_targets(self) -> None:
        """p1 = T(ph2) and p2 = T(ph1) give 0."""
        ph1, ph2 = random_map(1), random_map(2)
        value = cross_prompting_loss(hard(ph2), hard(ph1), ph1, ph2)
        assert float(value) < 1e-5

    def test_symmetry(self, fixtures_c2: dict[str, torch.Tensor]) -> None:
        """Swapping branch roles leaves the value unchanged."""
        f = fixtures_c2
        forward = cross_prompting_loss(f["p1"], f["p2"], f["ph1"], f["ph2"])
        swapped = cross_prompting_loss(f["p2"], f["p1"], f["ph2"], f["ph1"])
        assert float(forward) == float(swapped)

    def test_matches_compositional_oracle(self, fixtures_c2: dict[str, torch.Tensor]) -> None:
        """The value equals the hand-composed dice + ce brackets."""
        f = fixtures_c2
        t1, t2 = hard(f["ph1"]), hard(f["ph2"])
        expected = 0.5 * (oracle_dice(f["p1"], t2) + oracle_ce(f["p1"], t2)) + 0.5 * (
            oracle_dice(f["p2"], t1) + oracle_ce(f["p2"], t1)
        )
        assert float(cross_prompting_loss(f["p1"], f["p2"], f["ph1"], f["ph2"])) == pytest.approx(expected, rel=1e-9)

    def test_targets_receive_no_gradient(self, fixtures_c2: dict[str, torch.Tensor]) -> None:
        """Gradients reach the unprompted maps and never the ensembles."""
        p1, p2 = fixtures_c2["p1"].requires_grad_(True), fixtures_c2["p2"].requires_grad_(True)
        ph1, ph2 = fixtures_c2["ph1"].requires_grad_(True), fixtures_c2["ph2"].requires_grad_(True)
        loss = cross_prompting_loss(p1, p2, ph1, ph2)
        grads = torch.autograd.grad(loss, [p1, ph1, ph2], allow_unused=True)
        assert grads[0] is not None and bool(grads[0].abs().sum() > 0)
        for grad in grads[1:]:
            assert grad is None or bool((grad == 0).all())

    def test_target_perturbation_changes_value(self, fixtures_c2: dict[str, torch.Tensor]) -> None:
        """Perturbing a soft target moves the loss even though its gradient is zero."""
        f = fixtures_c2
        config = LossConfig(pseudo_label=PseudoLabelMode.SOFT)
        base = cross_prompting_loss(f["p1"], f["p2"], f["ph1"], f["ph2"], config=config)
        shifted = f["ph2"].clone()
        shifted[:, 0] += 1e-3
        shifted[:, 1] -= 1e-3
        moved = cross_prompting_loss(f["p1"], f["p2"], f["ph1"], shifted, config=config)
        assert float(base) != float(moved)

    def test_all_degenerate_is_zero_with_zero_gradient(self, fixtures_c2: dict[str, torch.Tensor]) -> None:
        """Every sample flagged gives 0 and vanishing gradients."""
        p1 = fixtures_c2["p1"].requires_grad_(True)
        p2 = fixtures_c2["p2"].requires_grad_(True)
        flags = torch.ones(2, dtype=torch.bool)
        loss = cross_prompting_loss(p1, p2, fixtures_c2["ph1"], fixtures_c2["ph2"], flags)
        loss.backward()
        assert float(loss) == 0.0
        assert p1.grad is not None and bool((p1.grad == 0).all())

    def test_flagged_samples_are_excluded(self, fixtures_c2: dict[str, torch.Tensor]) -> None:
        """Flagging sample 0 equals evaluating on sample 1 alone."""
        f = fixtures_c2
        flags = torch.tensor([True, False])
        masked = cross_prompting_loss(f["p1"], f["p2"], f["ph1"], f["ph2"], flags)
        alone = cross_prompting_loss(f["p1"][1:], f["p2"][1:], f["ph1"][1:], f["ph2"][1:])
        assert float(masked) == pytest.approx(float(alone), rel=1e-12)

    def test_flag_shape_checked(self, fixtures_c2: dict[str, torch.Tensor]) -> None:
        """Flags must have one entry per sample."""
        f = fixtures_c2
        with pytest.raises(ShapeMismatchError):
            cross_prompting_loss(f["p1"], f["p2"], f["ph1"], f["ph2"], torch.zeros(3, dtype=torch.bool))

    def test_shape_mismatch(self) -> None:
        """Prediction and target shapes must agree."""
        with pytest.raises(ShapeMismatchError):
            cross_prompting_loss(random_map(0), random_map(1), random_map(2), random_map(3, size=5))


# ---------------------------------------------------------------------------
# pcr_loss
# ---------------------------------------------------------------------------


class TestPcrLoss:
    """Prompt consistency regularization."""

    def test_zero_when_random_equals_center(self) -> None:
        """Random and center maps equal (and saturated) give about 0."""
        r1, r2 = hard(random_map(1)), hard(random_map(2))
        ensemble1, ensemble2 = (r1 + r1) / 2, (r2 + r2) / 2
        assert float(pcr_loss(r1, ensemble1, r2, ensemble2)) < 1e-5

    def test_center_map_gets_no_gradient(self) -> None:
        """The center-prompted map only enters through the isolated target."""
        r1 = random_map(1).requires_grad_(True)
        c1 = random_map(2).requires_grad_(True)
        r2, c2 = random_map(3), random_map(4)
        loss = pcr_loss(r1, (c1 + r1) / 2, r2, (c2 + r2) / 2)
        grad_r1, grad_c1 = torch.autograd.grad(loss, [r1, c1], allow_unused=True)
        assert grad_r1 is not None and bool(grad_r1.abs().sum() > 0)
        assert grad_c1 is None or bool((grad_c1 == 0).all())

    def test_matches_compositional_oracle(self, fixtures_c2: dict[str, torch.Tensor]) -> None:
        """The value equals the hand-composed brackets."""
        f = fixtures_c2
        t1, t2 = hard(f["ph1"]), hard(f["ph2"])
        expected = 0.5 * (oracle_dice(f["p1"], t1) + oracle_ce(f["p1"], t1)) + 0.5 * (
            oracle_dice(f["p2"], t2) + oracle_ce(f["p2"], t2)
        )
        assert float(pcr_loss(f["p1"], f["ph1"], f["p2"], f["ph2"])) == pytest.approx(expected, rel=1e-9)

    def test_symmetry(self, fixtures_c2: dict[str, torch.Tensor]) -> None:
        """Swapping branches leaves the value unchanged."""
        f = fixtures_c2
        assert float(pcr_loss(f["p1"], f["ph1"], f["p2"], f["ph2"])) == float(
            pcr_loss(f["p2"], f["ph2"], f["p1"], f["ph1"])
        )

    def test_several_pulled_maps_average(self, fixtures_c2: dict[str, torch.Tensor]) -> None:
        """Two pulled maps per branch contribute their mean."""
        f = fixtures_c2
        single = pcr_loss(f["p1"], f["ph1"], f["p2"], f["ph2"])
        doubled = pcr_loss([f["p1"], f["p1"]], f["ph1"], [f["p2"], f["p2"]], f["ph2"])
        assert float(doubled) == pytest.approx(float(single), rel=1e-12)

    def test_no_pulled_maps_is_zero(self, fixtures_c2: dict[str, torch.Tensor]) -> None:
        """Without random-prompted maps the term vanishes."""
        assert float(pcr_loss([], fixtures_c2["ph1"], [], fixtures_c2["ph2"])) == 0.0

    def test_all_degenerate_is_zero(self, fixtures_c2: dict[str, torch.Tensor]) -> None:
        """Every sample flagged gives 0."""
        f = fixtures_c2
        assert float(pcr_loss(f["p1"], f["ph1"], f["p2"], f["ph2"], torch.ones(2, dtype=torch.bool))) == 0.0


# ---------------------------------------------------------------------------
# supervised_loss
# ---------------------------------------------------------------------------


class TestSupervisedLoss:
    """Supervised loss on unprompted and prompted labeled outputs."""

    def test_all_perfect_is_zero(self) -> None:
        """All six maps equal to y give about 0."""
        y = square_one_hot(1, 1)
        assert float(supervised_loss(y, y, y, y, y, y, y)) < 1e-5

    def test_single_imperfect_map(self) -> None:
        """Only p1l imperfect gives 0.8 d + 0.2 c."""
        y = square_one_hot(1, 1)
        p1l = torch.softmax(torch.randn(1, 2, 4, 4, generator=torch.Generator().manual_seed(0)), 1).double()
        d, c = float(dice_loss(p1l, y)), float(ce_loss(p1l, y))
        assert float(supervised_loss(p1l, y, y, y, y, y, y)) == pytest.approx(0.8 * d + 0.2 * c, rel=1e-6)

    def test_weight_census(self, mocker: MockerFixture) -> None:
        """Coefficients extracted from the implementation are (0.8, 0.2) and (0.5, 0.5)."""
        y = square_one_hot(0, 0)
        dice = mocker.patch("crossprompt_seg.core.losses.dice_loss", return_value=torch.tensor(1.0))
        ce = mocker.patch("crossprompt_seg.core.losses.ce_loss", return_value=torch.tensor(0.0))
        assert float(supervised_loss(y, None, None, None, [], [], y)) == pytest.approx(0.8)
        assert float(supervised_loss(y, None, y, None, [], [], y)) == pytest.approx(0.8 + 0.5)
        dice.return_value, ce.return_value = torch.tensor(0.0), torch.tensor(1.0)
        assert float(supervised_loss(y, None, None, None, [], [], y)) == pytest.approx(0.2)
        assert float(supervised_loss(y, None, None, None, [y], [], y)) == pytest.approx(0.2 + 0.5)

    def test_rejects_non_one_hot(self) -> None:
        """Soft ground truth raises InvalidInputError."""
        y = random_map(0)
        with pytest.raises(InvalidInputError):
            supervised_loss(y, y, None, None, [], [], y)


# ---------------------------------------------------------------------------
# total_loss
# ---------------------------------------------------------------------------


class TestTotalLoss:
    """Weighted combination of the loss families."""

    def test_default_weights(self) -> None:
        """(1.0, 0.5, 0.2) with defaults gives 1.21."""
        assert total_loss(1.0, 0.5, 0.2) == pytest.approx(1.21)

    def test_zero_lambdas_return_supervised(self) -> None:
        """lambda1 = lambda2 = 0 returns L_s exactly."""
        config = LossConfig(lambda1=0.0, lambda2=0.0)
        assert total_loss(0.37, 9.0, 4.0, config) == 0.37

    def test_all_zero(self) -> None:
        """(0, 0, 0) gives 0."""
        assert total_loss(0.0, 0.0, 0.0) == 0.0

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")])
    def test_non_finite_raises(self, bad: float) -> None:
        """A NaN or infinite term raises with the term named."""
        with pytest.raises(NonFiniteLossError, match="non-finite loss") as info:
            total_loss(torch.tensor(1.0), torch.tensor(bad), torch.tensor(0.0))
        assert info.value.diagnostics["term"] == "l_cross"


# ---------------------------------------------------------------------------
# Gradient correctness
# ---------------------------------------------------------------------------


GRADIENT_SEEDS = range(20)


class TestGradients:
    """Analytic gradients against central finite differences on 20 random 4x4 fixtures per class count."""

    @pytest.mark.parametrize("seed", GRADIENT_SEEDS)
    @pytest.mark.parametrize("num_classes", [2, 4])
    def test_dice_and_ce(self, num_classes: int, seed: int) -> None:
        """dice_loss and ce_loss gradients w.r.t. the prediction."""
        pred = random_map(100 * seed + 10, num_classes).requires_grad_(True)
        target = hard(random_map(100 * seed + 11, num_classes))
        assert torch.autograd.gradcheck(lambda p: dice_loss(p, target), (pred,), eps=1e-6, atol=1e-8, rtol=1e-4)
        assert torch.autograd.gradcheck(lambda p: ce_loss(p, target), (pred,), eps=1e-6, atol=1e-8, rtol=1e-4)

    @pytest.mark.parametrize("seed", GRADIENT_SEEDS)
    @pytest.mark.parametrize("num_classes", [2, 4])
    def test_cross_prompting(self, num_classes: int, seed: int) -> None:
        """cross_prompting_loss gradients w.r.t. both unprompted maps."""
        p1 = random_map(100 * seed + 20, num_classes).requires_grad_(True)
        p2 = random_map(100 * seed + 21, num_classes).requires_grad_(True)
        ph1, ph2 = random_map(100 * seed + 22, num_classes), random_map(100 * seed + 23, num_classes)
        assert torch.autograd.gradcheck(
            lambda a, b: cross_prompting_loss(a, b, ph1, ph2),
            (p1, p2),
            eps=1e-6,
            atol=1e-8,
            rtol=1e-4,
        )

    @pytest.mark.parametrize("seed", GRADIENT_SEEDS)
    @pytest.mark.parametrize("num_classes", [2, 4])
    def test_pcr_and_supervised(self, num_classes: int, seed: int) -> None:
        """pcr_loss and supervised_loss gradients w.r.t. the pulled maps."""
        r1 = random_map(100 * seed + 30, num_classes).requires_grad_(True)
        r2 = random_map(100 * seed + 31, num_classes).requires_grad_(True)
        ph1, ph2 = random_map(100 * seed + 32, num_classes), random_map(100 * seed + 33, num_classes)
        y = hard(random_map(100 * seed + 34, num_classes))
        assert torch.autograd.gradcheck(
            lambda a, b: pcr_loss(a, ph1, b, ph2),
            (r1, r2),
            eps=1e-6,
            atol=1e-8,
            rtol=1e-4,
        )
        assert torch.autograd.gradcheck(
            lambda a, b: supervised_loss(a, b, a, b, [a], [b], y),
            (r1, r2),
            eps=1e-6,
            atol=1e-8,
            rtol=1e-4,
        )
