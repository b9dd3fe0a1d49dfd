"""Unit tests for the learning-rate schedule and optimizer construction."""

import pytest
import torch

from crossprompt_seg.core.config import TrainConfig
from crossprompt_seg.core.errors import InvalidInputError
from crossprompt_seg.core.schedule import build_optimizer, lr_schedule, set_learning_rate


@pytest.fixture()
def default_train() -> TrainConfig:
    """10000 iterations with 5000 warmup and max lr 1e-3."""
    return TrainConfig()


class TestLrSchedule:
    """Warmup then exponential decay."""

    def test_documented_points(self, default_train: TrainConfig) -> None:
        """lr(0) = 0, lr(2500) = 5e-4, lr(5000) = 1e-3, lr(10000) = 1e-5."""
        assert lr_schedule(0, default_train) == 0.0
        assert lr_schedule(2500, default_train) == pytest.approx(0.0005)
        assert lr_schedule(5000, default_train) == pytest.approx(0.001)
        assert lr_schedule(10000, default_train) == pytest.approx(1e-5)

    def test_continuous_at_joint(self, default_train: TrainConfig) -> None:
        """The two phases meet at max_lr."""
        before = lr_schedule(4999, default_train)
        after = lr_schedule(5001, default_train)
        assert before == pytest.approx(0.001, rel=1e-3)
        assert after == pytest.approx(0.001, rel=1e-3)

    def test_monotone_phases(self) -> None:
        """Strictly increasing on [0, warmup) and strictly decreasing on (warmup, total]."""
        config = TrainConfig(total_iterations=200, warmup_iterations=80)
        warmup = [lr_schedule(step, config) for step in range(0, 81)]
        decay = [lr_schedule(step, config) for step in range(80, 201)]
        assert all(a < b for a, b in zip(warmup, warmup[1:], strict=False))
        assert all(a > b for a, b in zip(decay, decay[1:], strict=False))

    def test_no_decay_phase(self) -> None:
        """warmup == total keeps max_lr at the end."""
        config = TrainConfig(total_iterations=10, warmup_iterations=10)
        assert lr_schedule(10, config) == config.max_lr

    def test_no_warmup(self) -> None:
        """Without warmup the first step already runs at max_lr."""
        config = TrainConfig(total_iterations=10, warmup_iterations=0)
        assert lr_schedule(0, config) == config.max_lr

    def test_negative_iteration(self, default_train: TrainConfig) -> None:
        """Negative iterations are rejected."""
        with pytest.raises(InvalidInputError):
            lr_schedule(-1, default_train)


class TestOptimizer:
    """AdamW construction."""

    def test_only_trainable_parameters(self, default_train: TrainConfig) -> None:
        """Frozen parameters are left out of the optimizer."""
        frozen = torch.nn.Parameter(torch.zeros(3), requires_grad=False)
        trainable = torch.nn.Parameter(torch.zeros(2))
        optimizer = build_optimizer([frozen, trainable], default_train)
        params = optimizer.param_groups[0]["params"]
        assert len(params) == 1 and params[0] is trainable
        assert isinstance(optimizer, torch.optim.AdamW)
        assert optimizer.param_groups[0]["weight_decay"] == 0.01

    def test_no_trainable_parameters(self, default_train: TrainConfig) -> None:
        """An all-frozen model cannot be optimized."""
        with pytest.raises(InvalidInputError):
            build_optimizer([torch.nn.Parameter(torch.zeros(1), requires_grad=False)], default_train)

    def test_set_learning_rate(self, default_train: TrainConfig) -> None:
        """Every param group receives the new rate."""
        optimizer = build_optimizer([torch.nn.Parameter(torch.zeros(1))], default_train)
        set_learning_rate(optimizer, 0.123)
        assert optimizer.param_groups[0]["lr"] == 0.123
