"""Learning-rate schedule and optimizer construction."""

from collections.abc import Iterable

import torch

from crossprompt_seg.core.config import TrainConfig
from crossprompt_seg.core.errors import InvalidInputError


def lr_schedule(iteration: int, config: TrainConfig) -> float:
    """Learning rate at a given iteration.

    Linear warmup ``max_lr * it / warmup`` for ``it < warmup``, then
    exponential decay ``max_lr * gamma ** (it - warmup)`` where gamma is
    chosen so that ``lr(total) = final_lr_ratio * max_lr``. Iterations past
    ``total`` keep decaying at the same rate.

    Args:
        iteration: Zero-based optimizer step.
        config: Training schedule.

    Returns:
        The learning rate.

    Raises:
        InvalidInputError: If iteration is negative.
    """
    if iteration < 0:
        raise InvalidInputError(f"iteration must be non-negative, got {iteration}")
    warmup, total, max_lr = config.warmup_iterations, config.total_iterations, config.max_lr
    if iteration < warmup:
        return max_lr * iteration / warmup
    decay_steps = total - warmup
    if decay_steps <= 0:
        return max_lr
    gamma = config.final_lr_ratio ** (1.0 / decay_steps)
    return float(max_lr * gamma ** (iteration - warmup))


def build_optimizer(parameters: Iterable[torch.nn.Parameter], config: TrainConfig) -> torch.optim.AdamW:
    """AdamW over the trainable parameters only.

    The learning rate starts at ``lr_schedule(0)`` and is set per step by the
    trainer.

    Raises:
        InvalidInputError: If no parameter requires gradients.
    """
    trainable = [parameter for parameter in parameters if parameter.requires_grad]
    if not trainable:
        raise InvalidInputError("no trainable parameters to optimize")
    return torch.optim.AdamW(
        trainable,
        lr=lr_schedule(0, config),
        betas=config.betas,
        weight_decay=config.weight_decay,
    )


def set_learning_rate(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
