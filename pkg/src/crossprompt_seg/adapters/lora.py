"""Low-rank adaptation of attention projections in the image encoder.

Every targeted projection ``W`` gains a parallel path ``x @ A.T @ B.T * (alpha / r)``
with ``A`` (r, d_in) drawn from a small Gaussian and ``B`` (d_out, r) zero, so
the adapted encoder starts out computing exactly what the base encoder did.
All base encoder parameters are frozen; only the factor pairs train.
"""

import torch
from torch import nn

from crossprompt_seg.core.config import LoraConfig
from crossprompt_seg.core.errors import InvalidInputError
from crossprompt_seg.observability import get_logger

logger = get_logger(__name__)

# LoraConfig target name -> attribute of an attention block
PROJECTION_ATTRIBUTES: dict[str, str] = {
    "query": "q_proj",
    "key": "k_proj",
    "value": "v_proj",
    "output": "out_proj",
}

LORA_PARAMETER_MARKER: str = "lora_"


class LoRALinear(nn.Module):
    """A frozen linear layer plus a trainable rank-r update.

    Args:
        base: The projection to adapt; its parameters are frozen.
        rank: Rank r of the update.
        alpha: Scaling numerator.
        init_std: Standard deviation of the Gaussian init of ``lora_A``.
        generator: Source of randomness for ``lora_A``.

    Raises:
        InvalidInputError: If rank is not positive.
    """

    def __init__(
        self,
        base: nn.Linear,
        rank: int,
        alpha: float,
        init_std: float = 0.01,
        generator: torch.Generator | None = None,
    ) -> None:
        super().__init__()
        if rank <= 0:
            raise InvalidInputError(f"LoRA rank must be positive, got {rank}")
        self.base = base
        for parameter in self.base.parameters():
            parameter.requires_grad_(False)
        self.rank = rank
        self.scaling = alpha / rank
        weight = base.weight
        a_init = torch.randn(rank, base.in_features, generator=generator, dtype=weight.dtype) * init_std
        self.lora_A = nn.Parameter(a_init.to(weight.device))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=weight.dtype, device=weight.device))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        update = (x @ self.lora_A.T) @ self.lora_B.T
        return self.base(x) + update * self.scaling


def attention_blocks(encoder: nn.Module) -> list[nn.Module]:
    """Submodules exposing q/k/v/out projections, in registration order."""
    return [
        module
        for module in encoder.modules()
        if all(hasattr(module, attribute) for attribute in PROJECTION_ATTRIBUTES.values())
    ]


def apply_lora(encoder: nn.Module, config: LoraConfig) -> nn.Module:
    """Freeze the encoder and wrap the targeted projections with LoRALinear.

    Args:
        encoder: Image encoder holding at least one attention block.
        config: Rank, scaling, init, target projections, and seed.

    Returns:
        The same encoder, modified in place.

    Raises:
        InvalidInputError: If the rank is not positive, no attention block
            exists, or a target projection is already adapted.
    """
    if config.rank <= 0:
        raise InvalidInputError(f"LoRA rank must be positive, got {config.rank}")
    blocks = attention_blocks(encoder)
    if not blocks:
        raise InvalidInputError("encoder has no attention block to adapt")

    for parameter in encoder.parameters():
        parameter.requires_grad_(False)

    generator = torch.Generator().manual_seed(config.seed)
    adapted = 0
    for block in blocks:
        for target in config.targets:
            attribute = PROJECTION_ATTRIBUTES[target]
            projection = getattr(block, attribute)
            if isinstance(projection, LoRALinear):
                raise InvalidInputError(f"projection {attribute} is already adapted")
            setattr(block, attribute, LoRALinear(projection, config.rank, config.alpha, config.init_std, generator))
            adapted += 1

    logger.info(
        "LoRA applied",
        blocks=len(blocks),
        projections=adapted,
        rank=config.rank,
        trainable=lora_parameter_count(encoder),
    )
    return encoder


def lora_parameter_count(module: nn.Module) -> int:
    """Number of trainable LoRA factor entries in a module."""
    return sum(
        parameter.numel()
        for name, parameter in module.named_parameters()
        if LORA_PARAMETER_MARKER in name and parameter.requires_grad
    )


def expected_lora_parameter_count(module: nn.Module) -> int:
    """Closed-form census ``sum r * (d_in + d_out)`` over adapted projections."""
    return sum(
        layer.rank * (layer.in_features + layer.out_features)
        for layer in module.modules()
        if isinstance(layer, LoRALinear)
    )


def split_state_dict(state: dict[str, torch.Tensor]) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    """Split a model state dict into (base weights, LoRA factors)."""
    base = {key: value for key, value in state.items() if LORA_PARAMETER_MARKER not in key}
    lora = {key: value for key, value in state.items() if LORA_PARAMETER_MARKER in key}
    return base, lora
