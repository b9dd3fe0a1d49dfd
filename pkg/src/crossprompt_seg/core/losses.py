"""Segmentation losses for supervised and cross-prompted training.

Tensors are probability maps of shape (B, C, H, W). Targets derived from
predictions go through ``pseudo_target``: hardened to argmax one-hot (or kept
soft) and always detached, so no gradient reaches the map a target came from.

Loss families:
  dice_loss, ce_loss:    building blocks
  supervised_loss:       labeled data, unprompted 0.8/0.2 and prompted 0.5/0.5
  cross_prompting_loss:  each unprompted map learns from the other branch's
                         prompted ensemble
  pcr_loss:              random-prompted maps learn from their own ensemble
  total_loss:            L_s + lambda1 * L_cross + lambda2 * L_c
"""

import math
from collections.abc import Sequence

import torch
import torch.nn.functional as F

from crossprompt_seg.core.config import DiceCeWeights, LossConfig, PseudoLabelMode
from crossprompt_seg.core.errors import InvalidInputError, NonFiniteLossError, ShapeMismatchError

DEFAULT_DICE_SMOOTH: float = 1e-5
DEFAULT_CE_CLAMP: float = 1e-7

MapOrMaps = torch.Tensor | Sequence[torch.Tensor]


def _check_shapes(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if pred.dim() != 4:
        raise ShapeMismatchError(f"expected (B, C, H, W) maps, got {tuple(pred.shape)}")


def dice_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    smooth: float = DEFAULT_DICE_SMOOTH,
    skip_empty: bool = False,
) -> torch.Tensor:
    """Soft Dice loss averaged over foreground classes.

    ``1 - mean_c (2 * sum(pred_c * target_c) + eps) / (sum(pred_c) + sum(target_c) + eps)``
    for c >= 1; sums run over the batch and all pixels. Background is excluded.

    Args:
        pred: Probability map (B, C, H, W).
        target: One-hot or probability map of the same shape.
        smooth: Smoothing epsilon.
        skip_empty: Exclude classes absent from both the target and the
            prediction's argmax; returns zero when every class is excluded.

    Returns:
        Scalar loss in [0, 1].

    Raises:
        ShapeMismatchError: If shapes differ.
    """
    _check_shapes(pred, target)
    dims = (0, 2, 3)
    intersection = (pred * target).sum(dim=dims)[1:]
    denominator = pred.sum(dim=dims)[1:] + target.sum(dim=dims)[1:]
    per_class = 1.0 - (2.0 * intersection + smooth) / (denominator + smooth)

    if skip_empty:
        predicted = F.one_hot(pred.detach().argmax(dim=1), pred.shape[1]).sum(dim=(0, 1, 2))[1:] > 0
        present = (target.detach().sum(dim=dims)[1:] > 0) | predicted
        if not bool(present.any()):
            return pred.sum() * 0.0
        per_class = per_class[present]
    return per_class.mean()


def ce_loss(pred: torch.Tensor, target: torch.Tensor, clamp: float = DEFAULT_CE_CLAMP) -> torch.Tensor:
    """Mean per-pixel cross-entropy ``-sum_c target * log(pred)``.

    Args:
        pred: Probability map (B, C, H, W); clamped below at ``clamp``.
        target: One-hot or probability map of the same shape.
        clamp: Lower bound applied to pred before the log.

    Returns:
        Scalar loss.

    Raises:
        ShapeMismatchError: If shapes differ.
    """
    _check_shapes(pred, target)
    return -(target * torch.log(pred.clamp_min(clamp))).sum(dim=1).mean()


def one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Convert (B, H, W) integer labels into a (B, C, H, W) float one-hot map."""
    return F.one_hot(labels.long(), num_classes).permute(0, 3, 1, 2).to(torch.get_default_dtype())


def pseudo_target(prob: torch.Tensor, mode: PseudoLabelMode | str = PseudoLabelMode.HARD) -> torch.Tensor:
    """Turn a probability map into a gradient-isolated target.

    Args:
        prob: Probability map (B, C, H, W).
        mode: ``hard`` for argmax one-hot, ``soft`` for the detached map.

    Returns:
        Detached target map of the same shape and dtype.
    """
    detached = prob.detach()
    if PseudoLabelMode(mode) is PseudoLabelMode.SOFT:
        return detached
    return one_hot(detached.argmax(dim=1), prob.shape[1]).to(prob.dtype)


def _as_list(maps: MapOrMaps) -> list[torch.Tensor]:
    return [maps] if isinstance(maps, torch.Tensor) else list(maps)


def _keep_mask(reference: torch.Tensor, mask_flags: torch.Tensor | None) -> torch.Tensor | None:
    """Indices of samples that take part in an unsupervised loss, None for all."""
    if mask_flags is None:
        return None
    flags = torch.as_tensor(mask_flags, dtype=torch.bool, device=reference.device)
    if flags.shape != (reference.shape[0],):
        raise ShapeMismatchError(f"mask_flags must have shape ({reference.shape[0]},), got {tuple(flags.shape)}")
    return ~flags


def _unsupervised_bracket(
    pred: torch.Tensor,
    target: torch.Tensor,
    weights: DiceCeWeights,
    smooth: float,
    clamp: float,
) -> torch.Tensor:
    # 2 * (0.5 * dice + 0.5 * ce) == dice + ce for the default weights
    dice = dice_loss(pred, target, smooth=smooth, skip_empty=True)
    ce = ce_loss(pred, target, clamp=clamp)
    return 2.0 * (weights.dice * dice + weights.ce * ce)


def _pull_towards(
    preds: list[torch.Tensor],
    source: torch.Tensor,
    keep: torch.Tensor | None,
    config: LossConfig,
) -> torch.Tensor:
    """Mean bracket of each prediction against the pseudo target of ``source``."""
    target = pseudo_target(source, config.pseudo_label)
    if keep is not None:
        target = target[keep]
    terms = [
        _unsupervised_bracket(
            pred if keep is None else pred[keep],
            target,
            config.unsupervised,
            config.dice_smooth,
            config.ce_clamp,
        )
        for pred in preds
    ]
    return torch.stack(terms).mean()


def _zero_like(*tensors: torch.Tensor) -> torch.Tensor:
    # Keeps the autograd graph connected so backward() sees zero gradients.
    return torch.stack([t.sum() for t in tensors]).sum() * 0.0


def cross_prompting_loss(
    p1: torch.Tensor,
    p2: torch.Tensor,
    p_hat1: torch.Tensor,
    p_hat2: torch.Tensor,
    mask_flags: torch.Tensor | None = None,
    config: LossConfig | None = None,
) -> torch.Tensor:
    """Symmetric cross prompting loss.

    ``0.5 * [dice(p1, T(p_hat2)) + ce(p1, T(p_hat2))] + 0.5 * [dice(p2, T(p_hat1)) + ce(p2, T(p_hat1))]``
    where T is ``pseudo_target``. Samples flagged in ``mask_flags`` are excluded;
    with every sample flagged the loss is zero with vanishing gradients.

    Args:
        p1: Unprompted map of branch 1.
        p2: Unprompted map of branch 2.
        p_hat1: Prompted ensemble of branch 1 (prompts from branch 2).
        p_hat2: Prompted ensemble of branch 2 (prompts from branch 1).
        mask_flags: Bool (B,), True for degenerate samples.
        config: Loss settings; defaults to ``LossConfig()``.

    Returns:
        Scalar loss.
    """
    config = config or LossConfig()
    for pred, target in ((p1, p_hat2), (p2, p_hat1)):
        _check_shapes(pred, target)
    keep = _keep_mask(p1, mask_flags)
    if keep is not None and not bool(keep.any()):
        return _zero_like(p1, p2)

    first = _pull_towards([p1], p_hat2, keep, config)
    second = _pull_towards([p2], p_hat1, keep, config)
    return 0.5 * first + 0.5 * second


def pcr_loss(
    p1_random: MapOrMaps,
    p_hat1: torch.Tensor,
    p2_random: MapOrMaps,
    p_hat2: torch.Tensor,
    mask_flags: torch.Tensor | None = None,
    config: LossConfig | None = None,
) -> torch.Tensor:
    """Prompt consistency regularization over both decoders.

    ``0.5 * [dice(p1r, T(p_hat1)) + ce(p1r, T(p_hat1))] + 0.5 * [same for branch 2]``.
    Only the pulled maps receive gradient; the targets are isolated. With
    several pulled maps per branch the branch term is their mean; with none
    it is zero.

    Args:
        p1_random: Random-prompted map(s) of branch 1 (optionally also its center map).
        p_hat1: Target source for branch 1, normally the prompted ensemble.
        p2_random: Random-prompted map(s) of branch 2.
        p_hat2: Target source for branch 2.
        mask_flags: Bool (B,), True for degenerate samples.
        config: Loss settings; defaults to ``LossConfig()``.

    Returns:
        Scalar loss.
    """
    config = config or LossConfig()
    pulled1, pulled2 = _as_list(p1_random), _as_list(p2_random)
    for pred in pulled1:
        _check_shapes(pred, p_hat1)
    for pred in pulled2:
        _check_shapes(pred, p_hat2)
    if not pulled1 and not pulled2:
        return _zero_like(p_hat1, p_hat2)

    keep = _keep_mask(p_hat1, mask_flags)
    if keep is not None and not bool(keep.any()):
        return _zero_like(*pulled1, *pulled2)

    zero = torch.zeros((), dtype=p_hat1.dtype, device=p_hat1.device)
    first = _pull_towards(pulled1, p_hat1, keep, config) if pulled1 else zero
    second = _pull_towards(pulled2, p_hat2, keep, config) if pulled2 else zero
    return 0.5 * first + 0.5 * second


def _check_one_hot(y: torch.Tensor) -> None:
    binary = (y == 0) | (y == 1)
    if not bool(binary.all()) or not bool((y.sum(dim=1) == 1).all()):
        raise InvalidInputError("ground truth y must be one-hot across the class dimension")


def _weighted(pred: torch.Tensor, y: torch.Tensor, weights: DiceCeWeights, config: LossConfig) -> torch.Tensor:
    return weights.dice * dice_loss(pred, y, smooth=config.dice_smooth) + weights.ce * ce_loss(
        pred,
        y,
        clamp=config.ce_clamp,
    )


def supervised_loss(
    p1l: torch.Tensor,
    p2l: torch.Tensor | None,
    p1cl: torch.Tensor | None,
    p2cl: torch.Tensor | None,
    p1rl: MapOrMaps,
    p2rl: MapOrMaps,
    y: torch.Tensor,
    config: LossConfig | None = None,
) -> torch.Tensor:
    """Supervised loss on unprompted and prompted labeled outputs.

    ``Ls(p1l, y) + Ls(p2l, y) + Lsp(p1cl, y) + Lsp(p2cl, y) + Lsp(p1rl, y) + Lsp(p2rl, y)``
    with ``Ls = 0.8 dice + 0.2 ce`` and ``Lsp = 0.5 dice + 0.5 ce`` by default.
    Absent maps (None, or empty random lists) contribute nothing; several
    random maps for one branch contribute their mean.

    Args:
        p1l: Unprompted labeled map of branch 1.
        p2l: Unprompted labeled map of branch 2 (None in single-branch mode).
        p1cl: Center-prompted map of branch 1.
        p2cl: Center-prompted map of branch 2.
        p1rl: Random-prompted map(s) of branch 1.
        p2rl: Random-prompted map(s) of branch 2.
        y: One-hot ground truth (B, C, H, W).
        config: Loss settings; defaults to ``LossConfig()``.

    Returns:
        Scalar loss.

    Raises:
        InvalidInputError: If y is not one-hot.
    """
    config = config or LossConfig()
    _check_one_hot(y)

    total = _weighted(p1l, y, config.supervised_unprompted, config)
    if p2l is not None:
        total = total + _weighted(p2l, y, config.supervised_unprompted, config)
    for center in (p1cl, p2cl):
        if center is not None:
            total = total + _weighted(center, y, config.supervised_prompted, config)
    for randoms in (_as_list(p1rl), _as_list(p2rl)):
        if randoms:
            terms = [_weighted(pred, y, config.supervised_prompted, config) for pred in randoms]
            total = total + torch.stack(terms).mean()
    return total


def _ensure_finite(name: str, value: torch.Tensor | float) -> None:
    scalar = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(scalar):
        raise NonFiniteLossError(diagnostics={"term": name, "value": scalar})


def total_loss(
    l_s: torch.Tensor | float,
    l_cross: torch.Tensor | float,
    l_c: torch.Tensor | float,
    config: LossConfig | None = None,
) -> torch.Tensor | float:
    """Combine the three loss families: ``L_s + lambda1 * L_cross + lambda2 * L_c``.

    Raises:
        NonFiniteLossError: If any term is NaN or infinite.
    """
    config = config or LossConfig()
    for name, value in (("l_s", l_s), ("l_cross", l_cross), ("l_c", l_c)):
        _ensure_finite(name, value)
    return l_s + config.lambda1 * l_cross + config.lambda2 * l_c
