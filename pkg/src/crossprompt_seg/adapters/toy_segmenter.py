"""Toy promptable segmenter with one shared encoder and two mask decoders.

A desk-scale stand-in for a pretrained foundation segmenter that exercises
the same contract: a patch-embedding attention encoder (LoRA-adaptable), a
point prompt encoder with one learned embedding per class and a learned
default dense embedding, and two independently initialized decoders that
upsample progressively (2x per stage) back to the input resolution.

Shapes for ``ModelConfig`` (resolution R, patch P, width D, C classes):
  encode       (B, 1|3, R, R) -> (B, D, R/P, R/P)
  prompt_encode               -> sparse (B, N+1, D), dense (B, D, R/P, R/P)
  decode                      -> (B, C, R, R), softmax over C
"""

import math
from collections.abc import Sequence

import torch
from pydantic import ValidationError
from torch import nn

from crossprompt_seg.adapters.lora import apply_lora
from crossprompt_seg.core.config import LoraConfig, ModelConfig
from crossprompt_seg.core.errors import ConfigError, InvalidInputError
from crossprompt_seg.core.models import PromptEmbedding, PromptSet
from crossprompt_seg.observability import get_logger

logger = get_logger(__name__)

_EMBED_INIT_STD: float = 0.02
_MIN_DECODER_CHANNELS: int = 8


class AttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention block with separate q/k/v/out projections."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 2) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.norm1 = nn.LayerNorm(dim)
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        batch, tokens, dim = x.shape
        return x.view(batch, tokens, self.num_heads, dim // self.num_heads).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, tokens, dim = x.shape
        h = self.norm1(x)
        q, k, v = self._heads(self.q_proj(h)), self._heads(self.k_proj(h)), self._heads(self.v_proj(h))
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dim // self.num_heads), dim=-1)
        attended = (weights @ v).transpose(1, 2).reshape(batch, tokens, dim)
        x = x + self.out_proj(attended)
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    """Patch embedding, learned positional embedding, and attention blocks."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.in_channels = config.in_channels
        self.grid = config.input_resolution // config.patch_size
        self.patch_embed = nn.Conv2d(
            config.in_channels,
            config.embed_dim,
            kernel_size=config.patch_size,
            stride=config.patch_size,
        )
        self.pos_embed = nn.Parameter(torch.randn(1, self.grid * self.grid, config.embed_dim) * _EMBED_INIT_STD)
        self.blocks = nn.ModuleList(AttentionBlock(config.embed_dim, config.num_heads) for _ in range(config.depth))
        self.neck = nn.LayerNorm(config.embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        tokens = self.patch_embed(images).flatten(2).transpose(1, 2) + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.neck(tokens)
        batch, _, dim = tokens.shape
        return tokens.transpose(1, 2).reshape(batch, dim, self.grid, self.grid)


class PointPromptEncoder(nn.Module):
    """Embeds positive point prompts as random-Fourier position + class embedding.

    Sparse tokens always start with a learned not-a-point token, so an
    unprompted sample still attends to one valid token.
    """

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.resolution = config.input_resolution
        self.grid = config.input_resolution // config.patch_size
        self.embed_dim = config.embed_dim
        self.register_buffer("fourier_basis", torch.randn(2, config.embed_dim // 2))
        self.class_embed = nn.Embedding(config.num_classes, config.embed_dim)
        self.not_a_point_embed = nn.Embedding(1, config.embed_dim)
        self.default_dense_embed = nn.Parameter(
            torch.randn(1, config.embed_dim, self.grid, self.grid) * _EMBED_INIT_STD
        )

    def positional_encoding(self, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
        """Fourier features of pixel centers normalized to [-1, 1]."""
        coords = torch.stack([(cols + 0.5) / self.resolution, (rows + 0.5) / self.resolution], dim=-1)
        projected = (2.0 * coords - 1.0) @ self.fourier_basis * (2.0 * math.pi)
        return torch.cat([torch.sin(projected), torch.cos(projected)], dim=-1)

    def forward(self, prompts: Sequence[PromptSet | None], batch_size: int) -> PromptEmbedding:
        if len(prompts) != batch_size:
            raise InvalidInputError(f"expected {batch_size} prompt entries, got {len(prompts)}")
        device = self.default_dense_embed.device
        counts = [0 if prompt is None else len(prompt) for prompt in prompts]
        width = max(counts, default=0) + 1

        sparse = torch.zeros(batch_size, width, self.embed_dim, device=device)
        valid = torch.zeros(batch_size, width, dtype=torch.bool, device=device)
        sparse[:, 0] = self.not_a_point_embed.weight[0]
        valid[:, 0] = True

        for index, prompt in enumerate(prompts):
            if not prompt:
                continue
            for point in prompt.points:
                if not point.in_bounds(self.resolution, self.resolution):
                    raise InvalidInputError(
                        f"point ({point.row}, {point.col}) is outside a {self.resolution}x{self.resolution} image"
                    )
                if point.class_id >= self.class_embed.num_embeddings:
                    raise InvalidInputError(f"class_id {point.class_id} exceeds the model's classes")
            rows = torch.tensor([point.row for point in prompt.points], dtype=torch.float32, device=device)
            cols = torch.tensor([point.col for point in prompt.points], dtype=torch.float32, device=device)
            classes = torch.tensor([point.class_id for point in prompt.points], dtype=torch.long, device=device)
            tokens = self.positional_encoding(rows, cols) + self.class_embed(classes)
            sparse[index, 1 : 1 + len(prompt)] = tokens
            valid[index, 1 : 1 + len(prompt)] = True

        dense = self.default_dense_embed.expand(batch_size, -1, -1, -1)
        return PromptEmbedding(sparse=sparse, sparse_valid=valid, dense=dense)


class MaskDecoder(nn.Module):
    """Cross-attention from image tokens to prompt tokens, then staged 2x upsampling."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        dim = config.embed_dim
        self.attention = nn.MultiheadAttention(dim, config.num_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))
        self.norm2 = nn.LayerNorm(dim)

        hidden = max(dim // 2, _MIN_DECODER_CHANNELS)
        stages: list[nn.Module] = []
        channels = dim
        for _ in range(int(math.log2(config.patch_size))):
            stages += [nn.ConvTranspose2d(channels, hidden, kernel_size=2, stride=2), nn.GELU()]
            channels = hidden
        self.upsample = nn.Sequential(*stages)
        self.head = nn.Conv2d(channels, config.num_classes, kernel_size=1)

    def forward(self, image_embedding: torch.Tensor, prompt: PromptEmbedding) -> torch.Tensor:
        batch, dim, height, width = image_embedding.shape
        tokens = (image_embedding + prompt.dense).flatten(2).transpose(1, 2)
        attended, _ = self.attention(
            tokens,
            prompt.sparse,
            prompt.sparse,
            key_padding_mask=~prompt.sparse_valid,
            need_weights=False,
        )
        tokens = self.norm1(tokens + attended)
        tokens = self.norm2(tokens + self.mlp(tokens))
        grid = tokens.transpose(1, 2).reshape(batch, dim, height, width)
        return torch.softmax(self.head(self.upsample(grid)), dim=1)


class ToySegmenter(nn.Module):
    """Shared encoder and prompt encoder with two mask decoders.

    Attributes:
        num_classes: Classes C including background.
        input_resolution: Square input side.
        embedding_shape: (D, R/P, R/P) of the image embedding.
    """

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.num_classes = config.num_classes
        self.input_resolution = config.input_resolution
        self.image_encoder = ImageEncoder(config)
        self.prompt_encoder = PointPromptEncoder(config)
        self.decoders = nn.ModuleDict({"1": MaskDecoder(config), "2": MaskDecoder(config)})

    @property
    def embedding_shape(self) -> tuple[int, int, int]:
        grid = self.input_resolution // self.config.patch_size
        return (self.config.embed_dim, grid, grid)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """Encode images in [0, 1]; grayscale input is replicated across channels.

        Raises:
            InvalidInputError: On wrong rank, channel count, resolution, or range.
        """
        if images.dim() != 4:
            raise InvalidInputError(f"expected (B, channels, H, W) images, got {tuple(images.shape)}")
        size = (self.input_resolution, self.input_resolution)
        if tuple(images.shape[-2:]) != size:
            raise InvalidInputError(f"image resolution {tuple(images.shape[-2:])} != model resolution {size}")
        if images.shape[1] == 1 and self.config.in_channels != 1:
            images = images.expand(-1, self.config.in_channels, -1, -1)
        if images.shape[1] != self.config.in_channels:
            raise InvalidInputError(f"expected 1 or {self.config.in_channels} channels, got {images.shape[1]}")
        if bool((images < 0).any()) or bool((images > 1).any()):
            raise InvalidInputError("image values must lie in [0, 1]")
        return self.image_encoder(images)

    def prompt_encode(self, prompts: list[PromptSet | None], batch_size: int) -> PromptEmbedding:
        return self.prompt_encoder(prompts, batch_size)

    def decode(self, branch_id: int, image_embedding: torch.Tensor, prompt_embedding: PromptEmbedding) -> torch.Tensor:
        if str(branch_id) not in self.decoders:
            raise InvalidInputError(f"unknown branch_id {branch_id}; expected 1 or 2")
        return self.decoders[str(branch_id)](image_embedding, prompt_embedding)

    def unprompted(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Unprompted maps of both decoders for a batch."""
        embedding = self.encode(images)
        default = self.prompt_encode([None] * images.shape[0], images.shape[0])
        return self.decode(1, embedding, default), self.decode(2, embedding, default)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [parameter for parameter in self.parameters() if parameter.requires_grad]


def build_toy_model(
    num_classes: int = 2,
    input_resolution: int = 64,
    seed: int = 0,
    config: ModelConfig | None = None,
    lora: LoraConfig | None = None,
) -> ToySegmenter:
    """Build a seeded toy segmenter, optionally with LoRA on the encoder.

    Initialization runs under a forked torch RNG seeded with ``seed``, so the
    global RNG is untouched and equal seeds give identical weights. The two
    decoders draw consecutive samples and therefore differ.

    Args:
        num_classes: Classes C including background (ignored when config is given).
        input_resolution: Square input side (ignored when config is given).
        seed: Initialization seed (ignored when config is given).
        config: Full model shape.
        lora: When given, LoRA is applied to the encoder.

    Raises:
        ConfigError: If the shape is invalid, e.g. resolution not divisible by the patch size.
    """
    if config is None:
        try:
            config = ModelConfig(num_classes=num_classes, input_resolution=input_resolution, seed=seed)
        except ValidationError as exc:
            raise ConfigError(f"Invalid model shape: {exc.errors()[0]['msg']}", field="model") from exc

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = ToySegmenter(config)
    if lora is not None:
        apply_lora(model.image_encoder, lora)

    logger.info(
        "Toy segmenter built",
        num_classes=config.num_classes,
        resolution=config.input_resolution,
        parameters=sum(parameter.numel() for parameter in model.parameters()),
        trainable=len(model.trainable_parameters()),
    )
    return model
