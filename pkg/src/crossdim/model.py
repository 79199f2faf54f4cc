"""Parameter layout of the full model: vision side (tokenizers, shared backbone,
projection and distillation heads) and text side (encoder, projection, temperature)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import EncoderConfig, EncoderOutput, ParamRegistry, encode_text_batch, encoder_forward, init_encoder, fan_in_normal, init_text_params, trunc_normal
from .rng import stream
from .synth import VOCAB
from .tensor import Tensor
from .tokenizers import Geometry, TokenSequence, init_tokenizer_params

BACKBONE = "backbone."
TOKENIZER = "tok."


@dataclass(frozen=True)
class ModelConfig:
    geometry: Geometry = field(default_factory=Geometry)
    vision: EncoderConfig = field(default_factory=lambda: EncoderConfig(4, 4, 64, 4, 0, 160))
    text: EncoderConfig = field(default_factory=lambda: EncoderConfig(2, 4, 64, 4, len(VOCAB), 64))
    embed_dim: int = 32
    num_prototypes: int = 64
    init_temperature: float = 0.07
    # fixed intensity normalisation applied before tokenisation
    intensity_mean: float = 0.3
    intensity_std: float = 0.065

    def __post_init__(self):
        if self.intensity_std <= 0:
            raise ValueError("intensity_std must be positive")
        if self.vision.model_dim != self.text.model_dim:
            raise ValueError("vision and text encoders must share model_dim")
        if self.vision.max_tokens < 1 + self.geometry.tokens_3d:
            raise ValueError("vision max_tokens cannot hold a 3D sequence")


def init_model(config: ModelConfig, seed: int, dtype=np.float64) -> tuple[ParamRegistry, ParamRegistry]:
    """Return (vision registry, text registry), deterministic in ``seed``."""
    d, e, k = config.vision.model_dim, config.embed_dim, config.num_prototypes
    rng = stream(seed, "init/vision")
    vision = init_tokenizer_params(config.geometry, d, rng, TOKENIZER, dtype)
    vision.update(init_encoder(config.vision, rng, BACKBONE, dtype))

    def param(arr):
        return Tensor(arr, requires_grad=True, dtype=dtype)

    vision["proj.image"] = param(trunc_normal(rng, (d, e)))
    hidden, bottleneck = dino_widths(d)
    vision["dino.fc1.weight"] = param(fan_in_normal(rng, (d, hidden)))
    vision["dino.fc1.bias"] = param(np.zeros(hidden))
    vision["dino.fc2.weight"] = param(fan_in_normal(rng, (hidden, bottleneck)))
    vision["dino.fc2.bias"] = param(np.zeros(bottleneck))
    vision["dino.prototypes"] = param(fan_in_normal(rng, (bottleneck, k)))

    text = init_text_params(config.text, seed, "text.", dtype)
    trng = stream(seed, "init/text-head")
    text["proj.text"] = param(trunc_normal(trng, (d, e)))
    text["log_temperature"] = param(np.array(math.log(config.init_temperature)))
    return vision, text


def normalize_intensity(pixels: np.ndarray, config: ModelConfig) -> np.ndarray:
    """(x - mean) / std in the input's float dtype; applied per voxel, so it keeps patch locality."""
    x = np.asarray(pixels)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    return ((x - config.intensity_mean) / config.intensity_std).astype(dtype, copy=False)


def encode_tokens(params: ParamRegistry, seq: TokenSequence, config: ModelConfig, record_trace: bool = False) -> EncoderOutput:
    return encoder_forward(params, seq.embeddings, config.vision, BACKBONE, record_trace=record_trace)


def image_embedding(params: ParamRegistry, cls: Tensor) -> Tensor:
    """Unit-norm shared-space embedding (B, E) of backbone [CLS] vectors."""
    return T.l2_normalize(T.matmul(cls, params["proj.image"]))


def text_embedding(params: ParamRegistry, reports, config: ModelConfig) -> Tensor:
    cls = encode_text_batch(reports, params, config.text, "text.")
    return T.l2_normalize(T.matmul(cls, params["proj.text"]))


def dino_widths(model_dim: int) -> tuple[int, int]:
    """(hidden, bottleneck) widths of the distillation head."""
    return 2 * model_dim, max(model_dim // 2, 1)


def dino_logits(params: ParamRegistry, x: Tensor) -> Tensor:
    """Prototype logits for token features ``x`` (..., D).

    MLP into a bottleneck, L2-normalised, then scored against unit-norm
    prototype columns, so every logit is a cosine in [-1, 1].
    """
    h = T.gelu(T.linear(x, params["dino.fc1.weight"], params["dino.fc1.bias"]))
    z = T.l2_normalize(T.linear(h, params["dino.fc2.weight"], params["dino.fc2.bias"]))
    return T.matmul(z, T.l2_normalize(params["dino.prototypes"], axis=0))
