"""Pre-norm transformer blocks, the shared vision backbone and the text encoder.

Parameters live in a flat ``dict[str, Tensor]`` (the parameter registry); every
function here takes the registry plus a name prefix so the same code serves the
student backbone, its EMA teacher copy and the text encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .rng import stream
from .tensor import Tensor

ParamRegistry = dict[str, Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    num_heads: int = 4
    model_dim: int = 64
    mlp_ratio: int = 4
    vocab_size: int = 0
    max_tokens: int = 128

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.num_heads < 1 or self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.mlp_ratio < 1 or self.max_tokens < 1:
            raise ValueError("mlp_ratio and max_tokens must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class AttentionTrace:
    """[CLS]->patch attention rows, shape (batch, layers, heads, patches).

    The [CLS]->[CLS] entry is dropped and each row renormalised, so every row
    is a distribution over patch tokens only.
    """

    rows: np.ndarray

    @property
    def num_layers(self) -> int:
        return self.rows.shape[-3]

    @property
    def num_heads(self) -> int:
        return self.rows.shape[-2]

    @property
    def num_patches(self) -> int:
        return self.rows.shape[-1]

    def sample(self, b: int) -> "AttentionTrace":
        return AttentionTrace(self.rows[b])


@dataclass
class EncoderOutput:
    hidden: Tensor  # (B, T, D), position 0 is [CLS]
    trace: AttentionTrace | None = None

    @property
    def cls_embedding(self) -> Tensor:
        return self.hidden[:, 0]

    @property
    def token_embeddings(self) -> Tensor:
        return self.hidden[:, 1:]


# ---------------------------------------------------------------------------
# initialisation


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(arr, requires_grad=True, dtype=dtype)


def fan_in_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Truncated normal with std 1/sqrt(fan_in); keeps activations O(1) at small widths."""
    return trunc_normal(rng, shape, std=shape[0] ** -0.5)


def init_encoder(config: EncoderConfig, rng: np.random.Generator, prefix: str = "", dtype=np.float64) -> ParamRegistry:
    """Transformer stack parameters: L pre-norm blocks plus a final layernorm."""
    d = config.model_dim
    hidden = d * config.mlp_ratio
    params: ParamRegistry = {}
    for layer in range(config.num_layers):
        p = f"{prefix}blocks.{layer}."
        params[p + "ln1.gain"] = _param(np.ones(d), dtype)
        params[p + "ln1.bias"] = _param(np.zeros(d), dtype)
        for name in ("q", "k", "v", "proj"):
            params[p + f"attn.{name}.weight"] = _param(fan_in_normal(rng, (d, d)), dtype)
            params[p + f"attn.{name}.bias"] = _param(np.zeros(d), dtype)
        params[p + "ln2.gain"] = _param(np.ones(d), dtype)
        params[p + "ln2.bias"] = _param(np.zeros(d), dtype)
        params[p + "mlp.fc1.weight"] = _param(fan_in_normal(rng, (d, hidden)), dtype)
        params[p + "mlp.fc1.bias"] = _param(np.zeros(hidden), dtype)
        params[p + "mlp.fc2.weight"] = _param(fan_in_normal(rng, (hidden, d)), dtype)
        params[p + "mlp.fc2.bias"] = _param(np.zeros(d), dtype)
    params[prefix + "norm.gain"] = _param(np.ones(d), dtype)
    params[prefix + "norm.bias"] = _param(np.zeros(d), dtype)
    return params


def init_params(config: EncoderConfig, seed: int, prefix: str = "", dtype=np.float64) -> ParamRegistry:
    """Deterministic encoder registry for ``seed``."""
    return init_encoder(config, stream(seed, "init/" + prefix), prefix, dtype)


def encoder_param_count(config: EncoderConfig) -> int:
    """Closed-form size of :func:`init_encoder`'s registry."""
    d, r = config.model_dim, config.mlp_ratio
    per_block = 4 * (d * d + d) + 2 * r * d * d + r * d + d + 4 * d
    return config.num_layers * per_block + 2 * d


def count_params(params: ParamRegistry) -> int:
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# forward


def _attention(params: ParamRegistry, p: str, x: Tensor, config: EncoderConfig, mask_add):
    b, t, d = x.shape
    h, c = config.num_heads, config.head_dim

    def heads(name):
        y = T.linear(x, params[p + f"attn.{name}.weight"], params[p + f"attn.{name}.bias"])
        return T.transpose(T.reshape(y, (b, t, h, c)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(c))
    if mask_add is not None:
        scores = T.add_constant(scores, mask_add)
    probs = T.softmax(scores, axis=-1)
    mixed = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
    out = T.linear(mixed, params[p + "attn.proj.weight"], params[p + "attn.proj.bias"])
    return out, probs.data


def _cls_rows(probs: np.ndarray) -> np.ndarray:
    rows = probs[:, :, 0, 1:]
    total = rows.sum(axis=-1, keepdims=True)
    return rows / np.where(total > 0, total, 1.0)


def encoder_forward(
    params: ParamRegistry,
    x: Tensor,
    config: EncoderConfig,
    prefix: str = "",
    key_valid: np.ndarray | None = None,
    record_trace: bool = False,
) -> EncoderOutput:
    """Run the pre-norm stack on embedded tokens ``x`` of shape (B, T, D).

    ``key_valid`` (B, T) marks real tokens; padded keys get no attention.
    With ``record_trace`` the [CLS] attention row over the remaining tokens is
    kept for every layer and head.
    """
    if x.ndim != 3:
        raise T.ShapeError(f"encoder input must be (batch, tokens, dim), got {x.shape}")
    b, t, d = x.shape
    if d != config.model_dim:
        raise T.ShapeError(f"token dim {d} does not match model_dim {config.model_dim}")
    if t > config.max_tokens:
        raise ValueError(f"{t} tokens exceed max_tokens={config.max_tokens}")
    mask_add = None
    if key_valid is not None:
        mask_add = np.where(np.asarray(key_valid, bool), 0.0, -1e9).astype(x.dtype)[:, None, None, :]
    rows = []
    h = x
    for layer in range(config.num_layers):
        p = f"{prefix}blocks.{layer}."
        a, probs = _attention(params, p, T.layernorm(h, params[p + "ln1.gain"], params[p + "ln1.bias"]), config, mask_add)
        if record_trace:
            rows.append(_cls_rows(probs))
        h = T.add(h, a)
        m = T.layernorm(h, params[p + "ln2.gain"], params[p + "ln2.bias"])
        m = T.gelu(T.linear(m, params[p + "mlp.fc1.weight"], params[p + "mlp.fc1.bias"]))
        m = T.linear(m, params[p + "mlp.fc2.weight"], params[p + "mlp.fc2.bias"])
        h = T.add(h, m)
    h = T.layernorm(h, params[prefix + "norm.gain"], params[prefix + "norm.bias"])
    trace = AttentionTrace(np.stack(rows, axis=1)) if record_trace else None
    return EncoderOutput(h, trace)


def attention_forward(tokens, params: ParamRegistry, config: EncoderConfig, prefix: str = "", record_trace: bool = False) -> EncoderOutput:
    """Encode a :class:`~crossdim.tokenizers.TokenSequence` with the shared backbone."""
    return encoder_forward(params, tokens.embeddings, config, prefix, record_trace=record_trace)


# ---------------------------------------------------------------------------
# text encoder


def init_text_params(config: EncoderConfig, seed: int, prefix: str = "text.", dtype=np.float64) -> ParamRegistry:
    if config.vocab_size < 1:
        raise ValueError("text encoder needs vocab_size >= 1")
    rng = stream(seed, "init/" + prefix)
    d = config.model_dim
    params: ParamRegistry = {
        prefix + "token_embed": _param(trunc_normal(rng, (config.vocab_size, d)), dtype),
        prefix + "pos_embed": _param(trunc_normal(rng, (config.max_tokens, d)), dtype),
        prefix + "cls": _param(trunc_normal(rng, (d,)), dtype),
    }
    params.update(init_encoder(config, rng, prefix, dtype))
    return params


def encode_text_batch(reports: Sequence[Sequence[int]], params: ParamRegistry, config: EncoderConfig, prefix: str = "text.") -> Tensor:
    """[CLS]-pooled embeddings (B, D) for a batch of token-id lists (right-padded)."""
    if not reports:
        raise ValueError("no reports to encode")
    lengths = [len(r) for r in reports]
    if min(lengths) == 0:
        raise ValueError("empty report")
    longest = max(lengths)
    if longest + 1 > config.max_tokens:
        raise ValueError(f"report of {longest} tokens exceeds max_tokens={config.max_tokens}")
    ids = np.zeros((len(reports), longest), dtype=np.intp)
    valid = np.zeros((len(reports), longest + 1), dtype=bool)
    valid[:, 0] = True
    for i, r in enumerate(reports):
        arr = np.asarray(r, dtype=np.int64)
        if arr.min() < 0 or arr.max() >= config.vocab_size:
            raise ValueError(f"token id out of range [0, {config.vocab_size})")
        ids[i, : len(r)] = arr
        valid[i, 1 : len(r) + 1] = True
    b = len(reports)
    d = config.model_dim
    words = T.take(params[prefix + "token_embed"], ids.reshape(-1), axis=0)
    words = T.reshape(words, (b, longest, d))
    cls = T.reshape(T.concat([params[prefix + "cls"]] * b, axis=0), (b, 1, d))
    x = T.concat([cls, words], axis=1)
    x = T.add_trailing(x, params[prefix + "pos_embed"][: longest + 1])
    out = encoder_forward(params, x, config, prefix, key_valid=valid)
    return out.cls_embedding


def encode_text(report_tokens: Sequence[int], params: ParamRegistry, config: EncoderConfig, prefix: str = "text.") -> Tensor:
    """Embedding (D,) of a single report."""
    if len(report_tokens) == 0:
        raise ValueError("empty report")
    return encode_text_batch([report_tokens], params, config, prefix)[0]
