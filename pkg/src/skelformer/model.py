"""Stacked spatial-temporal transformer for skeleton sequences.

Data flow for a batch ``[B, T, V, C_in]``::

    embed -> attach class token (virtual joint 0) -> sinusoidal time code
          -> N x block(spatial MHSA, temporal MHSA + relative bias, FFN)
          -> class-joint features averaged over frames -> linear head

Each block uses post-norm residuals plus a bypass from the block input to the
last normalization, so the block input skips all three sub-layers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tk
from .config import ConfigError
from .tensor import ShapeError, Tensor

ModelParams = dict  # parameter name -> Tensor

MASK_FILL = -1e9


@dataclass(frozen=True)
class ModelConfig:
    t_len: int
    joints: int
    num_classes: int
    in_channels: int = 2
    c_emb: int = 64
    heads: int = 8
    blocks: int = 10
    ffn_ratio: int = 4
    rpe_clip: int = 64
    scale_attention: bool = True
    dropout: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        positive = ("t_len", "joints", "in_channels", "c_emb", "heads", "blocks", "ffn_ratio", "rpe_clip")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.c_emb % self.heads:
            raise ConfigError("heads", f"c_emb ({self.c_emb}) must be divisible by heads ({self.heads})")
        if self.c_emb % 2:
            raise ConfigError("c_emb", f"sinusoidal encoding needs an even width, got {self.c_emb}")
        if self.num_classes < 2:
            raise ConfigError("num_classes", f"must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", f"must lie in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.c_emb // self.heads


def _linear_shapes(prefix: str, fan_in: int, fan_out: int) -> list[tuple[str, tuple]]:
    return [(f"{prefix}.weight", (fan_in, fan_out)), (f"{prefix}.bias", (fan_out,))]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    c, hidden = cfg.c_emb, cfg.c_emb * cfg.ffn_ratio
    shapes = _linear_shapes("embed", cfg.in_channels, c)
    shapes += [("class_token", (c,)), ("joint_embed", (cfg.joints + 1, c))]
    for b in range(cfg.blocks):
        pre = f"blocks.{b}"
        for kind in ("spatial", "temporal"):
            for proj in "qkvo":
                shapes += _linear_shapes(f"{pre}.{kind}.{proj}", c, c)
        shapes.append((f"{pre}.temporal.rpe_bias", (cfg.heads, 2 * cfg.rpe_clip + 1)))
        shapes += _linear_shapes(f"{pre}.ffn.w1", c, hidden)
        shapes += _linear_shapes(f"{pre}.ffn.w2", hidden, c)
        for ln in ("ln1", "ln2", "ln3"):
            shapes += [(f"{pre}.{ln}.gamma", (c,)), (f"{pre}.{ln}.beta", (c,))]
    shapes += _linear_shapes("head", c, cfg.num_classes)
    return dict(shapes)


def is_decayed(name: str) -> bool:
    """Weight decay applies to projection matrices only."""
    return name.endswith(".weight")


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    dtype = tk.get_dtype()
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-bound, bound, size=shape)
        elif name in ("class_token", "joint_embed"):
            value = rng.normal(0.0, 0.02, size=shape)
        elif leaf == "gamma":
            value = np.ones(shape)
        else:  # biases, beta, rpe_bias
            value = np.zeros(shape)
        params[name] = Tensor(value.astype(dtype), requires_grad=True)
    return params


def check_params(params: ModelParams, cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeError(f"parameter set mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {tuple(params[name].shape)}")


# -- building blocks ------------------------------------------------------

def linear(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    w, b = params[f"{prefix}.weight"], params[f"{prefix}.bias"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"{prefix}: input width {x.shape[-1]} does not match weight {w.shape}")
    lead = x.shape[:-1]
    y = x.reshape(-1, x.shape[-1]) @ w + b
    return y.reshape(*lead, w.shape[1])


def _as_input(frames) -> Tensor:
    return frames if isinstance(frames, Tensor) else Tensor(frames)


def embed(frames, params: ModelParams, cfg: ModelConfig) -> Tensor:
    x = _as_input(frames)
    if x.ndim != 4 or x.shape[2:] != (cfg.joints, cfg.in_channels):
        raise ShapeError(
            f"embed: expected [B, T, {cfg.joints}, {cfg.in_channels}], got {tuple(x.shape)}"
        )
    return linear(x, params, "embed") + params["joint_embed"][: cfg.joints]


def attach_class_token(x: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Prepend the class token as virtual joint 0 of every frame."""
    b, t, _, c = x.shape
    token = (params["class_token"] + params["joint_embed"][cfg.joints]).reshape(1, 1, 1, c)
    return tk.concat([tk.broadcast_to(token, (b, t, 1, c)), x], axis=2)


def sinusoidal_table(length: int, width: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, width, 2, dtype=np.float64) / width)
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(pos / rate)
    table[:, 1::2] = np.cos(pos / rate)
    return table


def add_positional_encoding(x: Tensor) -> Tensor:
    _, t, _, c = x.shape
    if c % 2:
        raise ShapeError(f"positional encoding needs an even width, got {c}")
    pe = sinusoidal_table(t, c).astype(x.dtype)
    return x + Tensor(pe[None, :, None, :], dtype=x.dtype)


def rpe_bias_matrix(rpe_bias: Tensor, length: int, clip: int) -> Tensor:
    """Gather ``[H, L, L]`` logits bias indexed by the clipped offset ``i - j``."""
    offsets = np.arange(length)[:, None] - np.arange(length)[None, :]
    idx = np.clip(offsets, -clip, clip) + clip
    return rpe_bias[:, idx]


def attention(
    x: Tensor,
    params: ModelParams,
    prefix: str,
    cfg: ModelConfig,
    bias: Tensor | None = None,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention over axis -2 of ``x`` (``[..., L, C]``).

    ``mask`` is boolean, broadcastable to ``[L, L]``; False entries are
    excluded from the softmax.  Returns the projected output and the
    attention weights ``[..., H, L, L]``.
    """
    *lead, length, c = x.shape
    h, d = cfg.heads, cfg.head_dim

    def split(t: Tensor) -> Tensor:
        return t.reshape(*lead, length, h, d).swapaxes(-2, -3)

    q = split(linear(x, params, f"{prefix}.q"))
    k = split(linear(x, params, f"{prefix}.k"))
    v = split(linear(x, params, f"{prefix}.v"))
    logits = q @ k.swapaxes(-1, -2)
    if cfg.scale_attention:
        logits = logits * (1.0 / math.sqrt(d))
    if bias is not None:
        logits = logits + bias
    if mask is not None:
        fill = np.where(np.asarray(mask, dtype=bool), 0.0, MASK_FILL).astype(x.dtype)
        logits = logits + Tensor(fill, dtype=x.dtype)
    weights = tk.softmax(logits, axis=-1)
    mixed = (weights @ v).swapaxes(-2, -3).reshape(*lead, length, c)
    return linear(mixed, params, f"{prefix}.o"), weights


def _check_4d(x: Tensor, cfg: ModelConfig, op: str) -> None:
    if x.ndim != 4 or x.shape[-1] != cfg.c_emb:
        raise ShapeError(f"{op}: expected [B, T, V', {cfg.c_emb}], got {tuple(x.shape)}")


def spatial_mhsa(x: Tensor, params: ModelParams, cfg: ModelConfig, block: int, return_attention: bool = False):
    """Every joint attends to every joint of the same frame."""
    _check_4d(x, cfg, "spatial_mhsa")
    out, weights = attention(x, params, f"blocks.{block}.spatial", cfg)
    return (out, weights) if return_attention else out


def temporal_mhsa_rpe(
    x: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    block: int,
    mask: np.ndarray | None = None,
    return_attention: bool = False,
):
    """Each joint attends over frames, with a learned relative-offset bias."""
    _check_4d(x, cfg, "temporal_mhsa_rpe")
    pre = f"blocks.{block}.temporal"
    bias = rpe_bias_matrix(params[f"{pre}.rpe_bias"], x.shape[1], cfg.rpe_clip)
    out, weights = attention(x.swapaxes(1, 2), params, pre, cfg, bias=bias, mask=mask)
    out = out.swapaxes(1, 2)
    return (out, weights) if return_attention else out


def ffn_core(x: Tensor, params: ModelParams, block: int) -> Tensor:
    pre = f"blocks.{block}.ffn"
    return linear(tk.gelu(linear(x, params, f"{pre}.w1")), params, f"{pre}.w2")


def ffn(x: Tensor, params: ModelParams, cfg: ModelConfig, block: int) -> Tensor:
    _check_4d(x, cfg, "ffn")
    return ffn_core(x, params, block) + x


def _ln(x: Tensor, params: ModelParams, prefix: str, cfg: ModelConfig) -> Tensor:
    return tk.layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"], cfg.ln_eps)


def block_forward(
    x_in: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    block: int,
    rng: np.random.Generator | None = None,
    temporal_mask: np.ndarray | None = None,
) -> Tensor:
    pre = f"blocks.{block}"
    p = cfg.dropout
    h1 = _ln(x_in + tk.dropout(spatial_mhsa(x_in, params, cfg, block), p, rng), params, f"{pre}.ln1", cfg)
    t = temporal_mhsa_rpe(h1, params, cfg, block, mask=temporal_mask)
    h2 = _ln(h1 + tk.dropout(t, p, rng), params, f"{pre}.ln2", cfg)
    # the trailing + x_in is the bypass around all three sub-layers
    return _ln(tk.dropout(ffn_core(h2, params, block), p, rng) + h2 + x_in, params, f"{pre}.ln3", cfg)


def encode_input(frames, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Input to the first block: ``[B, T, V+1, C]``."""
    return add_positional_encoding(attach_class_token(embed(frames, params, cfg), params, cfg))


def run_blocks(x: Tensor, params: ModelParams, cfg: ModelConfig, rng=None) -> Tensor:
    for b in range(cfg.blocks):
        x = block_forward(x, params, cfg, b, rng=rng)
    return x


def readout(features: Tensor, params: ModelParams) -> Tensor:
    pooled = features[:, :, 0, :].mean(axis=1)
    return pooled @ params["head.weight"] + params["head.bias"]


def forward(frames, params: ModelParams, cfg: ModelConfig, rng: np.random.Generator | None = None) -> Tensor:
    """Logits ``[B, num_classes]``; ``rng`` enables dropout (training only)."""
    x = _as_input(frames)
    if x.ndim != 4 or x.shape[1] != cfg.t_len:
        raise ShapeError(
            f"forward: expected [B, {cfg.t_len}, {cfg.joints}, {cfg.in_channels}], got {tuple(x.shape)}"
        )
    return readout(run_blocks(encode_input(x, params, cfg), params, cfg, rng), params)
