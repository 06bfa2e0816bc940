"""
Pyramid Vision Transformer backbone
Four stages of overlapping patch embedding + spatial-reduction transformer
blocks, finished by a scalar regression head (sign encodes the class)
"""
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

import pvt_config as config
from checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from tensor import (
    DTYPE, ShapeError, Tensor, add, conv2d, gelu, layer_norm, linear, matmul, mean,
    reshape, scale, softmax, transpose,
)

Params = Dict[str, Tensor]

NUM_STAGES = 4


@dataclass(frozen=True)
class PvtConfig:
    """Architectural hyperparameters of the 4-stage backbone and head"""
    embed_dims: Tuple[int, ...] = config.MODEL_DEFAULTS['embed_dims']
    depths: Tuple[int, ...] = config.MODEL_DEFAULTS['depths']
    num_heads: Tuple[int, ...] = config.MODEL_DEFAULTS['num_heads']
    sr_ratios: Tuple[int, ...] = config.MODEL_DEFAULTS['sr_ratios']
    mlp_ratios: Tuple[int, ...] = config.MODEL_DEFAULTS['mlp_ratios']
    patch_kernels: Tuple[int, ...] = config.MODEL_DEFAULTS['patch_kernels']
    patch_strides: Tuple[int, ...] = config.MODEL_DEFAULTS['patch_strides']
    patch_paddings: Tuple[int, ...] = config.MODEL_DEFAULTS['patch_paddings']
    input_channels: int = config.MODEL_DEFAULTS['input_channels']
    input_resolution: int = config.MODEL_DEFAULTS['input_resolution']
    layer_norm_eps: float = config.MODEL_DEFAULTS['layer_norm_eps']
    head_output: int = 1

    @classmethod
    def from_run_config(cls, run_config: config.RunConfig) -> "PvtConfig":
        model = cls(**{key: run_config[key] for key in config.MODEL_DEFAULTS})
        model.validate()
        return model

    @classmethod
    def reduced(cls, resolution: int = 32, sr_ratios: Optional[Tuple[int, ...]] = None) -> "PvtConfig":
        """
        Small config used for gradient checks and desk-scale training

        Unless sr_ratios is given, each default ratio is capped at half the
        stage grid so every stage with a grid wider than 1 attends over at
        least 2x2 keys.
        """
        cfg = cls(embed_dims=(8, 16, 32, 64), depths=(1, 1, 1, 1), num_heads=(1, 2, 4, 8),
                  mlp_ratios=(2, 2, 2, 2), input_resolution=resolution)
        if sr_ratios is None:
            sr_ratios = tuple(min(ratio, max(1, side // 2))
                              for ratio, side in zip(cfg.sr_ratios, cfg.stage_grids()))
        return replace(cfg, sr_ratios=tuple(sr_ratios))

    def kv_lengths(self) -> List[int]:
        """Key/value sequence length seen by each stage's attention"""
        return [(side // ratio) ** 2 for side, ratio in zip(self.stage_grids(), self.sr_ratios)]

    def stage_grids(self) -> List[int]:
        sides = []
        side = self.input_resolution
        for stride in self.patch_strides:
            side //= stride
            sides.append(side)
        return sides

    def validate(self) -> bool:
        for name in ('embed_dims', 'depths', 'num_heads', 'sr_ratios', 'mlp_ratios',
                     'patch_kernels', 'patch_strides', 'patch_paddings'):
            values = getattr(self, name)
            if len(values) != NUM_STAGES:
                raise config.ConfigError(f"{name} needs {NUM_STAGES} entries, got {values}")
            if name != 'patch_paddings' and any(v <= 0 for v in values):
                raise config.ConfigError(f"{name} entries must be positive, got {values}")
        if self.head_output != 1:
            raise config.ConfigError("head_output is fixed at 1 scalar")
        if self.input_channels <= 0 or self.input_resolution <= 0:
            raise config.ConfigError("input_channels and input_resolution must be positive")

        side = self.input_resolution
        for i in range(NUM_STAGES):
            dim, heads = self.embed_dims[i], self.num_heads[i]
            kernel, stride, padding = self.patch_kernels[i], self.patch_strides[i], self.patch_paddings[i]
            if dim % heads:
                raise config.ConfigError(f"stage {i + 1}: embed_dim {dim} not divisible by {heads} heads")
            if kernel <= stride:
                raise config.ConfigError(f"stage {i + 1}: patch kernel {kernel} must exceed stride {stride}")
            if padding != kernel // 2:
                raise config.ConfigError(f"stage {i + 1}: patch padding must be kernel // 2 = {kernel // 2}")
            if side % stride:
                raise config.ConfigError(
                    f"input_resolution {self.input_resolution} is not divisible by the cumulative stride "
                    f"at stage {i + 1}")
            side //= stride
            if side % self.sr_ratios[i]:
                raise config.ConfigError(
                    f"stage {i + 1}: sr_ratio {self.sr_ratios[i]} does not divide the {side}x{side} grid")
        return True


@dataclass
class StageOutput:
    """Feature map of one stage, N x C_i x H_i x W_i"""
    feature: Tensor

    @property
    def grid(self) -> Tuple[int, int]:
        return self.feature.shape[2], self.feature.shape[3]

    @property
    def channels(self) -> int:
        return self.feature.shape[1]


@dataclass
class ModelPrediction:
    """One unbounded score per input image"""
    scores: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.scores)):
            raise FloatingPointError("model produced non-finite scores")

    @property
    def signs(self) -> np.ndarray:
        return np.sign(self.scores)


# ---------------------------------------------------------------------------
# Backbone operations
# ---------------------------------------------------------------------------

def tokens_to_grid(tokens: Tensor, h: int, w: int) -> Tensor:
    n, length, d = tokens.shape
    if length != h * w:
        raise ShapeError(f"{length} tokens do not form a {h}x{w} grid")
    return reshape(transpose(tokens, (0, 2, 1)), (n, d, h, w))


def grid_to_tokens(grid: Tensor) -> Tensor:
    n, d, h, w = grid.shape
    return transpose(reshape(grid, (n, d, h * w)), (0, 2, 1))


def overlap_patch_embed(x: Tensor, params: Params, prefix: str, kernel: int, stride: int,
                        padding: int, eps: float = 1e-6) -> Tuple[Tensor, int, int]:
    """
    Strided overlapping convolution, flattened to tokens and layer-normalized

    Returns (tokens [N, H'*W', D], H', W').
    """
    weight = params[f"{prefix}.proj.weight"]
    if weight.shape[2] != kernel or kernel <= stride:
        raise ShapeError(f"{prefix}: kernel {kernel} / stride {stride} is not an overlapping embedding")
    feature = conv2d(x, weight, params[f"{prefix}.proj.bias"], stride=stride, padding=padding)
    _, _, h, w = feature.shape
    tokens = layer_norm(grid_to_tokens(feature), params[f"{prefix}.norm.weight"],
                        params[f"{prefix}.norm.bias"], eps)
    return tokens, h, w


def sr_attention(tokens: Tensor, h: int, w: int, params: Params, prefix: str, heads: int,
                 sr_ratio: int, eps: float = 1e-6, attention_log: Optional[list] = None) -> Tensor:
    """
    Multi-head attention whose keys/values come from an R-times reduced grid

    With sr_ratio 1 there is no reduction step and this is plain multi-head
    self-attention. attention_log, if given, collects each call's attention weights.
    """
    n, length, d = tokens.shape
    if length != h * w:
        raise ShapeError(f"{length} tokens do not form a {h}x{w} grid")
    if d % heads:
        raise ShapeError(f"dim {d} not divisible by {heads} heads")
    if h % sr_ratio or w % sr_ratio:
        raise ShapeError(f"sr_ratio {sr_ratio} does not divide the {h}x{w} grid")
    head_dim = d // heads

    q = linear(tokens, params[f"{prefix}.q.weight"], params[f"{prefix}.q.bias"])
    q = transpose(reshape(q, (n, length, heads, head_dim)), (0, 2, 1, 3))

    if sr_ratio > 1:
        reduced = conv2d(tokens_to_grid(tokens, h, w), params[f"{prefix}.sr.weight"],
                         params[f"{prefix}.sr.bias"], stride=sr_ratio)
        kv_tokens = layer_norm(grid_to_tokens(reduced), params[f"{prefix}.sr_norm.weight"],
                               params[f"{prefix}.sr_norm.bias"], eps)
    else:
        kv_tokens = tokens
    kv_length = kv_tokens.shape[1]

    k = linear(kv_tokens, params[f"{prefix}.k.weight"], params[f"{prefix}.k.bias"])
    k = transpose(reshape(k, (n, kv_length, heads, head_dim)), (0, 2, 3, 1))
    v = linear(kv_tokens, params[f"{prefix}.v.weight"], params[f"{prefix}.v.bias"])
    v = transpose(reshape(v, (n, kv_length, heads, head_dim)), (0, 2, 1, 3))

    attn = softmax(scale(matmul(q, k), 1.0 / math.sqrt(head_dim)), axis=-1)
    if attention_log is not None:
        attention_log.append(attn.data)
    out = transpose(matmul(attn, v), (0, 2, 1, 3))
    out = reshape(out, (n, length, d))
    return linear(out, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])


def conv_ffn(tokens: Tensor, h: int, w: int, params: Params, prefix: str) -> Tensor:
    """Linear D->mD, 3x3 depthwise conv on the grid, GELU, linear mD->D"""
    hidden = linear(tokens, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"])
    channels = hidden.shape[-1]
    grid = conv2d(tokens_to_grid(hidden, h, w), params[f"{prefix}.dwconv.weight"],
                  params[f"{prefix}.dwconv.bias"], stride=1, padding=1, groups=channels)
    hidden = gelu(grid_to_tokens(grid))
    return linear(hidden, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])


def transformer_block(tokens: Tensor, h: int, w: int, params: Params, prefix: str, heads: int,
                      sr_ratio: int, eps: float = 1e-6, attention_log: Optional[list] = None) -> Tensor:
    """Pre-norm residual block: x + attn(LN(x)), then x + ffn(LN(x))"""
    normed = layer_norm(tokens, params[f"{prefix}.norm1.weight"], params[f"{prefix}.norm1.bias"], eps)
    tokens = add(tokens, sr_attention(normed, h, w, params, f"{prefix}.attn", heads, sr_ratio, eps, attention_log))
    normed = layer_norm(tokens, params[f"{prefix}.norm2.weight"], params[f"{prefix}.norm2.bias"], eps)
    return add(tokens, conv_ffn(normed, h, w, params, f"{prefix}.mlp"))


def backbone_stages(x: Tensor, params: Params, cfg: PvtConfig,
                    attention_log: Optional[list] = None) -> Tuple[List[StageOutput], Tensor]:
    """
    Run all four stages; returns the stage feature maps and the final
    stage's normalized tokens
    """
    if x.ndim != 4 or x.shape[1:] != (cfg.input_channels, cfg.input_resolution, cfg.input_resolution):
        raise ShapeError(
            f"input {x.shape} does not match config "
            f"(N, {cfg.input_channels}, {cfg.input_resolution}, {cfg.input_resolution})")
    stages = []
    feature = x
    tokens = None
    for i in range(NUM_STAGES):
        stage = f"stage{i + 1}"
        tokens, h, w = overlap_patch_embed(feature, params, f"{stage}.patch_embed", cfg.patch_kernels[i],
                                           cfg.patch_strides[i], cfg.patch_paddings[i], cfg.layer_norm_eps)
        for b in range(cfg.depths[i]):
            tokens = transformer_block(tokens, h, w, params, f"{stage}.block{b}", cfg.num_heads[i],
                                       cfg.sr_ratios[i], cfg.layer_norm_eps, attention_log)
        tokens = layer_norm(tokens, params[f"{stage}.norm.weight"], params[f"{stage}.norm.bias"],
                            cfg.layer_norm_eps)
        feature = tokens_to_grid(tokens, h, w)
        stages.append(StageOutput(feature))
    return stages, tokens


def backbone_forward(x: Tensor, params: Params, cfg: PvtConfig, attention_log: Optional[list] = None) -> Tensor:
    """Scores [N]: stages, global average over final tokens, linear map to one scalar"""
    _, tokens = backbone_stages(x, params, cfg, attention_log)
    pooled = mean(tokens, axis=1)
    score = linear(pooled, params["head.weight"], params["head.bias"])
    return reshape(score, (score.shape[0],))


def count_flops_attention(length: int, dim: int, sr_ratio: int) -> int:
    """
    FLOPs (2 per multiply-add) of one sr_attention call on one image

    Score and weighted-sum terms 2*L*(L/R^2)*D*2, plus the q/k/v/output
    projections and, for R > 1, the reduction convolution.
    """
    kv_length = length // (sr_ratio * sr_ratio)
    attention = 2 * length * kv_length * dim * 2
    projections = 2 * length * dim * dim * 2 + 2 * kv_length * dim * dim * 2
    reduction = 2 * kv_length * dim * dim * sr_ratio * sr_ratio if sr_ratio > 1 else 0
    return attention + projections + reduction


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    values = rng.standard_normal(shape)
    outside = np.abs(values) > 2.0
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > 2.0
    return (values * std).astype(DTYPE)


def _conv_init(rng: np.random.Generator, shape, groups: int = 1) -> np.ndarray:
    out_channels, _, kh, kw = shape
    fan_out = kh * kw * out_channels // groups
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_out)).astype(DTYPE)


def init_params(cfg: PvtConfig, seed: int = 0) -> Params:
    """
    Truncated-normal (std 0.02) linear weights, fan-out normal conv kernels,
    zero biases and norm shifts, unit norm scales
    """
    rng = np.random.default_rng(seed)
    arrays: Dict[str, np.ndarray] = {}

    def norm(prefix: str, dim: int):
        arrays[f"{prefix}.weight"] = np.ones(dim, dtype=DTYPE)
        arrays[f"{prefix}.bias"] = np.zeros(dim, dtype=DTYPE)

    def dense(prefix: str, fan_in: int, fan_out: int):
        arrays[f"{prefix}.weight"] = _trunc_normal(rng, (fan_in, fan_out))
        arrays[f"{prefix}.bias"] = np.zeros(fan_out, dtype=DTYPE)

    def conv(prefix: str, shape, groups: int = 1):
        arrays[f"{prefix}.weight"] = _conv_init(rng, shape, groups)
        arrays[f"{prefix}.bias"] = np.zeros(shape[0], dtype=DTYPE)

    in_channels = cfg.input_channels
    for i in range(NUM_STAGES):
        stage = f"stage{i + 1}"
        dim, kernel = cfg.embed_dims[i], cfg.patch_kernels[i]
        hidden = dim * cfg.mlp_ratios[i]
        conv(f"{stage}.patch_embed.proj", (dim, in_channels, kernel, kernel))
        norm(f"{stage}.patch_embed.norm", dim)
        for b in range(cfg.depths[i]):
            block = f"{stage}.block{b}"
            ratio = cfg.sr_ratios[i]
            norm(f"{block}.norm1", dim)
            for proj in ("q", "k", "v", "proj"):
                dense(f"{block}.attn.{proj}", dim, dim)
            if ratio > 1:
                conv(f"{block}.attn.sr", (dim, dim, ratio, ratio))
                norm(f"{block}.attn.sr_norm", dim)
            norm(f"{block}.norm2", dim)
            dense(f"{block}.mlp.fc1", dim, hidden)
            conv(f"{block}.mlp.dwconv", (hidden, 1, 3, 3), groups=hidden)
            dense(f"{block}.mlp.fc2", hidden, dim)
        norm(f"{stage}.norm", dim)
        in_channels = dim
    dense("head", cfg.embed_dims[-1], cfg.head_output)
    return {name: Tensor(value, requires_grad=True, name=name) for name, value in arrays.items()}


def init_attention_params(dim: int, sr_ratio: int, seed: int = 0, prefix: str = "attn") -> Params:
    """Parameters of one standalone sr_attention layer, same init as the backbone"""
    rng = np.random.default_rng(seed)
    arrays = {}
    for proj in ("q", "k", "v", "proj"):
        arrays[f"{prefix}.{proj}.weight"] = _trunc_normal(rng, (dim, dim))
        arrays[f"{prefix}.{proj}.bias"] = np.zeros(dim, dtype=DTYPE)
    if sr_ratio > 1:
        arrays[f"{prefix}.sr.weight"] = _conv_init(rng, (dim, dim, sr_ratio, sr_ratio))
        arrays[f"{prefix}.sr.bias"] = np.zeros(dim, dtype=DTYPE)
        arrays[f"{prefix}.sr_norm.weight"] = np.ones(dim, dtype=DTYPE)
        arrays[f"{prefix}.sr_norm.bias"] = np.zeros(dim, dtype=DTYPE)
    return {name: Tensor(value, requires_grad=True, name=name) for name, value in arrays.items()}


class PvtModel:
    """
    PVT classifier: parameters plus forward/predict and checkpoint I/O
    """

    def __init__(self, cfg: Optional[PvtConfig] = None, seed: int = 0):
        self.config = cfg or PvtConfig()
        self.config.validate()
        self.params: Params = init_params(self.config, seed)

    def forward(self, images: Union[Tensor, np.ndarray], attention_log: Optional[list] = None) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        return backbone_forward(x, self.params, self.config, attention_log)

    def forward_stages(self, images: Union[Tensor, np.ndarray]) -> List[StageOutput]:
        x = images if isinstance(images, Tensor) else Tensor(images)
        stages, _ = backbone_stages(x, self.params, self.config)
        return stages

    def predict(self, images: np.ndarray) -> ModelPrediction:
        """Inference scores for a preprocessed N x C x H x W batch"""
        return ModelPrediction(self.forward(Tensor(images)).numpy())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def parameter_table(self) -> pd.DataFrame:
        """Parameter counts grouped by stage and component"""
        rows = []
        for name, param in self.params.items():
            parts = name.split('.')
            if parts[0] == 'head':
                group = 'head'
            elif parts[1].startswith('block'):
                group = f"{parts[0]}.{parts[2]}"
            else:
                group = f"{parts[0]}.{parts[1]}"
            rows.append({'name': name, 'group': group, 'shape': 'x'.join(map(str, param.shape)),
                         'count': param.size})
        df = pd.DataFrame(rows)
        return df.groupby('group', sort=False)['count'].sum().reset_index()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, arrays: Dict[str, np.ndarray]):
        missing = sorted(set(self.params) - set(arrays))
        extra = sorted(set(arrays) - set(self.params))
        if missing or extra:
            raise CheckpointFormatError(
                f"checkpoint does not match the model config (missing: {missing[:3]}, unexpected: {extra[:3]})")
        for name, param in self.params.items():
            if arrays[name].shape != param.shape:
                raise CheckpointFormatError(
                    f"{name}: checkpoint shape {arrays[name].shape} != model shape {param.shape}")
            param.data = np.array(arrays[name], dtype=DTYPE)
            param.zero_grad()

    def save(self, path: Union[str, Path]) -> Path:
        return save_checkpoint(path, self.params)

    @classmethod
    def load(cls, path: Union[str, Path], cfg: Optional[PvtConfig] = None) -> "PvtModel":
        model = cls(cfg)
        model.load_state(load_checkpoint(path))
        return model
