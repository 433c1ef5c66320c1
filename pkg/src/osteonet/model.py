"""Network blocks and model assembly.

The classifier is three pieces chained together:

  backbone      a small residual feature extractor (stem conv + residual
                stages); its tap-stage activation map is the feature input
                for the rest of the network, and real pre-trained weights
                can be loaded over the randomly initialised ones.
  stack         five feature-enhancement blocks, each Conv(3x3, same) ->
                ReLU -> MaxPool(2,2), followed by dropout in train mode.
  head          flatten -> dense+ReLU -> dense+ReLU -> dense ->
                sigmoid (2 classes) or softmax (3+), i.e. per-class
                probabilities.

All parameters live in a flat name->Tensor map (`ModelState.params`) with
dotted paths like ``backbone.stage0.block1.conv2.W``; `frozen` lists the
paths excluded from optimisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatchError, SpatialCollapseError
from .rng import Rng
from .tensor import Tensor


@dataclass(frozen=True)
class ConvBlockSpec:
    """One enhancement block: Conv(kernel, same) -> ReLU -> MaxPool(pool_k, pool_s)."""

    filters: int
    kernel: int = 3
    pool_k: int = 2
    pool_s: int = 2

    def __post_init__(self):
        if self.filters < 1:
            raise ConfigError(f"filters must be positive, got {self.filters}")
        if self.kernel % 2 != 1:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")


@dataclass(frozen=True)
class StageSpec:
    """A residual stage: `blocks` residual blocks at `channels`, optionally halving resolution on entry."""

    blocks: int
    channels: int
    downsample: bool


@dataclass(frozen=True)
class BackboneSpec:
    stem_channels: int = 16
    stages: tuple[StageSpec, ...] = (
        StageSpec(2, 16, True),
        StageSpec(2, 32, False),
        StageSpec(2, 64, False),
    )
    tap_stage: int = 2
    pretrained_weights: str | None = None

    def __post_init__(self):
        if not 0 <= self.tap_stage < len(self.stages):
            raise ConfigError(
                f"tap_stage {self.tap_stage} out of range for {len(self.stages)} stages"
            )
        chans = [s.channels for s in self.stages]
        if any(a > b for a, b in zip(chans, chans[1:])):
            raise ConfigError(f"stage channels must be nondecreasing, got {chans}")


DEFAULT_STACK = (
    ConvBlockSpec(64),
    ConvBlockSpec(128),
    ConvBlockSpec(256),
    ConvBlockSpec(512),
    ConvBlockSpec(512),
)


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (224, 224, 3)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    stack: tuple[ConvBlockSpec, ...] = DEFAULT_STACK
    head_units: int = 4096
    head_dropout: float = 0.5
    stack_dropout: float = 0.5
    num_classes: int = 2
    output_activation: str = "sigmoid"
    use_batchnorm: bool = False  # reserved; this build only supports False

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.output_activation not in ("sigmoid", "softmax"):
            raise ConfigError(f"unknown output_activation {self.output_activation!r}")
        if self.output_activation == "sigmoid" and self.num_classes != 2:
            raise ConfigError("sigmoid output requires exactly 2 classes")
        for name in ("head_dropout", "stack_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {p}")
        if self.use_batchnorm:
            raise ConfigError("use_batchnorm is reserved and not supported in this build")

    @staticmethod
    def default(num_classes: int = 2) -> "ModelConfig":
        activation = "sigmoid" if num_classes == 2 else "softmax"
        return ModelConfig(num_classes=num_classes, output_activation=activation)

    @staticmethod
    def reduced(num_classes: int = 2, input_size: int = 64) -> "ModelConfig":
        """Small deterministic profile for gradient checks and CPU benchmarks."""
        activation = "sigmoid" if num_classes == 2 else "softmax"
        return ModelConfig(
            input_shape=(input_size, input_size, 3),
            backbone=BackboneSpec(
                stem_channels=4,
                stages=(StageSpec(1, 4, False), StageSpec(1, 8, False)),
                tap_stage=1,
            ),
            stack=tuple(ConvBlockSpec(8) for _ in range(5)),
            head_units=8,
            head_dropout=0.0,
            stack_dropout=0.0,
            num_classes=num_classes,
            output_activation=activation,
        )


class ModelState:
    """Flat parameter map plus the set of paths excluded from updates."""

    def __init__(self, params: dict[str, Tensor], frozen: set[str] | None = None):
        self.params = params
        self.frozen = set(frozen or ())
        missing = self.frozen - params.keys()
        if missing:
            raise ConfigError(f"frozen paths not present in state: {sorted(missing)}")

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}


# ---------------------------------------------------------------------------
# parameter initialisation


def _kaiming_uniform(shape, fan_in, rng: Rng, dtype) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.gen.uniform(-bound, bound, shape).astype(dtype),
                  requires_grad=True, dtype=dtype)


def _init_conv(params, name, kh, kw, cin, cout, rng, dtype):
    params[f"{name}.W"] = _kaiming_uniform((kh, kw, cin, cout), kh * kw * cin, rng, dtype)
    params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, dtype=dtype)


def _init_dense(params, name, din, dout, rng, dtype):
    params[f"{name}.W"] = _kaiming_uniform((din, dout), din, rng, dtype)
    params[f"{name}.b"] = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True, dtype=dtype)


def init_backbone_params(spec: BackboneSpec, rng: Rng, in_channels: int = 3,
                         prefix: str = "backbone", dtype=np.float32) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    _init_conv(params, f"{prefix}.stem", 3, 3, in_channels, spec.stem_channels, rng, dtype)
    ch = spec.stem_channels
    for si, stage in enumerate(spec.stages):
        for bi in range(stage.blocks):
            name = f"{prefix}.stage{si}.block{bi}"
            stride = 2 if (stage.downsample and bi == 0) else 1
            _init_conv(params, f"{name}.conv1", 3, 3, ch, stage.channels, rng, dtype)
            _init_conv(params, f"{name}.conv2", 3, 3, stage.channels, stage.channels, rng, dtype)
            if stride != 1 or ch != stage.channels:
                _init_conv(params, f"{name}.proj", 1, 1, ch, stage.channels, rng, dtype)
            ch = stage.channels
    return params


def init_model_state(config: ModelConfig, rng: Rng, dtype=np.float32) -> ModelState:
    """Fresh parameters: Kaiming-uniform weights, zero biases, deterministic under rng."""
    params = init_backbone_params(config.backbone, rng, config.input_shape[2], dtype=dtype)

    ch = config.backbone.stages[config.backbone.tap_stage].channels
    for i, blk in enumerate(config.stack):
        _init_conv(params, f"stack.block{i}", blk.kernel, blk.kernel, ch, blk.filters, rng, dtype)
        ch = blk.filters

    tap_hw = _tap_spatial(config)
    feat_hw = _stack_spatial(tap_hw, config.stack)
    din = feat_hw[0] * feat_hw[1] * ch
    _init_dense(params, "head.fc1", din, config.head_units, rng, dtype)
    _init_dense(params, "head.fc2", config.head_units, config.head_units, rng, dtype)
    _init_dense(params, "head.out", config.head_units, config.num_classes, rng, dtype)

    state = ModelState(params)
    if config.backbone.pretrained_weights:
        from .weights_io import load_weights_into  # deferred: avoids import cycle
        load_weights_into(state, config.backbone.pretrained_weights, prefix="backbone.")
    return state


# ---------------------------------------------------------------------------
# shape arithmetic (asserted at build time and per forward)


def _tap_spatial(config: ModelConfig) -> tuple[int, int]:
    h, w = config.input_shape[:2]
    h, w = -(-h // 2), -(-w // 2)  # stem conv, stride 2, same padding
    for si, stage in enumerate(config.backbone.stages[: config.backbone.tap_stage + 1]):
        if stage.downsample:
            h, w = -(-h // 2), -(-w // 2)
    return h, w


def _stack_spatial(hw: tuple[int, int], stack) -> tuple[int, int]:
    h, w = hw
    for blk in stack:
        if h < blk.pool_k or w < blk.pool_k:
            raise SpatialCollapseError(
                f"spatial extent {h}x{w} cannot survive a {blk.pool_k}x{blk.pool_k} pool"
            )
        h = (h - blk.pool_k) // blk.pool_s + 1
        w = (w - blk.pool_k) // blk.pool_s + 1
    return h, w


def expected_shapes(config: ModelConfig, batch: int = 1):
    """The (backbone tap, stack output, probabilities) shape contract."""
    th, tw = _tap_spatial(config)
    tap = (batch, th, tw, config.backbone.stages[config.backbone.tap_stage].channels)
    sh, sw = _stack_spatial((th, tw), config.stack)
    feat = (batch, sh, sw, config.stack[-1].filters)
    return tap, feat, (batch, config.num_classes)


# ---------------------------------------------------------------------------
# forward passes


def residual_block(x: Tensor, params: dict[str, Tensor], prefix: str, stride: int = 1) -> Tensor:
    """conv -> ReLU -> conv plus a shortcut; returns their sum.

    The shortcut is the identity unless the block changes channel count or
    stride, in which case a 1x1 projection convolution is used.
    """
    w1, b1 = params[f"{prefix}.conv1.W"], params[f"{prefix}.conv1.b"]
    w2, b2 = params[f"{prefix}.conv2.W"], params[f"{prefix}.conv2.b"]
    h = T.relu(T.conv2d(x, w1, b1, stride=stride, padding="same"))
    h = T.conv2d(h, w2, b2, stride=1, padding="same")
    proj_w = params.get(f"{prefix}.proj.W")
    if proj_w is not None:
        shortcut = T.conv2d(x, proj_w, params[f"{prefix}.proj.b"], stride=stride, padding="same")
    else:
        shortcut = x
    if h.shape != shortcut.shape:
        raise ShapeMismatchError(
            f"residual branch {h.shape} does not match shortcut {shortcut.shape}"
        )
    return T.add(h, shortcut)


def backbone_forward(x: Tensor, spec: BackboneSpec, params: dict[str, Tensor],
                     prefix: str = "backbone") -> Tensor:
    """Stem conv + residual stages up to and including the tap stage."""
    h = T.relu(T.conv2d(x, params[f"{prefix}.stem.W"], params[f"{prefix}.stem.b"],
                        stride=2, padding="same"))
    for si, stage in enumerate(spec.stages[: spec.tap_stage + 1]):
        for bi in range(stage.blocks):
            stride = 2 if (stage.downsample and bi == 0) else 1
            h = residual_block(h, params, f"{prefix}.stage{si}.block{bi}", stride=stride)
    return h


def build_backbone(spec: BackboneSpec, rng: Rng, in_channels: int = 3, dtype=np.float32):
    """Standalone backbone: returns (params, forward) for use outside a full model."""
    params = init_backbone_params(spec, rng, in_channels, dtype=dtype)
    if spec.pretrained_weights:
        from .weights_io import load_weights_into
        load_weights_into(ModelState(params), spec.pretrained_weights, prefix="backbone.")

    def forward(x: Tensor, params=params) -> Tensor:
        return backbone_forward(x, spec, params)

    return params, forward


def enhancement_stack(x: Tensor, stack, params: dict[str, Tensor], mode: str,
                      rng: Rng | None = None, dropout_p: float = 0.5,
                      prefix: str = "stack") -> Tensor:
    """Sequential Conv-ReLU-MaxPool blocks, then dropout in train mode."""
    h = x
    for i, blk in enumerate(stack):
        if h.shape[1] < blk.pool_k or h.shape[2] < blk.pool_k:
            raise SpatialCollapseError(
                f"block {i}: spatial extent {h.shape[1]}x{h.shape[2]} is smaller "
                f"than the {blk.pool_k}x{blk.pool_k} pool window"
            )
        h = T.relu(T.conv2d(h, params[f"{prefix}.block{i}.W"], params[f"{prefix}.block{i}.b"],
                            stride=1, padding="same"))
        h = T.maxpool2d(h, blk.pool_k, blk.pool_s)
    if dropout_p > 0.0:
        h = T.dropout(h, dropout_p, mode, rng)
    return h


def classification_head(x: Tensor, params: dict[str, Tensor], mode: str,
                        activation: str = "sigmoid", rng: Rng | None = None,
                        dropout_p: float = 0.5, prefix: str = "head") -> Tensor:
    """Flatten -> dense+ReLU (+dropout) -> dense+ReLU -> dense -> probabilities."""
    h = T.flatten(x)
    h = T.relu(T.dense(h, params[f"{prefix}.fc1.W"], params[f"{prefix}.fc1.b"]))
    if dropout_p > 0.0:
        h = T.dropout(h, dropout_p, mode, rng)
    h = T.relu(T.dense(h, params[f"{prefix}.fc2.W"], params[f"{prefix}.fc2.b"]))
    logits = T.dense(h, params[f"{prefix}.out.W"], params[f"{prefix}.out.b"])
    return T.sigmoid(logits) if activation == "sigmoid" else T.softmax(logits)


def predict(probs: Tensor | np.ndarray) -> np.ndarray:
    """Per-row argmax; ties break to the lowest class index."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return data.argmax(axis=1)


def model_forward(config: ModelConfig, state: ModelState, batch: Tensor,
                  mode: str = "eval", rng: Rng | None = None) -> Tensor:
    """Full forward pass from a preprocessed image batch to class probabilities."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if batch.data.ndim != 4 or batch.shape[1:] != tuple(config.input_shape):
        raise ShapeMismatchError(
            f"batch {batch.shape} does not match input shape {config.input_shape}"
        )
    n = batch.shape[0]
    tap_shape, feat_shape, prob_shape = expected_shapes(config, n)

    drop_rng = rng.derive("stack") if rng is not None else None
    head_rng = rng.derive("head") if rng is not None else None

    feat = backbone_forward(batch, config.backbone, state.params)
    if feat.shape != tap_shape:
        raise ShapeMismatchError(f"backbone produced {feat.shape}, expected {tap_shape}")
    feat = enhancement_stack(feat, config.stack, state.params, mode,
                             rng=drop_rng, dropout_p=config.stack_dropout)
    if feat.shape != feat_shape:
        raise ShapeMismatchError(f"stack produced {feat.shape}, expected {feat_shape}")
    probs = classification_head(feat, state.params, mode,
                                activation=config.output_activation,
                                rng=head_rng, dropout_p=config.head_dropout)
    if probs.shape != prob_shape:
        raise ShapeMismatchError(f"head produced {probs.shape}, expected {prob_shape}")
    return probs


def state_to_float64(state: ModelState) -> ModelState:
    """A float64 copy for the gradient checker; shares no storage."""
    return ModelState(
        {k: Tensor(v.data.astype(np.float64), requires_grad=True, dtype=np.float64)
         for k, v in state.params.items()},
        frozen=set(state.frozen),
    )
