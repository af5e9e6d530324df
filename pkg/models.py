"""
Classifier architectures: FCNN1/2, CVNN1/2 and VIT1/2.

Every model maps a batch of 32x32x3 images to 10 class probabilities. The
quantized layers share the configured ``n_values``; ``"full"`` builds the
32-bit baseline with identical shapes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from errors import ShapeError
from layers import (
    AttentionBlock,
    Conv2DLayer,
    FCLayer,
    Layer,
    LayerNorm,
    ParamInfo,
    PatchEncoder,
    QuantizedLayer,
    dropout,
    extract_patches,
    maxpool2d,
)
from quantizer import DEFAULT_BETA, grid_usage
from tensor import Prng, Tensor, add, flatten

logger = logging.getLogger(__name__)

FULL_PRECISION = "full"
IMAGE_SHAPE = (32, 32, 3)
NUM_CLASSES = 10


class ModelKind(str, Enum):
    FCNN1 = "FCNN1"
    FCNN2 = "FCNN2"
    CVNN1 = "CVNN1"
    CVNN2 = "CVNN2"
    VIT1 = "VIT1"
    VIT2 = "VIT2"

    @property
    def family(self) -> str:
        return self.value[:-1]

    @property
    def tag(self) -> int:
        return list(ModelKind).index(self)

    @classmethod
    def from_tag(cls, tag: int) -> "ModelKind":
        kinds = list(cls)
        if not 0 <= tag < len(kinds):
            raise ValueError(f"Unknown model kind tag {tag}")
        return kinds[tag]


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: ModelKind
    n_values: Union[Literal["full"], int] = 5
    conv_filter_size: Literal[3, 5] = 3
    beta: float = DEFAULT_BETA
    mean_mode: Literal["abs", "signed"] = "abs"
    seed: int = 0

    @field_validator("n_values")
    @classmethod
    def _check_n_values(cls, value):
        if value != FULL_PRECISION and not 2 <= value <= 256:
            raise ValueError("n_values must be 'full' or an integer in [2, 256]")
        return value

    @field_validator("beta")
    @classmethod
    def _check_beta(cls, value):
        if not 1.0 <= value <= 2.0:
            raise ValueError("beta must lie in [1, 2]")
        return value

    @property
    def layer_n_values(self) -> Optional[int]:
        return None if self.n_values == FULL_PRECISION else int(self.n_values)


class ParamCount(NamedTuple):
    total: int
    quantized_total: int
    bias_total: int


@dataclass(frozen=True)
class VitHyperparameters:
    patch_size: int = 4
    emb_dim: int = 64
    num_heads: int = 4
    transformer_units: Tuple[int, int] = (128, 64)
    transformer_layers: int = 2
    mlp_head_units: Tuple[int, int] = (1024, 512)
    block_dropout: float = 0.1
    head_dropout: float = 0.5

    @property
    def num_patches(self) -> int:
        return (IMAGE_SHAPE[0] // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * IMAGE_SHAPE[2]


FC_UNITS = {
    ModelKind.FCNN1: (512, 256, 128),
    ModelKind.FCNN2: (1024, 512, 256, 128),
}

CONV_STAGES = {
    ModelKind.CVNN1: (((64,), (128,), (256,)), 128),
    ModelKind.CVNN2: (((128, 128), (256, 256), (512, 512)), 512),
}

VIT_HYPERPARAMETERS = {
    ModelKind.VIT1: VitHyperparameters(transformer_layers=2, mlp_head_units=(1024, 512)),
    ModelKind.VIT2: VitHyperparameters(transformer_layers=4, mlp_head_units=(2048, 1024)),
}


class Model:
    """Base class: an ordered stack of layers plus the forward recipe."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.kind = config.kind
        self.inference_only = False

    def layers(self) -> List[Layer]:
        raise NotImplementedError

    def weight_layers(self) -> List[Layer]:
        return [wl for layer in self.layers() for wl in layer.weight_layers()]

    def quantized_layers(self) -> List[QuantizedLayer]:
        return [layer for layer in self.weight_layers() if layer.quantized]

    def layer_by_name(self) -> Dict[str, Layer]:
        return {layer.name: layer for layer in self.weight_layers()}

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers() for p in layer.parameters()]

    def inventory(self) -> List[ParamInfo]:
        return [entry for layer in self.layers() for entry in layer.inventory()]

    def forward(self, x: Tensor, training: bool = False, rng: Optional[Prng] = None) -> Tensor:
        if x.shape[1:] != IMAGE_SHAPE:
            raise ShapeError(f"{self.kind.value} expects batch x 32 x 32 x 3 images, got {x.shape}")
        if training and self.inference_only:
            raise RuntimeError(f"{self.kind.value} was loaded for inference only and cannot train")
        if training and rng is None:
            rng = Prng(self.config.seed).substream("dropout")
        return self._forward(x, training, rng)

    __call__ = forward

    def _forward(self, x: Tensor, training: bool, rng: Optional[Prng]) -> Tensor:
        raise NotImplementedError

    def quantization_report(self) -> List[dict]:
        """Per quantized layer: gamma and how many weights land on each grid value."""
        report = []
        for layer in self.quantized_layers():
            result = layer.quantize()
            report.append({
                "name": layer.name,
                "n_values": layer.n_values,
                "gamma": float(result.gamma),
                "usage": grid_usage(result.w_q.data, layer.n_values).tolist(),
            })
        return report

    def __repr__(self) -> str:
        return f"{type(self).__name__}(kind={self.kind.value}, n_values={self.config.n_values})"


class FullyConnectedNet(Model):
    def __init__(self, config: ModelConfig, units: Sequence[int]):
        super().__init__(config)
        rng = Prng(config.seed)
        n_values = config.layer_n_values
        widths = [int(np.prod(IMAGE_SHAPE))] + list(units)
        self.dense: List[FCLayer] = []
        for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:] + [NUM_CLASSES]), start=1):
            name = f"dense_{i}"
            activation = "softmax" if i == len(widths) else "relu"
            self.dense.append(FCLayer(fan_in, fan_out, rng.substream(name), n_values=n_values,
                                      activation=activation, beta=config.beta,
                                      mean_mode=config.mean_mode, name=name))

    def layers(self) -> List[Layer]:
        return list(self.dense)

    def _forward(self, x, training, rng):
        a = flatten(x)
        for layer in self.dense:
            a = layer(a, training)
        return a


class ConvNet(Model):
    def __init__(self, config: ModelConfig, stages: Sequence[Sequence[int]], dense_units: int):
        super().__init__(config)
        rng = Prng(config.seed)
        n_values = config.layer_n_values
        self.stages: List[List[Conv2DLayer]] = []
        channels = IMAGE_SHAPE[2]
        index = 0
        for stage in stages:
            convs = []
            for filters in stage:
                index += 1
                name = f"conv2d_{index}"
                convs.append(Conv2DLayer(channels, filters, rng.substream(name),
                                         kernel_size=config.conv_filter_size, n_values=n_values,
                                         beta=config.beta, mean_mode=config.mean_mode, name=name))
                channels = filters
            self.stages.append(convs)
        side = IMAGE_SHAPE[0] // 2 ** len(stages)
        flat = side * side * channels
        self.dense_1 = FCLayer(flat, dense_units, rng.substream("dense_1"), n_values=n_values,
                               activation="relu", beta=config.beta, mean_mode=config.mean_mode, name="dense_1")
        self.dense_2 = FCLayer(dense_units, NUM_CLASSES, rng.substream("dense_2"), n_values=n_values,
                               activation="softmax", beta=config.beta, mean_mode=config.mean_mode, name="dense_2")

    def layers(self) -> List[Layer]:
        return [conv for stage in self.stages for conv in stage] + [self.dense_1, self.dense_2]

    def _forward(self, x, training, rng):
        a = x
        for stage in self.stages:
            for conv in stage:
                a = conv(a, training)
            a = maxpool2d(a, (2, 2), strides=(2, 2))
        a = self.dense_1(flatten(a), training)
        return self.dense_2(a, training)


class TransformerBlock(Layer):
    """Pre-norm encoder block: attention and a two-layer GELU MLP, each with a skip connection."""

    def __init__(self, hp: VitHyperparameters, rng: Prng, n_values: Optional[int],
                 beta: float, mean_mode: str, name: str):
        super().__init__(name)
        self.dropout_rate = hp.block_dropout
        self.norm_1 = LayerNorm(hp.emb_dim, name=f"{name}/norm_1")
        self.attention = AttentionBlock(hp.emb_dim, hp.num_heads, rng.substream("attention"), n_values=n_values,
                                        dropout_rate=hp.block_dropout, beta=beta, mean_mode=mean_mode,
                                        name=f"{name}/attention")
        self.norm_2 = LayerNorm(hp.emb_dim, name=f"{name}/norm_2")
        widths = [hp.emb_dim] + list(hp.transformer_units)
        self.mlp = [
            FCLayer(fan_in, fan_out, rng.substream(f"mlp_{i}"), n_values=n_values, activation="gelu",
                    beta=beta, mean_mode=mean_mode, name=f"{name}/mlp_{i}")
            for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:]), start=1)
        ]

    def sublayers(self) -> List[Layer]:
        return [self.norm_1, self.attention, self.norm_2] + self.mlp

    def __call__(self, encoded: Tensor, training: bool = False, rng: Optional[Prng] = None) -> Tensor:
        def stream(purpose):
            return rng.substream(purpose) if rng is not None else None

        x1 = self.norm_1(encoded)
        x2 = add(self.attention(x1, x1, x1, training=training, rng=stream("attention")), encoded)
        x3 = self.norm_2(x2)
        for i, layer in enumerate(self.mlp):
            x3 = dropout(layer(x3, training), self.dropout_rate, stream(f"mlp_{i}"), training)
        return add(x3, x2)


class VisionTransformer(Model):
    def __init__(self, config: ModelConfig, hp: VitHyperparameters):
        super().__init__(config)
        rng = Prng(config.seed)
        n_values = config.layer_n_values
        self.hp = hp
        self.patch_encoder = PatchEncoder(hp.num_patches, hp.patch_dim, hp.emb_dim,
                                          rng.substream("patch_encoder"), name="patch_encoder")
        self.blocks = [
            TransformerBlock(hp, rng.substream(f"block_{i}"), n_values, config.beta, config.mean_mode,
                             name=f"block_{i}")
            for i in range(1, hp.transformer_layers + 1)
        ]
        self.final_norm = LayerNorm(hp.emb_dim, name="final_norm")
        widths = [hp.num_patches * hp.emb_dim] + list(hp.mlp_head_units)
        self.head = [
            FCLayer(fan_in, fan_out, rng.substream(f"head_{i}"), n_values=n_values, activation="gelu",
                    beta=config.beta, mean_mode=config.mean_mode, name=f"head_{i}")
            for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:]), start=1)
        ]
        self.classifier = FCLayer(widths[-1], NUM_CLASSES, rng.substream("classifier"), n_values=n_values,
                                  activation="softmax", beta=config.beta, mean_mode=config.mean_mode,
                                  name="classifier")

    def layers(self) -> List[Layer]:
        return [self.patch_encoder] + self.blocks + [self.final_norm] + self.head + [self.classifier]

    def _forward(self, x, training, rng):
        def stream(purpose, *indices):
            return rng.substream(purpose, *indices) if rng is not None else None

        encoded = self.patch_encoder(extract_patches(x, self.hp.patch_size), training)
        for i, block in enumerate(self.blocks):
            encoded = block(encoded, training, stream("block", i))
        features = flatten(self.final_norm(encoded))
        features = dropout(features, self.hp.head_dropout, stream("head", 0), training)
        for i, layer in enumerate(self.head, start=1):
            features = dropout(layer(features, training), self.hp.head_dropout, stream("head", i), training)
        return self.classifier(features, training)


def build_model(cfg: ModelConfig) -> Model:
    if cfg.kind in FC_UNITS:
        model = FullyConnectedNet(cfg, FC_UNITS[cfg.kind])
    elif cfg.kind in CONV_STAGES:
        stages, dense_units = CONV_STAGES[cfg.kind]
        model = ConvNet(cfg, stages, dense_units)
    elif cfg.kind in VIT_HYPERPARAMETERS:
        model = VisionTransformer(cfg, VIT_HYPERPARAMETERS[cfg.kind])
    else:
        raise ValueError(f"Unsupported model kind {cfg.kind!r}")
    logger.info(f"Built {model} with {param_count(model).total:,} parameters")
    return model


def param_count(model: Model) -> ParamCount:
    inventory = model.inventory()
    return ParamCount(
        total=sum(entry.count for entry in inventory),
        quantized_total=sum(entry.count for entry in inventory if entry.quantized),
        bias_total=sum(entry.count for entry in inventory if entry.role == "bias"),
    )


def analytic_param_count(kind: ModelKind, conv_filter_size: int = 3) -> int:
    """Closed-form parameter total for an architecture, independent of any built model."""
    def dense(fan_in, fan_out, bias=True):
        return fan_in * fan_out + (fan_out if bias else 0)

    if kind in FC_UNITS:
        widths = [int(np.prod(IMAGE_SHAPE))] + list(FC_UNITS[kind]) + [NUM_CLASSES]
        return sum(dense(a, b) for a, b in zip(widths, widths[1:]))
    if kind in CONV_STAGES:
        stages, dense_units = CONV_STAGES[kind]
        total, channels, area = 0, IMAGE_SHAPE[2], conv_filter_size ** 2
        for stage in stages:
            for filters in stage:
                total += channels * filters * area + filters
                channels = filters
        side = IMAGE_SHAPE[0] // 2 ** len(stages)
        return total + dense(side * side * channels, dense_units) + dense(dense_units, NUM_CLASSES)
    hp = VIT_HYPERPARAMETERS[kind]
    emb = hp.emb_dim
    encoder = dense(hp.patch_dim, emb) + hp.num_patches * emb
    block = 4 * emb + 4 * dense(emb, emb, bias=False)
    widths = [emb] + list(hp.transformer_units)
    block += sum(dense(a, b) for a, b in zip(widths, widths[1:]))
    head_widths = [hp.num_patches * emb] + list(hp.mlp_head_units) + [NUM_CLASSES]
    head = sum(dense(a, b) for a, b in zip(head_widths, head_widths[1:]))
    return encoder + hp.transformer_layers * block + 2 * emb + head


def model_forward(model: Model, x: Tensor, training: bool = False, rng: Optional[Prng] = None) -> Tensor:
    return model.forward(x, training=training, rng=rng)
