"""
Layers of the low-bit classifiers.

Fully connected, convolution and attention projections hold 32-bit master
weights and compute with gamma * W_q; layer norm, the patch encoder and the
positional embedding stay at full precision. Biases are never quantized.

Data layout is batch x height x width x channels. Convolution is
cross-correlation with stride 1 and same padding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ShapeError
from quantizer import DEFAULT_BETA, QuantResult, grid_values, quantize, quantize_ste_with_scale
from tensor import (
    ACTIVATIONS,
    DEFAULT_DTYPE,
    Prng,
    Tensor,
    add,
    glorot_uniform,
    make_result,
    matmul,
    mul,
    permute,
    reshape,
    scale,
    softmax,
    transpose,
    zeros,
)

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ParamInfo:
    name: str
    shape: Tuple[int, ...]
    count: int
    quantized: bool
    n_values: Optional[int]
    role: str  # kernel, bias, scale, shift, embedding


# --- Differentiable kernels -------------------------------------------------

def conv2d(x: Tensor, weight: Tensor) -> Tensor:
    """Same-padded, stride-1 cross-correlation of NHWC ``x`` with (out, in, k, k) ``weight``."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a batch x height x width x channels input, got {x.shape}")
    batch, height, width, channels = x.shape
    out_channels, in_channels, k, k_w = weight.shape
    if channels != in_channels:
        raise ShapeError(f"conv2d channel mismatch: input has {channels}, filters expect {in_channels}")
    if k != k_w or k % 2 == 0:
        raise ShapeError(f"conv2d needs square odd kernels, got {k}x{k_w}")
    pad = k // 2
    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = sliding_window_view(padded, (k, k), axis=(1, 2)).reshape(batch * height * width, channels * k * k)
    w_mat = weight.data.reshape(out_channels, channels * k * k)
    out = (cols @ w_mat.T).reshape(batch, height, width, out_channels)

    def backward_fn(g):
        g2 = g.reshape(batch * height * width, out_channels)
        grad_w = (g2.T @ cols).reshape(weight.shape)
        d_cols = (g2 @ w_mat).reshape(batch, height, width, channels, k, k)
        d_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                d_padded[:, i:i + height, j:j + width, :] += d_cols[..., i, j]
        return d_padded[:, pad:pad + height, pad:pad + width, :], grad_w

    return make_result("conv2d", out, (x, weight), backward_fn)


def maxpool2d(x: Tensor, window: Sequence[int] = (2, 2), strides: Sequence[int] = (2, 2)) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first (row-major) maximum."""
    window, strides = tuple(window), tuple(strides)
    if window != strides:
        raise ValueError(f"maxpool2d supports non-overlapping windows only (window={window}, strides={strides})")
    batch, height, width, channels = x.shape
    sh, sw = window
    if height % sh or width % sw:
        raise ShapeError(f"maxpool2d: spatial dims {height}x{width} not divisible by {sh}x{sw}")
    out_h, out_w = height // sh, width // sw
    blocks = (
        x.data.reshape(batch, out_h, sh, out_w, sw, channels)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(batch, out_h, out_w, channels, sh * sw)
    )
    argmax = np.argmax(blocks, axis=-1)[..., None]
    out = np.take_along_axis(blocks, argmax, axis=-1)[..., 0]

    def backward_fn(g):
        routed = np.zeros_like(blocks)
        np.put_along_axis(routed, argmax, g[..., None], axis=-1)
        routed = routed.reshape(batch, out_h, out_w, channels, sh, sw).transpose(0, 1, 4, 2, 5, 3)
        return (routed.reshape(x.shape),)

    return make_result("maxpool2d", out, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each example over the last axis, then apply the learned scale and shift."""
    features = x.shape[-1]
    if features == 0:
        raise ShapeError("layer_norm needs a nonempty feature axis")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = (centered * inv_std).astype(x.dtype)
    out = x_hat * gain.data + shift.data

    def backward_fn(g):
        d_hat = g * gain.data
        d_x = inv_std / features * (
            features * d_hat
            - d_hat.sum(axis=-1, keepdims=True)
            - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(g.ndim - 1))
        return d_x.astype(x.dtype), (g * x_hat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return make_result("layer_norm", out, (x, gain, shift), backward_fn)


def dropout(x: Tensor, rate: float, rng: Optional[Prng], training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1 - rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random stream")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return mul(x, Tensor._wrap(mask))


def extract_patches(x: Tensor, patch_size: int) -> Tensor:
    """Split NHWC images into row-major, non-overlapping patches of patch_size^2 * channels values."""
    batch, height, width, channels = x.shape
    if height % patch_size or width % patch_size:
        raise ShapeError(f"image {height}x{width} is not divisible into {patch_size}x{patch_size} patches")
    rows, cols = height // patch_size, width // patch_size
    x = reshape(x, (batch, rows, patch_size, cols, patch_size, channels))
    x = permute(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (batch, rows * cols, patch_size * patch_size * channels))


# --- Layers -----------------------------------------------------------------

class Layer:
    """A named holder of at most one weight tensor and one bias."""

    weight_role = "kernel"
    bias_role = "bias"

    def __init__(self, name: str):
        self.name = name
        self.weight: Optional[Tensor] = None
        self.bias: Optional[Tensor] = None
        self.trainable = True

    @property
    def quantized(self) -> bool:
        return False

    @property
    def n_values(self) -> Optional[int]:
        return None

    def sublayers(self) -> List["Layer"]:
        return []

    def weight_layers(self) -> Iterator["Layer"]:
        if self.weight is not None:
            yield self
        for layer in self.sublayers():
            yield from layer.weight_layers()

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.weight_layers() for p in (layer.weight, layer.bias)
                if p is not None and p.requires_grad]

    def inventory(self) -> List[ParamInfo]:
        entries = []
        for layer in self.weight_layers():
            entries.append(ParamInfo(
                name=f"{layer.name}/{layer.weight_role}",
                shape=layer.weight.shape,
                count=layer.weight.size,
                quantized=layer.quantized,
                n_values=layer.n_values,
                role=layer.weight_role,
            ))
            if layer.bias is not None:
                entries.append(ParamInfo(
                    name=f"{layer.name}/{layer.bias_role}",
                    shape=layer.bias.shape,
                    count=layer.bias.size,
                    quantized=False,
                    n_values=None,
                    role=layer.bias_role,
                ))
        return entries

    def load_weights(self, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> None:
        """Overwrite the full-precision weight (and bias) in place."""
        if weight.shape != self.weight.shape:
            raise ShapeError(f"{self.name}: weight shape {weight.shape} != {self.weight.shape}")
        self.weight.data[...] = weight
        self.load_bias(bias)

    def load_bias(self, bias: Optional[np.ndarray]) -> None:
        if (bias is None) != (self.bias is None):
            raise ShapeError(f"{self.name}: bias presence does not match the layer")
        if bias is not None:
            if bias.shape != self.bias.shape:
                raise ShapeError(f"{self.name}: bias shape {bias.shape} != {self.bias.shape}")
            self.bias.data[...] = bias


class QuantizedLayer(Layer):
    """
    Layer whose weight is used as gamma * W_q when ``n_values`` is set.

    ``n_values=None`` builds the 32-bit baseline. After ``freeze`` the layer
    computes with a stored (W_q, gamma) pair instead of its masters.
    """

    def __init__(self, name: str, n_values: Optional[int], beta: float = DEFAULT_BETA,
                 mean_mode: str = "abs", trainable: bool = True):
        super().__init__(name)
        if n_values is not None:
            grid_values(n_values)
        self._n_values = n_values
        self.beta = beta
        self.mean_mode = mean_mode
        self.trainable = trainable
        self.frozen: Optional[QuantResult] = None

    @property
    def quantized(self) -> bool:
        return self._n_values is not None

    @property
    def n_values(self) -> Optional[int]:
        return self._n_values

    def quantize(self) -> QuantResult:
        if not self.quantized:
            raise ValueError(f"{self.name} is a full-precision layer")
        if self.frozen is not None:
            return self.frozen
        return quantize(self.weight, self._n_values, self.beta, self.mean_mode)

    def freeze(self, w_q: np.ndarray, gamma: float) -> None:
        if w_q.shape != self.weight.shape:
            raise ShapeError(f"{self.name}: W_q shape {w_q.shape} != {self.weight.shape}")
        self.frozen = QuantResult(w_q=Tensor._wrap(np.asarray(w_q, dtype=DEFAULT_DTYPE)), gamma=np.float32(gamma))
        self.weight.requires_grad = False
        logger.debug(f"Froze {self.name} at gamma={float(gamma):.6g}")

    def effective_weight(self, training: bool) -> Tensor:
        if not self.quantized:
            return self.weight
        if self.frozen is not None:
            return Tensor._wrap(self.frozen.effective)
        if training and self.trainable:
            w_q, gamma = quantize_ste_with_scale(self.weight, self._n_values, self.beta, self.mean_mode)
            return scale(w_q, gamma)
        return Tensor._wrap(self.quantize().effective.astype(self.weight.dtype))


class FCLayer(QuantizedLayer):
    """Fully connected layer: activation(gamma * W_q . x + b), W stored out x in."""

    def __init__(self, in_features: int, units: int, rng: Prng, n_values: Optional[int] = None,
                 activation: str = "linear", use_bias: bool = True, trainable: bool = True,
                 beta: float = DEFAULT_BETA, mean_mode: str = "abs", name: str = "dense"):
        super().__init__(name, n_values, beta, mean_mode, trainable)
        if activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation {activation!r}")
        self.in_features = in_features
        self.units = units
        self.activation = activation
        self.weight = glorot_uniform(in_features, units, (units, in_features), rng, requires_grad=trainable)
        self.bias = zeros((units,), requires_grad=trainable) if use_bias else None

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"{self.name}: expected {self.in_features} input features, got {x.shape[-1]}")
        out = matmul(x, transpose(self.effective_weight(training)))
        if self.bias is not None:
            out = add(out, self.bias)
        return ACTIVATIONS[self.activation](out)


class Conv2DLayer(QuantizedLayer):
    """Same-padded stride-1 convolution with filters stored out x in x k x k."""

    def __init__(self, in_channels: int, filters: int, rng: Prng, kernel_size: int = 3,
                 n_values: Optional[int] = None, activation: str = "relu",
                 beta: float = DEFAULT_BETA, mean_mode: str = "abs", name: str = "conv2d"):
        super().__init__(name, n_values, beta, mean_mode)
        if kernel_size not in (3, 5):
            raise ValueError(f"kernel_size must be 3 or 5, got {kernel_size}")
        self.in_channels = in_channels
        self.filters = filters
        self.kernel_size = kernel_size
        self.activation = activation
        area = kernel_size * kernel_size
        self.weight = glorot_uniform(in_channels * area, filters * area,
                                     (filters, in_channels, kernel_size, kernel_size), rng)
        self.bias = zeros((filters,), requires_grad=True)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        out = add(conv2d(x, self.effective_weight(training)), self.bias)
        return ACTIVATIONS[self.activation](out)


class LayerNorm(Layer):
    weight_role = "scale"
    bias_role = "shift"

    def __init__(self, features: int, eps: float = LAYER_NORM_EPS, name: str = "layer_norm"):
        super().__init__(name)
        self.eps = eps
        self.weight = Tensor._wrap(np.ones(features, dtype=DEFAULT_DTYPE), requires_grad=True)
        self.bias = zeros((features,), requires_grad=True)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class Embedding(Layer):
    """Learned table, one row per position."""

    weight_role = "embedding"

    def __init__(self, rows: int, dim: int, rng: Prng, name: str = "embedding"):
        super().__init__(name)
        self.weight = Tensor._wrap(rng.uniform(-0.05, 0.05, size=(rows, dim)).astype(DEFAULT_DTYPE),
                                   requires_grad=True)


class PatchEncoder(Layer):
    """Full-precision linear projection of each patch plus its positional embedding."""

    def __init__(self, num_patches: int, patch_dim: int, emb_dim: int, rng: Prng, name: str = "patch_encoder"):
        super().__init__(name)
        self.num_patches = num_patches
        self.projection = FCLayer(patch_dim, emb_dim, rng.substream("projection"), n_values=None,
                                  activation="linear", name=f"{name}/projection")
        self.position_embedding = Embedding(num_patches, emb_dim, rng.substream("position"),
                                            name=f"{name}/position_embedding")

    def sublayers(self) -> List[Layer]:
        return [self.projection, self.position_embedding]

    def __call__(self, patches: Tensor, training: bool = False) -> Tensor:
        if patches.ndim != 3 or patches.shape[1] != self.num_patches:
            raise ShapeError(f"{self.name}: expected (batch, {self.num_patches}, patch_dim), got {patches.shape}")
        return add(self.projection(patches, training), self.position_embedding.weight)


class AttentionBlock(Layer):
    """Multi-head self-attention with quantized, bias-free Q/K/V/output projections."""

    def __init__(self, emb_dim: int, num_heads: int, rng: Prng, n_values: Optional[int] = None,
                 dropout_rate: float = 0.1, beta: float = DEFAULT_BETA, mean_mode: str = "abs",
                 name: str = "attention"):
        super().__init__(name)
        if emb_dim % num_heads:
            raise ValueError(f"emb_dim {emb_dim} is not divisible by num_heads {num_heads}")
        self.emb_dim = emb_dim
        self.num_heads = num_heads
        self.n_key = emb_dim // num_heads
        self.dropout_rate = dropout_rate

        def projection(role):
            return FCLayer(emb_dim, emb_dim, rng.substream(role), n_values=n_values, activation="linear",
                           use_bias=False, beta=beta, mean_mode=mean_mode, name=f"{name}/{role}")

        self.q_proj = projection("query")
        self.k_proj = projection("key")
        self.v_proj = projection("value")
        self.out_proj = projection("output")

    def sublayers(self) -> List[Layer]:
        return [self.q_proj, self.k_proj, self.v_proj, self.out_proj]

    def _split_heads(self, x: Tensor, batch: int) -> Tensor:
        return permute(reshape(x, (batch, -1, self.num_heads, self.n_key)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, key: Optional[Tensor] = None, value: Optional[Tensor] = None,
                 training: bool = False, rng: Optional[Prng] = None,
                 return_probs: bool = False):
        key = query if key is None else key
        value = query if value is None else value
        batch = key.shape[0]
        q = self._split_heads(self.q_proj(query, training), batch)
        k = self._split_heads(self.k_proj(key, training), batch)
        v = self._split_heads(self.v_proj(value, training), batch)
        scores = scale(matmul(q, permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.n_key))
        probs = softmax(scores, axis=-1)
        attended = matmul(dropout(probs, self.dropout_rate, rng, training), v)
        attended = reshape(permute(attended, (0, 2, 1, 3)), (batch, -1, self.num_heads * self.n_key))
        output = self.out_proj(attended, training)
        return (output, probs) if return_probs else output


def attention_forward(query: Tensor, key: Tensor, value: Tensor, block: AttentionBlock,
                      training: bool = False, rng: Optional[Prng] = None) -> Tensor:
    return block(query, key, value, training=training, rng=rng)


def fcl_forward(x: Tensor, layer: FCLayer, training: bool = False) -> Tensor:
    return layer(x, training)


def conv2d_forward(x: Tensor, layer: Conv2DLayer, training: bool = False) -> Tensor:
    return layer(x, training)
