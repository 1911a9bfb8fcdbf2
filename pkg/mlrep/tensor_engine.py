"""
Tensor Engine
=============

Dense numpy layers with explicit forward and backward passes.

Every tensor is a ``numpy.ndarray`` in row-major order; image-like tensors are
laid out [batch, channel, height, width]. Functions never modify their
inputs. Gradient checks run at 64-bit precision; training may run at 32-bit
(see ``config.PRECISION``).

Main pieces:
- conv2d (cross-correlation), 2x2 max-pooling, nearest-neighbour upsampling
- batch normalization with running statistics
- GELU (exact erf form), sigmoid, identity activations
- mean-squared error
- Adam and reduce-on-plateau scheduling
- seeded normal initialization
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Iterator, Optional, Tuple, Union

import numpy as np
from scipy.special import erf, expit

from mlrep.config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    BATCHNORM_EPS,
    BATCHNORM_MOMENTUM,
    INIT_STD,
    LEARNING_RATE,
    SCHEDULER_FACTOR,
    SCHEDULER_MIN_LR,
    SCHEDULER_PATIENCE,
    SCHEDULER_THRESHOLD,
)
from mlrep.errors import ConfigError, NonFiniteError, ShapeError, UsageError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

ACTIVATIONS = ('gelu', 'sigmoid', 'identity')

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ==============================================================================
# LAYER SPECIFICATION
# ==============================================================================

@dataclass(frozen=True)
class ConvLayerSpec:
    """One convolution stage: conv, optional batchnorm, activation"""
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int]
    padding: Tuple[int, int] = (0, 0)
    stride: Tuple[int, int] = (1, 1)
    has_batchnorm: bool = False
    activation: str = 'identity'

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"Channel counts must be positive, got {self.in_channels}->{self.out_channels}")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ConfigError(f"Kernel {self.kernel} and stride {self.stride} must be positive")
        if min(self.padding) < 0:
            raise ConfigError(f"Padding {self.padding} must be non-negative")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"Unknown activation '{self.activation}' (expected one of {ACTIVATIONS})")

    @property
    def weight_dims(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels) + tuple(self.kernel)

    def output_dims(self, height: int, width: int) -> Tuple[int, int]:
        """Closed-form output size: (H + 2p - k) // s + 1 per axis"""
        (kh, kw), (ph, pw), (sh, sw) = self.kernel, self.padding, self.stride
        if height + 2 * ph < kh or width + 2 * pw < kw:
            raise ShapeError(
                f"Input {height}x{width} with padding {self.padding} is smaller than kernel {self.kernel}"
            )
        return ((height + 2 * ph - kh) // sh + 1, (width + 2 * pw - kw) // sw + 1)


def _check_finite(name: str, array: Tensor):
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"Non-finite values in {name}")


# ==============================================================================
# CONVOLUTION
# ==============================================================================

def _pad(tensor: Tensor, padding: Tuple[int, int]) -> Tensor:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return tensor
    return np.pad(tensor, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _kernel_windows(padded: Tensor, spec: ConvLayerSpec,
                    out_h: int, out_w: int) -> Iterator[Tuple[int, int, Tuple[slice, slice]]]:
    """Yield (i, j, (rows, cols)) so padded[:, :, rows, cols] lines up with output cells for kernel tap (i, j)"""
    kh, kw = spec.kernel
    sh, sw = spec.stride
    for i in range(kh):
        rows = slice(i, i + sh * (out_h - 1) + 1, sh)
        for j in range(kw):
            cols = slice(j, j + sw * (out_w - 1) + 1, sw)
            yield i, j, (rows, cols)


def _check_conv_inputs(input: Tensor, weights: Tensor, bias: Tensor, spec: ConvLayerSpec):
    if input.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D input [B,C,H,W], got shape {input.shape}")
    if input.shape[1] != spec.in_channels or weights.shape != spec.weight_dims:
        raise ShapeError(
            f"conv2d: input shape {input.shape} incompatible with weight shape {weights.shape} "
            f"(layer expects {spec.in_channels} input channels, weights {spec.weight_dims})"
        )
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {spec.out_channels} output channels")


def conv2d_forward(input: Tensor, weights: Tensor, bias: Tensor, spec: ConvLayerSpec) -> Tensor:
    """
    Cross-correlate a batch with a filter bank

    Args:
        input: Tensor [B, C, H, W]
        weights: Tensor [O, C, kh, kw]
        bias: Tensor [O]
        spec: Layer geometry

    Returns:
        Tensor [B, O, H', W'] with H' = (H + 2ph - kh) // sh + 1
    """
    _check_conv_inputs(input, weights, bias, spec)
    batch, _, height, width = input.shape
    out_h, out_w = spec.output_dims(height, width)
    padded = _pad(input, spec.padding)

    # accumulate per kernel tap in [O, B, H', W'] layout
    out = np.zeros((spec.out_channels, batch, out_h, out_w), dtype=np.result_type(input, weights))
    for i, j, (rows, cols) in _kernel_windows(padded, spec, out_h, out_w):
        out += np.tensordot(weights[:, :, i, j], padded[:, :, rows, cols], axes=([1], [1]))

    out = out.transpose(1, 0, 2, 3) + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(grad_out: Tensor, cached_input: Optional[Tensor], weights: Tensor,
                    spec: ConvLayerSpec) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Gradients of conv2d_forward

    Args:
        grad_out: Upstream gradient [B, O, H', W']
        cached_input: The input given to the matching forward call
        weights: Filter bank used in the forward call
        spec: Layer geometry

    Returns:
        (grad_input, grad_weights, grad_bias)
    """
    if cached_input is None:
        raise UsageError("conv2d_backward called without a cached forward input")
    batch, channels, height, width = cached_input.shape
    out_h, out_w = spec.output_dims(height, width)
    expected = (batch, spec.out_channels, out_h, out_w)
    if grad_out.shape != expected:
        raise ShapeError(f"conv2d_backward: grad_out shape {grad_out.shape} != forward output shape {expected}")

    padded = _pad(cached_input, spec.padding)
    dtype = np.result_type(grad_out, cached_input, weights)
    grad_weights = np.zeros(weights.shape, dtype=dtype)
    # input gradient kept in [C, B, Hp, Wp] layout until the end
    grad_padded = np.zeros((channels, batch) + padded.shape[2:], dtype=dtype)

    for i, j, (rows, cols) in _kernel_windows(padded, spec, out_h, out_w):
        grad_weights[:, :, i, j] = np.tensordot(grad_out, padded[:, :, rows, cols], axes=([0, 2, 3], [0, 2, 3]))
        grad_padded[:, :, rows, cols] += np.tensordot(weights[:, :, i, j], grad_out, axes=([0], [1]))

    ph, pw = spec.padding
    grad_input = grad_padded.transpose(1, 0, 2, 3)[:, :, ph:ph + height, pw:pw + width]
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_input), grad_weights, grad_bias


# ==============================================================================
# POOLING AND UPSAMPLING
# ==============================================================================

@dataclass(frozen=True)
class PoolIndexMap:
    """Winning position (0..3, row-major in the 2x2 window) for every pooled cell"""
    indices: np.ndarray
    input_dims: Tuple[int, int, int, int]


def _pool_windows(input: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C, H//2, W//2, 4]; a trailing odd row/column is dropped"""
    batch, channels, height, width = input.shape
    h, w = height // 2, width // 2
    cropped = input[:, :, :2 * h, :2 * w]
    return cropped.reshape(batch, channels, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(batch, channels, h, w, 4)


def maxpool2x2_forward(input: Tensor) -> Tuple[Tensor, PoolIndexMap]:
    """
    2x2 max-pooling with stride 2 and floor semantics

    Ties go to the first position in row-major window order.

    Returns:
        (output [B, C, H//2, W//2], index map for the backward pass)
    """
    if input.ndim != 4:
        raise ShapeError(f"maxpool expects a 4-D input [B,C,H,W], got shape {input.shape}")
    if input.shape[2] < 2 or input.shape[3] < 2:
        raise ShapeError(f"maxpool needs H >= 2 and W >= 2, got shape {input.shape}")
    windows = _pool_windows(input)
    indices = np.argmax(windows, axis=-1)
    output = np.take_along_axis(windows, indices[..., None], axis=-1)[..., 0]
    return output, PoolIndexMap(indices=indices, input_dims=tuple(input.shape))


def maxpool2x2_apply(input: Tensor, index_map: PoolIndexMap) -> Tensor:
    """Pool with a previously recorded routing instead of recomputing the argmax"""
    if tuple(input.shape) != index_map.input_dims:
        raise UsageError(f"Pool index map recorded for {index_map.input_dims}, got input {input.shape}")
    windows = _pool_windows(input)
    return np.take_along_axis(windows, index_map.indices[..., None], axis=-1)[..., 0]


def maxpool2x2_backward(grad_out: Tensor, index_map: Optional[PoolIndexMap],
                        input_dims: Tuple[int, int, int, int]) -> Tensor:
    """Route each pooled gradient to its recorded argmax; everything else gets zero"""
    if index_map is None:
        raise UsageError("maxpool2x2_backward called without an index map")
    input_dims = tuple(input_dims)
    if input_dims != index_map.input_dims or grad_out.shape != index_map.indices.shape:
        raise UsageError(
            f"Stale pool index map: recorded for input {index_map.input_dims} / output "
            f"{index_map.indices.shape}, got input {input_dims} / grad {grad_out.shape}"
        )
    batch, channels, h, w = grad_out.shape
    windows = np.zeros((batch, channels, h, w, 4), dtype=grad_out.dtype)
    np.put_along_axis(windows, index_map.indices[..., None], grad_out[..., None], axis=-1)

    grad_input = np.zeros(input_dims, dtype=grad_out.dtype)
    grad_input[:, :, :2 * h, :2 * w] = (
        windows.reshape(batch, channels, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(batch, channels, 2 * h, 2 * w)
    )
    return grad_input


def _nearest_source(source: int, target: int) -> np.ndarray:
    return (np.arange(target) * source) // target


def upsample_to_forward(input: Tensor, target: Tuple[int, int]) -> Tensor:
    """
    Nearest-neighbour expansion to an exact target size

    output[y, x] = input[floor(y*h/H), floor(x*w/W)]
    """
    if input.ndim != 4:
        raise ShapeError(f"upsample expects a 4-D input [B,C,h,w], got shape {input.shape}")
    height, width = target
    h, w = input.shape[2:]
    if height < h or width < w:
        raise ShapeError(f"Upsample target {tuple(target)} is smaller than input {(h, w)}")
    rows = _nearest_source(h, height)
    cols = _nearest_source(w, width)
    return input[:, :, rows[:, None], cols[None, :]]


def upsample_to_backward(grad_out: Tensor, input_dims: Tuple[int, int, int, int]) -> Tensor:
    """Sum the gradient of every output cell back into its source cell"""
    batch, channels, h, w = input_dims
    if grad_out.shape[:2] != (batch, channels) or grad_out.shape[2] < h or grad_out.shape[3] < w:
        raise ShapeError(f"upsample_backward: grad shape {grad_out.shape} incompatible with input {tuple(input_dims)}")
    height, width = grad_out.shape[2:]
    # nearest mapping is monotone and onto, so each source cell owns one contiguous run
    row_starts = np.searchsorted(_nearest_source(h, height), np.arange(h))
    col_starts = np.searchsorted(_nearest_source(w, width), np.arange(w))
    grad = np.add.reduceat(grad_out, row_starts, axis=2)
    return np.add.reduceat(grad, col_starts, axis=3)


# ==============================================================================
# BATCH NORMALIZATION
# ==============================================================================

@dataclass
class RunningStats:
    """Per-channel running mean/variance, updated in train mode"""
    mean: Tensor
    var: Tensor
    momentum: float = BATCHNORM_MOMENTUM
    updates: int = 0

    @classmethod
    def empty(cls, channels: int, momentum: float = BATCHNORM_MOMENTUM, dtype=np.float64) -> 'RunningStats':
        return cls(mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype), momentum=momentum)

    @property
    def initialized(self) -> bool:
        return self.updates > 0

    def update(self, batch_mean: Tensor, batch_var: Tensor):
        batch_mean = batch_mean.astype(self.mean.dtype)
        batch_var = batch_var.astype(self.var.dtype)
        if self.updates == 0:
            self.mean, self.var = batch_mean.copy(), batch_var.copy()
        else:
            self.mean = (1.0 - self.momentum) * self.mean + self.momentum * batch_mean
            self.var = (1.0 - self.momentum) * self.var + self.momentum * batch_var
        self.updates += 1

    def copy(self) -> 'RunningStats':
        return replace(self, mean=self.mean.copy(), var=self.var.copy())


@dataclass(frozen=True)
class BatchNormCache:
    normalized: Tensor
    inv_std: Tensor
    gamma: Tensor
    mode: str


def _channel_view(vector: Tensor) -> Tensor:
    return vector[None, :, None, None]


def batchnorm_forward(input: Tensor, gamma: Tensor, beta: Tensor, running_stats: Optional[RunningStats],
                      mode: str = 'train', eps: float = BATCHNORM_EPS) -> Tuple[Tensor, BatchNormCache]:
    """
    Per-channel batch normalization

    Args:
        input: Tensor [B, C, H, W]
        gamma, beta: Per-channel scale and shift
        running_stats: Updated in place in train mode (pass None to leave untouched);
            required and initialized in eval mode
        mode: 'train' (batch statistics) or 'eval' (running statistics)
        eps: Added to the variance before the square root

    Returns:
        (output, cache for batchnorm_backward)
    """
    if input.ndim != 4 or gamma.shape != (input.shape[1],) or beta.shape != (input.shape[1],):
        raise ShapeError(f"batchnorm: input {input.shape} incompatible with gamma {gamma.shape} / beta {beta.shape}")

    if mode == 'train':
        count = input.shape[0] * input.shape[2] * input.shape[3]
        if count < 2:
            raise ShapeError(f"batchnorm train mode needs at least 2 values per channel, got input {input.shape}")
        mean = input.mean(axis=(0, 2, 3))
        var = input.var(axis=(0, 2, 3))
        if running_stats is not None:
            running_stats.update(mean, var * count / (count - 1))
    elif mode == 'eval':
        if running_stats is None or not running_stats.initialized:
            raise UsageError("batchnorm eval mode used before any training update of the running statistics")
        mean, var = running_stats.mean, running_stats.var
    else:
        raise UsageError(f"Unknown batchnorm mode '{mode}'")

    inv_std = 1.0 / np.sqrt(var + eps)
    normalized = (input - _channel_view(mean)) * _channel_view(inv_std)
    output = _channel_view(gamma) * normalized + _channel_view(beta)
    return output, BatchNormCache(normalized=normalized, inv_std=inv_std, gamma=gamma, mode=mode)


def batchnorm_backward(grad_out: Tensor, cache: Optional[BatchNormCache]) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns (grad_input, grad_gamma, grad_beta)"""
    if cache is None:
        raise UsageError("batchnorm_backward called without a forward cache")
    if grad_out.shape != cache.normalized.shape:
        raise ShapeError(f"batchnorm_backward: grad shape {grad_out.shape} != forward shape {cache.normalized.shape}")
    axes = (0, 2, 3)
    grad_gamma = np.sum(grad_out * cache.normalized, axis=axes)
    grad_beta = np.sum(grad_out, axis=axes)
    scale = _channel_view(cache.gamma * cache.inv_std)

    if cache.mode == 'eval':
        return grad_out * scale, grad_gamma, grad_beta

    count = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    grad_input = scale / count * (
        count * grad_out
        - _channel_view(grad_beta)
        - cache.normalized * _channel_view(grad_gamma)
    )
    return grad_input, grad_gamma, grad_beta


# ==============================================================================
# ACTIVATIONS AND LOSS
# ==============================================================================

def gelu(input: Tensor) -> Tensor:
    """x * Phi(x), exact erf form"""
    return 0.5 * input * (1.0 + erf(input / _SQRT_2))


def gelu_backward(grad_out: Tensor, input: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(input / _SQRT_2))
    pdf = np.exp(-0.5 * input * input) * _INV_SQRT_2PI
    return grad_out * (cdf + input * pdf)


def sigmoid(input: Tensor) -> Tensor:
    return expit(input)


def sigmoid_backward(grad_out: Tensor, output: Tensor) -> Tensor:
    return grad_out * output * (1.0 - output)


def activation_forward(name: str, input: Tensor) -> Tensor:
    if name == 'gelu':
        return gelu(input)
    if name == 'sigmoid':
        return sigmoid(input)
    return input


def activation_backward(name: str, grad_out: Tensor, input: Tensor, output: Tensor) -> Tensor:
    if name == 'gelu':
        return gelu_backward(grad_out, input)
    if name == 'sigmoid':
        return sigmoid_backward(grad_out, output)
    return grad_out


def mse_loss(pred: Tensor, target: Tensor) -> Tuple[float, Tensor]:
    """
    Mean squared error over every element

    Returns:
        (loss, gradient w.r.t. pred) with grad = 2 * (pred - target) / element_count
    """
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction shape {pred.shape} != target shape {target.shape}")
    residual = pred - target
    loss = float(np.mean(residual * residual))
    grad = (2.0 / residual.size) * residual
    return loss, grad


# ==============================================================================
# OPTIMIZATION
# ==============================================================================

@dataclass(frozen=True)
class OptimizerState:
    """Adam moment accumulators keyed by parameter name"""
    first_moment: Dict[str, Tensor]
    second_moment: Dict[str, Tensor]
    step: int = 0
    lr: float = LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def for_parameters(cls, params: Dict[str, Tensor], **hyperparameters) -> 'OptimizerState':
        return cls(
            first_moment={name: np.zeros_like(value) for name, value in params.items()},
            second_moment={name: np.zeros_like(value) for name, value in params.items()},
            **hyperparameters,
        )


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Tensor], state: OptimizerState,
              lr: Optional[float] = None) -> Tuple[Dict[str, Tensor], OptimizerState]:
    """
    One bias-corrected Adam update

    Args:
        params: Parameter tensors by name
        grads: Gradients with the same names and dims
        state: Moments and step counter
        lr: Learning rate for this step (the scheduler's current rate); defaults to state.lr

    Returns:
        (new parameter dict, new optimizer state); inputs are left untouched
    """
    if set(params) != set(grads) or set(params) != set(state.first_moment):
        raise UsageError("adam_step: parameter, gradient and moment names differ")
    lr = state.lr if lr is None else lr
    step = state.step + 1
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step

    new_params, first, second = {}, {}, {}
    for name, value in params.items():
        grad = grads[name]
        if grad.shape != value.shape or state.first_moment[name].shape != value.shape:
            raise ShapeError(f"adam_step: gradient {grad.shape} / parameter {value.shape} mismatch for '{name}'")
        if not np.all(np.isfinite(grad)):
            bad = int(np.size(grad) - np.count_nonzero(np.isfinite(grad)))
            raise NonFiniteError(f"Non-finite gradient for parameter '{name}' ({bad} of {grad.size} entries) at step {step}")
        m = state.beta1 * state.first_moment[name] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * grad * grad
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        new_params[name] = (value - update).astype(value.dtype, copy=False)
        first[name], second[name] = m, v

    return new_params, replace(state, first_moment=first, second_moment=second, step=step)


@dataclass(frozen=True)
class SchedulerState:
    """Reduce-on-plateau learning rate state"""
    current_lr: float = LEARNING_RATE
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    factor: float = SCHEDULER_FACTOR
    patience: int = SCHEDULER_PATIENCE
    min_lr: float = SCHEDULER_MIN_LR
    threshold: float = SCHEDULER_THRESHOLD

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"Scheduler factor must be in (0, 1), got {self.factor}")
        if self.min_lr <= 0 or self.current_lr < self.min_lr:
            raise ConfigError(f"Need current_lr >= min_lr > 0, got {self.current_lr} / {self.min_lr}")


def scheduler_update(state: SchedulerState, val_loss: float) -> SchedulerState:
    """
    Feed one epoch's validation loss

    An improvement must beat best_val_loss by more than the relative threshold.
    After more than `patience` epochs without one, the rate is multiplied by
    `factor` (never below min_lr) and the counter restarts.
    """
    if not math.isfinite(val_loss):
        raise NonFiniteError(f"Scheduler received non-finite validation loss {val_loss}")
    if val_loss < state.best_val_loss * (1.0 - state.threshold):
        return replace(state, best_val_loss=val_loss, epochs_since_improvement=0)

    stale = state.epochs_since_improvement + 1
    if stale > state.patience:
        new_lr = max(state.current_lr * state.factor, state.min_lr)
        if new_lr < state.current_lr:
            logger.info(f"Reducing learning rate {state.current_lr:.3g} -> {new_lr:.3g}")
        return replace(state, current_lr=new_lr, epochs_since_improvement=0)
    return replace(state, epochs_since_improvement=stale)


# ==============================================================================
# INITIALIZATION
# ==============================================================================

def normal_init(dims: Tuple[int, ...], seed: Union[int, np.random.SeedSequence],
                std: float = INIT_STD, dtype=np.float64) -> Tensor:
    """I.i.d. N(0, std^2) draws from a seeded generator; same (seed, dims, std) -> same tensor"""
    if any(d < 0 for d in dims):
        raise ShapeError(f"Invalid dims {dims}")
    if std < 0:
        raise ConfigError(f"Initialization std must be non-negative, got {std}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, std, size=tuple(dims)).astype(dtype)
