"""
Convolutional Autoencoder
=========================

Builds, trains, persists and applies the convolutional autoencoder over
normalized N x M multimodal matrices.

Encoder: four conv -> batchnorm -> GELU -> 2x2 max-pool stages with channels
32, 64, 128, 10 and kernels 3, 3, 5, 5 (padding 2, stride 1). The code layer
carries no batchnorm unless the full-batchnorm variant is requested.

Decoder: the mirror image. Each stage upsamples to the shape the matching
encoder conv produced, then convolves back to that conv's input shape
(padding k - 1 - p), so reconstruction dims always equal input dims.
The last stage ends in a sigmoid.

For a 20 x 409 input the code is 10 x 1 x 25 (K = 250).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from mlrep import binary_format
from mlrep.config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    BATCH_SIZE,
    BATCHNORM_EPS,
    BATCHNORM_MOMENTUM,
    EARLY_STOP_PATIENCE,
    ENCODER_CHANNELS,
    ENCODER_KERNELS,
    ENCODER_PADDING,
    INIT_STD,
    LEARNING_RATE,
    MAX_EPOCHS,
    PRECISION,
    SCHEDULER_FACTOR,
    SCHEDULER_MIN_LR,
    SCHEDULER_PATIENCE,
    SCHEDULER_THRESHOLD,
    SEQUENCE_LENGTH,
)
from mlrep.data_pipeline import Blocks, NormalizationStats
from mlrep.errors import (
    ConfigError,
    DataError,
    NonFiniteError,
    ShapeError,
    UsageError,
    WeightsFormatError,
)
from mlrep.tensor_engine import (
    BatchNormCache,
    ConvLayerSpec,
    OptimizerState,
    PoolIndexMap,
    RunningStats,
    SchedulerState,
    Tensor,
    activation_backward,
    activation_forward,
    adam_step,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    maxpool2x2_apply,
    maxpool2x2_backward,
    maxpool2x2_forward,
    mse_loss,
    normal_init,
    scheduler_update,
    upsample_to_backward,
    upsample_to_forward,
)

logger = logging.getLogger(__name__)


# ==============================================================================
# ARCHITECTURE
# ==============================================================================

def mirror_decoder(encoder: Sequence[ConvLayerSpec]) -> Tuple[ConvLayerSpec, ...]:
    """Decoder stages mirroring the encoder: swapped channels, same kernels, padding k - 1 - p"""
    layers = []
    for position, spec in enumerate(reversed(encoder)):
        last = position == len(encoder) - 1
        padding = tuple(k - 1 - p for k, p in zip(spec.kernel, spec.padding))
        if min(padding) < 0:
            raise ConfigError(f"Encoder padding {spec.padding} exceeds kernel {spec.kernel} - 1; no mirror exists")
        layers.append(ConvLayerSpec(
            in_channels=spec.out_channels,
            out_channels=spec.in_channels,
            kernel=spec.kernel,
            padding=padding,
            stride=(1, 1),
            has_batchnorm=not last,
            activation='sigmoid' if last else 'gelu',
        ))
    return tuple(layers)


@dataclass(frozen=True)
class CAEArchitecture:
    encoder: Tuple[ConvLayerSpec, ...]
    decoder: Tuple[ConvLayerSpec, ...]

    def __post_init__(self):
        if not self.encoder or len(self.decoder) != len(self.encoder):
            raise ConfigError("Encoder and decoder need the same, non-zero number of stages")
        if self.encoder[0].in_channels != 1 or self.decoder[-1].out_channels != 1:
            raise ConfigError("The autoencoder maps a single-channel matrix to a single-channel matrix")
        for previous, current in zip(self.encoder, self.encoder[1:]):
            if previous.out_channels != current.in_channels:
                raise ConfigError(f"Encoder channels do not chain: {previous.out_channels} -> {current.in_channels}")
        for spec in self.encoder:
            if spec.stride != (1, 1):
                raise ConfigError(f"Encoder convolutions must use stride 1, got {spec.stride}")
        for spec, mirror in zip(self.decoder, reversed(self.encoder)):
            if (spec.in_channels, spec.out_channels) != (mirror.out_channels, mirror.in_channels):
                raise ConfigError("Decoder channels do not mirror the encoder")

    @classmethod
    def reference(cls, channels: Sequence[int] = ENCODER_CHANNELS, kernels: Sequence[int] = ENCODER_KERNELS,
                  padding: int = ENCODER_PADDING, full_batchnorm: bool = False) -> 'CAEArchitecture':
        """
        The reference autoencoder (or a narrower variant for quick runs)

        Args:
            channels: Output channels per encoder stage
            kernels: Square kernel size per encoder stage
            padding: Symmetric padding of every encoder conv
            full_batchnorm: Also normalize the code layer (adds 2 x code channels parameters)
        """
        if len(channels) != len(kernels):
            raise ConfigError(f"{len(channels)} channel counts for {len(kernels)} kernels")
        encoder, in_channels = [], 1
        for index, (out_channels, kernel) in enumerate(zip(channels, kernels)):
            is_code = index == len(channels) - 1
            encoder.append(ConvLayerSpec(
                in_channels=in_channels,
                out_channels=int(out_channels),
                kernel=(int(kernel), int(kernel)),
                padding=(padding, padding),
                stride=(1, 1),
                has_batchnorm=full_batchnorm or not is_code,
                activation='gelu',
            ))
            in_channels = int(out_channels)
        return cls.from_encoder(encoder)

    @classmethod
    def from_encoder(cls, encoder: Sequence[ConvLayerSpec]) -> 'CAEArchitecture':
        encoder = tuple(encoder)
        return cls(encoder=encoder, decoder=mirror_decoder(encoder))

    @property
    def code_channels(self) -> int:
        return self.encoder[-1].out_channels

    @property
    def full_batchnorm(self) -> bool:
        return self.encoder[-1].has_batchnorm

    def layers(self) -> List[Tuple[str, ConvLayerSpec]]:
        return ([(f"encoder.{i}", spec) for i, spec in enumerate(self.encoder)]
                + [(f"decoder.{j}", spec) for j, spec in enumerate(self.decoder)])


def parameter_dims(arch: CAEArchitecture) -> List[Tuple[str, Tuple[int, ...]]]:
    """Trainable tensors in canonical order"""
    dims = []
    for prefix, spec in arch.layers():
        dims.append((f"{prefix}.conv.weight", spec.weight_dims))
        dims.append((f"{prefix}.conv.bias", (spec.out_channels,)))
        if spec.has_batchnorm:
            dims.append((f"{prefix}.bn.gamma", (spec.out_channels,)))
            dims.append((f"{prefix}.bn.beta", (spec.out_channels,)))
    return dims


# ==============================================================================
# SHAPE CHAIN
# ==============================================================================

@dataclass(frozen=True)
class StageShape:
    """Spatial dims around one stage; for decoder stages conv_input is the upsample target"""
    name: str
    conv_input: Tuple[int, int]
    conv_output: Tuple[int, int]
    output: Tuple[int, int]


@dataclass(frozen=True)
class ShapeChain:
    input_dims: Tuple[int, int]
    encoder: Tuple[StageShape, ...]
    decoder: Tuple[StageShape, ...]
    code_channels: int

    @property
    def code_dims(self) -> Tuple[int, int, int]:
        return (self.code_channels,) + self.encoder[-1].output

    @property
    def code_size(self) -> int:
        channels, h, w = self.code_dims
        return channels * h * w

    def encoder_heights(self) -> List[int]:
        heights = [self.input_dims[0]]
        for stage in self.encoder:
            heights += [stage.conv_output[0], stage.output[0]]
        return heights

    def encoder_widths(self) -> List[int]:
        widths = [self.input_dims[1]]
        for stage in self.encoder:
            widths += [stage.conv_output[1], stage.output[1]]
        return widths


def compute_shape_chain(input_dims: Tuple[int, int], arch: CAEArchitecture) -> ShapeChain:
    """Closed-form spatial dims through every stage; fails naming the first illegal stage"""
    height, width = input_dims
    encoder = []
    for index, spec in enumerate(arch.encoder):
        name = f"encoder.{index}"
        try:
            conv = spec.output_dims(height, width)
        except ShapeError as e:
            raise ShapeError(f"Input {tuple(input_dims)} too small at {name}: {e}") from e
        if conv[0] < 2 or conv[1] < 2:
            raise ShapeError(
                f"Input {tuple(input_dims)} too small at {name}: conv output {conv} cannot be 2x2 max-pooled"
            )
        pooled = (conv[0] // 2, conv[1] // 2)
        encoder.append(StageShape(name, (height, width), conv, pooled))
        height, width = pooled

    decoder = []
    for index, spec in enumerate(arch.decoder):
        mirror = encoder[-1 - index]
        conv = spec.output_dims(*mirror.conv_output)
        if conv != mirror.conv_input:
            raise ShapeError(f"decoder.{index} produces {conv}, expected {mirror.conv_input}")
        decoder.append(StageShape(f"decoder.{index}", mirror.conv_output, conv, conv))

    return ShapeChain(tuple(input_dims), tuple(encoder), tuple(decoder), arch.code_channels)


# ==============================================================================
# MODEL
# ==============================================================================

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = BATCH_SIZE
    max_epochs: int = MAX_EPOCHS
    early_stop_patience: int = EARLY_STOP_PATIENCE
    lr: float = LEARNING_RATE
    scheduler_factor: float = SCHEDULER_FACTOR
    scheduler_patience: int = SCHEDULER_PATIENCE
    scheduler_threshold: float = SCHEDULER_THRESHOLD
    min_lr: float = SCHEDULER_MIN_LR
    init_std: float = INIT_STD
    batchnorm_momentum: float = BATCHNORM_MOMENTUM
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    adam_epsilon: float = ADAM_EPSILON
    seed: int = 0
    precision: int = PRECISION

    def __post_init__(self):
        for name in ('batch_size', 'max_epochs', 'early_stop_patience', 'lr', 'min_lr', 'adam_epsilon'):
            if getattr(self, name) <= 0:
                raise ConfigError(f"TrainConfig.{name} must be positive, got {getattr(self, name)}")
        if self.precision not in (32, 64):
            raise ConfigError(f"Precision must be 32 or 64, got {self.precision}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float


@dataclass
class LayerCache:
    conv_input: Tensor
    pre_activation: Tensor
    activation: Tensor
    bn: Optional[BatchNormCache] = None
    pool: Optional[PoolIndexMap] = None
    upsample_input_dims: Optional[Tuple[int, ...]] = None


@dataclass
class ForwardPass:
    reconstruction: Tensor
    code: Tensor
    encoder: List[LayerCache]
    decoder: List[LayerCache]

    @property
    def routing(self) -> List[PoolIndexMap]:
        return [cache.pool for cache in self.encoder]


@dataclass
class CAEModel:
    """Architecture, weights, batchnorm statistics and training state"""
    architecture: CAEArchitecture
    input_dims: Tuple[int, int]
    params: Dict[str, Tensor]
    running: Dict[str, RunningStats]
    shape_chain: ShapeChain
    dtype: type = np.float32
    blocks: Blocks = ()
    scaler: Optional[NormalizationStats] = None
    optimizer: Optional[OptimizerState] = None
    scheduler: Optional[SchedulerState] = None
    history: List[EpochRecord] = field(default_factory=list)
    bn_eps: float = BATCHNORM_EPS

    @property
    def code_size(self) -> int:
        return self.shape_chain.code_size

    @property
    def has_decoder(self) -> bool:
        return all(name in self.params for name, _ in parameter_dims(self.architecture) if name.startswith('decoder.'))

    def check_input(self, X: Tensor) -> Tensor:
        """Cast to the model dtype and return [B, 1, N, M]"""
        X = np.asarray(X, dtype=self.dtype)
        if X.ndim == 3:
            X = X[:, None]
        if X.ndim != 4 or X.shape[1] != 1 or tuple(X.shape[2:]) != tuple(self.input_dims):
            raise ShapeError(f"Model built for {self.input_dims[0]}x{self.input_dims[1]} inputs, got batch of shape {X.shape}")
        return X

    def _stage_forward(self, prefix: str, spec: ConvLayerSpec, h: Tensor, mode: str, track_stats: bool) -> LayerCache:
        z = conv2d_forward(h, self.params[f"{prefix}.conv.weight"], self.params[f"{prefix}.conv.bias"], spec)
        bn_cache = None
        if spec.has_batchnorm:
            stats = self.running[prefix] if (track_stats or mode == 'eval') else None
            z, bn_cache = batchnorm_forward(z, self.params[f"{prefix}.bn.gamma"], self.params[f"{prefix}.bn.beta"],
                                            stats, mode=mode, eps=self.bn_eps)
        return LayerCache(conv_input=h, pre_activation=z, activation=activation_forward(spec.activation, z), bn=bn_cache)

    def _stage_backward(self, prefix: str, spec: ConvLayerSpec, grad: Tensor, cache: LayerCache,
                        grads: Dict[str, Tensor]) -> Tensor:
        grad = activation_backward(spec.activation, grad, cache.pre_activation, cache.activation)
        if spec.has_batchnorm:
            grad, grads[f"{prefix}.bn.gamma"], grads[f"{prefix}.bn.beta"] = batchnorm_backward(grad, cache.bn)
        grad_input, grads[f"{prefix}.conv.weight"], grads[f"{prefix}.conv.bias"] = conv2d_backward(
            grad, cache.conv_input, self.params[f"{prefix}.conv.weight"], spec
        )
        return grad_input

    def encode_forward(self, X: Tensor, mode: str = 'eval', track_stats: bool = True,
                       routing: Optional[Sequence[PoolIndexMap]] = None) -> Tuple[Tensor, List[LayerCache]]:
        """
        Run the encoder on [B, 1, N, M]

        Args:
            routing: Pool index maps to reuse instead of recomputing the argmax
        """
        h, caches = X, []
        for index, spec in enumerate(self.architecture.encoder):
            cache = self._stage_forward(f"encoder.{index}", spec, h, mode, track_stats)
            if routing is None:
                h, cache.pool = maxpool2x2_forward(cache.activation)
            else:
                cache.pool = routing[index]
                h = maxpool2x2_apply(cache.activation, cache.pool)
            caches.append(cache)
        return h, caches

    def decode_forward(self, code: Tensor, mode: str = 'eval',
                       track_stats: bool = True) -> Tuple[Tensor, List[LayerCache]]:
        if not self.has_decoder:
            raise UsageError("This model was loaded without its decoder")
        h, caches = code, []
        for index, spec in enumerate(self.architecture.decoder):
            stage = self.shape_chain.decoder[index]
            upsampled = upsample_to_forward(h, stage.conv_input)
            cache = self._stage_forward(f"decoder.{index}", spec, upsampled, mode, track_stats)
            cache.upsample_input_dims = h.shape
            h = cache.activation
            caches.append(cache)
        return h, caches

    def forward(self, X: Tensor, mode: str = 'train', track_stats: bool = True,
                routing: Optional[Sequence[PoolIndexMap]] = None) -> ForwardPass:
        code, encoder_caches = self.encode_forward(X, mode, track_stats, routing)
        reconstruction, decoder_caches = self.decode_forward(code, mode, track_stats)
        return ForwardPass(reconstruction, code, encoder_caches, decoder_caches)

    def backward(self, grad_reconstruction: Tensor, forward: ForwardPass) -> Dict[str, Tensor]:
        grads: Dict[str, Tensor] = {}
        grad = grad_reconstruction
        for index in reversed(range(len(self.architecture.decoder))):
            cache = forward.decoder[index]
            grad = self._stage_backward(f"decoder.{index}", self.architecture.decoder[index], grad, cache, grads)
            grad = upsample_to_backward(grad, cache.upsample_input_dims)
        for index in reversed(range(len(self.architecture.encoder))):
            cache = forward.encoder[index]
            grad = maxpool2x2_backward(grad, cache.pool, cache.activation.shape)
            grad = self._stage_backward(f"encoder.{index}", self.architecture.encoder[index], grad, cache, grads)
        return grads

    def loss_and_grads(self, X: Tensor, mode: str = 'train', track_stats: bool = True,
                       routing: Optional[Sequence[PoolIndexMap]] = None) -> Tuple[float, Dict[str, Tensor], ForwardPass]:
        """Reconstruction MSE of a batch and its gradient for every parameter"""
        X = self.check_input(X)
        forward = self.forward(X, mode, track_stats, routing)
        loss, grad = mse_loss(forward.reconstruction, X)
        return loss, self.backward(grad, forward), forward

    def snapshot(self) -> Tuple[Dict[str, Tensor], Dict[str, RunningStats]]:
        return ({name: value.copy() for name, value in self.params.items()},
                {prefix: stats.copy() for prefix, stats in self.running.items()})

    def restore(self, snapshot: Tuple[Dict[str, Tensor], Dict[str, RunningStats]]):
        params, running = snapshot
        self.params = {name: value.copy() for name, value in params.items()}
        self.running = {prefix: stats.copy() for prefix, stats in running.items()}


def build_cae(input_dims: Tuple[int, int] = (SEQUENCE_LENGTH, 409), arch: Optional[CAEArchitecture] = None,
              seed: int = 0, init_std: float = INIT_STD, dtype=np.float32,
              momentum: float = BATCHNORM_MOMENTUM, blocks: Blocks = ()) -> CAEModel:
    """
    Build and initialize an autoencoder for N x M inputs

    Conv weights are drawn from N(0, init_std^2), one child seed per tensor;
    biases and batchnorm shifts start at 0, batchnorm scales at 1.
    """
    arch = arch or CAEArchitecture.reference()
    input_dims = (int(input_dims[0]), int(input_dims[1]))
    chain = compute_shape_chain(input_dims, arch)
    dims = parameter_dims(arch)
    seeds = np.random.SeedSequence(seed).spawn(len(dims))

    params = {}
    for (name, shape), child in zip(dims, seeds):
        if name.endswith('conv.weight'):
            params[name] = normal_init(shape, child, init_std, dtype)
        elif name.endswith('bn.gamma'):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    running = {prefix: RunningStats.empty(spec.out_channels, momentum, dtype)
               for prefix, spec in arch.layers() if spec.has_batchnorm}

    model = CAEModel(architecture=arch, input_dims=input_dims, params=params, running=running,
                     shape_chain=chain, dtype=dtype, blocks=tuple(blocks))
    logger.info(
        f"Built CAE for {input_dims[0]}x{input_dims[1]}: code {chain.code_dims} (K={chain.code_size}), "
        f"{count_parameters(model).total:,} parameters"
    )
    return model


# ==============================================================================
# PARAMETER ACCOUNTING
# ==============================================================================

@dataclass(frozen=True)
class ParameterBreakdown:
    rows: Tuple[Tuple[str, int], ...]
    code_size: int

    @property
    def encoder_total(self) -> int:
        return sum(count for name, count in self.rows if name.startswith('encoder.'))

    @property
    def decoder_total(self) -> int:
        return sum(count for name, count in self.rows if name.startswith('decoder.'))

    @property
    def total(self) -> int:
        return sum(count for _, count in self.rows)

    def layer_rows(self) -> List[Tuple[str, int]]:
        """Counts grouped per sub-layer, e.g. 'encoder.0.conv', 'encoder.0.bn'"""
        grouped: Dict[str, int] = {}
        for name, count in self.rows:
            layer = name.rsplit('.', 1)[0]
            grouped[layer] = grouped.get(layer, 0) + count
        return list(grouped.items())

    def with_heads(self, tasks: int) -> int:
        """Encoder plus `tasks` logistic-regression heads of K weights and one bias each"""
        return self.encoder_total + tasks * (self.code_size + 1)


def count_parameters(model: Union[CAEModel, CAEArchitecture],
                     input_dims: Tuple[int, int] = (SEQUENCE_LENGTH, 409)) -> ParameterBreakdown:
    """
    Trainable parameter counts (conv weights and biases, batchnorm scales and shifts)

    Running statistics are not counted. For an architecture, input_dims only
    sets the code size used by with_heads; conv counts do not depend on it.
    """
    if isinstance(model, CAEModel):
        arch, present, code_size = model.architecture, set(model.params), model.code_size
    else:
        arch, present = model, None
        code_size = compute_shape_chain(input_dims, arch).code_size
    rows = tuple((name, int(np.prod(shape))) for name, shape in parameter_dims(arch)
                 if present is None or name in present)
    return ParameterBreakdown(rows=rows, code_size=code_size)


# ==============================================================================
# TRAINING
# ==============================================================================

def _batches(count: int, batch_size: int):
    for start in range(0, count, batch_size):
        yield slice(start, min(start + batch_size, count))


def evaluate_mse(model: CAEModel, X: Tensor, batch_size: int = BATCH_SIZE) -> float:
    """Eval-mode reconstruction MSE over a whole split"""
    X = model.check_input(X)
    if len(X) == 0:
        raise DataError("Cannot evaluate reconstruction on an empty split")
    squared = 0.0
    for batch in _batches(len(X), batch_size):
        forward = model.forward(X[batch], mode='eval')
        residual = forward.reconstruction.astype(np.float64) - X[batch]
        squared += float(np.sum(residual * residual))
    return squared / X.size


def train_cae(model: CAEModel, train_X: Tensor, val_X: Tensor,
              config: TrainConfig = TrainConfig()) -> Tuple[CAEModel, List[EpochRecord]]:
    """
    Minimize reconstruction MSE with Adam and reduce-on-plateau scheduling

    Batchnorm running statistics are seeded from one train-mode pass over the
    first batch, so epoch 0 of the history is the initialized model scored in
    eval mode. Training stops once validation MSE has not improved for
    early_stop_patience epochs; the model is left holding the best-validation
    weights (the initial weights count as a candidate).

    Args:
        model: Built model; updated in place
        train_X: Normalized training matrices [B, N, M] with values in [0, 1]
        val_X: Normalized validation matrices
        config: Training hyperparameters

    Returns:
        (model, per-epoch history)
    """
    if not model.has_decoder:
        raise UsageError("Cannot train a model without its decoder")
    train_X = model.check_input(train_X)
    val_X = model.check_input(val_X)
    if len(train_X) == 0 or len(val_X) == 0:
        raise DataError(f"Training needs non-empty splits (train={len(train_X)}, val={len(val_X)})")
    if train_X.min() < 0 or train_X.max() > 1:
        raise DataError("Training inputs must be normalized to [0, 1]")

    rng = np.random.default_rng(config.seed)
    optimizer = model.optimizer or OptimizerState.for_parameters(
        model.params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, epsilon=config.adam_epsilon
    )
    scheduler = model.scheduler or SchedulerState(
        current_lr=config.lr, factor=config.scheduler_factor, patience=config.scheduler_patience,
        min_lr=config.min_lr, threshold=config.scheduler_threshold,
    )

    if not all(stats.initialized for stats in model.running.values()):
        model.forward(train_X[:config.batch_size], mode='train')

    best_val = evaluate_mse(model, val_X, config.batch_size)
    history = [EpochRecord(0, evaluate_mse(model, train_X, config.batch_size), best_val, scheduler.current_lr)]
    best_snapshot, best_epoch, stale = model.snapshot(), 0, 0
    logger.info(f"Epoch 0: val MSE {best_val:.6f} at initialization")

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_X))
        lr = scheduler.current_lr
        total = 0.0
        for batch_index, batch in enumerate(_batches(len(train_X), config.batch_size)):
            X = train_X[order[batch]]
            loss, grads, _ = model.loss_and_grads(X, mode='train')
            if not np.isfinite(loss):
                raise NonFiniteError(f"Non-finite training loss at epoch {epoch}, batch {batch_index}")
            model.params, optimizer = adam_step(model.params, grads, optimizer, lr=lr)
            total += loss * len(X)

        train_mse = total / len(train_X)
        val_mse = evaluate_mse(model, val_X, config.batch_size)
        scheduler = scheduler_update(scheduler, val_mse)
        history.append(EpochRecord(epoch, train_mse, val_mse, lr))
        logger.info(f"Epoch {epoch}: train MSE {train_mse:.6f}, val MSE {val_mse:.6f}, lr {lr:.2g}")

        if val_mse < best_val:
            best_val, best_epoch, stale = val_mse, epoch, 0
            best_snapshot = model.snapshot()
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                logger.info(f"Early stopping at epoch {epoch}: no val improvement for {stale} epochs")
                break

    model.restore(best_snapshot)
    model.optimizer, model.scheduler, model.history = optimizer, scheduler, history
    logger.info(f"✓ Training done: best val MSE {best_val:.6f} at epoch {best_epoch}")
    return model, history


# ==============================================================================
# EMBEDDING AND RECONSTRUCTION
# ==============================================================================

def encode(model: CAEModel, X: Tensor, batch_size: int = BATCH_SIZE) -> Tensor:
    """
    Flattened eval-mode code for each matrix

    Returns:
        Tensor [B, K], row-major over (channel, H, W)
    """
    X = model.check_input(X)
    codes = [model.encode_forward(X[batch], mode='eval')[0].reshape(batch.stop - batch.start, -1)
             for batch in _batches(len(X), batch_size)]
    if not codes:
        return np.zeros((0, model.code_size), dtype=model.dtype)
    return np.concatenate(codes, axis=0)


def decode(model: CAEModel, code: Tensor) -> Tensor:
    """Reconstruct [B, 1, N, M] matrices from [B, K] codes"""
    code = np.asarray(code, dtype=model.dtype)
    if code.ndim != 2 or code.shape[1] != model.code_size:
        raise ShapeError(f"Model code size is {model.code_size}, got codes of shape {code.shape}")
    return model.decode_forward(code.reshape((len(code),) + model.shape_chain.code_dims), mode='eval')[0]


# ==============================================================================
# PERSISTENCE
# ==============================================================================

def model_tensors(model: CAEModel, include_decoder: bool = True) -> Dict[str, np.ndarray]:
    """Every tensor (metadata, weights, statistics, scaler) that makes up an MLRW weights file"""
    tensors: Dict[str, np.ndarray] = {
        'meta/input_dims': np.array(model.input_dims),
        'meta/encoder': np.array([
            list(spec.weight_dims[:2]) + list(spec.kernel) + list(spec.padding) + list(spec.stride)
            + [int(spec.has_batchnorm)]
            for spec in model.architecture.encoder
        ]),
    }
    for index, (name, width) in enumerate(model.blocks):
        tensors[f"meta/block/{index}/{name}"] = np.array([width])

    keep = lambda name: include_decoder or name.startswith('encoder.')
    for name, _ in parameter_dims(model.architecture):
        if name in model.params and keep(name):
            tensors[name] = model.params[name]
    for prefix, stats in model.running.items():
        if keep(prefix):
            tensors[f"{prefix}.bn.running_mean"] = stats.mean
            tensors[f"{prefix}.bn.running_var"] = stats.var
            tensors[f"{prefix}.bn.running_updates"] = np.array([stats.updates])
            tensors[f"{prefix}.bn.momentum"] = np.array([stats.momentum])
    if model.scaler is not None:
        tensors.update(model.scaler.to_tensors())
    return tensors


def save_weights(model: CAEModel, path: Union[str, Path], include_decoder: bool = True,
                 extra_tensors: Optional[Dict[str, np.ndarray]] = None) -> Path:
    """
    Write an MLRW v1 weights file

    Args:
        include_decoder: False writes the encoder-only feature extractor
        extra_tensors: Further named tensors (e.g. classifier heads)
    """
    tensors = model_tensors(model, include_decoder)
    tensors.update(extra_tensors or {})
    return binary_format.write_container(path, tensors)


def _parse_blocks(tensors: Dict[str, np.ndarray]) -> Blocks:
    entries = []
    for key, value in tensors.items():
        if key.startswith('meta/block/'):
            _, _, index, name = key.split('/', 3)
            entries.append((int(index), name, int(value[0])))
    return tuple((name, width) for _, name, width in sorted(entries))


def load_weights(path: Union[str, Path], dtype=np.float32) -> CAEModel:
    """Restore a model (architecture, weights, running stats, shape chain, scaler) from MLRW v1"""
    tensors = binary_format.read_container(path)
    try:
        input_dims = tuple(int(v) for v in tensors['meta/input_dims'])
        rows = tensors['meta/encoder'].astype(int)
    except KeyError as e:
        raise WeightsFormatError(f"{path}: missing metadata tensor {e}") from e

    encoder = tuple(
        ConvLayerSpec(in_channels=r[0], out_channels=r[1], kernel=(r[2], r[3]), padding=(r[4], r[5]),
                      stride=(r[6], r[7]), has_batchnorm=bool(r[8]), activation='gelu')
        for r in rows.tolist()
    )
    arch = CAEArchitecture.from_encoder(encoder)
    chain = compute_shape_chain(input_dims, arch)

    params = {}
    for name, shape in parameter_dims(arch):
        if name not in tensors:
            if name.startswith('encoder.'):
                raise WeightsFormatError(f"{path}: missing encoder tensor '{name}'")
            continue
        if tuple(tensors[name].shape) != tuple(shape):
            raise WeightsFormatError(f"{path}: tensor '{name}' has dims {tensors[name].shape}, expected {shape}")
        params[name] = tensors[name].astype(dtype)

    running = {}
    for prefix, spec in arch.layers():
        key = f"{prefix}.bn.running_mean"
        if spec.has_batchnorm and key in tensors:
            running[prefix] = RunningStats(
                mean=tensors[key].astype(dtype),
                var=tensors[f"{prefix}.bn.running_var"].astype(dtype),
                updates=int(tensors[f"{prefix}.bn.running_updates"][0]),
                momentum=float(tensors.get(f"{prefix}.bn.momentum", [BATCHNORM_MOMENTUM])[0]),
            )

    scaler = NormalizationStats.from_tensors(tensors) if 'scaler/mean' in tensors else None
    model = CAEModel(architecture=arch, input_dims=input_dims, params=params, running=running,
                     shape_chain=chain, dtype=dtype, blocks=_parse_blocks(tensors), scaler=scaler)
    logger.info(f"✓ Loaded CAE from {path}: {len(params)} tensors, K={chain.code_size}"
                + ("" if model.has_decoder else " (encoder only)"))
    return model
