"""
Gradient Verification
=====================

Central finite differences against every analytic backward pass.

Each layer check draws a random small configuration, reduces the layer output
to a scalar through a fixed random projection (sum(R * output)), and compares
the analytic gradient of that scalar with central differences. All checks run
in 64-bit precision.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from mlrep.config import GRADCHECK_EPS, GRADCHECK_TOLERANCE, GRADCHECK_TRIALS
from mlrep.errors import GradcheckFailure, ShapeError
from mlrep.tensor_engine import (
    ConvLayerSpec,
    Tensor,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    gelu,
    gelu_backward,
    maxpool2x2_backward,
    maxpool2x2_forward,
    mse_loss,
    sigmoid,
    sigmoid_backward,
    upsample_to_backward,
    upsample_to_forward,
)

logger = logging.getLogger(__name__)

# Entries checked per tensor; larger tensors are sampled
MAX_ENTRIES_PER_TENSOR = 40


def max_relative_error(analytic: Tensor, numeric: Tensor) -> float:
    """max |a - n| / max(|a|, |n|, 1e-8) over all entries"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denominator))


def finite_diff_check(forward_fn: Callable[[Tensor], float], input: Tensor, analytic_grad: Tensor,
                      eps: float = GRADCHECK_EPS,
                      indices: Optional[Sequence[Tuple[int, ...]]] = None) -> float:
    """
    Compare an analytic gradient with central differences

    Args:
        forward_fn: Maps a tensor shaped like input to a scalar
        input: Point at which to differentiate (not modified)
        analytic_grad: Claimed gradient of forward_fn at input
        eps: Finite-difference step
        indices: Entries to check (default: all)

    Returns:
        Maximum relative error over the checked entries
    """
    point = np.array(input, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != point.shape:
        raise ShapeError(f"Gradient shape {analytic_grad.shape} != input shape {point.shape}")
    if indices is None:
        indices = list(np.ndindex(point.shape))

    analytic, numeric = [], []
    for index in indices:
        original = point[index]
        point[index] = original + eps
        plus = forward_fn(point)
        point[index] = original - eps
        minus = forward_fn(point)
        point[index] = original
        numeric.append((plus - minus) / (2.0 * eps))
        analytic.append(analytic_grad[index])
    return max_relative_error(np.array(analytic), np.array(numeric))


def sample_indices(shape: Tuple[int, ...], rng: np.random.Generator,
                   limit: int = MAX_ENTRIES_PER_TENSOR) -> List[Tuple[int, ...]]:
    size = int(np.prod(shape))
    if size <= limit:
        return list(np.ndindex(shape))
    return [np.unravel_index(flat, shape) for flat in rng.choice(size, size=limit, replace=False)]


# ==============================================================================
# LAYER CHECKS
# ==============================================================================

def _projection(rng: np.random.Generator, shape: Tuple[int, ...]) -> Tensor:
    return rng.normal(size=shape)


def _check_conv2d(rng: np.random.Generator, scale: float) -> float:
    while True:
        spec = ConvLayerSpec(
            in_channels=int(rng.integers(1, 4)),
            out_channels=int(rng.integers(1, 4)),
            kernel=(int(rng.integers(1, 4)), int(rng.integers(1, 4))),
            padding=(int(rng.integers(0, 3)), int(rng.integers(0, 3))),
            stride=(int(rng.integers(1, 3)), int(rng.integers(1, 3))),
        )
        height, width = int(rng.integers(3, 8)), int(rng.integers(3, 8))
        try:
            out_dims = spec.output_dims(height, width)
            break
        except ShapeError:
            continue

    batch = int(rng.integers(1, 3))
    x = rng.normal(size=(batch, spec.in_channels, height, width))
    w = rng.normal(size=spec.weight_dims)
    b = rng.normal(size=spec.out_channels)
    R = _projection(rng, (batch, spec.out_channels) + out_dims)

    grad_x, grad_w, grad_b = conv2d_backward(R, x, w, spec)
    return max(
        finite_diff_check(lambda v: float(np.sum(R * conv2d_forward(v, w, b, spec))), x, scale * grad_x,
                          indices=sample_indices(x.shape, rng)),
        finite_diff_check(lambda v: float(np.sum(R * conv2d_forward(x, v, b, spec))), w, scale * grad_w,
                          indices=sample_indices(w.shape, rng)),
        finite_diff_check(lambda v: float(np.sum(R * conv2d_forward(x, w, v, spec))), b, scale * grad_b),
    )


def _check_maxpool(rng: np.random.Generator, scale: float) -> float:
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(2, 8)), int(rng.integers(2, 8)))
    # Distinct values 0.01 apart so no perturbation can change a window's winner
    x = rng.permutation(int(np.prod(shape))).reshape(shape) * 0.01 + rng.uniform(-0.001, 0.001, size=shape)
    out, index_map = maxpool2x2_forward(x)
    R = _projection(rng, out.shape)
    grad_x = maxpool2x2_backward(R, index_map, x.shape)
    return finite_diff_check(lambda v: float(np.sum(R * maxpool2x2_forward(v)[0])), x, scale * grad_x)


def _check_batchnorm(rng: np.random.Generator, scale: float) -> float:
    shape = (int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    x = rng.normal(1.0, 2.0, size=shape)
    gamma = rng.normal(1.0, 0.5, size=shape[1])
    beta = rng.normal(size=shape[1])
    R = _projection(rng, shape)

    def project(v, g, bt):
        return float(np.sum(R * batchnorm_forward(v, g, bt, None, mode='train')[0]))

    _, cache = batchnorm_forward(x, gamma, beta, None, mode='train')
    grad_x, grad_gamma, grad_beta = batchnorm_backward(R, cache)
    return max(
        finite_diff_check(lambda v: project(v, gamma, beta), x, scale * grad_x, indices=sample_indices(shape, rng)),
        finite_diff_check(lambda v: project(x, v, beta), gamma, scale * grad_gamma),
        finite_diff_check(lambda v: project(x, gamma, v), beta, scale * grad_beta),
    )


def _check_gelu(rng: np.random.Generator, scale: float) -> float:
    x = rng.normal(0.0, 2.0, size=(2, 3, 4))
    R = _projection(rng, x.shape)
    return finite_diff_check(lambda v: float(np.sum(R * gelu(v))), x, scale * gelu_backward(R, x))


def _check_sigmoid(rng: np.random.Generator, scale: float) -> float:
    x = rng.normal(0.0, 2.0, size=(2, 3, 4))
    R = _projection(rng, x.shape)
    return finite_diff_check(lambda v: float(np.sum(R * sigmoid(v))), x, scale * sigmoid_backward(R, sigmoid(x)))


def _check_upsample(rng: np.random.Generator, scale: float) -> float:
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    target = (h + int(rng.integers(0, 4)), w + int(rng.integers(0, 4)))
    x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 3)), h, w))
    R = _projection(rng, x.shape[:2] + target)
    grad_x = upsample_to_backward(R, x.shape)
    return finite_diff_check(lambda v: float(np.sum(R * upsample_to_forward(v, target))), x, scale * grad_x)


def _check_mse(rng: np.random.Generator, scale: float) -> float:
    pred = rng.normal(size=(2, 1, 3, 5))
    target = rng.normal(size=pred.shape)
    _, grad = mse_loss(pred, target)
    return finite_diff_check(lambda v: mse_loss(v, target)[0], pred, scale * grad)


def _check_cae(rng: np.random.Generator, scale: float) -> float:
    """mse(decode(encode(x)), x) w.r.t. five sampled parameters of a narrow-input model"""
    from mlrep.cae_model import build_cae

    model = build_cae((20, 32), seed=int(rng.integers(2 ** 31)), init_std=0.1, dtype=np.float64)
    x = rng.uniform(0.0, 1.0, size=(3, 1, 20, 32))
    _, grads, forward = model.loss_and_grads(x, mode='train', track_stats=False)
    routing = forward.routing

    # Conv biases feeding a batchnorm have an identically zero gradient
    candidates = [name for name in model.params
                  if not (name.endswith('conv.bias') and f"{name.rsplit('.', 2)[0]}.bn.gamma" in model.params)]
    worst = 0.0
    for _ in range(5):
        name = candidates[int(rng.integers(len(candidates)))]
        index = sample_indices(model.params[name].shape, rng, limit=1)
        original = model.params[name]

        def loss_at(value, name=name):
            model.params[name] = value
            try:
                return model.loss_and_grads(x, mode='train', track_stats=False, routing=routing)[0]
            finally:
                model.params[name] = original

        worst = max(worst, finite_diff_check(loss_at, original, scale * grads[name], indices=index))
    return worst


def _check_logistic(rng: np.random.Generator, scale: float) -> float:
    from mlrep.downstream import logistic_objective

    X = rng.normal(size=(12, 5))
    y = np.array([0, 1] * 6, dtype=np.float64)
    w, b = rng.normal(size=5), float(rng.normal())
    _, grad_w, grad_b = logistic_objective(w, b, X, y, l2=1.0)
    return max(
        finite_diff_check(lambda v: logistic_objective(v, b, X, y, l2=1.0)[0], w, scale * grad_w),
        finite_diff_check(lambda v: logistic_objective(w, float(v[0]), X, y, l2=1.0)[0],
                          np.array([b]), scale * np.array([grad_b])),
    )


LAYER_CHECKS: Dict[str, Callable[[np.random.Generator, float], float]] = {
    'conv2d': _check_conv2d,
    'maxpool2x2': _check_maxpool,
    'batchnorm': _check_batchnorm,
    'gelu': _check_gelu,
    'sigmoid': _check_sigmoid,
    'upsample': _check_upsample,
    'mse': _check_mse,
    'cae_end_to_end': _check_cae,
    'logistic': _check_logistic,
}


# ==============================================================================
# SUITE
# ==============================================================================

@dataclass(frozen=True)
class LayerCheck:
    layer: str
    trials: int
    max_error: float
    worst_seed: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def run_gradcheck_suite(trials: int = GRADCHECK_TRIALS, base_seed: int = 0,
                        tolerance: float = GRADCHECK_TOLERANCE,
                        corrupt: Optional[Mapping[str, float]] = None,
                        layers: Optional[Sequence[str]] = None) -> List[LayerCheck]:
    """
    Run every layer check for `trials` random configurations

    Args:
        trials: Random configurations per layer
        base_seed: Trial t of layer l uses seed (base_seed + t, l)
        tolerance: Maximum accepted relative error
        corrupt: Fault injection, layer -> relative perturbation of the analytic gradient
        layers: Subset of LAYER_CHECKS to run (default: all)

    Returns:
        One LayerCheck per layer
    """
    corrupt = dict(corrupt or {})
    unknown = set(corrupt) - set(LAYER_CHECKS)
    if unknown:
        raise KeyError(f"Unknown layers to corrupt: {sorted(unknown)}")

    report = []
    for layer_index, layer in enumerate(layers or LAYER_CHECKS):
        check = LAYER_CHECKS[layer]
        scale = 1.0 + corrupt.get(layer, 0.0)
        worst, worst_seed = 0.0, base_seed
        for trial in range(trials):
            seed = base_seed + trial
            error = check(np.random.default_rng([seed, layer_index]), scale)
            if error >= worst:
                worst, worst_seed = error, seed
        result = LayerCheck(layer, trials, worst, worst_seed, tolerance)
        mark = '✓' if result.passed else '✗'
        logger.info(f"{mark} {layer}: max rel. error {worst:.2e} over {trials} trials (worst seed {worst_seed})")
        report.append(result)
    return report


def assert_gradcheck(report: Sequence[LayerCheck]):
    """Raise GradcheckFailure naming every failing layer and its worst seed"""
    failures = [check for check in report if not check.passed]
    if failures:
        detail = ', '.join(f"{c.layer} (seed {c.worst_seed}, error {c.max_error:.2e})" for c in failures)
        raise GradcheckFailure(f"Gradient check failed for {detail}")
