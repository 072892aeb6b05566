"""Differentiable building blocks of the multi-branch head.

Every layer is a plain parameter container with pure ``*_forward`` and
``*_backward`` functions, so the analytic gradients can be verified against
central finite differences (see :func:`grad_check`).

All forward/backward functions accept either a single sample (the shapes
documented below) or a batch with a leading ``N`` axis.  For batched calls
the parameter gradients are summed over the batch; input gradients keep the
batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensorio import as_tensor

SIGMA_FLOOR_SQ = 1e-12


def _require_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{name} contains non-finite values")


@dataclass
class RBFBranch:
    """One branch of Gaussian RBF units.

    ``centers`` holds one prototype per unit (rows); radii are stored as
    ``log_radii`` so the radius ``sigma = exp(log_radii)`` stays positive by
    construction rather than by clamping.
    """

    centers: np.ndarray
    log_radii: np.ndarray

    def __post_init__(self):
        self.centers = as_tensor(self.centers)
        self.log_radii = as_tensor(self.log_radii)
        if self.centers.ndim != 2 or self.log_radii.ndim != 1:
            raise ShapeError("centers must be (units, dim), log_radii (units,)")
        if self.centers.shape[0] != self.log_radii.shape[0]:
            raise ShapeError("centers and log_radii disagree on unit count")
        if self.centers.shape[0] < 1 or self.centers.shape[1] < 1:
            raise ShapeError("need at least one unit and one input dimension")
        _require_finite("centers", self.centers)
        _require_finite("log_radii", self.log_radii)

    @property
    def units(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def radii(self) -> np.ndarray:
        return np.exp(self.log_radii)


@dataclass
class ReduceConv:
    """1x1 convolution collapsing C channels into one map per branch."""

    weights: np.ndarray  # (branches, channels)
    bias: np.ndarray  # (branches,)

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        self.bias = as_tensor(self.bias)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("weights must be (branches, channels), bias (branches,)")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ShapeError("weights and bias disagree on branch count")
        if self.weights.shape[0] < 1 or self.weights.shape[1] < 1:
            raise ShapeError("need at least one branch and one channel")
        _require_finite("weights", self.weights)
        _require_finite("bias", self.bias)

    @property
    def branches(self) -> int:
        return self.weights.shape[0]

    @property
    def channels(self) -> int:
        return self.weights.shape[1]


@dataclass
class DenseReLU:
    """Dense layer with ReLU activation, the non-local branch baseline."""

    weights: np.ndarray  # (units, dim)
    bias: np.ndarray  # (units,)

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        self.bias = as_tensor(self.bias)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("weights must be (units, dim), bias (units,)")
        if self.weights.shape[0] != self.bias.shape[0] or self.weights.shape[0] < 1:
            raise ShapeError("weights and bias disagree on unit count")
        _require_finite("weights", self.weights)
        _require_finite("bias", self.bias)

    @property
    def units(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class SoftmaxClassifier:
    """Linear layer whose logits feed a softmax over the classes."""

    weights: np.ndarray  # (classes, features)
    bias: np.ndarray  # (classes,)

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        self.bias = as_tensor(self.bias)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("weights must be (classes, features), bias (classes,)")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ShapeError("weights and bias disagree on class count")
        if self.weights.shape[0] < 2:
            raise ShapeError("need at least two classes")
        _require_finite("weights", self.weights)
        _require_finite("bias", self.bias)

    @property
    def classes(self) -> int:
        return self.weights.shape[0]

    @property
    def features(self) -> int:
        return self.weights.shape[1]


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = as_tensor(x)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ShapeError(f"{what}: expected length {dim}, got {x.shape[0]}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != dim:
            raise ShapeError(f"{what}: expected (N, {dim}), got {x.shape}")
        return x, False
    raise ShapeError(f"{what}: expected rank 1 or 2, got rank {x.ndim}")


# ---------------------------------------------------------------------------
# RBF branch
# ---------------------------------------------------------------------------


def rbf_forward(branch: RBFBranch, x: np.ndarray) -> np.ndarray:
    """Gaussian unit activations h_i = exp(-||x - mu_i||^2 / (2 sigma_i^2)).

    ``x`` is a length-d vector or an (N, d) batch; the result has one value
    per unit, in (0, 1].
    """
    xb, single = _as_batch(x, branch.dim, "rbf_forward input")
    diff = xb[:, None, :] - branch.centers[None, :, :]  # (N, U, d)
    sq_dist = np.einsum("nud,nud->nu", diff, diff)
    sigma_sq = np.exp(2.0 * branch.log_radii)
    h = np.exp(-sq_dist / (2.0 * sigma_sq[None, :]))
    return h[0] if single else h


def rbf_backward(
    branch: RBFBranch, x: np.ndarray, grad_h: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the RBF activations contracted with ``grad_h``.

    Uses dh_i/dx = h_i (mu_i - x) / sigma_i^2, dh_i/dmu_i = -dh_i/dx and
    dh_i/dlog sigma_i = h_i ||x - mu_i||^2 / sigma_i^2.  Returns
    ``(grad_x, grad_centers, grad_log_radii)``; for batched input the
    parameter gradients are summed over the batch.
    """
    xb, single = _as_batch(x, branch.dim, "rbf_backward input")
    gb, gsingle = _as_batch(grad_h, branch.units, "rbf_backward grad_h")
    if single != gsingle or xb.shape[0] != gb.shape[0]:
        raise ShapeError("rbf_backward: x and grad_h disagree on batch shape")
    diff = xb[:, None, :] - branch.centers[None, :, :]  # (N, U, d)
    sq_dist = np.einsum("nud,nud->nu", diff, diff)
    sigma_sq = np.exp(2.0 * branch.log_radii)
    if np.any(sigma_sq < SIGMA_FLOOR_SQ):
        raise ConfigError(
            f"rbf_backward: sigma^2 below numerical floor {SIGMA_FLOOR_SQ:g}"
        )
    h = np.exp(-sq_dist / (2.0 * sigma_sq[None, :]))
    # common factor grad_h * h / sigma^2, shape (N, U)
    c = gb * h / sigma_sq[None, :]
    grad_x = -np.einsum("nu,nud->nd", c, diff)
    grad_centers = np.einsum("nu,nud->ud", c, diff)
    grad_log_radii = np.einsum("nu,nu->u", c, sq_dist)
    return (grad_x[0] if single else grad_x), grad_centers, grad_log_radii


# ---------------------------------------------------------------------------
# Channel-reduction convolution (1x1)
# ---------------------------------------------------------------------------


def _as_fmap_batch(fmap: np.ndarray, channels: int, what: str) -> tuple[np.ndarray, bool]:
    fmap = as_tensor(fmap)
    if fmap.ndim == 3:
        fb, single = fmap[None], True
    elif fmap.ndim == 4:
        fb, single = fmap, False
    else:
        raise ShapeError(f"{what}: expected rank 3 or 4, got rank {fmap.ndim}")
    if fb.shape[1] != channels:
        raise ShapeError(f"{what}: expected {channels} channels, got {fb.shape[1]}")
    return fb, single


def reduce_conv_forward(rc: ReduceConv, fmap: np.ndarray) -> np.ndarray:
    """Per-branch channel mixture: out[b,h,w] = bias[b] + sum_c W[b,c] fmap[c,h,w]."""
    fb, single = _as_fmap_batch(fmap, rc.channels, "reduce_conv_forward input")
    out = np.einsum("bc,nchw->nbhw", rc.weights, fb) + rc.bias[None, :, None, None]
    return out[0] if single else out


def reduce_conv_backward(
    rc: ReduceConv, fmap: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of :func:`reduce_conv_forward`.

    Returns ``(grad_fmap, grad_weights, grad_bias)``; batched parameter
    gradients are summed over the batch.
    """
    fb, single = _as_fmap_batch(fmap, rc.channels, "reduce_conv_backward input")
    gb, gsingle = _as_fmap_batch(grad_out, rc.branches, "reduce_conv_backward grad_out")
    if single != gsingle or fb.shape[0] != gb.shape[0] or fb.shape[2:] != gb.shape[2:]:
        raise ShapeError("reduce_conv_backward: fmap and grad_out disagree on shape")
    grad_fmap = np.einsum("bc,nbhw->nchw", rc.weights, gb)
    grad_weights = np.einsum("nbhw,nchw->bc", gb, fb)
    grad_bias = gb.sum(axis=(0, 2, 3))
    return (grad_fmap[0] if single else grad_fmap), grad_weights, grad_bias


# ---------------------------------------------------------------------------
# Dense + ReLU branch (baseline head)
# ---------------------------------------------------------------------------


def dense_relu_forward(layer: DenseReLU, x: np.ndarray) -> np.ndarray:
    """out = max(0, W x + b) elementwise."""
    xb, single = _as_batch(x, layer.dim, "dense_relu_forward input")
    out = np.maximum(0.0, xb @ layer.weights.T + layer.bias[None, :])
    return out[0] if single else out


def dense_relu_backward(
    layer: DenseReLU, x: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`dense_relu_forward`; subgradient 0 at exactly 0."""
    xb, single = _as_batch(x, layer.dim, "dense_relu_backward input")
    gb, gsingle = _as_batch(grad_out, layer.units, "dense_relu_backward grad_out")
    if single != gsingle or xb.shape[0] != gb.shape[0]:
        raise ShapeError("dense_relu_backward: x and grad_out disagree on batch shape")
    pre = xb @ layer.weights.T + layer.bias[None, :]
    g = gb * (pre > 0.0)
    grad_x = g @ layer.weights
    grad_weights = g.T @ xb
    grad_bias = g.sum(axis=0)
    return (grad_x[0] if single else grad_x), grad_weights, grad_bias


# ---------------------------------------------------------------------------
# Softmax classifier with cross-entropy loss
# ---------------------------------------------------------------------------


def softmax_cross_entropy(
    clf: SoftmaxClassifier, features: np.ndarray, label
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stable softmax + cross-entropy on ``W features + b``.

    Returns ``(loss, probs, grad_logits)`` with
    ``grad_logits = probs - onehot(label)``.  Accepts a single feature
    vector with an integer label, or an (N, F) batch with an (N,) label
    array; batched losses are per-sample.
    """
    fb, single = _as_batch(features, clf.features, "softmax features")
    labels = np.asarray(label, dtype=np.int64)
    if single:
        if labels.ndim != 0:
            raise ShapeError("single feature vector needs a scalar label")
        labels = labels[None]
    elif labels.shape != (fb.shape[0],):
        raise ShapeError(f"labels: expected shape ({fb.shape[0]},), got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= clf.classes):
        raise ConfigError(f"label out of range 0..{clf.classes - 1}")
    logits = fb @ clf.weights.T + clf.bias[None, :]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    probs = exp / denom
    rows = np.arange(fb.shape[0])
    losses = np.log(denom[:, 0]) - shifted[rows, labels]
    grad_logits = probs.copy()
    grad_logits[rows, labels] -= 1.0
    if single:
        return float(losses[0]), probs[0], grad_logits[0]
    return losses, probs, grad_logits


def linear_backward(
    weights: np.ndarray, x: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``out = W x + b`` given upstream ``grad_out``.

    Shared by the classifier and by composed backward passes; batched
    parameter gradients are summed over the batch.
    """
    xb, single = _as_batch(x, weights.shape[1], "linear_backward input")
    gb, gsingle = _as_batch(grad_out, weights.shape[0], "linear_backward grad_out")
    if single != gsingle or xb.shape[0] != gb.shape[0]:
        raise ShapeError("linear_backward: x and grad_out disagree on batch shape")
    grad_x = gb @ weights
    grad_w = gb.T @ xb
    grad_b = gb.sum(axis=0)
    return (grad_x[0] if single else grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(loss_fn, arrays, analytic_grads, eps: float = 1e-6) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn()`` must recompute the scalar loss from the current contents
    of ``arrays``, which are perturbed in place one element at a time.
    ``analytic_grads`` are the corresponding gradient arrays at the
    unperturbed point.  The relative error of one element is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise ConfigError("grad_check needs eps > 0")
    if len(arrays) != len(analytic_grads):
        raise ShapeError("arrays and analytic_grads must pair up")
    worst = 0.0
    for arr, grad in zip(arrays, analytic_grads):
        if arr.shape != np.shape(grad):
            raise ShapeError(f"gradient shape {np.shape(grad)} != array shape {arr.shape}")
        flat = arr.reshape(-1)
        gflat = np.asarray(grad, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            analytic = gflat[i]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
