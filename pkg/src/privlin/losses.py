"""Multi-class logistic loss, its derivatives, and the regularized objectives."""

from __future__ import annotations

import math

import numpy as np

# Worst-case bounds for the multi-class logistic loss: the gradient lives in a
# difference of two probability vectors (L2 diameter sqrt(2)), and the Hessian
# eigenvalues never exceed 1/2. Both bounds are tight.
LIPSCHITZ_K = math.sqrt(2.0)
HESSIAN_EIG_BOUND = 0.5


def _as_finite(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    return a


def softmax(a, axis: int = -1) -> np.ndarray:
    """Softmax along `axis`, computed with max subtraction for overflow safety."""
    a = _as_finite(a, "logits")
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(a, axis: int = -1) -> np.ndarray:
    """log(softmax(a)) without forming intermediate exponentials of large logits."""
    a = _as_finite(a, "logits")
    shifted = a - a.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _check_pair(a, y):
    a = _as_finite(a, "logits")
    y = np.asarray(y, dtype=np.float64)
    if a.shape != y.shape:
        raise ValueError(f"logits shape {a.shape} does not match labels shape {y.shape}")
    return a, y


def mc_logistic_loss(a, y):
    """Negative log-likelihood of one-hot labels under softmax(a).

    Accepts a single length-C vector or a batch (..., C); classes are the
    last axis. Always nonnegative; equals ln C at a = 0.
    """
    a, y = _check_pair(a, y)
    return -np.sum(y * log_softmax(a), axis=-1)


def mc_logistic_grad(a, y):
    """Gradient of the loss with respect to the logits: softmax(a) - y.

    Its L2 norm is at most sqrt(2) for any logits and any one-hot label.
    """
    a, y = _check_pair(a, y)
    return softmax(a) - y


def mc_logistic_hessian(a):
    """Hessian with respect to the logits: diag(p) - p p^T with p = softmax(a).

    Symmetric positive semidefinite, rows sum to zero, eigenvalues in [0, 1/2].
    Batched input (..., C) yields (..., C, C).
    """
    p = softmax(a)
    c = p.shape[-1]
    return p[..., :, None] * np.eye(c) - p[..., :, None] * p[..., None, :]


def _check_data(theta, features, labels):
    theta = _as_finite(theta, "theta")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("features and labels must be 2-D arrays")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} feature rows but {y.shape[0]} label rows")
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    if theta.ndim != 2 or theta.shape != (x.shape[1], y.shape[1]):
        raise ValueError(
            f"theta shape {theta.shape} does not match data dims "
            f"({x.shape[1]}, {y.shape[1]})"
        )
    return theta, x, y


def _mean_loss_and_grad(theta, x, y):
    n = x.shape[0]
    logits = x @ theta
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    mean_loss = float(np.mean(np.log(z[:, 0]) - (shifted * y).sum(axis=1)))
    grad = x.T @ (e / z - y) / n
    return mean_loss, grad


def erm_objective(theta, features, labels, lam: float):
    """Regularized empirical risk: mean logistic loss + lam/2 * ||theta||_F^2.

    Returns (value, gradient); the gradient has theta's (D, C) shape.
    """
    theta, x, y = _check_data(theta, features, labels)
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    mean_loss, grad = _mean_loss_and_grad(theta, x, y)
    value = mean_loss + 0.5 * lam * float(np.sum(theta * theta))
    return value, grad + lam * theta


def perturbed_objective(theta, features, labels, lam: float, noise_b, rho: float):
    """Randomly perturbed objective used by loss-perturbation training.

    mean loss + (lam/N) * ||theta||_F^2 / 2 + (1/N) tr(B^T theta)
              + (rho / 2N) * ||theta||_F^2

    The regularization terms carry the extra 1/N; with noise_b = 0, rho = 0
    and lam' = N * lam this reduces to erm_objective(theta, ..., lam).
    Returns (value, gradient).
    """
    theta, x, y = _check_data(theta, features, labels)
    noise_b = _as_finite(noise_b, "noise_b")
    if noise_b.shape != theta.shape:
        raise ValueError(f"noise shape {noise_b.shape} does not match theta shape {theta.shape}")
    if lam < 0 or rho < 0:
        raise ValueError("lam and rho must be nonnegative")
    n = x.shape[0]
    mean_loss, grad = _mean_loss_and_grad(theta, x, y)
    sq = float(np.sum(theta * theta))
    value = (
        mean_loss
        + 0.5 * lam * sq / n
        + float(np.sum(noise_b * theta)) / n
        + 0.5 * rho * sq / n
    )
    grad = grad + (lam + rho) / n * theta + noise_b / n
    return value, grad
