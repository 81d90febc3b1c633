"""Deterministic regularized training for linear multi-class models."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize as _scipy_minimize

from .data import LabeledDataset
from .losses import erm_objective, mc_logistic_hessian, perturbed_objective


class ConvergenceError(RuntimeError):
    """Training stopped before reaching the requested gradient tolerance."""

    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message} (last gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


@dataclass
class TrainConfig:
    """Objective and stopping criteria for one training run.

    With noise_b set, the perturbed objective is minimized (rho adds the
    extra ridge); otherwise the plain regularized empirical risk.
    """

    lam: float
    max_iterations: int = 500
    grad_tolerance: float = 1e-8
    noise_b: np.ndarray | None = None
    rho: float = 0.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive so the minimizer is unique")
        if not self.grad_tolerance > 0:
            raise ValueError("grad_tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")


# Newton polishing assembles the (DC x DC) Hessian; keep it to small problems.
_POLISH_MAX_PARAMS = 1200
_POLISH_MAX_WORK = 2e9


def _objective(data: LabeledDataset, cfg: TrainConfig):
    x, y = data.features, data.labels
    d, c = data.n_features, data.n_classes
    if cfg.noise_b is None:
        def value_and_grad(w):
            value, grad = erm_objective(w.reshape(d, c), x, y, cfg.lam)
            return value, grad.ravel()
        ridge = cfg.lam
    else:
        noise_b = np.asarray(cfg.noise_b, dtype=np.float64)
        if noise_b.shape != (d, c):
            raise ValueError(f"noise_b shape {noise_b.shape} does not match ({d}, {c})")

        def value_and_grad(w):
            value, grad = perturbed_objective(
                w.reshape(d, c), x, y, cfg.lam, noise_b, cfg.rho)
            return value, grad.ravel()
        ridge = (cfg.lam + cfg.rho) / data.n_examples
    return value_and_grad, ridge


def _newton_polish(w, value_and_grad, ridge, data, cfg):
    """Exact damped Newton steps; quadratic convergence near the minimizer."""
    x = data.features
    n, d, c = data.n_examples, data.n_features, data.n_classes
    theta_like = (d, c)
    for _ in range(40):
        grad = value_and_grad(w)[1]
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= cfg.grad_tolerance:
            return w
        logits = x @ w.reshape(theta_like)
        per_example = mc_logistic_hessian(logits)  # (n, c, c)
        hess = np.einsum("nab,ni,nj->iajb", per_example, x, x).reshape(d * c, d * c) / n
        hess[np.diag_indices_from(hess)] += ridge
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        for _ in range(40):
            candidate = w - scale * step
            if np.linalg.norm(value_and_grad(candidate)[1]) < grad_norm:
                break
            scale *= 0.5
        else:
            break
        w = w - scale * step
    return w


def minimize_erm(data: LabeledDataset, cfg: TrainConfig) -> np.ndarray:
    """Minimize the configured objective to ||grad||_F <= grad_tolerance.

    Limited-memory quasi-Newton (Wolfe line search) from theta = 0, followed
    by Newton polishing when the quasi-Newton floor is above the requested
    tolerance on a small problem. Deterministic given (data, cfg); raises
    ConvergenceError, carrying the last gradient norm, if the tolerance is
    not met within the iteration caps.
    """
    value_and_grad, ridge = _objective(data, cfg)
    d, c = data.n_features, data.n_classes
    w0 = np.zeros(d * c)

    result = _scipy_minimize(
        value_and_grad, w0, jac=True, method="L-BFGS-B",
        options={
            "maxiter": cfg.max_iterations,
            "ftol": 0.0,
            "gtol": 0.5 * cfg.grad_tolerance / np.sqrt(d * c),
            "maxls": 100,
        },
    )
    w = result.x
    grad_norm = float(np.linalg.norm(value_and_grad(w)[1]))
    if grad_norm > cfg.grad_tolerance:
        if d * c <= _POLISH_MAX_PARAMS and data.n_examples * (d * c) ** 2 <= _POLISH_MAX_WORK:
            w = _newton_polish(w, value_and_grad, ridge, data, cfg)
            grad_norm = float(np.linalg.norm(value_and_grad(w)[1]))
        if grad_norm > cfg.grad_tolerance:
            raise ConvergenceError(
                f"failed to reach gradient tolerance {cfg.grad_tolerance:g} "
                f"within {cfg.max_iterations} iterations", grad_norm)
    return w.reshape(d, c)


def predict_logits(theta, x) -> np.ndarray:
    """Linear scores theta^T x; accepts one input vector or a batch of rows."""
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != theta.shape[0]:
            raise ValueError(f"input has {x.shape[0]} features, model expects {theta.shape[0]}")
        return theta.T @ x
    if x.ndim == 2:
        if x.shape[1] != theta.shape[0]:
            raise ValueError(f"input has {x.shape[1]} features, model expects {theta.shape[0]}")
        return x @ theta
    raise ValueError("x must be a vector or a matrix of rows")


# ---------------------------------------------------------------------------
# Parameter file format: magic, endianness tag, D, C, then D*C float64 values.
# ---------------------------------------------------------------------------

_PARAMS_MAGIC = b"PLTH"


def save_params(path, theta):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 2:
        raise ValueError("theta must be a (D, C) matrix")
    d, c = theta.shape
    with open(path, "wb") as handle:
        handle.write(_PARAMS_MAGIC)
        handle.write(b"<")
        handle.write(struct.pack("<II", d, c))
        handle.write(np.ascontiguousarray(theta, dtype="<f8").tobytes())


def load_params(path) -> np.ndarray:
    with open(path, "rb") as handle:
        raw = handle.read()
    if raw[:4] != _PARAMS_MAGIC:
        raise ValueError(f"{path}: not a parameter file (bad magic)")
    endian = raw[4:5].decode()
    if endian not in "<>":
        raise ValueError(f"{path}: unknown endianness tag {endian!r}")
    d, c = struct.unpack(f"{endian}II", raw[5:13])
    payload = np.frombuffer(raw, dtype=f"{endian}f8", count=d * c, offset=13)
    if payload.size != d * c:
        raise ValueError(f"{path}: truncated parameter payload")
    return payload.reshape(d, c).astype(np.float64)
