"""The five private prediction pipelines, each yielding a budget-guarded predictor.

Training-side mechanisms (model sensitivity, loss perturbation, DP-SGD)
release privatized parameters and answer unlimited queries by
post-processing. Prediction-side mechanisms (prediction sensitivity,
subsample-and-aggregate) keep non-private state and spend one unit of the
inference budget per answered query.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .accounting import (
    BudgetState,
    DpSgdConfig,
    PrivacySpec,
    ProblemDims,
    WrongVariantError,
    dpsgd_sigma_for_target,
    gaussian_loss_sigma,
    gaussian_model_sigma,
    gaussian_prediction_sigma,
    loss_perturbation_params,
    loss_perturbation_rho,
    model_sensitivity_beta,
    prediction_sensitivity_beta,
    subsample_beta,
)
from .data import LabeledDataset
from .losses import softmax
from .noise import as_generator, sample_gaussian, sample_radial_exponential
from .trainer import TrainConfig, minimize_erm, predict_logits

MECHANISM_KINDS = (
    "model_sensitivity",
    "loss_perturbation",
    "dpsgd",
    "prediction_sensitivity",
    "subsample_aggregate",
)
TRAINING_SIDE = ("model_sensitivity", "loss_perturbation", "dpsgd", "nonprivate")
PREDICTION_SIDE = ("prediction_sensitivity", "subsample_aggregate")


@dataclass
class MechanismSpec:
    """Which pipeline to run and every knob it needs."""

    kind: str
    privacy: PrivacySpec
    lam: float = 0.01
    n_models: int = 256
    dpsgd: DpSgdConfig | None = None
    grad_tolerance: float = 1e-8
    max_iterations: int = 500

    def __post_init__(self):
        if self.kind not in MECHANISM_KINDS and self.kind != "nonprivate":
            raise ValueError(f"unknown mechanism kind: {self.kind!r}")
        if self.kind == "dpsgd":
            if self.privacy.delta == 0.0:
                raise WrongVariantError("dpsgd does not support delta = 0")
            if self.dpsgd is None:
                raise ValueError("dpsgd requires a DpSgdConfig")
            if self.lam < 0:
                raise ValueError("lam must be nonnegative")
        elif not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.n_models < 1:
            raise ValueError("n_models must be at least 1")

    def dims(self, data: LabeledDataset) -> ProblemDims:
        return ProblemDims(n_train=data.n_examples, lam=self.lam,
                           n_classes=data.n_classes)

    def train_config(self, **overrides) -> TrainConfig:
        kwargs = dict(lam=self.lam, max_iterations=self.max_iterations,
                      grad_tolerance=self.grad_tolerance)
        kwargs.update(overrides)
        return TrainConfig(**kwargs)


@dataclass
class PrivatePredictor:
    """A prediction engine bound to one mechanism.

    budget is None for model-releasing mechanisms (post-processing answers
    unlimited queries); prediction-side mechanisms consume one unit per query
    and refuse afterwards. rng drives the fresh per-query noise.
    """

    kind: str
    privacy: PrivacySpec
    theta: np.ndarray | None = None
    ensemble: np.ndarray | None = None
    noise_family: str = "none"
    noise_scale: float = 0.0
    vote_beta: float = 0.0
    budget: BudgetState | None = None
    rng: np.random.Generator | None = field(default=None, repr=False)

    @property
    def remaining_budget(self):
        return None if self.budget is None else self.budget.remaining

    def predict(self, x):
        """Dispatch one query: logits for logit-valued kinds, an int label
        for subsample-and-aggregate."""
        if self.kind == "prediction_sensitivity":
            return predict_prediction_sensitivity(self, x)
        if self.kind == "subsample_aggregate":
            return predict_subsample_aggregate(self, x)
        return predict_logits(self.theta, x)


def _check_query(x, n_features: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (n_features,):
        raise ValueError(f"query must be a length-{n_features} vector, got shape {x.shape}")
    if np.linalg.norm(x) > 1.0 + 1e-9:
        raise ValueError("query must lie in the unit L2 ball")
    return x


# ---------------------------------------------------------------------------
# Training-side mechanisms
# ---------------------------------------------------------------------------

def train_nonprivate(data: LabeledDataset, spec: MechanismSpec) -> PrivatePredictor:
    """Plain regularized training; the no-noise baseline for sweeps."""
    theta = minimize_erm(data, spec.train_config())
    return PrivatePredictor(kind="nonprivate", privacy=spec.privacy, theta=theta)


def train_model_sensitivity(data: LabeledDataset, spec: MechanismSpec, rng,
                            unsafe_disable_noise: bool = False) -> PrivatePredictor:
    """Add calibrated noise to the regularized minimizer; release the result."""
    rng = as_generator(rng)
    dims = spec.dims(data)
    theta = minimize_erm(data, spec.train_config())
    shape = (data.n_features, data.n_classes)
    if not unsafe_disable_noise:
        if spec.privacy.delta == 0.0:
            beta = model_sensitivity_beta(dims, spec.privacy)
            theta = theta + sample_radial_exponential(shape, beta, rng)
        else:
            sigma = gaussian_model_sigma(dims, spec.privacy)
            theta = theta + sample_gaussian(shape, sigma, rng)
    return PrivatePredictor(kind="model_sensitivity", privacy=spec.privacy, theta=theta)


def train_loss_perturbation(data: LabeledDataset, spec: MechanismSpec, rng,
                            unsafe_disable_noise: bool = False) -> PrivatePredictor:
    """Minimize the objective with a random linear term plus extra ridge."""
    rng = as_generator(rng)
    dims = spec.dims(data)
    shape = (data.n_features, data.n_classes)
    if unsafe_disable_noise:
        noise_b, rho = np.zeros(shape), 0.0
    elif spec.privacy.delta == 0.0:
        beta, rho = loss_perturbation_params(dims, spec.privacy)
        noise_b = sample_radial_exponential(shape, beta, rng)
    else:
        sigma = gaussian_loss_sigma(dims, spec.privacy)
        rho = loss_perturbation_rho(dims, spec.privacy)
        noise_b = sample_gaussian(shape, sigma, rng)
    theta = minimize_erm(data, spec.train_config(noise_b=noise_b, rho=rho))
    return PrivatePredictor(kind="loss_perturbation", privacy=spec.privacy, theta=theta)


def train_dpsgd(data: LabeledDataset, spec: MechanismSpec, rng,
                unsafe_disable_noise: bool = False) -> PrivatePredictor:
    """Private SGD: per-example clipping, summed batch gradient, Gaussian noise.

    Each step draws a uniform without-replacement batch, clips every
    per-example gradient to norm at most clip, adds N(0, (sigma * clip)^2)
    noise to the sum, divides by the batch size, and applies the step. The
    per-example gradient of the singleton objective is x (p - y)^T + lam * theta.
    """
    if spec.privacy.delta == 0.0:
        raise WrongVariantError("dpsgd does not support delta = 0")
    cfg = spec.dpsgd
    if cfg is None:
        raise ValueError("dpsgd requires a DpSgdConfig")
    n = data.n_examples
    if cfg.batch_size > n:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    if abs(cfg.sample_rate - cfg.batch_size / n) > 1e-12:
        raise ValueError(
            f"sample_rate {cfg.sample_rate} must equal batch_size / N = {cfg.batch_size / n}")
    rng = as_generator(rng)
    sigma = 0.0 if unsafe_disable_noise else dpsgd_sigma_for_target(spec.privacy, cfg)

    x, y = data.features, data.labels
    d, c = data.n_features, data.n_classes
    lam = spec.lam
    theta = np.zeros((d, c))
    x_sq = np.einsum("nd,nd->n", x, x)

    for _ in range(cfg.n_steps):
        idx = rng.choice(n, size=cfg.batch_size, replace=False)
        xb, yb = x[idx], y[idx]
        logits = xb @ theta
        residual = softmax(logits) - yb
        # ||x r^T + lam theta||_F^2 without materializing per-example matrices
        sq_norms = x_sq[idx] * np.einsum("nc,nc->n", residual, residual)
        if lam > 0.0:
            sq_norms = (sq_norms
                        + 2.0 * lam * np.einsum("nc,nc->n", logits, residual)
                        + lam * lam * float(np.sum(theta * theta)))
        scales = 1.0 / np.maximum(1.0, np.sqrt(sq_norms) / cfg.clip)
        summed = xb.T @ (scales[:, None] * residual)
        if lam > 0.0:
            summed += lam * float(scales.sum()) * theta
        if not unsafe_disable_noise:
            summed = summed + sigma * cfg.clip * rng.standard_normal((d, c))
        theta = theta - cfg.learning_rate * (summed / cfg.batch_size)

    return PrivatePredictor(kind="dpsgd", privacy=spec.privacy, theta=theta)


# ---------------------------------------------------------------------------
# Prediction-side mechanisms
# ---------------------------------------------------------------------------

def build_prediction_sensitivity(data: LabeledDataset, spec: MechanismSpec, rng,
                                 unsafe_disable_noise: bool = False) -> PrivatePredictor:
    """Non-private parameters plus a per-query noise scale and a budget gate."""
    rng = as_generator(rng)
    dims = spec.dims(data)
    theta = minimize_erm(data, spec.train_config())
    if unsafe_disable_noise:
        family, scale = "none", 0.0
    elif spec.privacy.delta == 0.0:
        family, scale = "radial_exponential", prediction_sensitivity_beta(dims, spec.privacy)
    else:
        family, scale = "gaussian", gaussian_prediction_sigma(dims, spec.privacy)
    return PrivatePredictor(
        kind="prediction_sensitivity", privacy=spec.privacy, theta=theta,
        noise_family=family, noise_scale=scale,
        budget=BudgetState(spec.privacy.budget), rng=rng)


def predict_prediction_sensitivity(predictor: PrivatePredictor, x) -> np.ndarray:
    """Answer one query with fresh noisy logits, consuming one budget unit.

    Raw noisy logits are returned (not probabilities); consumers may
    post-process freely. A refusal raises BudgetExhaustedError before any
    computation touches the model.
    """
    x = _check_query(x, predictor.theta.shape[0])
    predictor.budget.consume()
    logits = predict_logits(predictor.theta, x)
    c = logits.shape[0]
    if predictor.noise_family == "radial_exponential":
        logits = logits + sample_radial_exponential((c, 1), predictor.noise_scale,
                                                    predictor.rng).ravel()
    elif predictor.noise_family == "gaussian":
        logits = logits + sample_gaussian((c, 1), predictor.noise_scale,
                                          predictor.rng).ravel()
    return logits


def partition_indices(n: int, t: int, rng) -> np.ndarray:
    """Seeded shuffle, then t disjoint index blocks of size floor(n / t).

    The n mod t leftover indices are discarded. Returns a (t, floor(n/t))
    array of row indices.
    """
    if t > n:
        raise ValueError(f"n_models {t} exceeds dataset size {n}")
    if t < 1:
        raise ValueError("n_models must be at least 1")
    rng = as_generator(rng)
    subset_size = n // t
    perm = rng.permutation(n)
    return perm[: t * subset_size].reshape(t, subset_size)


def build_subsample_ensemble(data: LabeledDataset, spec: MechanismSpec,
                             rng) -> PrivatePredictor:
    """Partition, train one sub-model per part, and gate the noisy vote.

    A seeded shuffle precedes the split into n_models disjoint subsets of
    size floor(N / n_models); leftover examples are discarded. Changing one
    training example can change at most one sub-model.
    """
    rng = as_generator(rng)
    parts = partition_indices(data.n_examples, spec.n_models, rng)
    cfg = spec.train_config()
    thetas = np.stack([
        minimize_erm(LabeledDataset(features=data.features[part],
                                    labels=data.labels[part]), cfg)
        for part in parts
    ])
    return PrivatePredictor(
        kind="subsample_aggregate", privacy=spec.privacy, ensemble=thetas,
        vote_beta=subsample_beta(spec.privacy),
        budget=BudgetState(spec.privacy.budget), rng=rng)


def ensemble_vote_counts(ensemble: np.ndarray, x) -> np.ndarray:
    """Votes per class: each sub-model casts its argmax (ties to the lowest index).

    Accepts one query vector or a batch of rows; returns (C,) or (n, C)
    integer counts summing to the ensemble size.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = x[None, :] if single else x
    t, _, c = ensemble.shape
    logits = np.einsum("nd,tdc->tnc", rows, ensemble)
    winners = logits.argmax(axis=2)  # (t, n)
    offsets = winners + c * np.arange(rows.shape[0])[None, :]
    counts = np.bincount(offsets.ravel(), minlength=rows.shape[0] * c)
    counts = counts.reshape(rows.shape[0], c)
    return counts[0] if single else counts


def vote_distribution(counts, beta: float) -> np.ndarray:
    """Exponential-mechanism label distribution: proportional to exp(beta * counts)."""
    return softmax(beta * np.asarray(counts, dtype=np.float64))


def predict_subsample_aggregate(predictor: PrivatePredictor, x) -> int:
    """Sample one label from the exponentiated vote histogram; spend one unit."""
    x = _check_query(x, predictor.ensemble.shape[1])
    predictor.budget.consume()
    counts = ensemble_vote_counts(predictor.ensemble, x)
    probs = vote_distribution(counts, predictor.vote_beta)
    return int(predictor.rng.choice(counts.shape[0], p=probs))


# ---------------------------------------------------------------------------
# Dispatch and batch scoring
# ---------------------------------------------------------------------------

def fit_predictor(data: LabeledDataset, spec: MechanismSpec, rng,
                  unsafe_disable_noise: bool = False) -> PrivatePredictor:
    """Train/build the predictor for spec.kind."""
    if spec.kind == "nonprivate":
        return train_nonprivate(data, spec)
    if spec.kind == "model_sensitivity":
        return train_model_sensitivity(data, spec, rng, unsafe_disable_noise)
    if spec.kind == "loss_perturbation":
        return train_loss_perturbation(data, spec, rng, unsafe_disable_noise)
    if spec.kind == "dpsgd":
        return train_dpsgd(data, spec, rng, unsafe_disable_noise)
    if spec.kind == "prediction_sensitivity":
        return build_prediction_sensitivity(data, spec, rng, unsafe_disable_noise)
    if spec.kind == "subsample_aggregate":
        return build_subsample_ensemble(data, spec, rng)
    raise ValueError(f"unknown mechanism kind: {spec.kind!r}")


def answer_queries(predictor: PrivatePredictor, queries) -> np.ndarray:
    """Predicted labels for a batch of query rows.

    Prediction-side predictors answer query by query (consuming budget and
    drawing fresh noise); training-side predictors score the whole batch by
    argmax of their frozen logits.
    """
    queries = np.asarray(queries, dtype=np.float64)
    if predictor.kind == "prediction_sensitivity":
        return np.array([
            int(np.argmax(predict_prediction_sensitivity(predictor, row)))
            for row in queries
        ])
    if predictor.kind == "subsample_aggregate":
        return np.array([predict_subsample_aggregate(predictor, row) for row in queries])
    return predict_logits(predictor.theta, queries).argmax(axis=1)


# ---------------------------------------------------------------------------
# Serialization (kind, parameters, remaining budget, privacy spec, rng state)
# ---------------------------------------------------------------------------

def save_predictor(path, predictor: PrivatePredictor):
    payload = {
        "kind": np.array(predictor.kind),
        "epsilon": np.array(predictor.privacy.epsilon),
        "delta": np.array(predictor.privacy.delta),
        "spec_budget": np.array(predictor.privacy.budget),
        "noise_family": np.array(predictor.noise_family),
        "noise_scale": np.array(predictor.noise_scale),
        "vote_beta": np.array(predictor.vote_beta),
    }
    if predictor.theta is not None:
        payload["theta"] = predictor.theta
    if predictor.ensemble is not None:
        payload["ensemble"] = predictor.ensemble
    if predictor.budget is not None:
        payload["budget_total"] = np.array(predictor.budget.budget)
        payload["budget_used"] = np.array(predictor.budget.used)
    if predictor.rng is not None:
        payload["rng_state"] = np.array(json.dumps(predictor.rng.bit_generator.state))
    np.savez(path, **payload)


def load_predictor(path) -> PrivatePredictor:
    with np.load(path, allow_pickle=False) as archive:
        privacy = PrivacySpec(epsilon=float(archive["epsilon"]),
                              delta=float(archive["delta"]),
                              budget=int(archive["spec_budget"]))
        budget = None
        if "budget_total" in archive:
            budget = BudgetState(int(archive["budget_total"]), int(archive["budget_used"]))
        rng = None
        if "rng_state" in archive:
            rng = np.random.default_rng()
            rng.bit_generator.state = json.loads(str(archive["rng_state"]))
        return PrivatePredictor(
            kind=str(archive["kind"]),
            privacy=privacy,
            theta=archive["theta"] if "theta" in archive else None,
            ensemble=archive["ensemble"] if "ensemble" in archive else None,
            noise_family=str(archive["noise_family"]),
            noise_scale=float(archive["noise_scale"]),
            vote_beta=float(archive["vote_beta"]),
            budget=budget,
            rng=rng,
        )
