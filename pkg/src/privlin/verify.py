"""Fast invariant suites behind the `verify` CLI subcommand: loss-constant
bounds, calibration tightness, sampler sanity, budget enforcement, and the
empirical minimizer-sensitivity bound."""

from __future__ import annotations

import math

import numpy as np

from .accounting import (
    BudgetExhaustedError,
    BudgetState,
    PrivacySpec,
    ProblemDims,
    analytic_gaussian_alpha,
    gaussian_mechanism_delta,
    minimizer_sensitivity,
)
from .data import LabeledDataset, synth_blobs
from .losses import LIPSCHITZ_K, mc_logistic_grad, mc_logistic_hessian
from .mechanisms import MechanismSpec, build_prediction_sensitivity, predict_prediction_sensitivity
from .noise import RngStream, sample_gaussian, sample_radial_exponential
from .trainer import TrainConfig, minimize_erm


def check_loss_bounds(n_samples: int = 20000, seed: int = 0):
    """Gradient norms stay under sqrt(2), Hessian eigenvalues under 1/2."""
    rng = RngStream(seed).generator()
    worst_grad, worst_eig = 0.0, 0.0
    for c in range(2, 11):
        logits = rng.normal(scale=5.0, size=(n_samples // 9, c))
        labels = np.eye(c)[rng.integers(0, c, logits.shape[0])]
        grad_norms = np.linalg.norm(mc_logistic_grad(logits, labels), axis=1)
        eigs = np.linalg.eigvalsh(mc_logistic_hessian(logits))
        worst_grad = max(worst_grad, float(grad_norms.max()))
        worst_eig = max(worst_eig, float(eigs.max()))
    ok = worst_grad <= LIPSCHITZ_K + 1e-9 and worst_eig <= 0.5 + 1e-9
    return ok, f"max ||grad|| = {worst_grad:.12f}, max eig = {worst_eig:.12f}"


def check_calibration_tightness():
    """Analytic Gaussian sigma meets the exact inequality; 0.99 sigma breaks it."""
    worst_slack = -math.inf
    for eps in (0.1, 1.0, 5.0):
        for delta in (1e-6, 1e-3, 0.3):
            alpha = analytic_gaussian_alpha(eps, delta)
            sigma = alpha / math.sqrt(2.0 * eps)
            at = gaussian_mechanism_delta(1.0, sigma, eps)
            below = gaussian_mechanism_delta(1.0, 0.99 * sigma, eps)
            if at > delta + 1e-9 or below <= delta:
                return False, f"calibration loose at eps={eps}, delta={delta}"
            worst_slack = max(worst_slack, at - delta)
    return True, f"tight on the 3x3 grid (max slack {worst_slack:.2e})"


def check_samplers(seed: int = 1):
    """Radial norms have the Gamma mean n/beta; Gaussian entries have variance sigma^2."""
    rng = RngStream(seed).generator()
    n, beta, draws = 12, 2.0, 4000
    norms = np.array([
        np.linalg.norm(sample_radial_exponential((4, 3), beta, rng)) for _ in range(draws)
    ])
    gamma_mean, gamma_se = n / beta, math.sqrt(n) / beta / math.sqrt(draws)
    ok_radial = abs(norms.mean() - gamma_mean) < 5 * gamma_se

    sigma = 1.7
    entries = np.concatenate([
        sample_gaussian((50, 20), sigma, rng).ravel() for _ in range(20)
    ])
    var = entries.var()
    ok_gauss = abs(var - sigma**2) < 5 * sigma**2 * math.sqrt(2.0 / entries.size)
    ok = ok_radial and ok_gauss
    return ok, f"radial mean {norms.mean():.3f} (target {gamma_mean}), gaussian var {var:.3f}"


def check_budget(seed: int = 2):
    """Exactly B answers, then refusals that leave the counter at B."""
    data = synth_blobs(30, 3, 5, 3.0, RngStream(seed))
    budget = 4
    spec = MechanismSpec(kind="prediction_sensitivity",
                         privacy=PrivacySpec(1.0, 0.0, budget), lam=0.1)
    predictor = build_prediction_sensitivity(data, spec, RngStream(seed, 1))
    for _ in range(budget):
        predict_prediction_sensitivity(predictor, data.features[0])
    refused = 0
    for _ in range(3):
        try:
            predict_prediction_sensitivity(predictor, data.features[0])
        except BudgetExhaustedError:
            refused += 1
    ok = refused == 3 and predictor.budget.used == budget
    return ok, f"{budget} answered, {refused}/3 refused, counter at {predictor.budget.used}"


def check_sensitivity(pairs: int = 10, seed: int = 3):
    """Trained minimizers of neighboring datasets move less than 2K/(N lam)."""
    n, d, c, lam = 100, 10, 3, 0.1
    bound = minimizer_sensitivity(ProblemDims(n, lam, c))
    rng = RngStream(seed).generator()
    base = synth_blobs(n // c + 1, c, d, 2.0, RngStream(seed, 1))
    features, labels = base.features[:n].copy(), base.labels[:n].copy()
    cfg = TrainConfig(lam=lam, grad_tolerance=1e-10)
    worst = 0.0
    for _ in range(pairs):
        theta_a = minimize_erm(LabeledDataset(features, labels), cfg)
        swapped_f, swapped_l = features.copy(), labels.copy()
        row = rng.integers(0, n)
        repl = rng.standard_normal(d)
        swapped_f[row] = repl / max(1.0, np.linalg.norm(repl))
        swapped_l[row] = np.eye(c)[rng.integers(0, c)]
        theta_b = minimize_erm(LabeledDataset(swapped_f, swapped_l), cfg)
        worst = max(worst, float(np.linalg.norm(theta_a - theta_b)))
        features, labels = swapped_f, swapped_l
    ok = worst <= bound * (1 + 1e-3)
    return ok, f"worst movement {worst:.6f} vs bound {bound:.6f}"


SUITES = (
    ("loss-constant bounds", check_loss_bounds),
    ("calibration tightness", check_calibration_tightness),
    ("noise samplers", check_samplers),
    ("budget enforcement", check_budget),
    ("empirical sensitivity", check_sensitivity),
)


def run_verification(print_fn=print) -> bool:
    all_ok = True
    for name, suite in SUITES:
        ok, detail = suite()
        all_ok &= ok
        print_fn(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return all_ok
