"""Differentially private training and prediction for multi-class linear models."""

from .accounting import (
    BudgetExhaustedError,
    BudgetState,
    CalibrationError,
    DpSgdConfig,
    InfeasibleTargetError,
    PrivacySpec,
    ProblemDims,
    RdpCurve,
    UnsupportedOrderError,
    WrongVariantError,
    analytic_gaussian_alpha,
    calibrate_gaussian_sigma,
    calibration_report,
    dpsgd_epsilon,
    dpsgd_sigma_for_target,
    gaussian_loss_sigma,
    gaussian_mechanism_delta,
    gaussian_model_sigma,
    gaussian_prediction_sigma,
    loss_perturbation_params,
    loss_perturbation_rho,
    minimizer_sensitivity,
    model_sensitivity_beta,
    prediction_sensitivity_beta,
    rdp_curve,
    rdp_subsampled_gaussian,
    subsample_beta,
)
from .bench import (
    SweepConfig,
    SummaryRecord,
    TrialRecord,
    emit_csv,
    emit_summary_csv,
    run_sweep,
    summarize,
)
from .data import (
    IdxFormatError,
    LabeledDataset,
    PcaModel,
    RawDataset,
    UnitBallScaler,
    filter_classes,
    load_csv,
    load_idx,
    normalize_unit_ball,
    one_hot,
    pca_fit,
    pca_fit_transform,
    preprocess_pair,
    subsample_train,
    synth_blob_pair,
    synth_blobs,
    synth_blobs_raw,
    train_test_split,
)
from .losses import (
    HESSIAN_EIG_BOUND,
    LIPSCHITZ_K,
    erm_objective,
    log_softmax,
    mc_logistic_grad,
    mc_logistic_hessian,
    mc_logistic_loss,
    perturbed_objective,
    softmax,
)
from .mechanisms import (
    MECHANISM_KINDS,
    PREDICTION_SIDE,
    TRAINING_SIDE,
    MechanismSpec,
    PrivatePredictor,
    answer_queries,
    build_prediction_sensitivity,
    build_subsample_ensemble,
    ensemble_vote_counts,
    fit_predictor,
    load_predictor,
    predict_prediction_sensitivity,
    predict_subsample_aggregate,
    save_predictor,
    train_dpsgd,
    train_loss_perturbation,
    train_model_sensitivity,
    train_nonprivate,
    vote_distribution,
)
from .noise import RngStream, as_generator, sample_gaussian, sample_radial_exponential
from .trainer import (
    ConvergenceError,
    TrainConfig,
    load_params,
    minimize_erm,
    predict_logits,
    save_params,
)

__version__ = "0.1.0"
