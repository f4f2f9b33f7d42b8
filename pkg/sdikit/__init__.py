# __init__.py

version = "0.3.0"
__version__ = version

from ._errors import SketchConfigError, PlanMismatchError, ModelInputError, FormatError, \
    ConservationError, TrainingDivergedError

from ._constants import MERSENNE_PRIME, BUCKET_HASH_DEGREE, SIGN_HASH_DEGREE, PRESETS, \
    CONSERVATION_RTOL, EXACT_PARAMETER_BUDGET, REPORT_SCHEMA_VERSION, THREADS_ENV_VAR

from ._sketch_core import HashFamily, TensorMap, SketchPlan, SketchedVector, \
    count_sketch, tensor_sketch_pair, tensor_sketch_outer_sum, tensor_sketch_matrix, \
    sketch_tensor, global_sketch

from ._variance_oracle import VarianceReport, bound_factor, prior_bound_factor, prior_bound_ratio, \
    exact_ts_variance, exact_cs_variance, exact_plan_variance, witness_matrices, tightness_gap, \
    sdi_mse_bound, monte_carlo_cs_dot, monte_carlo_ts_dot, monte_carlo_plan_dot, monte_carlo_report

from ._looped_model import ModelConfig, StepTrace, StepFactors, Batch, Checkpoint, \
    preset_config, parameter_shapes, body_shapes, init_parameters, body_parameters, \
    forward, run_loop, backward_with_hooks, materialize_step_gradients, sum_step_gradients, \
    total_gradient, body_gradient, logit_margins, evaluate_accuracy, train_sgd

from ._sdi_engine import FeatureBatch, InfluenceTrajectory, StepMatrix, SDIResult, SDIFeaturizer, \
    featurize_batch, exact_features, tracin, self_influence, sdi_test_side, sdi_train_side, \
    sdi_matrix, sdi_decomposition, fidelity_report, summed_profile, compute_sdi_from_checkpoints

from ._parity_task import ParityExample, Curriculum, gen_parity, alternating_probe, alternating_probe_set, \
    curriculum, per_length_accuracy, tercile_subsample, read_jsonl, write_jsonl, run_parity_training

from ._cycle_analysis import CycleAnalyzer, CycleReport, StateProxy, power_iteration, pca_power, kmeans, \
    transition_matrix, lag_cosines, autocorrelation, analyze_states

from ._energy import sdi_energy, late_mass, center_of_mass, query_summaries, binned_energy

from ._serialization import save_checkpoint, load_checkpoint, write_manifest, read_manifest, iter_checkpoints, \
    write_feature_cache, read_feature_cache

__all__ = [
    # Errors
    "SketchConfigError",
    "PlanMismatchError",
    "ModelInputError",
    "FormatError",
    "ConservationError",
    "TrainingDivergedError",
    # Constants
    "MERSENNE_PRIME",
    "BUCKET_HASH_DEGREE",
    "SIGN_HASH_DEGREE",
    "PRESETS",
    "CONSERVATION_RTOL",
    "EXACT_PARAMETER_BUDGET",
    "REPORT_SCHEMA_VERSION",
    "THREADS_ENV_VAR",
    # Sketching
    "HashFamily",
    "TensorMap",
    "SketchPlan",
    "SketchedVector",
    "count_sketch",
    "tensor_sketch_pair",
    "tensor_sketch_outer_sum",
    "tensor_sketch_matrix",
    "sketch_tensor",
    "global_sketch",
    # Variance
    "VarianceReport",
    "bound_factor",
    "prior_bound_factor",
    "prior_bound_ratio",
    "exact_ts_variance",
    "exact_cs_variance",
    "exact_plan_variance",
    "witness_matrices",
    "tightness_gap",
    "sdi_mse_bound",
    "monte_carlo_cs_dot",
    "monte_carlo_ts_dot",
    "monte_carlo_plan_dot",
    "monte_carlo_report",
    # Looped model
    "ModelConfig",
    "StepTrace",
    "StepFactors",
    "Batch",
    "Checkpoint",
    "preset_config",
    "parameter_shapes",
    "body_shapes",
    "init_parameters",
    "body_parameters",
    "forward",
    "run_loop",
    "backward_with_hooks",
    "materialize_step_gradients",
    "sum_step_gradients",
    "total_gradient",
    "body_gradient",
    "logit_margins",
    "evaluate_accuracy",
    "train_sgd",
    # Influence
    "FeatureBatch",
    "InfluenceTrajectory",
    "StepMatrix",
    "SDIResult",
    "SDIFeaturizer",
    "featurize_batch",
    "exact_features",
    "tracin",
    "self_influence",
    "sdi_test_side",
    "sdi_train_side",
    "sdi_matrix",
    "sdi_decomposition",
    "fidelity_report",
    "summed_profile",
    "compute_sdi_from_checkpoints",
    # Parity task
    "ParityExample",
    "Curriculum",
    "gen_parity",
    "alternating_probe",
    "alternating_probe_set",
    "curriculum",
    "per_length_accuracy",
    "tercile_subsample",
    "read_jsonl",
    "write_jsonl",
    "run_parity_training",
    # Analysis
    "CycleAnalyzer",
    "CycleReport",
    "StateProxy",
    "power_iteration",
    "pca_power",
    "kmeans",
    "transition_matrix",
    "lag_cosines",
    "autocorrelation",
    "analyze_states",
    "sdi_energy",
    "late_mass",
    "center_of_mass",
    "query_summaries",
    "binned_energy",
    # Files
    "save_checkpoint",
    "load_checkpoint",
    "write_manifest",
    "read_manifest",
    "iter_checkpoints",
    "write_feature_cache",
    "read_feature_cache",
    ]
