# Constants shared across the sdikit modules

# -----------------------------------------------------------------------------
# ---- Hashing ----
# -----------------------------------------------------------------------------

# Mersenne prime 2^61 - 1, the field every hash polynomial is evaluated in
MERSENNE_PRIME = (1 << 61) - 1
MERSENNE_EXPONENT = 61

# polynomial degrees: degree 1 -> 2-wise independent, degree 3 -> 4-wise independent
BUCKET_HASH_DEGREE = 1
SIGN_HASH_DEGREE = 3

# parameter kinds in a SketchPlan
VECTOR_KIND = "vector"
MATRIX_KIND = "matrix"
TENSOR_KINDS = (VECTOR_KIND, MATRIX_KIND)

# -----------------------------------------------------------------------------
# ---- File formats ----
# -----------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SDI1"
CHECKPOINT_VERSION = 1

FEATURE_CACHE_MAGIC = b"SDIF"

# bumped whenever a CLI report changes shape
REPORT_SCHEMA_VERSION = 1

# -----------------------------------------------------------------------------
# ---- Parity vocabulary ----
# -----------------------------------------------------------------------------

PARITY_VOCAB_SIZE = 6
ZERO_TOKEN = 0
ONE_TOKEN = 1
EQUALS_TOKEN = 2
PAD_TOKEN = 3

# -----------------------------------------------------------------------------
# ---- Model / run presets ----
# -----------------------------------------------------------------------------

# "micro" is sized for CPU runs in minutes, "full" mirrors the published parity setup
# (no accuracy guarantees are attached to "full")
PRESETS = {
    "micro": {
        "model": {
            "vocab_size": PARITY_VOCAB_SIZE,
            "d_model": 64,
            "n_heads": 4,
            "seq_len": 42,
            "loop_horizon": 14,
            "injection": "additive",
            "nonlinearity": "gelu",
            "causal": True,
        },
        "curriculum": [(400, 4), (400, 6), (600, 8), (800, 10), (1200, 12)],
        "batch_size": 16,
        "learning_rate": 0.05,
        "checkpoint_every": 400,
        "ood_length": 20,
        "probe_length": 20,
    },
    "full": {
        "model": {
            "vocab_size": PARITY_VOCAB_SIZE,
            "d_model": 256,
            "n_heads": 64,
            "seq_len": 42,
            "loop_horizon": 42,
            "injection": "additive",
            "nonlinearity": "gelu",
            "causal": True,
        },
        "curriculum": [(2000, 5), (2000, 9), (2000, 13), (2000, 17), (4000, 21)],
        "batch_size": 32,
        "learning_rate": 0.05,
        "checkpoint_every": 2000,
        "ood_length": 40,
        "probe_length": 40,
    },
}

# -----------------------------------------------------------------------------
# ---- Numerical tolerances and budgets ----
# -----------------------------------------------------------------------------

# relative tolerance on sum_t SDI_t == TracIn
CONSERVATION_RTOL = 1e-9

# exact (materialised) features refuse models with more body parameters than this
EXACT_PARAMETER_BUDGET = 10 ** 6

# layer norm epsilon
LAYER_NORM_EPS = 1e-5

# power iteration
PCA_TOLERANCE = 1e-10
PCA_MAX_ITERATIONS = 10 ** 4

# k-means
KMEANS_RESTARTS = 20
KMEANS_MAX_ITERATIONS = 300

# lags reported in the cycle analysis
CYCLE_MAX_LAG = 8

# environment variable capping featurizer threads
THREADS_ENV_VAR = "SDIKIT_THREADS"
