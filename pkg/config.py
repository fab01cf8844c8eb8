"""
Configuration file for the XQ hierarchical quantization toolkit
"""

# Residual quantization / quantizer dropout
DEFAULT_DROPOUT_RATIO = 0.1
DEFAULT_DROPOUT_START = 3

# Loss terms
DEFAULT_COMMITMENT_BETA = 0.25
DEFAULT_ENTROPY_TEMPERATURE = 1.0

# Multi-scale blending (gamma * conv(z) + (1 - gamma) * z)
DEFAULT_BLEND_GAMMA = 0.5
DEFAULT_BLEND_KERNEL_SIZE = 3

# Scale schedules
VAR_SCHEDULE = (1, 2, 3, 4, 5, 6, 8, 10, 13, 16)
SCHEDULE_PRESETS = {
    'var': VAR_SCHEDULE,
}

# LFQ / BSQ codes must fit one 32-bit word
MAX_BINARY_DIM = 32

# Largest codebook for which a dense per-code histogram is materialized
DENSE_HISTOGRAM_LIMIT = 1 << 24

# Image patchification
DEFAULT_PATCH_SIZE = 8
IMAGE_CHANNELS = 3
PIXEL_MAX = 255.0

# Threads used to load a directory of input images
LOAD_WORKERS = 4

# Codebook learning
EMA_EPSILON = 1e-5
DEFAULT_EMA_DECAY = 0.99
KMEANS_CONFIG = {
    'iters': 20,
    'refine_rounds': 2,
    'holdout_fraction': 0.1,
    'chunk_elements': 1 << 22,  # max floats in one distance block
}

# Composite loss weights; only recon/vq/aux have computable terms
LOSS_WEIGHT_DEFAULTS = {
    'recon': 1.0,
    'vq': 1.0,
    'aux': 0.0,
    'perceptual': 1.0,
    'adversarial': 0.5,
    'clip': 0.1,
}
IGNORED_LOSS_TERMS = ('perceptual', 'adversarial', 'clip')

# CLI
EXIT_CODES = {
    'ok': 0,
    'usage': 2,
    'data': 3,
    'io': 4,
}
LOG_ENV_VAR = 'XQ_LOG'
LOG_LEVELS = {
    'error': 'ERROR',
    'info': 'INFO',
    'debug': 'DEBUG',
}
DEFAULT_LOG_LEVEL = 'info'
