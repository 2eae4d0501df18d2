from enum import Enum

# pixels are scaled to [0, 1], which bounds the bottom-level prediction
PIX_MAX = 1.0

# training regimen
SEQUENCE_LENGTH = 10
BATCH_SIZE = 4
SEQUENCES_PER_EPOCH = 500
VALIDATION_SEQUENCES = 100
LEARNING_RATE = 1e-3
FINAL_LEARNING_RATE = 1e-4
FINAL_EPOCHS_FRACTION = 0.1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# decoder biases start positive so every ReLU output is live at initialization
DECODER_BIAS = 0.1

# evaluation: 10 observed frames, then score the 11th; rollouts run 15 steps ahead
CONTEXT_FRAMES = 10
ROLLOUT_HORIZON = 15

# finite-difference gradient checks
GRADIENT_EPSILON = 1e-5
OP_TOLERANCE = 1e-4
NETWORK_TOLERANCE = 1e-3
# gradients smaller than this are compared absolutely
GRADIENT_FLOOR = 1e-5

# SSIM with the canonical 11x11 Gaussian window
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# parallelism cap for independent evaluation windows
THREADS_ENV_VAR = "PRECODER_THREADS"


class ExitCode(int, Enum):
    SUCCESS = 0
    CHECK_FAILED = 1
    VALIDATION_ERROR = 2
    NUMERIC_ERROR = 3
    IO_ERROR = 4
