# Probabilities are clamped into this interval before any log.
PROB_MIN = 1e-7
PROB_MAX = 1.0 - 1e-7

DICE_SMOOTH = 1e-6
BINARIZE_AT = 0.5

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
GRAD_CLIP_NORM = 5.0

DEFAULT_BETA = 0.1
DEFAULT_TAU = 0.3
DEFAULT_LAMBDA = 0.5
DEFAULT_LR = 1e-4
DEFAULT_WARMUP_DROPOUT = 0.1

GRID_2D = tuple(round(0.005 * i, 3) for i in range(11))
GRID_3D = tuple(round(0.05 * i, 2) for i in range(7))
THRESHOLDS = tuple(round(0.375 + 0.025 * i, 3) for i in range(11))
NOISE_SIGMAS = tuple(round(0.005 * i, 3) for i in range(11))

# (warmup, dpo, refresh) epochs
DESK_SCHEDULE = (20, 40, 10)
FULL_SCHEDULE = (100, 200, 50)

P5_MAXVAL = 65535

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

LOG_CSV_COLUMNS = (
    "epoch",
    "stage",
    "train_loss",
    "val_loss",
    "val_dice",
    "val_asd",
    "pairs_found",
    "pairs_skipped",
    "reference_version",
)
