import logging
import os
from pathlib import Path

from dotenv import load_dotenv


# PATH CONFIG


# Base project directory (…/retrieval_selective)
BASE_DIR = Path(__file__).resolve().parent.parent

# Pick up RG_* overrides from a local .env before anything reads them
load_dotenv(BASE_DIR / ".env")

# Data folders
DATA_DIR = BASE_DIR / "data"
SYNTHETIC_DATA_DIR = DATA_DIR / "synthetic"

# Cached embedding indexes (joblib)
MODELS_DIR = BASE_DIR / "models"
EMBEDDING_INDEX_FILE = MODELS_DIR / "train_embedding_index.joblib"

# Default output folder for CSV / SVG / manifest files
OUTPUT_DIR = Path(os.environ.get("RG_OUTPUT_DIR", BASE_DIR / "outputs"))


# FILE FORMAT CONSTANTS


DATASET_FORMAT = "rg-dataset"
DATASET_VERSION = 1
PREDICTION_MAGIC = b"RGPRED01"

# Manifest "tool version"
TOOL_NAME = "retrieval-selective"
TOOL_VERSION = "1.0.0"


# DOMAIN CONSTANTS – RETRIEVAL + SELECTIVE PREDICTION


# Morgan fingerprint length used by the benchmark
DEFAULT_FINGERPRINT_BITS = 4096

# Largest candidate set accepted at ingestion (benchmark cap)
DEFAULT_CANDIDATE_CAP = 256

# Softmax temperature over candidate similarities (training value)
DEFAULT_TEMPERATURE = 0.003

# Hit@K cut-offs evaluated by default
DEFAULT_KS = (1, 5, 20)

# SGR confidence parameter and default target risks
DEFAULT_DELTA = 0.001
DEFAULT_TARGET_RISKS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

# Distance-based scores
DEFAULT_KNN_NEIGHBORS = 100
MAHALANOBIS_RIDGE = 1e-6

# Fraction of instances used for SGR calibration
CALIBRATION_FRACTION = 0.5

# Discrete similarity losses binarize the mean prediction above this value
BINARIZE_THRESHOLD = 0.5

# Tolerances
PROBABILITY_SUM_TOL = 1e-9
CLOPPER_PEARSON_XTOL = 1e-12

RANDOM_STATE = 42  # For reproducible splits and synthetic data


# RUNTIME SETTINGS (ENVIRONMENT)


def default_threads() -> int:
    """
    Worker count used when --threads is not given (RG_THREADS, fallback 1).
    """
    raw = os.environ.get("RG_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        return 1
    return max(1, value)


def default_log_level() -> str:
    return os.environ.get("RG_LOG_LEVEL", "INFO").upper()


# LOGGING


class _BracketFormatter(logging.Formatter):
    """Console format: ``[INFO] message`` / ``[WARN] message``."""

    _LABELS = {
        logging.DEBUG: "DEBUG",
        logging.INFO: "INFO",
        logging.WARNING: "WARN",
        logging.ERROR: "ERROR",
        logging.CRITICAL: "ERROR",
    }

    def format(self, record: logging.LogRecord) -> str:
        label = self._LABELS.get(record.levelno, record.levelname)
        return f"[{label}] {record.getMessage()}"


def setup_logging(level: str = None) -> None:
    """
    Install one stream handler on the package logger.
    Safe to call more than once (the handler is replaced, not stacked).
    """
    logger = logging.getLogger("src")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    handler = logging.StreamHandler()
    handler.setFormatter(_BracketFormatter())
    logger.addHandler(handler)
    logger.setLevel((level or default_log_level()).upper())
    logger.propagate = False


def ensure_directories_exist(*paths: Path) -> None:
    """
    Create output directories if they don't exist yet (default: OUTPUT_DIR).
    Call this once before writing any outputs.
    """
    for path in paths or (OUTPUT_DIR,):
        Path(path).mkdir(parents=True, exist_ok=True)


if __name__ == "__main__":
    # Quick sanity check when running this file directly
    print("Base directory:", BASE_DIR)
    print("Output directory:", OUTPUT_DIR)
    print("Default threads:", default_threads())
