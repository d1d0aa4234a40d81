import os
import logging
from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)


def _env(name: str, default: str) -> str:
    return os.getenv(f"SSF_{name}", default)


def _env_flag(name: str, default: bool = False) -> bool:
    return _env(name, "1" if default else "0").strip().lower() in ("1", "true", "yes", "on")


class Config:
    """Toolkit configuration"""

    # File and directory paths
    LOGS_DIR = _env("LOGS_DIR", "logs")
    DATA_DIR = _env("DATA_DIR", "data")
    RUNS_DIR = _env("RUNS_DIR", "runs")

    # Logging settings
    LOG_LEVEL = _env("LOG_LEVEL", "INFO").upper()
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    LOG_TO_FILE = _env_flag("LOG_TO_FILE")

    # Numerics
    DEBUG_NUMERICS = _env_flag("DEBUG_NUMERICS")
    LN_EPS = float(_env("LN_EPS", "1e-6"))
    INIT_STD = float(_env("INIT_STD", "0.02"))
    SSF_INIT_STD = float(_env("SSF_INIT_STD", "0.02"))

    # Optimizer
    ADAM_BETA1 = float(_env("ADAM_BETA1", "0.9"))
    ADAM_BETA2 = float(_env("ADAM_BETA2", "0.999"))
    ADAM_EPS = float(_env("ADAM_EPS", "1e-8"))

    # Verification tolerances
    FOLD_ATOL_F32 = float(_env("FOLD_ATOL_F32", "1e-5"))
    FOLD_ATOL_F64 = float(_env("FOLD_ATOL_F64", "1e-10"))
    GRAD_RTOL_F32 = float(_env("GRAD_RTOL_F32", "1e-4"))
    GRAD_RTOL_F64 = float(_env("GRAD_RTOL_F64", "1e-7"))

    # Metrics server (0 = disabled)
    METRICS_PORT = int(_env("METRICS_PORT", "0"))

    @classmethod
    def fold_tolerance(cls, dtype: str) -> float:
        return cls.FOLD_ATOL_F64 if dtype == "f64" else cls.FOLD_ATOL_F32

    @classmethod
    def grad_tolerance(cls, dtype: str) -> float:
        return cls.GRAD_RTOL_F64 if dtype == "f64" else cls.GRAD_RTOL_F32

    @classmethod
    def validate_config(cls) -> bool:
        """Validate configuration"""
        if cls.LOG_LEVEL not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            logger.error(f"Unknown log level: {cls.LOG_LEVEL}")
            return False

        for name in ("LN_EPS", "INIT_STD", "SSF_INIT_STD", "ADAM_EPS"):
            if getattr(cls, name) <= 0:
                logger.error(f"{name} must be positive, got {getattr(cls, name)}")
                return False

        if not (0.0 <= cls.ADAM_BETA1 < 1.0 and 0.0 <= cls.ADAM_BETA2 < 1.0):
            logger.error("Adam betas must lie in [0, 1)")
            return False

        # Create required directories
        if cls.LOG_TO_FILE:
            os.makedirs(cls.LOGS_DIR, exist_ok=True)

        return True
