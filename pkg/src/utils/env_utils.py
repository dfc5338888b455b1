import os
import platform
from typing import Any, Dict, Optional

import torch

from src.config.settings import settings
from src.config.logging_config import get_logger

logger = get_logger(__name__)


def get_environment_info() -> Dict[str, Any]:
    """Get information about the current environment"""
    return {
        "environment": settings.environment,
        "is_development": settings.is_development,
        "is_production": settings.is_production,
        "is_testing": settings.is_testing,
        "debug_mode": settings.debug,
    }


def get_api_config() -> Dict[str, Any]:
    """Get API configuration from environment variables"""
    return {
        "api_prefix": settings.api_prefix,
        "cors_origins": settings.cors_origins,
    }


def get_logging_config() -> Dict[str, Any]:
    """Get logging configuration from environment variables"""
    return {
        "log_level": settings.log_level,
        "log_file": settings.log_file,
        "environment": settings.environment,
    }


def get_run_config() -> Dict[str, Any]:
    """Default locations and numeric settings of training runs"""
    return {
        "data_dir": settings.data_dir,
        "output_dir": settings.output_dir,
        "checkpoint_dir": settings.checkpoint_dir,
        "config_path": settings.config_path,
        "torch_threads": settings.torch_threads,
        "default_seed": settings.default_seed,
    }


def get_runtime_info() -> Dict[str, Any]:
    return {
        "python": platform.python_version(),
        "torch": torch.__version__,
        "threads": torch.get_num_threads(),
        "default_dtype": str(torch.get_default_dtype()),
    }


def validate_run_paths() -> Dict[str, bool]:
    """Whether the configured run locations exist"""
    return {
        "DATA_DIR": os.path.isdir(settings.data_dir),
        "OUTPUT_DIR": os.path.isdir(settings.output_dir),
        "CONFIG_PATH": settings.config_path is None or os.path.isfile(settings.config_path),
    }


def configure_torch(threads: Optional[int] = None) -> None:
    """Thread count and deterministic kernels for reproducible CPU runs"""
    if threads:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True, warn_only=True)
    logger.debug(f"torch configured: {get_runtime_info()}")
