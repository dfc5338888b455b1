#!/usr/bin/env python3
"""
Check current run configuration
"""
import sys

from src.config.settings import settings
from src.models.config import load_config
from src.utils.env_utils import get_run_config, get_runtime_info, validate_run_paths
from src.utils.exceptions import ConfigurationError


def main(config_path=None):
    print("=== Settings ===")
    for key, value in get_run_config().items():
        print(f"{key}: {value}")

    print("\n=== Runtime ===")
    for key, value in get_runtime_info().items():
        print(f"{key}: {value}")

    print("\n=== Run Configuration ===")
    try:
        config = load_config(config_path or settings.config_path)
    except ConfigurationError as e:
        print(f"Invalid: {e}")
        return 1
    print(config.model_dump_json(indent=2))

    print("\n=== Path Check ===")
    for name, valid in validate_run_paths().items():
        print(f"{name}: {'ok' if valid else 'missing'}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1] if len(sys.argv) > 1 else None))
