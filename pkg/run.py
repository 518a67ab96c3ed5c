#!/usr/bin/env python3
"""
Kernel Topic Model - command-line runner

Validates the configuration, then hands the arguments to the ktm CLI.
"""

import sys
import logging
from pathlib import Path

# Add the package directory to Python path
sys.path.insert(0, str(Path(__file__).parent))

from ktm.core.config import settings, resolve_threads
from ktm.cli.commands import run


def validate_configuration() -> bool:
    """Validate configuration before starting"""
    logger = logging.getLogger(__name__)

    logger.info(f"Starting {settings.app_name} v{settings.version}")
    logger.info(f"Configuration:")
    logger.info(f"  - Topics (default): {settings.default_topics}")
    logger.info(f"  - Beta (default): {settings.default_beta}")
    logger.info(f"  - Jitter: {settings.jitter_start:g} .. {settings.jitter_max:g}")
    logger.info(f"  - Alpha floor: {settings.alpha_floor:g}")
    logger.info(f"  - Threads: {resolve_threads()}")
    logger.info(f"  - Debug Mode: {settings.debug}")

    if settings.jitter_start > settings.jitter_max:
        logger.error("KTM_JITTER_START must not exceed KTM_JITTER_MAX")
        return False
    if settings.alpha_floor <= 0:
        logger.error("KTM_ALPHA_FLOOR must be positive")
        return False
    return True


def main():
    """Main entry point"""
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s'
    )
    logger = logging.getLogger(__name__)

    if not validate_configuration():
        logger.error("Configuration validation failed. Exiting.")
        sys.exit(1)

    try:
        sys.exit(run(sys.argv[1:]))
    except KeyboardInterrupt:
        logger.info("Stopped by user")
        sys.exit(130)


if __name__ == "__main__":
    main()
