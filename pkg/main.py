#!/usr/bin/env python3
"""
wanbench - WAN data movement benchmark lab

Entry point for the command-line application.
"""

import logging
import sys

from config import config

# Set up logging early to capture startup errors
log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
handlers = [logging.StreamHandler(sys.stderr)]
try:
    handlers.append(logging.FileHandler(config.log_path, mode='a'))
except OSError as e:
    print(f"warning: cannot write log file {config.log_path}: {e}", file=sys.stderr)

logging.basicConfig(level=logging.INFO, format=log_format, handlers=handlers)

logger = logging.getLogger(__name__)


def handle_exception(exc_type, exc_value, exc_traceback):
    """Log unhandled exceptions."""
    if issubclass(exc_type, KeyboardInterrupt):
        sys.__excepthook__(exc_type, exc_value, exc_traceback)
        return
    logger.critical("Uncaught exception", exc_info=(exc_type, exc_value, exc_traceback))

sys.excepthook = handle_exception


def main():
    """Main entry point."""
    from cli import dispatch

    logger.debug(f"Starting wanbench {config.APP_VERSION}: {' '.join(sys.argv[1:])}")
    exit_status = dispatch(sys.argv[1:])
    logger.debug(f"wanbench exited with status {exit_status}")
    return exit_status


if __name__ == '__main__':
    sys.exit(main())
