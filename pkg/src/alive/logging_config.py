# ALIVE Logging Configuration Module
# Centralized logging setup for the engine and CLI
# Handles log formatting, rotation, and level configuration

import logging
import logging.handlers
from pathlib import Path
from typing import Optional, Union

from .config import Config

DEFAULT_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def parse_size(max_file_size: Union[str, int]) -> int:
    """
    Parse a human-readable file size ("10MB", "512KB", "2048") into bytes.

    Args:
        max_file_size (Union[str, int]): Size as configured.

    Returns:
        int: Size in bytes.
    """
    if isinstance(max_file_size, int):
        return max_file_size
    text = str(max_file_size).strip().upper()
    if text.endswith('MB'):
        return int(text[:-2]) * 1024 * 1024
    if text.endswith('KB'):
        return int(text[:-2]) * 1024
    return int(text)


def setup_logging(config: Config, log_file: Optional[str] = None) -> None:
    """
    Configure logging for the ALIVE engine.

    Args:
        config (Config): Configuration manager instance.
        log_file (Optional[str]): Override log file path (runs pass their own directory).
    """
    log_level = str(config.get('logging.level', 'INFO')).upper()
    log_format = config.get('logging.format', DEFAULT_FORMAT)
    log_file_path = log_file or config.get('logging.file', 'logs/alive.log')
    max_bytes = parse_size(config.get('logging.max_file_size', '10MB'))
    backup_count = int(config.get('logging.backup_count', 5))

    log_path = Path(log_file_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)

    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, log_level))

    # Remove existing handlers
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(log_format)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(getattr(logging, log_level))
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    file_handler = logging.handlers.RotatingFileHandler(
        log_path,
        maxBytes=max_bytes,
        backupCount=backup_count
    )
    file_handler.setLevel(getattr(logging, log_level))
    file_handler.setFormatter(formatter)
    root_logger.addHandler(file_handler)

    # urllib3 logs every connection at DEBUG
    logging.getLogger('urllib3').setLevel(logging.WARNING)

    logger = logging.getLogger(__name__)
    logger.info(f"Logging configured - Level: {log_level}, File: {log_path}")
