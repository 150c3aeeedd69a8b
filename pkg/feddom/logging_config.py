import logging
import sys
from pathlib import Path
from typing import List, Optional

LOG_FORMAT = "[FedDoM] %(levelname)s %(name)s: %(message)s"


def configure_feddom_logging(verbose: bool = False, log_file: Optional[Path] = None) -> None:
    """
    Configure logging for the application.

    Warnings and errors always reach stderr; with ``verbose`` round progress and checkpoints do too.

    :param verbose: Whether to enable verbose logging.
    :param log_file: Also append every INFO-or-higher record to this file, whatever ``verbose`` says.
    """
    level = logging.INFO if verbose else logging.WARNING
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(level)
    handlers: List[logging.Handler] = [console]
    if log_file is not None:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(logging.INFO)
        handlers.append(file_handler)

    logging.basicConfig(
        level=logging.INFO if log_file is not None else level,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True
    )
