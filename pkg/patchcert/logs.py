"""
Logging setup for the command-line tools.

Library modules only call ``logging.getLogger(__name__)``; the CLI attaches a
single rich handler to the package logger.
"""

import logging

from rich.console import Console
from rich.logging import RichHandler

console = Console()

PACKAGE_LOGGER = "patchcert"


def configure_logging(verbose: bool = False, quiet: bool = False) -> logging.Logger:
    """
    Attach a RichHandler to the package logger.

    Args:
        verbose: Emit DEBUG records
        quiet: Only emit WARNING and above (wins over verbose)

    Returns:
        The configured package logger
    """
    level = logging.INFO
    if verbose:
        level = logging.DEBUG
    if quiet:
        level = logging.WARNING

    logger = logging.getLogger(PACKAGE_LOGGER)
    logger.setLevel(level)

    # Re-running the CLI in one process (tests) must not stack handlers
    for handler in list(logger.handlers):
        if isinstance(handler, RichHandler):
            logger.removeHandler(handler)

    handler = RichHandler(console=console, show_path=False, rich_tracebacks=False)
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(handler)
    logger.propagate = False
    return logger
