"""structlog setup shared by the CLI and the test-suite.

All records, structlog and stdlib alike, go through one ``ProcessorFormatter`` on stderr so that
stdout only carries command output. Lines are written with ``tqdm.write`` so they land above an
active progress bar instead of tearing it.
"""
import logging
from pathlib import Path
from typing import List, Optional, Union

import structlog
from structlog.contextvars import merge_contextvars
from structlog.exceptions import DropEvent
from structlog.testing import LogCapture
from tqdm.auto import tqdm

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
APP_LOGGER_NAME = "nextpoi"

# Handlers installed by the last configure_logging call; closed when it is called again.
_installed_handlers: List[logging.Handler] = []


def rename_event_key(logger, method_name, event_dict):
    """JSON lines carry their text under ``message``."""
    event_dict["message"] = event_dict.pop("event")
    return event_dict


class RawLogCapture(LogCapture):
    """Collects event dicts exactly as the renderer would receive them."""

    def __call__(self, _, method_name, event_dict):
        # The base class adds `log_level`; tests compare against real entries.
        self.entries.append(event_dict)
        raise DropEvent


class ProgressAwareHandler(logging.StreamHandler):
    """A stderr handler that writes through ``tqdm.write``."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            tqdm.write(self.format(record), file=self.stream)
        except Exception:
            self.handleError(record)


def shared_processors() -> List:
    return [
        merge_contextvars,
        structlog.stdlib.add_logger_name,
        structlog.stdlib.add_log_level,
        structlog.stdlib.PositionalArgumentsFormatter(),
        structlog.processors.TimeStamper(fmt="iso"),
        structlog.processors.StackInfoRenderer(),
        structlog.processors.format_exc_info,
    ]


def make_formatter(json_output: bool) -> structlog.stdlib.ProcessorFormatter:
    if json_output:
        renderers = [rename_event_key, structlog.processors.JSONRenderer()]
    else:
        renderers = [structlog.dev.ConsoleRenderer()]

    return structlog.stdlib.ProcessorFormatter(
        processors=[structlog.stdlib.ProcessorFormatter.remove_processors_meta, *renderers],
        foreign_pre_chain=shared_processors(),
    )


def configure_logging(
    dev_logging: bool,
    ext_log_level: Union[int, str],
    app_log_level: Union[int, str],
    log_capture: Optional[LogCapture] = None,
    log_file: Optional[Path] = None,
) -> None:
    """Configure structlog and the root logger.

    ``ext_log_level`` applies to third-party loggers such as httpx and h2, ``app_log_level`` to
    ``nextpoi.*``. When ``log_file`` is given it receives JSON lines regardless of
    ``dev_logging``.
    """
    processors = shared_processors()
    if log_capture:
        processors.append(log_capture)
    else:
        processors.insert(0, structlog.stdlib.filter_by_level)
        processors.append(structlog.stdlib.ProcessorFormatter.wrap_for_formatter)

    structlog.configure(
        processors=processors,
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=not (dev_logging or log_capture),
    )

    handlers: List[logging.Handler] = [ProgressAwareHandler()]
    handlers[0].setFormatter(make_formatter(json_output=not dev_logging))
    if log_file:
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(make_formatter(json_output=True))
        handlers.append(file_handler)

    for handler in _installed_handlers:
        handler.close()
    _installed_handlers[:] = handlers

    root_logger = logging.getLogger()
    root_logger.handlers = list(handlers)
    root_logger.setLevel(ext_log_level)

    logging.getLogger(APP_LOGGER_NAME).setLevel(app_log_level)
