import hashlib
from functools import wraps

import click
import structlog
from rich import print as rprint

from nextpoi.errors import NextPoiError
from nextpoi.llm_client.errors import LLMClientError

logger = structlog.get_logger(__name__)


def derive_seed(seed: int, trajectory_id: str, purpose: str) -> int:
    """Per-case 64-bit seed from the run seed and a trajectory id.

    Independent of evaluation order, so parallel and resumed runs draw the same numbers.
    """
    digest = hashlib.sha256(f'{seed}:{trajectory_id}:{purpose}'.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big')


def catch_em_all(fn):
    """Render known harness / client errors for humans and exit non-zero."""

    @wraps(fn)
    def wrapped(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except (NextPoiError, LLMClientError) as e:
            logger.debug('command failed', error=str(e), error_type=type(e).__name__)
            rprint(f'[red]{e.user_error()}[/red]')
            raise click.exceptions.Exit(1) from None
        except:  # noqa
            logger.exception('Got an unexpected error')
            raise

    return wrapped
