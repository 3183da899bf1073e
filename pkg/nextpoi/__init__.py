from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("nextpoi")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

from .logging import configure_logging  # noqa: E402,F401
