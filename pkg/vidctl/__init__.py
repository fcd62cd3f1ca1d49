"""vidctl: learned bandwidth control for video streamed to machines."""

from importlib import metadata as _metadata

from .base import Application  # NOQA
from .exceptions import Abort  # NOQA
from .extensions import Extension  # NOQA

try:
    __version__ = _metadata.version(__package__)
except _metadata.PackageNotFoundError:
    __version__ = 'development'
