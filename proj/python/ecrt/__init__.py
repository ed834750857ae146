"""Python bindings for the ecrt core library."""

from ._core import *  # noqa: F401,F403
from ._core import (  # noqa: F401
    ConfigError,
    DataError,
    EcrtError,
    ProtocolError,
    TraceError,
)

__version__ = "0.1.0"
