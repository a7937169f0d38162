"""Multi-granularity scene text recognition on a small numpy autodiff core."""

from .errors import (CharsetError, ConfigError, ContractError, DegenerateInputError, FormatError,
                     LengthError, MgpError, NonFiniteError, ShapeError, VersionError)

__version__ = "0.1.0"
