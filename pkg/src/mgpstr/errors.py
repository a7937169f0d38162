"""Exception hierarchy shared across the package.

The CLI maps :class:`ContractError` subclasses to exit code 1 and
:class:`FormatError` (plus ``OSError``) to exit code 2.
"""


class MgpError(Exception):
    pass


class ContractError(MgpError):
    """A caller violated an operation's precondition."""


class ShapeError(ContractError, ValueError):
    pass


class DegenerateInputError(ContractError, ValueError):
    """Input is well-formed but leaves the result undefined (e.g. an empty mean)."""


class NonFiniteError(ContractError, ArithmeticError):
    pass


class CharsetError(ContractError, ValueError):
    pass


class LengthError(ContractError, ValueError):
    pass


class ConfigError(ContractError, ValueError):
    pass


class FormatError(MgpError):
    """A file on disk does not follow the expected layout."""


class VersionError(FormatError):
    pass
