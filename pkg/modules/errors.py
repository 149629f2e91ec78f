"""
Errors Module
Exception hierarchy shared by every SplatMap module
"""


class SplatMapError(Exception):
    """Base class for all errors raised by SplatMap"""


class RejectedInputError(SplatMapError, ValueError):
    """Input contains non-finite values or violates a documented precondition"""


class ShapeMismatchError(SplatMapError, ValueError):
    """Two arrays that must agree in shape do not"""


class ConfigError(SplatMapError, ValueError):
    """Invalid configuration value; message starts with the dotted key path"""

    def __init__(self, key_path: str, message: str):
        self.key_path = key_path
        self.message = message
        super().__init__(f"{key_path}: {message}" if key_path else message)


class UsageError(SplatMapError, RuntimeError):
    """API called out of order (e.g. backward without a cached forward)"""


class ParseError(SplatMapError, ValueError):
    """Malformed file; carries the file name and line number when known"""

    def __init__(self, path: str, message: str, line: int = None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class UnderdeterminedError(SplatMapError, ValueError):
    """Not enough constraints to solve the requested problem"""


class DatasetError(SplatMapError):
    """Dataset directory missing, incomplete, or inconsistent"""
