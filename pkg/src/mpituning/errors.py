"""Exception types shared across the package."""


class MPITuneError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(MPITuneError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MPITuneError, ValueError):
    """A documented precondition was violated."""


class VocabularyError(MPITuneError, KeyError):
    """A category name is not part of the configured vocabulary."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FormatError(MPITuneError):
    """A binary file could not be parsed."""

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class NumericalError(MPITuneError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""
