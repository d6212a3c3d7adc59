class AlignGenError(Exception):
    """Base error; ``exit_code`` is what the CLI exits with."""

    exit_code = 2
    kind = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class UsageError(AlignGenError):
    exit_code = 1
    kind = "usage"


class DataError(AlignGenError):
    exit_code = 2
    kind = "data"


class ShapeError(DataError):
    kind = "shape"

    def __init__(self, op: str, *dims, detail: str = ""):
        shapes = ", ".join(_format_dim(dim) for dim in dims)
        message = f"{op}: incompatible dims {shapes}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.op = op
        self.dims = dims


class NumericError(AlignGenError):
    exit_code = 3
    kind = "numeric"


class NonFiniteError(NumericError):
    kind = "non-finite"


class NondeterministicError(NumericError):
    kind = "nondeterministic"


class AcceptanceError(AlignGenError):
    exit_code = 4
    kind = "acceptance"


def _format_dim(dim) -> str:
    if isinstance(dim, (str, int)):
        return str(dim)
    return str(tuple(dim))
