"""Exception hierarchy shared by every module."""


class SMCRError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SMCRError, ValueError):
    pass


class DegenerateInputError(SMCRError, ValueError):
    """Raised when a vector with zero norm has to be normalized."""


class NumericError(SMCRError, ArithmeticError):
    pass


class DomainError(SMCRError, ValueError):
    """An argument lies outside its admissible range."""


class ParseError(SMCRError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IntegrityError(SMCRError, ValueError):
    pass


class SamplingError(SMCRError, ValueError):
    pass


class MiningError(SMCRError, ValueError):
    pass


class LabelLookupError(SMCRError, KeyError):
    pass


class AlignmentError(SMCRError, ValueError):
    def __init__(self, message, overlap=None):
        super().__init__(message)
        self.overlap = overlap


class ContractError(SMCRError, ValueError):
    pass


class EvaluationError(SMCRError, ValueError):
    pass
