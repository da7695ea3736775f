class ConfigurationError(ValueError):
    """Shapes, slots or config values that do not fit together."""


class IngestionError(ValueError):
    """Malformed input file; the message names the offending row."""


class SizingError(ValueError):
    """Too few samples for the requested windows, folds or quantile."""


class InsufficientCalibrationError(SizingError):
    def __init__(self, n_scores: int, alpha: float, minimum: int):
        self.n_scores = n_scores
        self.alpha = alpha
        self.minimum = minimum
        super().__init__(
            f"insufficient calibration samples: L={n_scores} at alpha={alpha} "
            f"(need L >= {minimum})"
        )


class ContractViolation(ValueError):
    pass


class NumericOverflowError(ArithmeticError):
    pass


class DivergenceError(NumericOverflowError):
    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"{message} (step {step})")


class StageError(RuntimeError):
    """Raised by the experiment runner with the name of the failing stage."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
