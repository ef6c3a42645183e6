class ContractViolation(ValueError):
    """Raised when a caller breaks an operation's preconditions."""


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


class NonFiniteError(ArithmeticError):
    """A tensor operation produced NaN or Inf."""


class MissingInputError(FileNotFoundError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
