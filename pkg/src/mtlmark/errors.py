class MtlmarkError(Exception):
    pass


class ConfigError(MtlmarkError, ValueError):
    pass


class DomainError(MtlmarkError, ValueError):
    pass


class StructuralError(MtlmarkError, ValueError):
    pass


class NumericalError(MtlmarkError, ArithmeticError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class ParseError(MtlmarkError, ValueError):
    def __init__(self, message, position=None):
        super().__init__(message if position is None else f"{message} (at {position})")
        self.position = position


class TrainingError(MtlmarkError, RuntimeError):
    pass


class StateError(MtlmarkError, RuntimeError):
    pass


class VerificationError(MtlmarkError, ValueError):
    """The watermark head cannot be attached to the model at all.

    Distinct from a verification that runs and fails, which is reported
    through ``VerifyReport.passed``.
    """


class AttackError(MtlmarkError, RuntimeError):
    pass
