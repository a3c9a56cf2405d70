"""Exception hierarchy and the CLI exit codes each class maps to."""

EXIT_OK = 0
EXIT_NUMERIC = 2
EXIT_IO = 3
EXIT_COMPAT = 4
EXIT_VALIDATION = 5


class CompModError(Exception):
    exit_code = 1


class DimensionError(CompModError, ValueError):
    exit_code = EXIT_VALIDATION


class ContractError(CompModError, ValueError):
    exit_code = EXIT_VALIDATION


class ConfigError(CompModError, ValueError):
    """Raised with every offending key collected in ``problems``."""

    exit_code = EXIT_VALIDATION

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NumericError(CompModError, ArithmeticError):
    exit_code = EXIT_NUMERIC


class TrainingError(NumericError):
    pass


class FormatError(CompModError, ValueError):
    exit_code = EXIT_COMPAT


class CompatibilityError(CompModError):
    exit_code = EXIT_COMPAT
