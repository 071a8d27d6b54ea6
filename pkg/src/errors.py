class InputError(ValueError):
    """Malformed or inconsistent input (exit code 2)."""


class NumericalError(ArithmeticError):
    """Factorization, quadrature or non-finite objective failure (exit code 3)."""


class ConvergenceError(NumericalError):
    pass
