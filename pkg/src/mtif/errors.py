"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so each class carries the code
it should surface as.
"""


class MtifError(Exception):
    exit_code = 1


class ConfigError(MtifError, ValueError):
    exit_code = 2


class InvalidConfig(ConfigError):
    pass


class InvalidRatios(ConfigError):
    pass


class ConfigHashMismatch(ConfigError):
    pass


class DimMismatch(MtifError, ValueError):
    pass


class NotPD(MtifError, ArithmeticError):
    """A Cholesky factorization failed."""


class BlockNotPD(NotPD):
    def __init__(self, block: int):
        self.block = block
        super().__init__(f"task block {block} of the Hessian is not positive definite")


class SchurNotPD(NotPD):
    def __init__(self):
        super().__init__("Schur complement of the shared block is not positive definite")


class SingularSystem(NotPD):
    pass


class ConvergenceError(MtifError, RuntimeError):
    exit_code = 3


class NotConverged(ConvergenceError):
    def __init__(self, final_grad_norm: float, iterations: int, context: str = ""):
        self.final_grad_norm = final_grad_norm
        self.iterations = iterations
        self.context = context
        msg = f"not converged after {iterations} iterations (|grad|_inf={final_grad_norm:.3e})"
        if context:
            msg = f"{context}: {msg}"
        super().__init__(msg)


class DegenerateTask(MtifError, ValueError):
    def __init__(self, task: int):
        self.task = task
        super().__init__(f"task {task} has zero weight and no identifiable parameters")


class DampedHessian(MtifError, ValueError):
    pass


class SameTask(MtifError, ValueError):
    pass


class EmptySplit(MtifError, ValueError):
    pass


class NotClassification(MtifError, ValueError):
    pass


class SchemaError(MtifError, ValueError):
    exit_code = 4


class ParseError(SchemaError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class IndexMismatch(SchemaError):
    pass


class IncompleteMatrix(SchemaError):
    pass


class LengthMismatch(MtifError, ValueError):
    pass


class MissingInput(MtifError, FileNotFoundError):
    exit_code = 5


class RankDeficientWarning(UserWarning):
    pass


class ZeroGradientWarning(UserWarning):
    pass


class UndefinedCorrelationWarning(UserWarning):
    pass
