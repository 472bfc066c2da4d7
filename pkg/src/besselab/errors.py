"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: input problems give 2, numerical
breakdowns give 3 and violated invariants give 1.
"""


class BesseLabError(Exception):
    exit_code = 3


class InvalidInput(BesseLabError, ValueError):
    exit_code = 2


class PreconditionViolation(InvalidInput):
    """An operation was called outside the hypotheses it is valid under."""


class NotApplicable(PreconditionViolation):
    pass


class NumericalFailure(BesseLabError, ArithmeticError):
    exit_code = 3


class IntegrationFailed(NumericalFailure):
    pass


class BlockFormFailed(NumericalFailure):
    pass


class NoDirection(NumericalFailure):
    pass


class UnresolvedConjugatePoint(NumericalFailure):
    pass


class OracleFailed(NumericalFailure):
    pass


class RealizationFailed(NumericalFailure):
    pass


class RefineSampling(NumericalFailure):
    pass


class GenericityFailed(NumericalFailure):
    pass


class NotClosed(NumericalFailure):
    pass


class InvariantFailure(BesseLabError):
    exit_code = 1


class ContractViolation(InvariantFailure):
    pass


class ModelViolation(InvariantFailure):
    pass


class IndexNotConstant(InvariantFailure):
    pass
