"""Exception types raised across the toolkit.

Every error derives from HeritError so the CLI can map it to an exit code;
NumericalBreakdown is kept apart because it exits with code 2.
"""

from typing import Optional, Sequence


class HeritError(Exception):
    """Base class for all toolkit errors."""


class ParseError(HeritError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyInput(HeritError):
    pass


class DegenerateSnp(HeritError):
    def __init__(self, message: str, snp_ids: Sequence[str] = ()):
        self.snp_ids = list(snp_ids)
        shown = ", ".join(self.snp_ids[:10])
        if len(self.snp_ids) > 10:
            shown += f", ... ({len(self.snp_ids)} total)"
        super().__init__(f"{message}: {shown}" if shown else message)


class DuplicateSample(HeritError):
    pass


class NotStandardized(HeritError):
    pass


class InvalidScale(HeritError):
    pass


class DimError(HeritError):
    pass


class NotSpd(HeritError):
    pass


class ImproperPrior(HeritError):
    pass


class SingularBlock(HeritError):
    pass


class MissingData(HeritError):
    pass


class NumericalBreakdown(HeritError):
    def __init__(
        self,
        message: str,
        chain: Optional[int] = None,
        iteration: Optional[int] = None,
    ):
        self.chain = chain
        self.iteration = iteration
        where = []
        if chain is not None:
            where.append(f"chain {chain}")
        if iteration is not None:
            where.append(f"iteration {iteration}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class InsufficientSamples(HeritError):
    pass


class NeedsMultipleChains(HeritError):
    pass


class InsufficientData(HeritError):
    pass


class DegenerateFold(HeritError):
    pass


class InvalidMaf(HeritError):
    pass


class InvalidFraction(HeritError):
    pass


class IoError(HeritError):
    pass


class ConfigError(HeritError):
    pass
