"""Exception taxonomy shared across the pipeline.

Every error carries an ``exit_code`` so the CLI can map failures to its
stable contract: usage errors exit 2 (argparse), infrastructure errors
exit 3, data errors exit 4.
"""

EXIT_USAGE = 2
EXIT_INFRA = 3
EXIT_DATA = 4


class BrainError(Exception):
    exit_code = EXIT_DATA


class InfrastructureError(BrainError):
    exit_code = EXIT_INFRA


class DataError(BrainError):
    exit_code = EXIT_DATA


# --- prompt assembly ---

class WrongPairCount(DataError):
    pass


class BlockLabelMismatch(DataError):
    pass


class MissingField(DataError):
    pass


class ExtraField(DataError):
    pass


class PlanMissing(DataError):
    pass


class PlanUnexpected(DataError):
    pass


# --- gateway ---

class EndpointNotConfigured(InfrastructureError):
    pass


class EndpointUnreachable(InfrastructureError):
    pass


class RateLimited(InfrastructureError):
    pass


class AllSamplesFailed(InfrastructureError):
    pass


class CassetteMiss(DataError):
    pass


class CassetteCorrupt(DataError):
    pass


class PathUnwritable(InfrastructureError):
    pass


# --- output parsing ---

class NoPlanFound(DataError):
    pass


class ScoreNotFound(DataError):
    pass


class ScoreOutOfRange(DataError):
    pass


class ScoreUnparseable(DataError):
    pass


class NoCodeFound(DataError):
    pass


class NoEntrypoint(DataError):
    pass


class NoAnswerFound(DataError):
    pass


class NotNumeric(DataError):
    pass


# --- sandbox ---

class WorkerSpawnFailure(InfrastructureError):
    pass


class WorkerPoolExhausted(InfrastructureError):
    pass


# --- grading / datasets ---

class EmptyInput(DataError):
    pass


class BadCounts(DataError):
    pass


class IncompleteRecord(DataError):
    pass
